//! Heatmap and joint losses, each returning its value together with the
//! gradient with respect to raw scores (or decoded coordinates).

use serde::{Deserialize, Serialize};

use crate::decode::{
    integral_backward_normalized, integral_decode, marginal_backward, marginalize, normalize,
    two_step_backward, two_step_decode, DecodeGradient, VectorGrads,
};
use crate::error::{Error, Result};
use crate::grid::{Axis, GridSpec, HeatVector, Heatmap, JointSet, NormalizedHeatmap};
use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeatmapLoss {
    /// MSE against a peak-1 Gaussian target.
    #[serde(rename = "H1_gaussian_mse")]
    H1GaussianMse,
    /// Cross-entropy of the grid softmax against a one-hot cell.
    #[serde(rename = "H2_onehot_ce")]
    H2OnehotCe,
    /// Per-cell binary cross-entropy against a disc of positives.
    #[serde(rename = "H3_binary_ce")]
    H3BinaryCe,
    #[serde(rename = "none")]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JointLossKind {
    L1,
    L2,
    #[serde(rename = "none")]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decomposition {
    #[default]
    Direct,
    TwoStep,
}

fn default_weight() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    1.0
}
fn default_radius() -> f64 {
    15.0
}

/// Which loss terms to evaluate and how to decode for the joint term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub heatmap_loss: HeatmapLoss,
    pub joint_loss: JointLossKind,
    #[serde(default = "default_weight")]
    pub joint_weight: f64,
    #[serde(default)]
    pub decomposition: Decomposition,
    #[serde(default = "default_sigma")]
    pub gaussian_sigma: f64,
    #[serde(default = "default_radius")]
    pub h3_radius: f64,
}

impl LossSpec {
    pub fn new(heatmap_loss: HeatmapLoss, joint_loss: JointLossKind) -> Self {
        LossSpec {
            heatmap_loss,
            joint_loss,
            joint_weight: default_weight(),
            decomposition: Decomposition::Direct,
            gaussian_sigma: default_sigma(),
            h3_radius: default_radius(),
        }
    }

    /// Heatmap-only baseline.
    pub fn heatmap_only(heatmap_loss: HeatmapLoss) -> Self {
        Self::new(heatmap_loss, JointLossKind::None)
    }

    /// Joint loss through integral decoding, no heatmap supervision.
    pub fn joint_only(joint_loss: JointLossKind) -> Self {
        Self::new(HeatmapLoss::None, joint_loss)
    }

    pub fn with_decomposition(mut self, decomposition: Decomposition) -> Self {
        self.decomposition = decomposition;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heatmap_loss == HeatmapLoss::None && self.joint_loss == JointLossKind::None {
            return Err(Error::contract("loss spec selects no loss term"));
        }
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::contract("gaussian_sigma must be positive"));
        }
        if !(self.h3_radius > 0.0 && self.h3_radius.is_finite()) {
            return Err(Error::contract("h3_radius must be positive"));
        }
        if !(self.joint_weight >= 0.0 && self.joint_weight.is_finite()) {
            return Err(Error::contract("joint_weight must be non-negative"));
        }
        if self.decomposition == Decomposition::TwoStep
            && matches!(
                self.heatmap_loss,
                HeatmapLoss::H2OnehotCe | HeatmapLoss::H3BinaryCe
            )
        {
            return Err(Error::contract(
                "two-step decomposition supervises heat vectors; only H1 or none is defined",
            ));
        }
        Ok(())
    }
}

/// Loss value plus gradient with respect to raw scores.
#[derive(Debug, Clone)]
pub struct LossTerm<T: Scalar = f64> {
    pub value: T,
    pub d_scores: DecodeGradient<T>,
}

/// Peak-1 Gaussian target heatmap and the joints whose centre was clamped
/// into the grid.
#[derive(Debug, Clone)]
pub struct GaussianTarget<T: Scalar = f64> {
    pub heatmap: Heatmap<T>,
    pub clamped: Vec<usize>,
}

fn check_joint_count<T: Scalar>(spec: &GridSpec, gt: &JointSet<T>) -> Result<()> {
    if gt.len() != spec.joints {
        return Err(Error::contract(format!(
            "ground truth has {} joints, grid has {}",
            gt.len(),
            spec.joints
        )));
    }
    Ok(())
}

/// Ground-truth centres clamped to the grid box on supervised axes.
fn clamped_centres<T: Scalar>(spec: &GridSpec, gt: &JointSet<T>) -> (Vec<[T; 3]>, Vec<usize>) {
    let ext = spec.extent();
    let mut flagged = Vec::new();
    let centres = gt
        .coords()
        .iter()
        .zip(gt.mask())
        .enumerate()
        .map(|(k, (c, m))| {
            let mut out = *c;
            for a in 0..3 {
                if !m[a] {
                    continue;
                }
                let hi = T::of_usize(ext[a] - 1);
                let v = c[a].max(T::zero()).min(hi);
                if v != c[a] {
                    if !flagged.contains(&k) {
                        flagged.push(k);
                    }
                    out[a] = v;
                }
            }
            out
        })
        .collect();
    (centres, flagged)
}

/// `exp(-|cell - gt|^2 / (2 sigma^2))` per joint, distance taken over the
/// supervised axes only (an unsupervised axis gives a target constant along
/// it).
pub fn gaussian_target<T: Scalar>(
    spec: &GridSpec,
    gt: &JointSet<T>,
    sigma: T,
) -> Result<GaussianTarget<T>> {
    check_joint_count(spec, gt)?;
    if !(sigma > T::zero()) {
        return Err(Error::contract("sigma must be positive"));
    }
    let (centres, clamped) = clamped_centres(spec, gt);
    if !clamped.is_empty() {
        log::warn!("ground truth outside grid for joints {clamped:?}; clamped");
    }
    let denom = T::of(2.0) * sigma * sigma;
    let heatmap = Heatmap::from_fn(*spec, |k, c| {
        let m = gt.mask()[k];
        let mut d2 = T::zero();
        for a in 0..3 {
            if m[a] {
                let d = T::of_usize(c[a]) - centres[k][a];
                d2 += d * d;
            }
        }
        (-d2 / denom).exp()
    })?;
    Ok(GaussianTarget { heatmap, clamped })
}

/// Mean squared error over all cells.
pub fn h1_loss<T: Scalar>(pred: &Heatmap<T>, target: &Heatmap<T>) -> Result<LossTerm<T>> {
    if pred.spec() != target.spec() {
        return Err(Error::contract("prediction and target grids differ"));
    }
    let n = T::of_usize(pred.scores().len());
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(pred.scores().len());
    for (&p, &t) in pred.scores().iter().zip(target.scores()) {
        let d = p - t;
        value += d * d;
        grad.push(T::of(2.0) * d / n);
    }
    Ok(LossTerm {
        value: value / n,
        d_scores: DecodeGradient::new(*pred.spec(), grad)?,
    })
}

/// Nearest cell, halves rounding toward the lower index.
fn round_half_down<T: Scalar>(x: T) -> T {
    (x - T::of(0.5)).ceil()
}

/// Target cell of each supervised axis, or `None` for an unsupervised one.
fn target_cells<T: Scalar>(spec: &GridSpec, gt: &JointSet<T>) -> Result<Vec<[Option<usize>; 3]>> {
    let ext = spec.extent();
    gt.coords()
        .iter()
        .zip(gt.mask())
        .enumerate()
        .map(|(k, (c, m))| {
            let mut out = [None; 3];
            for a in 0..3 {
                if !m[a] {
                    continue;
                }
                let r = round_half_down(c[a]);
                if !(r >= T::zero() && r <= T::of_usize(ext[a] - 1)) {
                    return Err(Error::contract(format!(
                        "joint {k} axis {a} at {} rounds outside the grid",
                        c[a]
                    )));
                }
                out[a] = r.to_usize();
            }
            Ok(out)
        })
        .collect()
}

fn log_sum_exp<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> T {
    let max = values.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<T>().ln()
}

/// Cross-entropy of the per-joint softmax against the rounded ground-truth
/// cell, averaged over supervised joints.
///
/// Unsupervised axes are summed out: the target event is "any cell whose
/// supervised coordinates match".
pub fn h2_loss<T: Scalar>(pred: &Heatmap<T>, gt: &JointSet<T>) -> Result<LossTerm<T>> {
    let spec = *pred.spec();
    check_joint_count(&spec, gt)?;
    let targets = target_cells(&spec, gt)?;
    let nh = normalize(pred)?;
    let supervised: Vec<usize> = (0..spec.joints)
        .filter(|&k| targets[k].iter().any(Option::is_some))
        .collect();
    let mut grad = vec![T::zero(); spec.len()];
    if supervised.is_empty() {
        return Ok(LossTerm {
            value: T::zero(),
            d_scores: DecodeGradient::new(spec, grad)?,
        });
    }
    let count = T::of_usize(supervised.len());
    let cells = spec.cells();
    let mut value = T::zero();
    for &k in &supervised {
        let t = targets[k];
        let hits = |c: [usize; 3]| (0..3).all(|a| t[a].map_or(true, |v| v == c[a]));
        let scores = pred.joint(k);
        let all = log_sum_exp(scores.iter().copied());
        let matched = log_sum_exp(
            scores
                .iter()
                .enumerate()
                .filter(|(i, _)| hits(spec.coordinate_unchecked(*i)))
                .map(|(_, &s)| s),
        );
        value += all - matched;
        let probs = nh.joint(k);
        let p_match = (matched - all).exp();
        for i in 0..cells {
            let p = probs[i];
            let g = if hits(spec.coordinate_unchecked(i)) {
                p - p / p_match
            } else {
                p
            };
            grad[k * cells + i] = g / count;
        }
    }
    Ok(LossTerm {
        value: value / count,
        d_scores: DecodeGradient::new(spec, grad)?,
    })
}

/// Binary cross-entropy of `sigmoid(pred)` against labels that are 1 within
/// `radius` cells of the ground truth (supervised axes), averaged over all
/// cells.
pub fn h3_loss<T: Scalar>(pred: &Heatmap<T>, gt: &JointSet<T>, radius: T) -> Result<LossTerm<T>> {
    let spec = *pred.spec();
    check_joint_count(&spec, gt)?;
    let cells = spec.cells();
    let n = T::of_usize(spec.len());
    let r2 = radius * radius;
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(spec.len());
    for (i, &s) in pred.scores().iter().enumerate() {
        let k = i / cells;
        let c = spec.coordinate_unchecked(i % cells);
        let (g, m) = (gt.coord(k), gt.mask()[k]);
        let mut d2 = T::zero();
        for a in 0..3 {
            if m[a] {
                let d = T::of_usize(c[a]) - g[a];
                d2 += d * d;
            }
        }
        let label = if d2 <= r2 { T::one() } else { T::zero() };
        value += softplus(s) - label * s;
        grad.push((sigmoid(s) - label) / n);
    }
    Ok(LossTerm {
        value: value / n,
        d_scores: DecodeGradient::new(spec, grad)?,
    })
}

/// Joint loss value and gradient with respect to the predicted coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLossValue<T: Scalar = f64> {
    pub value: T,
    pub d_coords: Vec<[T; 3]>,
}

/// L1 or L2 distance averaged over the supervised axes of `gt`.
pub fn joint_loss<T: Scalar>(
    pred: &JointSet<T>,
    gt: &JointSet<T>,
    kind: JointLossKind,
) -> Result<JointLossValue<T>> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "prediction has {} joints, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let count = gt.mask().iter().flatten().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::contract("joint loss needs at least one supervised axis"));
    }
    let n = T::of_usize(count);
    let mut value = T::zero();
    let mut d_coords = vec![[T::zero(); 3]; pred.len()];
    for k in 0..pred.len() {
        for a in 0..3 {
            if !gt.mask()[k][a] {
                continue;
            }
            let d = pred.coord(k)[a] - gt.coord(k)[a];
            let (v, g) = match kind {
                JointLossKind::L1 => {
                    let sign = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    (d.abs(), sign)
                }
                JointLossKind::L2 => (d * d, T::of(2.0) * d),
                JointLossKind::None => {
                    return Err(Error::contract("joint loss kind is none"));
                }
            };
            value += v;
            d_coords[k][a] = g / n;
        }
    }
    Ok(JointLossValue {
        value: value / n,
        d_coords,
    })
}

/// Renormalized 1D Gaussian target per supervised axis; empty for an
/// unsupervised one.
pub fn vector_targets<T: Scalar>(
    spec: &GridSpec,
    gt: &JointSet<T>,
    sigma: T,
) -> Result<Vec<VectorGrads<T>>> {
    check_joint_count(spec, gt)?;
    if !(sigma > T::zero()) {
        return Err(Error::contract("sigma must be positive"));
    }
    let (centres, clamped) = clamped_centres(spec, gt);
    if !clamped.is_empty() {
        log::warn!("ground truth outside grid for joints {clamped:?}; clamped");
    }
    let ext = spec.extent();
    let denom = T::of(2.0) * sigma * sigma;
    Ok((0..spec.joints)
        .map(|k| {
            [0, 1, 2].map(|a| {
                if !gt.mask()[k][a] {
                    return Vec::new();
                }
                let mut v: Vec<T> = (0..ext[a])
                    .map(|i| {
                        let d = T::of_usize(i) - centres[k][a];
                        (-d * d / denom).exp()
                    })
                    .collect();
                let total: T = v.iter().copied().sum();
                for x in &mut v {
                    *x /= total;
                }
                v
            })
        })
        .collect())
}

/// Vector loss value and gradient with respect to each heat vector.
#[derive(Debug, Clone)]
pub struct VectorLoss<T: Scalar = f64> {
    pub value: T,
    pub d_vectors: Vec<VectorGrads<T>>,
}

/// Heat vectors of one joint, indexed by [`Axis::index`].
pub type JointVectors<T> = [HeatVector<T>; 3];

/// Mean squared error between each supervised marginal and its 1D Gaussian
/// target, averaged over supervised `(joint, axis)` pairs.
pub fn vector_loss<T: Scalar>(
    vectors: &[JointVectors<T>],
    gt: &JointSet<T>,
    spec: &GridSpec,
    sigma: T,
) -> Result<VectorLoss<T>> {
    if vectors.len() != gt.len() {
        return Err(Error::contract("one vector triple per ground-truth joint required"));
    }
    let targets = vector_targets(spec, gt, sigma)?;
    let pairs = targets.iter().flatten().filter(|t| !t.is_empty()).count();
    let mut d_vectors: Vec<VectorGrads<T>> = vec![Default::default(); vectors.len()];
    if pairs == 0 {
        return Ok(VectorLoss {
            value: T::zero(),
            d_vectors,
        });
    }
    let m = T::of_usize(pairs);
    let mut value = T::zero();
    for (k, triple) in vectors.iter().enumerate() {
        for a in 0..3 {
            let target = &targets[k][a];
            if target.is_empty() {
                continue;
            }
            let v = &triple[a];
            if v.axis.index() != a || v.len() != target.len() {
                return Err(Error::contract(format!(
                    "joint {k}: heat vector for axis {a} has the wrong axis or length"
                )));
            }
            let len = T::of_usize(v.len());
            let mut sq = T::zero();
            let mut g = Vec::with_capacity(v.len());
            for (&p, &t) in v.probs.iter().zip(target) {
                let d = p - t;
                sq += d * d;
                g.push(T::of(2.0) * d / (len * m));
            }
            value += sq / len;
            d_vectors[k][a] = g;
        }
    }
    Ok(VectorLoss {
        value: value / m,
        d_vectors,
    })
}

/// Per-joint heat-vector triples of a normalized heatmap.
pub fn joint_vectors<T: Scalar>(nh: &NormalizedHeatmap<T>) -> Vec<JointVectors<T>> {
    let [mut xs, mut ys, mut zs] = Axis::ALL.map(|a| marginalize(nh, a).into_iter());
    (0..nh.spec().joints)
        .map(|_| [xs.next().unwrap(), ys.next().unwrap(), zs.next().unwrap()])
        .collect()
}

/// [`vector_loss`] chained through `marginalize` and `normalize` down to the
/// raw scores.
pub fn vector_loss_on_scores<T: Scalar>(
    pred: &Heatmap<T>,
    gt: &JointSet<T>,
    sigma: T,
) -> Result<LossTerm<T>> {
    let nh = normalize(pred)?;
    vector_loss_normalized(&nh, gt, sigma)
}

fn vector_loss_normalized<T: Scalar>(
    nh: &NormalizedHeatmap<T>,
    gt: &JointSet<T>,
    sigma: T,
) -> Result<LossTerm<T>> {
    let vl = vector_loss(&joint_vectors(nh), gt, nh.spec(), sigma)?;
    Ok(LossTerm {
        value: vl.value,
        d_scores: marginal_backward(nh, &vl.d_vectors)?,
    })
}

/// Combined loss and the total gradient with respect to raw scores.
#[derive(Debug, Clone)]
pub struct LossValue<T: Scalar = f64> {
    pub total: T,
    pub heatmap_term: T,
    pub joint_term: T,
    pub d_scores: DecodeGradient<T>,
    /// Coordinates decoded for the joint term, when one was evaluated.
    pub decoded: Option<JointSet<T>>,
    /// Joints whose ground truth had to be clamped into the grid.
    pub clamped: Vec<usize>,
}

/// Evaluates every term selected by `spec` and accumulates their gradients.
pub fn compose_loss<T: Scalar>(
    spec: &LossSpec,
    pred: &Heatmap<T>,
    gt: &JointSet<T>,
) -> Result<LossValue<T>> {
    spec.validate()?;
    let grid = *pred.spec();
    check_joint_count(&grid, gt)?;
    let sigma = T::of(spec.gaussian_sigma);
    let needs_probs = spec.joint_loss != JointLossKind::None
        || spec.decomposition == Decomposition::TwoStep
        || spec.heatmap_loss == HeatmapLoss::H2OnehotCe;
    let nh = if needs_probs { Some(normalize(pred)?) } else { None };

    let mut clamped = Vec::new();
    let (heatmap_term, mut d_scores) = match (spec.heatmap_loss, spec.decomposition) {
        (HeatmapLoss::None, _) => (T::zero(), DecodeGradient::zeros(grid)),
        (HeatmapLoss::H1GaussianMse, Decomposition::Direct) => {
            let target = gaussian_target(&grid, gt, sigma)?;
            clamped = target.clamped;
            let t = h1_loss(pred, &target.heatmap)?;
            (t.value, t.d_scores)
        }
        (HeatmapLoss::H1GaussianMse, Decomposition::TwoStep) => {
            clamped = clamped_centres(&grid, gt).1;
            let t = vector_loss_normalized(nh.as_ref().expect("normalized"), gt, sigma)?;
            (t.value, t.d_scores)
        }
        (HeatmapLoss::H2OnehotCe, _) => {
            let t = h2_loss(pred, gt)?;
            (t.value, t.d_scores)
        }
        (HeatmapLoss::H3BinaryCe, _) => {
            let t = h3_loss(pred, gt, T::of(spec.h3_radius))?;
            (t.value, t.d_scores)
        }
    };

    let mut joint_term = T::zero();
    let mut decoded = None;
    if spec.joint_loss != JointLossKind::None {
        let nh = nh.as_ref().expect("normalized");
        let joints = match spec.decomposition {
            Decomposition::Direct => integral_decode(nh),
            Decomposition::TwoStep => two_step_decode(nh),
        };
        let jl = joint_loss(&joints, gt, spec.joint_loss)?;
        let g = match spec.decomposition {
            Decomposition::Direct => integral_backward_normalized(nh, &jl.d_coords)?,
            Decomposition::TwoStep => two_step_backward(nh, &jl.d_coords)?,
        };
        d_scores.accumulate(&g, T::of(spec.joint_weight))?;
        joint_term = jl.value;
        decoded = Some(joints);
    }

    Ok(LossValue {
        total: heatmap_term + T::of(spec.joint_weight) * joint_term,
        heatmap_term,
        joint_term,
        d_scores,
        decoded,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd_rel_error(
        scores: &[f64],
        analytic: &[f64],
        mut f: impl FnMut(&[f64]) -> f64,
    ) -> f64 {
        let mut s = scores.to_vec();
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        let (mut na, mut nf) = (0.0f64, 0.0f64);
        for i in 0..s.len() {
            let orig = s[i];
            s[i] = orig + 1e-5;
            let fp = f(&s);
            s[i] = orig - 1e-5;
            let fm = f(&s);
            s[i] = orig;
            let fd = (fp - fm) / 2e-5;
            diff += (fd - analytic[i]).powi(2);
            na += analytic[i].powi(2);
            nf += fd.powi(2);
        }
        scale = scale.max(na.sqrt()).max(nf.sqrt());
        diff.sqrt() / scale.max(1e-300)
    }

    fn wavy(spec: GridSpec, phase: f64) -> Heatmap {
        Heatmap::from_fn(spec, |k, c| {
            (phase + (k * 11 + c[0] * 3 + c[1] * 7 + c[2] * 5) as f64 * 0.61).sin() * 2.0
        })
        .unwrap()
    }

    #[test]
    fn gaussian_target_values() {
        let spec = GridSpec::planar(1, 5, 5).unwrap();
        let gt = JointSet::planar(vec![[2.0, 2.0, 0.0]]).unwrap();
        let t = gaussian_target(&spec, &gt, 1.0).unwrap().heatmap;
        let at = |x, y| t.scores()[spec.linear_index([x, y, 0]).unwrap()];
        assert_eq!(at(2, 2), 1.0);
        assert!((at(3, 2) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((at(3, 3) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((at(3, 2) - 0.606531).abs() < 1e-6);
        assert!((at(3, 3) - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn gaussian_target_clamps_and_flags() {
        let spec = GridSpec::planar(2, 4, 4).unwrap();
        let gt = JointSet::planar(vec![[1.0, 1.0, 0.0], [5.5, -1.0, 0.0]]).unwrap();
        let t = gaussian_target(&spec, &gt, 1.0).unwrap();
        assert_eq!(t.clamped, vec![1]);
        let idx = spec.cells() + spec.linear_index([3, 0, 0]).unwrap();
        assert_eq!(t.heatmap.scores()[idx], 1.0);
    }

    #[test]
    fn h1_examples() {
        let spec = GridSpec::planar(2, 3, 3).unwrap();
        let t = wavy(spec, 0.1);
        assert_eq!(h1_loss(&t, &t).unwrap().value, 0.0);
        let p = t.map(|v| v + 1.0).unwrap();
        assert!((h1_loss(&p, &t).unwrap().value - 1.0).abs() < 1e-12);
        let other = Heatmap::zeros(GridSpec::planar(1, 3, 3).unwrap());
        assert!(matches!(h1_loss(&other, &t), Err(Error::Contract(_))));
    }

    #[test]
    fn h1_gradient_fd() {
        let spec = GridSpec::new(2, 2, 3, 3).unwrap();
        let p = wavy(spec, 0.3);
        let t = wavy(spec, 1.7);
        let g = h1_loss(&p, &t).unwrap();
        let e = fd_rel_error(p.scores(), g.d_scores.d_scores(), |s| {
            h1_loss(&Heatmap::new(spec, s.to_vec()).unwrap(), &t).unwrap().value
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn h2_examples() {
        let spec = GridSpec::planar(2, 4, 5).unwrap();
        let gt = JointSet::planar(vec![[1.2, 2.5, 0.0], [3.9, 0.0, 0.0]]).unwrap();
        let uni = Heatmap::zeros(spec);
        assert!((h2_loss(&uni, &gt).unwrap().value - 20f64.ln()).abs() < 1e-12);

        // (1.2, 2.5) rounds to (1, 2); (3.9, 0) to (4, 0)
        let confident = Heatmap::from_fn(spec, |k, c| {
            let hit = if k == 0 { c == [1, 2, 0] } else { c == [4, 0, 0] };
            if hit { 60.0 } else { 0.0 }
        })
        .unwrap();
        assert!(h2_loss(&confident, &gt).unwrap().value < 1e-20);

        let outside = JointSet::planar(vec![[5.6, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(h2_loss(&uni, &outside), Err(Error::Contract(_))));
    }

    #[test]
    fn h2_gradient_fd_with_unsupervised_depth() {
        let spec = GridSpec::new(2, 3, 3, 4).unwrap();
        let p = wavy(spec, 0.9);
        let gt = JointSet::new(
            vec![[2.2, 1.1, 0.7], [0.4, 2.0, 1.0]],
            vec![[true, true, true], [true, true, false]],
        )
        .unwrap();
        let g = h2_loss(&p, &gt).unwrap();
        let e = fd_rel_error(p.scores(), g.d_scores.d_scores(), |s| {
            h2_loss(&Heatmap::new(spec, s.to_vec()).unwrap(), &gt).unwrap().value
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn h3_examples() {
        let spec = GridSpec::planar(1, 8, 8).unwrap();
        let gt = JointSet::planar(vec![[3.0, 4.0, 0.0]]).unwrap();
        let sat = Heatmap::from_fn(spec, |_, c| {
            let d2 = (c[0] as f64 - 3.0).powi(2) + (c[1] as f64 - 4.0).powi(2);
            if d2 <= 4.0 { 20.0 } else { -20.0 }
        })
        .unwrap();
        assert!(h3_loss(&sat, &gt, 2.0).unwrap().value < 1e-8);
        let zero = Heatmap::zeros(spec);
        assert!((h3_loss(&zero, &gt, 2.0).unwrap().value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn h3_gradient_fd() {
        let spec = GridSpec::planar(2, 5, 5).unwrap();
        let p = wavy(spec, 2.2);
        let gt = JointSet::planar(vec![[1.3, 2.2, 0.0], [4.0, 0.5, 0.0]]).unwrap();
        let g = h3_loss(&p, &gt, 1.5).unwrap();
        let e = fd_rel_error(p.scores(), g.d_scores.d_scores(), |s| {
            h3_loss(&Heatmap::new(spec, s.to_vec()).unwrap(), &gt, 1.5).unwrap().value
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn joint_loss_examples() {
        let gt = JointSet::fully_masked(vec![[0.0, 0.0, 0.0]]).unwrap();
        let pred = JointSet::fully_masked(vec![[1.0, 2.0, 0.0]]).unwrap();
        assert_eq!(joint_loss(&gt, &gt, JointLossKind::L1).unwrap().value, 0.0);
        assert_eq!(joint_loss(&pred, &gt, JointLossKind::L1).unwrap().value, 1.0);
        let gt2 = JointSet::planar(vec![[0.0, 0.0, 0.0]]).unwrap();
        let l = joint_loss(&pred, &gt2, JointLossKind::L1).unwrap();
        assert_eq!(l.value, 1.5);
        assert_eq!(l.d_coords[0], [0.5, 0.5, 0.0]);
        let l2 = joint_loss(&pred, &gt2, JointLossKind::L2).unwrap();
        assert_eq!(l2.value, 2.5);
        assert_eq!(l2.d_coords[0], [1.0, 2.0, 0.0]);
    }

    #[test]
    fn joint_loss_requires_supervision() {
        let gt = JointSet::new(vec![[0.0; 3]], vec![[false; 3]]).unwrap();
        assert!(matches!(
            joint_loss(&gt, &gt, JointLossKind::L1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn vector_loss_examples() {
        let spec = GridSpec::new(1, 4, 5, 6).unwrap();
        let gt = JointSet::fully_masked(vec![[2.5, 1.0, 2.0]]).unwrap();
        let targets = vector_targets(&spec, &gt, 1.0f64).unwrap();
        let exact = vec![[0, 1, 2].map(|a| HeatVector {
            axis: Axis::ALL[a],
            probs: targets[0][a].clone(),
        })];
        assert!(vector_loss(&exact, &gt, &spec, 1.0).unwrap().value.abs() < 1e-15);

        let planar = gt.with_mask(vec![[true, true, false]]).unwrap();
        let mut shifted = exact.clone();
        shifted[0][2].probs = vec![1.0, 0.0, 0.0, 0.0];
        let vl = vector_loss(&shifted, &planar, &spec, 1.0).unwrap();
        assert!(vl.value.abs() < 1e-15);
        assert!(vl.d_vectors[0][2].is_empty());
    }

    #[test]
    fn vector_loss_gradient_fd() {
        let spec = GridSpec::new(2, 3, 4, 4).unwrap();
        let p = wavy(spec, 0.4);
        let gt = JointSet::new(
            vec![[1.5, 2.2, 1.0], [0.3, 1.0, 1.8]],
            vec![[true, true, false], [true, true, true]],
        )
        .unwrap();
        let g = vector_loss_on_scores(&p, &gt, 1.0).unwrap();
        let e = fd_rel_error(p.scores(), g.d_scores.d_scores(), |s| {
            vector_loss_on_scores(&Heatmap::new(spec, s.to_vec()).unwrap(), &gt, 1.0)
                .unwrap()
                .value
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn masked_depth_region_does_not_move_planar_terms() {
        // Scores of the form a(x, y) + b(x, y, z) - lse_z b(x, y, .) keep the
        // planar marginals at softmax(a) whatever b is, so changing b only
        // moves the depth marginal.
        let spec = GridSpec::new(1, 4, 4, 4).unwrap();
        let factored = |phase: f64| {
            let a = |x: usize, y: usize| ((x * 3 + y * 5) as f64 * 0.7).sin() * 2.0;
            let b = |x: usize, y: usize, z: usize| ((x + 2 * y + 7 * z) as f64 * phase).cos() * 3.0;
            Heatmap::from_fn(spec, |_, c| {
                let lse = (0..4).map(|z| b(c[0], c[1], z).exp()).sum::<f64>().ln();
                a(c[0], c[1]) + b(c[0], c[1], c[2]) - lse
            })
            .unwrap()
        };
        let (p, bumped) = (factored(0.3), factored(1.9));
        let gt = JointSet::planar(vec![[1.5, 2.0, 0.0]]).unwrap();
        let nh0 = normalize(&p).unwrap();
        let nh1 = normalize(&bumped).unwrap();
        let z0 = &marginalize(&nh0, Axis::Z)[0].probs;
        let z1 = &marginalize(&nh1, Axis::Z)[0].probs;
        assert!(z0.iter().zip(z1).any(|(a, b)| (a - b).abs() > 1e-2));
        let base = vector_loss_on_scores(&p, &gt, 1.0).unwrap().value;
        let after = vector_loss_on_scores(&bumped, &gt, 1.0).unwrap().value;
        assert!((after - base).abs() < 1e-12, "{base} vs {after}");
    }

    #[test]
    fn compose_reduces_to_components() {
        let spec = GridSpec::planar(2, 5, 5).unwrap();
        let p = wavy(spec, 0.2);
        let gt = JointSet::planar(vec![[1.3, 2.2, 0.0], [3.1, 0.8, 0.0]]).unwrap();

        let istar = compose_loss(&LossSpec::joint_only(JointLossKind::L1), &p, &gt).unwrap();
        let decoded = integral_decode(&normalize(&p).unwrap());
        let jl = joint_loss(&decoded, &gt, JointLossKind::L1).unwrap();
        assert_eq!(istar.heatmap_term, 0.0);
        assert!((istar.total - jl.value).abs() < 1e-15);

        let h1 = compose_loss(&LossSpec::heatmap_only(HeatmapLoss::H1GaussianMse), &p, &gt).unwrap();
        let target = gaussian_target(&spec, &gt, 1.0).unwrap().heatmap;
        assert!((h1.total - h1_loss(&p, &target).unwrap().value).abs() < 1e-15);
        assert_eq!(h1.joint_term, 0.0);
        assert!(h1.decoded.is_none());
    }

    #[test]
    fn compose_gradient_fd() {
        let spec = GridSpec::planar(2, 4, 5).unwrap();
        let p = wavy(spec, 0.8);
        let gt = JointSet::planar(vec![[1.3, 2.2, 0.0], [3.1, 0.8, 0.0]]).unwrap();
        let ls = LossSpec::new(HeatmapLoss::H1GaussianMse, JointLossKind::L1);
        let v = compose_loss(&ls, &p, &gt).unwrap();
        assert!((v.total - (v.heatmap_term + v.joint_term)).abs() < 1e-12);
        let e = fd_rel_error(p.scores(), v.d_scores.d_scores(), |s| {
            compose_loss(&ls, &Heatmap::new(spec, s.to_vec()).unwrap(), &gt)
                .unwrap()
                .total
        });
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn two_step_heatmap_losses_other_than_h1_rejected() {
        let ls = LossSpec::new(HeatmapLoss::H2OnehotCe, JointLossKind::L1)
            .with_decomposition(Decomposition::TwoStep);
        assert!(ls.validate().is_err());
        assert!(LossSpec::new(HeatmapLoss::None, JointLossKind::None).validate().is_err());
    }

    #[test]
    fn loss_spec_json_uses_field_names() {
        let ls = LossSpec::new(HeatmapLoss::H1GaussianMse, JointLossKind::L1)
            .with_decomposition(Decomposition::TwoStep);
        let text = serde_json::to_string(&ls).unwrap();
        for key in [
            "\"heatmap_loss\":\"H1_gaussian_mse\"",
            "\"joint_loss\":\"L1\"",
            "\"decomposition\":\"two_step\"",
            "\"joint_weight\"",
            "\"gaussian_sigma\"",
            "\"h3_radius\"",
        ] {
            assert!(text.contains(key), "{text}");
        }
        let back: LossSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ls);
        let minimal: LossSpec =
            serde_json::from_str(r#"{"heatmap_loss":"none","joint_loss":"L1"}"#).unwrap();
        assert_eq!(minimal.h3_radius, 15.0);
        assert!(serde_json::from_str::<LossSpec>(
            r#"{"heatmap_loss":"none","joint_loss":"L1","extra":1}"#
        )
        .is_err());
    }

    fn case() -> impl Strategy<Value = (Heatmap, JointSet)> {
        (1usize..3, 1usize..4, 2usize..6, 2usize..6).prop_flat_map(|(k, d, h, w)| {
            let spec = GridSpec::new(k, d, h, w).unwrap();
            let coords = proptest::collection::vec(
                (0.0..(w - 1) as f64, 0.0..(h - 1) as f64, 0.0..(d - 1).max(1) as f64),
                k,
            );
            let masks = proptest::collection::vec(any::<bool>(), k);
            (
                proptest::collection::vec(-4.0f64..4.0, spec.len()),
                coords,
                masks,
            )
                .prop_map(move |(v, c, m)| {
                    let coords = c
                        .into_iter()
                        .map(|(x, y, z)| [x, y, if d == 1 { 0.0 } else { z }])
                        .collect();
                    let mask = m.into_iter().map(|full| [true, true, full && d > 1]).collect();
                    (Heatmap::new(spec, v).unwrap(), JointSet::new(coords, mask).unwrap())
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn losses_are_non_negative((p, gt) in case()) {
            let target = gaussian_target(p.spec(), &gt, 1.0).unwrap().heatmap;
            prop_assert!(h1_loss(&p, &target).unwrap().value >= 0.0);
            prop_assert!(h2_loss(&p, &gt).unwrap().value >= -1e-12);
            prop_assert!(h3_loss(&p, &gt, 1.5).unwrap().value >= 0.0);
            prop_assert!(vector_loss_on_scores(&p, &gt, 1.0).unwrap().value >= 0.0);
        }

        #[test]
        fn direct_and_two_step_joint_loss_agree((p, gt) in case()) {
            let direct = LossSpec::joint_only(JointLossKind::L1);
            let two = direct.with_decomposition(Decomposition::TwoStep);
            let a = compose_loss(&direct, &p, &gt).unwrap();
            let b = compose_loss(&two, &p, &gt).unwrap();
            prop_assert!((a.total - b.total).abs() < 1e-9);
            for (x, y) in a.d_scores.d_scores().iter().zip(b.d_scores.d_scores()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
