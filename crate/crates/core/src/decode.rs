//! Heatmap-to-joint transforms and their analytic backward passes.
//!
//! Integral decoding takes the expectation of the cell coordinate under the
//! per-joint softmax. The two-step route first marginalizes the grid into one
//! heat vector per axis and integrates each vector; both routes give the same
//! coordinates, which is what lets axis-wise masks supervise 2D-only samples.

use crate::error::{Error, Result};
use crate::grid::{Axis, GridSpec, HeatVector, Heatmap, JointSet, NormalizedHeatmap};
use crate::scalar::Scalar;

/// Gradient of a scalar loss with respect to every raw score.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeGradient<T: Scalar = f64> {
    spec: GridSpec,
    d_scores: Vec<T>,
}

impl<T: Scalar> DecodeGradient<T> {
    pub fn zeros(spec: GridSpec) -> Self {
        DecodeGradient {
            spec,
            d_scores: vec![T::zero(); spec.len()],
        }
    }

    pub fn new(spec: GridSpec, d_scores: Vec<T>) -> Result<Self> {
        if d_scores.len() != spec.len() {
            return Err(Error::contract("gradient length does not match grid"));
        }
        Ok(DecodeGradient { spec, d_scores })
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    #[inline]
    pub fn d_scores(&self) -> &[T] {
        &self.d_scores
    }

    #[inline]
    pub fn d_scores_mut(&mut self) -> &mut [T] {
        &mut self.d_scores
    }

    pub fn into_inner(self) -> Vec<T> {
        self.d_scores
    }

    pub fn joint(&self, k: usize) -> &[T] {
        let cells = self.spec.cells();
        &self.d_scores[k * cells..(k + 1) * cells]
    }

    /// `self += weight * other`.
    pub fn accumulate(&mut self, other: &DecodeGradient<T>, weight: T) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::contract("gradient shapes differ"));
        }
        for (a, &b) in self.d_scores.iter_mut().zip(&other.d_scores) {
            *a += weight * b;
        }
        Ok(())
    }

    /// Per-joint sum of the entries; zero for any softmax-routed gradient.
    pub fn joint_sums(&self) -> Vec<T> {
        self.d_scores
            .chunks(self.spec.cells())
            .map(|c| c.iter().copied().sum())
            .collect()
    }
}

/// Iterates `(x, y, z)` of each per-joint cell in storage order.
fn cells(spec: &GridSpec) -> impl Iterator<Item = [usize; 3]> + '_ {
    let (w, h) = (spec.width, spec.height);
    (0..spec.cells()).map(move |i| [i % w, (i / w) % h, i / (w * h)])
}

/// Maximal cell per joint; ties go to the lowest linear index.
pub fn argmax_decode<T: Scalar>(h: &Heatmap<T>) -> JointSet<T> {
    let spec = *h.spec();
    let coords = (0..spec.joints)
        .map(|k| {
            let mut best = 0;
            let scores = h.joint(k);
            for (i, &s) in scores.iter().enumerate().skip(1) {
                if s > scores[best] {
                    best = i;
                }
            }
            spec.coordinate_unchecked(best).map(T::of_usize)
        })
        .collect::<Vec<_>>();
    let mask = vec![[true; 3]; coords.len()];
    JointSet::new(coords, mask).expect("cell coordinates are finite")
}

/// Per-joint softmax with max subtraction.
pub fn normalize<T: Scalar>(h: &Heatmap<T>) -> Result<NormalizedHeatmap<T>> {
    let spec = *h.spec();
    let mut probs = Vec::with_capacity(spec.len());
    for k in 0..spec.joints {
        let scores = h.joint(k);
        let mut max = T::neg_infinity();
        for &s in scores {
            if !s.is_finite() {
                return Err(Error::Domain(format!("non-finite score in joint {k}")));
            }
            max = max.max(s);
        }
        let start = probs.len();
        let mut total = T::zero();
        for &s in scores {
            let e = (s - max).exp();
            total += e;
            probs.push(e);
        }
        for p in &mut probs[start..] {
            *p /= total;
        }
    }
    Ok(NormalizedHeatmap::from_raw(spec, probs))
}

/// Expected cell coordinate under each joint's distribution.
pub fn integral_decode<T: Scalar>(nh: &NormalizedHeatmap<T>) -> JointSet<T> {
    let spec = *nh.spec();
    let coords = (0..spec.joints)
        .map(|k| expectation(&spec, nh.joint(k)))
        .collect::<Vec<_>>();
    let mask = vec![[true; 3]; coords.len()];
    JointSet::new(coords, mask).expect("expectations of finite coordinates are finite")
}

fn expectation<T: Scalar>(spec: &GridSpec, probs: &[T]) -> [T; 3] {
    let mut acc = [T::zero(); 3];
    for (c, &p) in cells(spec).zip(probs) {
        for a in 0..3 {
            acc[a] += T::of_usize(c[a]) * p;
        }
    }
    acc
}

/// Sums out the two axes complementary to `axis`, one vector per joint.
pub fn marginalize<T: Scalar>(nh: &NormalizedHeatmap<T>, axis: Axis) -> Vec<HeatVector<T>> {
    let spec = *nh.spec();
    let a = axis.index();
    (0..spec.joints)
        .map(|k| {
            let mut v = vec![T::zero(); spec.axis_len(axis)];
            for (c, &p) in cells(&spec).zip(nh.joint(k)) {
                v[c[a]] += p;
            }
            HeatVector { axis, probs: v }
        })
        .collect()
}

/// `sum_i i * v[i]`.
pub fn vector_integral<T: Scalar>(v: &HeatVector<T>) -> T {
    v.probs
        .iter()
        .enumerate()
        .map(|(i, &p)| T::of_usize(i) * p)
        .sum()
}

/// Marginalize per axis, then integrate each heat vector.
pub fn two_step_decode<T: Scalar>(nh: &NormalizedHeatmap<T>) -> JointSet<T> {
    let spec = *nh.spec();
    let per_axis = Axis::ALL.map(|axis| marginalize(nh, axis));
    let coords = (0..spec.joints)
        .map(|k| Axis::ALL.map(|axis| vector_integral(&per_axis[axis.index()][k])))
        .collect::<Vec<_>>();
    let mask = vec![[true; 3]; coords.len()];
    JointSet::new(coords, mask).expect("finite")
}

fn check_upstream<T: Scalar>(spec: &GridSpec, upstream: &[[T; 3]]) -> Result<()> {
    if upstream.len() != spec.joints {
        return Err(Error::contract(format!(
            "upstream gradient has {} joints, heatmap has {}",
            upstream.len(),
            spec.joints
        )));
    }
    if upstream.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Domain("non-finite upstream gradient".into()));
    }
    Ok(())
}

/// Backward pass of `integral_decode(normalize(h))`.
///
/// `upstream[k][a]` is the loss gradient with respect to the decoded
/// coordinate `J[k][a]`.
pub fn integral_backward<T: Scalar>(
    h: &Heatmap<T>,
    upstream: &[[T; 3]],
) -> Result<DecodeGradient<T>> {
    check_upstream(h.spec(), upstream)?;
    let nh = normalize(h)?;
    integral_backward_normalized(&nh, upstream)
}

/// Closed form `dJ[k][a] / ds_k(q) = p_k(q) * (coord_a(q) - J[k][a])`,
/// contracted with `upstream`.
pub fn integral_backward_normalized<T: Scalar>(
    nh: &NormalizedHeatmap<T>,
    upstream: &[[T; 3]],
) -> Result<DecodeGradient<T>> {
    let spec = *nh.spec();
    check_upstream(&spec, upstream)?;
    let mut out = Vec::with_capacity(spec.len());
    for (k, u) in upstream.iter().enumerate() {
        let probs = nh.joint(k);
        let j = expectation(&spec, probs);
        for (c, &p) in cells(&spec).zip(probs) {
            let mut g = T::zero();
            for a in 0..3 {
                g += u[a] * (T::of_usize(c[a]) - j[a]);
            }
            out.push(p * g);
        }
    }
    Ok(DecodeGradient { spec, d_scores: out })
}

/// Chain rule through the softmax: `ds(q) = p(q) * (dp(q) - <dp, p>)`.
pub fn softmax_backward<T: Scalar>(
    nh: &NormalizedHeatmap<T>,
    d_probs: &[T],
) -> Result<DecodeGradient<T>> {
    let spec = *nh.spec();
    if d_probs.len() != spec.len() {
        return Err(Error::contract("probability gradient length does not match grid"));
    }
    let cells_per = spec.cells();
    let mut out = Vec::with_capacity(spec.len());
    for k in 0..spec.joints {
        let p = nh.joint(k);
        let g = &d_probs[k * cells_per..(k + 1) * cells_per];
        let inner: T = p.iter().zip(g).map(|(&p, &g)| p * g).sum();
        out.extend(p.iter().zip(g).map(|(&p, &g)| p * (g - inner)));
    }
    Ok(DecodeGradient { spec, d_scores: out })
}

/// Gradient with respect to the heat vectors of one joint; an empty vector
/// means no gradient flows through that axis.
pub type VectorGrads<T> = [Vec<T>; 3];

/// Backward pass of `marginalize(normalize(h), axis)` for all three axes at
/// once, chained down to the raw scores.
pub fn marginal_backward<T: Scalar>(
    nh: &NormalizedHeatmap<T>,
    d_vectors: &[VectorGrads<T>],
) -> Result<DecodeGradient<T>> {
    let spec = *nh.spec();
    if d_vectors.len() != spec.joints {
        return Err(Error::contract("one set of vector gradients per joint required"));
    }
    let extent = spec.extent();
    for g in d_vectors {
        for a in 0..3 {
            if !g[a].is_empty() && g[a].len() != extent[a] {
                return Err(Error::contract(format!(
                    "axis {a} gradient has length {}, expected {}",
                    g[a].len(),
                    extent[a]
                )));
            }
        }
    }
    let mut d_probs = Vec::with_capacity(spec.len());
    for g in d_vectors {
        for c in cells(&spec) {
            let mut v = T::zero();
            for a in 0..3 {
                if !g[a].is_empty() {
                    v += g[a][c[a]];
                }
            }
            d_probs.push(v);
        }
    }
    softmax_backward(nh, &d_probs)
}

/// Backward pass of [`two_step_decode`], computed by chaining through the
/// heat vectors rather than the closed form.
pub fn two_step_backward<T: Scalar>(
    nh: &NormalizedHeatmap<T>,
    upstream: &[[T; 3]],
) -> Result<DecodeGradient<T>> {
    let spec = *nh.spec();
    check_upstream(&spec, upstream)?;
    let extent = spec.extent();
    let d_vectors: Vec<VectorGrads<T>> = upstream
        .iter()
        .map(|u| {
            [0, 1, 2].map(|a| {
                if u[a] == T::zero() {
                    Vec::new()
                } else {
                    (0..extent[a]).map(|i| u[a] * T::of_usize(i)).collect()
                }
            })
        })
        .collect();
    marginal_backward(nh, &d_vectors)
}
