//! Pose evaluation metrics: PCKh and its AUC, MPJPE with and without
//! Procrustes alignment, OKS-based average precision.

mod procrustes;
mod report;

pub use procrustes::{procrustes_align, Alignment};
pub use report::{CurvePoint, MetricOptions, MetricReport, ThresholdAp};

use crate::error::{Error, Result};
use crate::grid::JointSet;
use crate::scalar::Scalar;

/// Default per-joint OKS falloff constant.
pub const DEFAULT_KAPPA: f64 = 0.1;

/// One predicted pose paired with its ground truth and normalizers.
#[derive(Debug, Clone)]
pub struct PoseEvalItem<T: Scalar = f64> {
    pub pred: JointSet<T>,
    pub gt: JointSet<T>,
    /// PCKh normalizer.
    pub head_length: T,
    /// OKS normalizer.
    pub person_scale: T,
    pub kappa: Vec<T>,
}

impl<T: Scalar> PoseEvalItem<T> {
    pub fn new(
        pred: JointSet<T>,
        gt: JointSet<T>,
        head_length: T,
        person_scale: T,
        kappa: Vec<T>,
    ) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::contract("prediction and ground truth joint counts differ"));
        }
        if kappa.len() != gt.len() {
            return Err(Error::contract("one kappa per joint required"));
        }
        if !(head_length > T::zero()) || !(person_scale > T::zero()) {
            return Err(Error::contract("head_length and person_scale must be positive"));
        }
        if kappa.iter().any(|k| !(*k > T::zero())) {
            return Err(Error::contract("kappa constants must be positive"));
        }
        Ok(PoseEvalItem {
            pred,
            gt,
            head_length,
            person_scale,
            kappa,
        })
    }

    /// Uses [`DEFAULT_KAPPA`] for every joint.
    pub fn with_default_kappa(
        pred: JointSet<T>,
        gt: JointSet<T>,
        head_length: T,
        person_scale: T,
    ) -> Result<Self> {
        let kappa = vec![T::of(DEFAULT_KAPPA); gt.len()];
        Self::new(pred, gt, head_length, person_scale, kappa)
    }

    /// Joints whose image-plane position is annotated.
    fn planar_joints(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.gt.len()).filter(|&k| self.gt.mask()[k][0] && self.gt.mask()[k][1])
    }

    fn planar_distance(&self, k: usize) -> T {
        let (p, g) = (self.pred.coord(k), self.gt.coord(k));
        ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()
    }
}

fn distance3<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn non_empty<T: Scalar>(items: &[PoseEvalItem<T>]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::contract("metric over an empty item set"));
    }
    Ok(())
}

/// Fraction of annotated `(item, joint)` pairs whose image-plane error is
/// strictly below `alpha * head_length`.
pub fn pckh<T: Scalar>(items: &[PoseEvalItem<T>], alpha: T) -> Result<T> {
    non_empty(items)?;
    if !(alpha >= T::zero()) {
        return Err(Error::contract("alpha must be non-negative"));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for item in items {
        let threshold = alpha * item.head_length;
        for k in item.planar_joints() {
            total += 1;
            if item.planar_distance(k) < threshold {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::contract("no annotated joints to score"));
    }
    Ok(T::of_usize(hit) / T::of_usize(total))
}

/// `alpha in {0, 0.01, ..., 0.50}`.
pub fn auc_alphas<T: Scalar>() -> Vec<T> {
    (0..=50).map(|i| T::of_usize(i) / T::of(100.0)).collect()
}

pub fn pckh_curve<T: Scalar>(items: &[PoseEvalItem<T>], alphas: &[T]) -> Result<Vec<(T, T)>> {
    alphas.iter().map(|&a| Ok((a, pckh(items, a)?))).collect()
}

/// Mean PCKh over the 51 thresholds of [`auc_alphas`].
pub fn auc<T: Scalar>(items: &[PoseEvalItem<T>]) -> Result<T> {
    let alphas = auc_alphas::<T>();
    let mut sum = T::zero();
    for &a in &alphas {
        sum += pckh(items, a)?;
    }
    Ok(sum / T::of_usize(alphas.len()))
}

fn require_3d<T: Scalar>(items: &[PoseEvalItem<T>]) -> Result<()> {
    non_empty(items)?;
    if items.iter().any(|i| !i.gt.is_fully_masked()) {
        return Err(Error::contract("MPJPE requires fully annotated 3D ground truth"));
    }
    Ok(())
}

/// Mean Euclidean 3D error over all items and joints.
pub fn mpjpe<T: Scalar>(items: &[PoseEvalItem<T>]) -> Result<T> {
    require_3d(items)?;
    let mut sum = T::zero();
    let mut n = 0usize;
    for item in items {
        for (p, g) in item.pred.coords().iter().zip(item.gt.coords()) {
            sum += distance3(*p, *g);
            n += 1;
        }
    }
    Ok(sum / T::of_usize(n))
}

/// MPJPE after aligning each prediction onto its ground truth.
pub fn pa_mpjpe<T: Scalar>(items: &[PoseEvalItem<T>]) -> Result<T> {
    require_3d(items)?;
    let mut sum = T::zero();
    let mut n = 0usize;
    for item in items {
        let a = procrustes_align(&item.pred, &item.gt)?;
        for (p, g) in a.aligned.coords().iter().zip(item.gt.coords()) {
            sum += distance3(*p, *g);
            n += 1;
        }
    }
    Ok(sum / T::of_usize(n))
}

/// Object keypoint similarity: mean over annotated joints of
/// `exp(-d^2 / (2 s^2 kappa^2))`, with `d` the image-plane error.
pub fn oks<T: Scalar>(item: &PoseEvalItem<T>) -> Result<T> {
    let joints: Vec<usize> = item.planar_joints().collect();
    if joints.is_empty() {
        return Err(Error::contract("no annotated joints for OKS"));
    }
    let s2 = item.person_scale * item.person_scale;
    let total: T = joints
        .iter()
        .map(|&k| {
            let d = item.planar_distance(k);
            let kk = item.kappa[k];
            (-(d * d) / (T::of(2.0) * s2 * kk * kk)).exp()
        })
        .sum();
    Ok(total / T::of_usize(joints.len()))
}

/// `{0.50, 0.55, ..., 0.95}`.
pub fn oks_thresholds<T: Scalar>() -> Vec<T> {
    (0..10).map(|i| T::of_usize(50 + 5 * i) / T::of(100.0)).collect()
}

/// Single-pose precision at each threshold: fraction of items with
/// `oks >= t`.
pub fn ap_over_oks<T: Scalar>(items: &[PoseEvalItem<T>], thresholds: &[T]) -> Result<Vec<T>> {
    non_empty(items)?;
    let scores = items.iter().map(oks).collect::<Result<Vec<T>>>()?;
    let n = T::of_usize(items.len());
    Ok(thresholds
        .iter()
        .map(|&t| T::of_usize(scores.iter().filter(|&&s| s >= t).count()) / n)
        .collect())
}

/// Mean of [`ap_over_oks`] over [`oks_thresholds`].
pub fn average_precision<T: Scalar>(items: &[PoseEvalItem<T>]) -> Result<T> {
    let per = ap_over_oks(items, &oks_thresholds::<T>())?;
    Ok(per.iter().copied().sum::<T>() / T::of_usize(per.len()))
}
