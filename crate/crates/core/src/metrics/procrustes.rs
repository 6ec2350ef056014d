//! Similarity alignment of one joint set onto another.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::grid::JointSet;
use crate::scalar::Scalar;

/// Result of aligning `pred` onto `gt`: `aligned = scale * rotation * pred + translation`.
#[derive(Debug, Clone)]
pub struct Alignment<T: Scalar = f64> {
    pub aligned: JointSet<T>,
    pub scale: T,
    /// Row-major proper rotation (determinant +1).
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

impl<T: Scalar> Alignment<T> {
    /// Applies the transform to an arbitrary point.
    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let mut out = self.translation;
        for r in 0..3 {
            for c in 0..3 {
                out[r] += self.scale * self.rotation[r][c] * p[c];
            }
        }
        out
    }
}

fn to_vec<T: Scalar>(p: [T; 3]) -> Vector3<f64> {
    Vector3::new(p[0].as_f64(), p[1].as_f64(), p[2].as_f64())
}

/// Least-squares similarity transform (Umeyama) with reflections excluded.
///
/// Requires at least three joints whose cross-covariance has rank two or
/// more; collinear or coincident configurations are rejected.
pub fn procrustes_align<T: Scalar>(pred: &JointSet<T>, gt: &JointSet<T>) -> Result<Alignment<T>> {
    let n = pred.len();
    if n != gt.len() {
        return Err(Error::contract("joint counts differ"));
    }
    if n < 3 {
        return Err(Error::Degenerate(format!("{n} joints; at least 3 required")));
    }
    let src: Vec<Vector3<f64>> = pred.coords().iter().map(|&p| to_vec(p)).collect();
    let dst: Vec<Vector3<f64>> = gt.coords().iter().map(|&p| to_vec(p)).collect();
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / nf;

    let mut cov = Matrix3::<f64>::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= nf;
    var_s /= nf;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    if !(sv[0].1 > 0.0) || sv[1].1 <= 1e-12 * sv[0].1 || var_s <= 0.0 {
        return Err(Error::Degenerate(
            "cross-covariance has rank < 2 (collinear or coincident joints)".into(),
        ));
    }
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the axis of the smallest singular value
        signs[sv[2].0] = -1.0;
    }
    let rot = u * Matrix3::from_diagonal(&signs) * v_t;
    let trace: f64 = svd
        .singular_values
        .iter()
        .zip(signs.iter())
        .map(|(s, d)| s * d)
        .sum();
    let scale = trace / var_s;
    let t = mu_d - scale * rot * mu_s;

    let aligned_coords = src
        .iter()
        .map(|s| {
            let a = scale * rot * s + t;
            [T::of(a[0]), T::of(a[1]), T::of(a[2])]
        })
        .collect();
    let aligned = JointSet::new(aligned_coords, pred.mask().to_vec())?;
    let rotation = [0, 1, 2].map(|r| [0, 1, 2].map(|c| T::of(rot[(r, c)])));
    Ok(Alignment {
        aligned,
        scale: T::of(scale),
        rotation,
        translation: [T::of(t[0]), T::of(t[1]), T::of(t[2])],
    })
}
