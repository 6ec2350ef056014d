//! Grid conventions and the tensor containers every other module works on.
//!
//! Cells are stored row-major in `(k, z, y, x)` order with `x` fastest. Cell
//! `i` along an axis has continuous coordinate `i`, so a point mass at cell
//! `(x, y, z)` decodes to exactly `(x, y, z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of a `K x D x H x W` heatmap stack. `depth == 1` is a planar grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec", deny_unknown_fields)]
pub struct GridSpec {
    pub joints: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGridSpec {
    joints: usize,
    #[serde(default = "one")]
    depth: usize,
    height: usize,
    width: usize,
}

fn one() -> usize {
    1
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = Error;

    fn try_from(raw: RawGridSpec) -> Result<Self> {
        GridSpec::new(raw.joints, raw.depth, raw.height, raw.width)
    }
}

impl GridSpec {
    pub fn new(joints: usize, depth: usize, height: usize, width: usize) -> Result<Self> {
        if joints == 0 || depth == 0 || height == 0 || width == 0 {
            return Err(Error::contract(format!(
                "grid dimensions must be >= 1, got K={joints} D={depth} H={height} W={width}"
            )));
        }
        let total = depth
            .checked_mul(height)
            .and_then(|c| c.checked_mul(width))
            .and_then(|c| c.checked_mul(joints));
        if total.is_none() {
            return Err(Error::contract("grid size overflows the index range"));
        }
        Ok(GridSpec {
            joints,
            depth,
            height,
            width,
        })
    }

    /// Planar grid with `depth == 1`.
    pub fn planar(joints: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(joints, 1, height, width)
    }

    /// Cells per joint, `D * H * W`.
    #[inline]
    pub fn cells(&self) -> usize {
        self.depth * self.height * self.width
    }

    /// Total number of values, `K * D * H * W`.
    #[inline]
    pub fn len(&self) -> usize {
        self.joints * self.cells()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn is_volumetric(&self) -> bool {
        self.depth > 1
    }

    /// Number of cells along `axis`.
    #[inline]
    pub fn axis_len(&self, axis: Axis) -> usize {
        match axis {
            Axis::X => self.width,
            Axis::Y => self.height,
            Axis::Z => self.depth,
        }
    }

    /// Same spatial layout with a different joint count.
    pub fn with_joints(&self, joints: usize) -> Result<Self> {
        Self::new(joints, self.depth, self.height, self.width)
    }

    /// Inverts the row-major layout: `(x, y, z)` of a per-joint cell index.
    pub fn cell_coordinate(&self, linear_index: usize) -> Result<[usize; 3]> {
        let cells = self.cells();
        if linear_index >= cells {
            return Err(Error::Range {
                index: linear_index,
                len: cells,
            });
        }
        Ok(self.coordinate_unchecked(linear_index))
    }

    #[inline]
    pub(crate) fn coordinate_unchecked(&self, linear_index: usize) -> [usize; 3] {
        let plane = self.height * self.width;
        let z = linear_index / plane;
        let rem = linear_index % plane;
        [rem % self.width, rem / self.width, z]
    }

    /// Per-joint cell index of `(x, y, z)`.
    pub fn linear_index(&self, cell: [usize; 3]) -> Result<usize> {
        let [x, y, z] = cell;
        if x >= self.width || y >= self.height || z >= self.depth {
            return Err(Error::contract(format!(
                "cell ({x}, {y}, {z}) outside {}x{}x{} grid",
                self.depth, self.height, self.width
            )));
        }
        Ok((z * self.height + y) * self.width + x)
    }

    /// Spatial extent `[W, H, D]` indexed like [`Axis::index`].
    #[inline]
    pub fn extent(&self) -> [usize; 3] {
        [self.width, self.height, self.depth]
    }
}

/// Spatial axis of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    /// Position of the axis inside coordinate triples.
    #[inline]
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

fn check_len(spec: &GridSpec, len: usize) -> Result<()> {
    if len != spec.len() {
        return Err(Error::contract(format!(
            "expected {} values for {:?}, got {len}",
            spec.len(),
            spec
        )));
    }
    Ok(())
}

/// Raw per-joint scores (logits).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap<T: Scalar = f64> {
    spec: GridSpec,
    scores: Vec<T>,
}

impl<T: Scalar> Heatmap<T> {
    pub fn new(spec: GridSpec, scores: Vec<T>) -> Result<Self> {
        check_len(&spec, scores.len())?;
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("non-finite score at index {i}")));
        }
        Ok(Heatmap { spec, scores })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Heatmap {
            spec,
            scores: vec![T::zero(); spec.len()],
        }
    }

    /// Builds a heatmap from `f(joint, [x, y, z])`.
    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, [usize; 3]) -> T) -> Result<Self> {
        let cells = spec.cells();
        let scores = (0..spec.len())
            .map(|i| f(i / cells, spec.coordinate_unchecked(i % cells)))
            .collect();
        Self::new(spec, scores)
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    #[inline]
    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    #[inline]
    pub fn joint(&self, k: usize) -> &[T] {
        let cells = self.spec.cells();
        &self.scores[k * cells..(k + 1) * cells]
    }

    pub fn into_scores(self) -> Vec<T> {
        self.scores
    }

    /// Elementwise map, re-validated.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.spec, self.scores.iter().map(|&s| f(s)).collect())
    }
}

/// Per-joint probability grid; each joint sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedHeatmap<T: Scalar = f64> {
    spec: GridSpec,
    probs: Vec<T>,
}

impl<T: Scalar> NormalizedHeatmap<T> {
    /// Validates bounds and per-joint sums (tolerance `1e-9`, or `1e-5` for
    /// single precision).
    pub fn new(spec: GridSpec, probs: Vec<T>) -> Result<Self> {
        check_len(&spec, probs.len())?;
        if let Some(i) = probs
            .iter()
            .position(|&p| !(p >= T::zero() && p <= T::one()))
        {
            return Err(Error::Domain(format!(
                "probability at index {i} outside [0, 1]"
            )));
        }
        let tol = sum_tolerance::<T>();
        for (k, joint) in probs.chunks(spec.cells()).enumerate() {
            let total: f64 = joint.iter().map(|p| p.as_f64()).sum();
            if (total - 1.0).abs() > tol {
                return Err(Error::Domain(format!(
                    "joint {k} probabilities sum to {total}"
                )));
            }
        }
        Ok(NormalizedHeatmap { spec, probs })
    }

    pub(crate) fn from_raw(spec: GridSpec, probs: Vec<T>) -> Self {
        debug_assert_eq!(spec.len(), probs.len());
        NormalizedHeatmap { spec, probs }
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    #[inline]
    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    #[inline]
    pub fn joint(&self, k: usize) -> &[T] {
        let cells = self.spec.cells();
        &self.probs[k * cells..(k + 1) * cells]
    }
}

pub(crate) fn sum_tolerance<T: Scalar>() -> f64 {
    if T::epsilon().as_f64() > 1e-10 {
        1e-5
    } else {
        1e-9
    }
}

/// `K` joints with continuous coordinates in cell units and a per-axis
/// supervision mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct JointSet<T: Scalar = f64> {
    coords: Vec<[T; 3]>,
    mask: Vec<[bool; 3]>,
}

impl<T: Scalar> JointSet<T> {
    pub fn new(coords: Vec<[T; 3]>, mask: Vec<[bool; 3]>) -> Result<Self> {
        if coords.len() != mask.len() {
            return Err(Error::contract(format!(
                "{} coordinates but {} mask entries",
                coords.len(),
                mask.len()
            )));
        }
        if coords.is_empty() {
            return Err(Error::contract("joint set must hold at least one joint"));
        }
        for (k, (c, m)) in coords.iter().zip(&mask).enumerate() {
            for a in 0..3 {
                if m[a] && !c[a].is_finite() {
                    return Err(Error::Domain(format!(
                        "joint {k} axis {a} is supervised but not finite"
                    )));
                }
            }
        }
        Ok(JointSet { coords, mask })
    }

    /// Every axis supervised.
    pub fn fully_masked(coords: Vec<[T; 3]>) -> Result<Self> {
        let mask = vec![[true; 3]; coords.len()];
        Self::new(coords, mask)
    }

    /// Image-plane annotation: `z` unsupervised on every joint.
    pub fn planar(coords: Vec<[T; 3]>) -> Result<Self> {
        let mask = vec![[true, true, false]; coords.len()];
        Self::new(coords, mask)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn coords(&self) -> &[[T; 3]] {
        &self.coords
    }

    #[inline]
    pub fn mask(&self) -> &[[bool; 3]] {
        &self.mask
    }

    #[inline]
    pub fn coord(&self, k: usize) -> [T; 3] {
        self.coords[k]
    }

    /// Same coordinates with a replaced mask.
    pub fn with_mask(&self, mask: Vec<[bool; 3]>) -> Result<Self> {
        Self::new(self.coords.clone(), mask)
    }

    /// Any axis of any joint supervised.
    pub fn any_masked(&self) -> bool {
        self.mask.iter().flatten().any(|&m| m)
    }

    /// All three axes of every joint supervised.
    pub fn is_fully_masked(&self) -> bool {
        self.mask.iter().flatten().all(|&m| m)
    }

    /// Coordinates scaled per axis by `factor`, mask unchanged.
    pub fn scaled(&self, factor: [T; 3]) -> Self {
        let coords = self
            .coords
            .iter()
            .map(|c| [c[0] * factor[0], c[1] * factor[1], c[2] * factor[2]])
            .collect();
        JointSet {
            coords,
            mask: self.mask.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parsed: JointSet<T> = serde_json::from_str(text)?;
        Self::new(parsed.coords, parsed.mask)
    }
}

/// 1D marginal of a normalized heatmap along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatVector<T: Scalar = f64> {
    pub axis: Axis,
    pub probs: Vec<T>,
}

impl<T: Scalar> HeatVector<T> {
    pub fn new(axis: Axis, probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("heat vector must be non-empty"));
        }
        let total: f64 = probs.iter().map(|p| p.as_f64()).sum();
        if probs.iter().any(|p| !(*p >= T::zero())) || (total - 1.0).abs() > sum_tolerance::<T>()
        {
            return Err(Error::Domain(format!(
                "heat vector is not a distribution (sum {total})"
            )));
        }
        Ok(HeatVector { axis, probs })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cell_coordinate_examples() {
        let s = GridSpec::new(1, 1, 4, 5).unwrap();
        assert_eq!(s.cell_coordinate(0).unwrap(), [0, 0, 0]);
        assert_eq!(s.cell_coordinate(7).unwrap(), [2, 1, 0]);
        let s = GridSpec::new(1, 3, 4, 5).unwrap();
        assert_eq!(s.cell_coordinate(59).unwrap(), [4, 3, 2]);
    }

    #[test]
    fn cell_coordinate_out_of_range() {
        let s = GridSpec::new(2, 1, 4, 5).unwrap();
        assert!(matches!(
            s.cell_coordinate(20),
            Err(Error::Range { index: 20, len: 20 })
        ));
    }

    #[test]
    fn layout_enumeration_matches_row_major() {
        let s = GridSpec::new(1, 3, 4, 5).unwrap();
        let mut i = 0;
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(s.cell_coordinate(i).unwrap(), [x, y, z]);
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(GridSpec::new(1, 1, 0, 4).is_err());
        assert!(GridSpec::new(0, 1, 4, 4).is_err());
        assert!(serde_json::from_str::<GridSpec>(r#"{"joints":1,"height":2,"width":0}"#).is_err());
    }

    #[test]
    fn gridspec_json_defaults_depth() {
        let s: GridSpec = serde_json::from_str(r#"{"joints":2,"height":3,"width":4}"#).unwrap();
        assert_eq!(s, GridSpec::planar(2, 3, 4).unwrap());
    }

    #[test]
    fn heatmap_rejects_bad_input() {
        let s = GridSpec::planar(1, 1, 2).unwrap();
        assert!(Heatmap::new(s, vec![0.0, f64::NAN]).is_err());
        assert!(Heatmap::new(s, vec![0.0]).is_err());
    }

    #[test]
    fn normalized_heatmap_checks_sum() {
        let s = GridSpec::planar(1, 1, 2).unwrap();
        assert!(NormalizedHeatmap::new(s, vec![0.5, 0.5]).is_ok());
        assert!(NormalizedHeatmap::new(s, vec![0.5, 0.6]).is_err());
        assert!(NormalizedHeatmap::new(s, vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn joint_set_json_round_trip() {
        let js = JointSet::new(
            vec![[1.5, 2.0, 0.0], [0.25, 3.0, 1.0]],
            vec![[true, true, false], [true, true, true]],
        )
        .unwrap();
        let text = js.to_json().unwrap();
        assert!(text.contains("\"coords\"") && text.contains("\"mask\""));
        assert_eq!(JointSet::<f64>::from_json(&text).unwrap(), js);
        assert!(JointSet::<f64>::from_json(r#"{"coords":[[1,2,3]],"mask":[[true,true]]}"#).is_err());
        assert!(JointSet::<f64>::from_json(r#"{"coords":[[1,2,3]],"mask":[[true,true,true]],"x":1}"#).is_err());
    }

    #[test]
    fn joint_set_rejects_non_finite_supervised_axis() {
        assert!(JointSet::new(vec![[f64::NAN, 0.0, 0.0]], vec![[true, true, false]]).is_err());
        assert!(JointSet::new(vec![[0.0, 0.0, f64::NAN]], vec![[true, true, false]]).is_ok());
    }

    proptest! {
        #[test]
        fn layout_bijection(d in 1usize..6, h in 1usize..9, w in 1usize..9, seed in any::<usize>()) {
            let s = GridSpec::new(1, d, h, w).unwrap();
            let i = seed % s.cells();
            let c = s.cell_coordinate(i).unwrap();
            prop_assert_eq!(s.linear_index(c).unwrap(), i);
        }
    }
}
