//! Finite-difference verification of every analytic gradient.
//!
//! Each case draws a small random instance, evaluates the analytic gradient
//! and a central difference with step [`FD_STEP`], and measures the
//! norm-wise relative error `|a - n| / max(|a|, |n|)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::decode::integral_backward;
use crate::decode::{integral_decode, normalize};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Heatmap, JointSet};
use crate::losses::{
    compose_loss, gaussian_target, h1_loss, h2_loss, h3_loss, vector_loss_on_scores,
    Decomposition, HeatmapLoss, JointLossKind, LossSpec,
};
use crate::table::{sig9, CsvTable};
use crate::train::{ModelConfig, ToyModel};

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
/// Parameters sampled per toy-model case.
pub const MODEL_PARAMETER_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradOp {
    NormalizeIntegral,
    H1,
    H2,
    H3,
    VectorLoss,
    ComposeLoss,
    ToyModel,
}

impl GradOp {
    pub const ALL: [GradOp; 7] = [
        GradOp::NormalizeIntegral,
        GradOp::H1,
        GradOp::H2,
        GradOp::H3,
        GradOp::VectorLoss,
        GradOp::ComposeLoss,
        GradOp::ToyModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::NormalizeIntegral => "normalize_integral",
            GradOp::H1 => "h1_loss",
            GradOp::H2 => "h2_loss",
            GradOp::H3 => "h3_loss",
            GradOp::VectorLoss => "vector_loss",
            GradOp::ComposeLoss => "compose_loss",
            GradOp::ToyModel => "toy_model",
        }
    }
}

impl std::str::FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown gradient op {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub op: GradOp,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Norm-wise relative error; zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x` along the coordinates in `which`.
pub fn central_differences(
    x: &[f64],
    which: &[usize],
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    which
        .iter()
        .map(|&i| {
            probe[i] = x[i] + FD_STEP;
            let plus = f(&probe)?;
            probe[i] = x[i] - FD_STEP;
            let minus = f(&probe)?;
            probe[i] = x[i];
            Ok((plus - minus) / (2.0 * FD_STEP))
        })
        .collect()
}

struct Instance {
    spec: GridSpec,
    scores: Vec<f64>,
    gt: JointSet,
}

fn random_instance(rng: &mut ChaCha8Rng, max_cells: usize) -> Result<Instance> {
    let k = rng.random_range(1..=3);
    let d = if rng.random_bool(0.5) { 1 } else { rng.random_range(2..=4) };
    let mut h = rng.random_range(2..=6);
    let mut w = rng.random_range(2..=6);
    while d * h * w > max_cells {
        h = (h - 1).max(2);
        w = (w - 1).max(2);
    }
    let spec = GridSpec::new(k, d, h, w)?;
    let normal = Normal::new(0.0, 1.5).expect("positive std");
    let scores = (0..spec.len()).map(|_| normal.sample(rng)).collect();
    let ext = spec.extent();
    let mut coords = Vec::with_capacity(k);
    let mut mask = Vec::with_capacity(k);
    for _ in 0..k {
        coords.push(ext.map(|l| rng.random::<f64>() * (l - 1) as f64));
        let mut m = [0, 1, 2].map(|a| ext[a] > 1 && rng.random_bool(0.75));
        if !m.iter().any(|&b| b) {
            m[0] = true;
        }
        mask.push(m);
    }
    Ok(Instance { spec, scores, gt: JointSet::new(coords, mask)? })
}

fn random_loss_spec(rng: &mut ChaCha8Rng) -> LossSpec {
    loop {
        let heatmap_loss = [
            HeatmapLoss::H1GaussianMse,
            HeatmapLoss::H2OnehotCe,
            HeatmapLoss::H3BinaryCe,
            HeatmapLoss::None,
        ][rng.random_range(0..4)];
        let joint_loss = [JointLossKind::L1, JointLossKind::L2, JointLossKind::None][rng.random_range(0..3)];
        let decomposition = if rng.random_bool(0.5) { Decomposition::Direct } else { Decomposition::TwoStep };
        let mut spec = LossSpec::new(heatmap_loss, joint_loss).with_decomposition(decomposition);
        spec.joint_weight = rng.random_range(0.1..2.0);
        spec.gaussian_sigma = rng.random_range(0.5..2.0);
        spec.h3_radius = rng.random_range(0.5..3.0);
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

fn heatmap(spec: GridSpec, scores: &[f64]) -> Result<Heatmap> {
    Heatmap::new(spec, scores.to_vec())
}

/// Relative error of one random case of `op`.
fn run_case(op: GradOp, rng: &mut ChaCha8Rng, fault: bool) -> Result<f64> {
    let inst = random_instance(rng, 120)?;
    let Instance { spec, scores, gt } = inst;
    let all: Vec<usize> = (0..scores.len()).collect();
    let sign = if fault { -1.0 } else { 1.0 };
    let (analytic, numeric) = match op {
        GradOp::NormalizeIntegral => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let up: Vec<[f64; 3]> = (0..spec.joints).map(|_| [0; 3].map(|_| normal.sample(rng))).collect();
            let f = |s: &[f64]| -> Result<f64> {
                let j = integral_decode(&normalize(&heatmap(spec, s)?)?);
                Ok(j.coords().iter().zip(&up).map(|(c, u)| c[0] * u[0] + c[1] * u[1] + c[2] * u[2]).sum())
            };
            let a = integral_backward(&heatmap(spec, &scores)?, &up)?.into_inner();
            (a, central_differences(&scores, &all, f)?)
        }
        GradOp::H1 => {
            let sigma = rng.random_range(0.5..2.0);
            let target = gaussian_target(&spec, &gt, sigma)?.heatmap;
            let f = |s: &[f64]| Ok(h1_loss(&heatmap(spec, s)?, &target)?.value);
            let a = h1_loss(&heatmap(spec, &scores)?, &target)?.d_scores.into_inner();
            (a, central_differences(&scores, &all, f)?)
        }
        GradOp::H2 => {
            let f = |s: &[f64]| Ok(h2_loss(&heatmap(spec, s)?, &gt)?.value);
            let a = h2_loss(&heatmap(spec, &scores)?, &gt)?.d_scores.into_inner();
            (a, central_differences(&scores, &all, f)?)
        }
        GradOp::H3 => {
            let radius = rng.random_range(0.5..3.0);
            let f = |s: &[f64]| Ok(h3_loss(&heatmap(spec, s)?, &gt, radius)?.value);
            let a = h3_loss(&heatmap(spec, &scores)?, &gt, radius)?.d_scores.into_inner();
            (a, central_differences(&scores, &all, f)?)
        }
        GradOp::VectorLoss => {
            let sigma = rng.random_range(0.5..2.0);
            let f = |s: &[f64]| Ok(vector_loss_on_scores(&heatmap(spec, s)?, &gt, sigma)?.value);
            let a = vector_loss_on_scores(&heatmap(spec, &scores)?, &gt, sigma)?.d_scores.into_inner();
            (a, central_differences(&scores, &all, f)?)
        }
        GradOp::ComposeLoss => {
            let loss = random_loss_spec(rng);
            let f = |s: &[f64]| Ok(compose_loss(&loss, &heatmap(spec, s)?, &gt)?.total);
            let a = compose_loss(&loss, &heatmap(spec, &scores)?, &gt)?.d_scores.into_inner();
            (a, central_differences(&scores, &all, f)?)
        }
        GradOp::ToyModel => {
            let loss = random_loss_spec(rng);
            let cfg = ModelConfig { hidden: 2, radius: 1, depth_hidden: 2, depth_radius: 1 };
            let n = ToyModel::parameter_count_for(spec.joints, spec.is_volumetric(), &cfg);
            let normal = Normal::new(0.0, 0.5).expect("positive std");
            let params: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
            let evidence = heatmap(spec, &scores.iter().map(|s| s.abs() / 3.0).collect::<Vec<_>>())?;
            let picked = sample(rng, n, MODEL_PARAMETER_SAMPLES.min(n)).into_vec();
            let f = |p: &[f64]| -> Result<f64> {
                let m = ToyModel::from_parameters(spec.joints, spec.is_volumetric(), cfg, p.to_vec())?;
                Ok(compose_loss(&loss, &m.forward(&evidence)?, &gt)?.total)
            };
            let model = ToyModel::from_parameters(spec.joints, spec.is_volumetric(), cfg, params.clone())?;
            let (out, cache) = model.forward_cached(&evidence)?;
            let lv = compose_loss(&loss, &out, &gt)?;
            let g = model.backward(&cache, &lv.d_scores)?;
            let a = picked.iter().map(|&i| g[i]).collect();
            (a, central_differences(&params, &picked, f)?)
        }
    };
    let analytic: Vec<f64> = analytic.into_iter().map(|g| sign * g).collect();
    Ok(relative_error(&analytic, &numeric))
}

/// Runs `cases` random cases of every op. `fault` flips the sign of the
/// analytic gradient of one op, as a negative control. Zero cases yield an
/// empty table.
pub fn run_gradcheck(seed: u64, cases: usize, fault: Option<GradOp>) -> Result<Vec<GradcheckRow>> {
    if cases == 0 {
        return Ok(Vec::new());
    }
    GradOp::ALL
        .iter()
        .enumerate()
        .map(|(i, &op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut worst = 0.0f64;
            for _ in 0..cases {
                let e = run_case(op, &mut rng, fault == Some(op))?;
                worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
            }
            Ok(GradcheckRow {
                op,
                cases,
                max_rel_error: worst,
                passed: worst < GRADCHECK_TOLERANCE,
            })
        })
        .collect()
}

pub fn gradcheck_csv(rows: &[GradcheckRow]) -> String {
    let mut t = CsvTable::with_header(&["op", "cases", "max_rel_error", "tolerance", "status"]);
    for r in rows {
        t.row([
            r.op.name().to_string(),
            r.cases.to_string(),
            sig9(r.max_rel_error),
            sig9(GRADCHECK_TOLERANCE),
            if r.passed { "pass" } else { "fail" }.to_string(),
        ]);
    }
    t.into_string()
}
