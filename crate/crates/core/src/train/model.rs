//! Small trainable map from evidence heatmaps to score heatmaps.
//!
//! Per joint `k`, with `T = 2r + 1` taps and zero padding:
//!
//! * planar branch on the depth-mean `m(x, y)` of the evidence:
//!   `h_c = tanh(b1[c] + w1[c] * m)`, `a = b2 + sum_c w2[c] * h_c`;
//! * depth branch (volumetric grids only), a 1D filter down each `(x, y)`
//!   column `e(z)`: `g_c = tanh(c1[c] + v1[c] * e)`, `b = sum_c v2[c] * g_c`.
//!
//! Scores are `a(x, y) + b(x, y, z) - lse_z b(x, y, .) + ln D`. The softmax
//! of the scores therefore factors as `softmax_xy(a) * softmax_z(b)`: the
//! image-plane marginal depends on the planar branch alone and the depth
//! branch only moves mass along each column.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decode::DecodeGradient;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Heatmap};

fn default_hidden() -> usize {
    4
}
fn default_radius() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_radius")]
    pub radius: usize,
    #[serde(default = "default_hidden")]
    pub depth_hidden: usize,
    #[serde(default = "default_radius")]
    pub depth_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
            radius: default_radius(),
            depth_hidden: default_hidden(),
            depth_radius: default_radius(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.depth_hidden == 0 {
            return Err(Error::contract("hidden widths must be positive"));
        }
        if self.radius > 16 || self.depth_radius > 16 {
            return Err(Error::contract("filter radius above 16 is not supported"));
        }
        Ok(())
    }
}

/// Named parameter block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Offsets into the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    c: usize,
    t: usize,
    cz: usize,
    tz: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    v1: usize,
    c1: usize,
    v2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    joints: usize,
    volumetric: bool,
    config: ModelConfig,
    params: Vec<f64>,
}

/// Activations kept by [`ToyModel::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    spec: GridSpec,
    evidence: Vec<f64>,
    /// Per joint: depth-mean input, `H*W`.
    mean: Vec<Vec<f64>>,
    /// Per joint: planar hidden, `C*H*W`.
    hidden: Vec<Vec<f64>>,
    /// Per joint: depth hidden, `H*W*Cz*D` in `(y, x, c, z)` order.
    depth_hidden: Vec<Vec<f64>>,
    /// Per joint: column softmax of the depth logits, `H*W*D`.
    column_probs: Vec<Vec<f64>>,
}

impl ToyModel {
    /// Tensor table for a model of this shape, in storage order.
    pub fn tensor_table(joints: usize, volumetric: bool, config: &ModelConfig) -> Vec<Tensor> {
        let (c, t) = (config.hidden, 2 * config.radius + 1);
        let (cz, tz) = (config.depth_hidden, 2 * config.depth_radius + 1);
        let mut out = vec![
            Tensor { name: "w1", shape: vec![joints, c, t, t] },
            Tensor { name: "b1", shape: vec![joints, c] },
            Tensor { name: "w2", shape: vec![joints, c, t, t] },
            Tensor { name: "b2", shape: vec![joints] },
        ];
        if volumetric {
            out.extend([
                Tensor { name: "v1", shape: vec![joints, cz, tz] },
                Tensor { name: "c1", shape: vec![joints, cz] },
                Tensor { name: "v2", shape: vec![joints, cz, tz] },
            ]);
        }
        out
    }

    fn layout(&self) -> Layout {
        let (k, cfg) = (self.joints, &self.config);
        let (c, t) = (cfg.hidden, 2 * cfg.radius + 1);
        let (cz, tz) = (cfg.depth_hidden, 2 * cfg.depth_radius + 1);
        let w1 = 0;
        let b1 = w1 + k * c * t * t;
        let w2 = b1 + k * c;
        let b2 = w2 + k * c * t * t;
        let v1 = b2 + k;
        let c1 = v1 + k * cz * tz;
        let v2 = c1 + k * cz;
        Layout { c, t, cz, tz, w1, b1, w2, b2, v1, c1, v2 }
    }

    pub fn parameter_count_for(joints: usize, volumetric: bool, config: &ModelConfig) -> usize {
        Self::tensor_table(joints, volumetric, config).iter().map(Tensor::len).sum()
    }

    /// Builds a model from explicit parameters in tensor-table order.
    pub fn from_parameters(
        joints: usize,
        volumetric: bool,
        config: ModelConfig,
        params: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if joints == 0 {
            return Err(Error::contract("model needs at least one joint"));
        }
        let expected = Self::parameter_count_for(joints, volumetric, &config);
        if params.len() != expected {
            return Err(Error::contract(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("non-finite model parameter".into()));
        }
        Ok(ToyModel { joints, volumetric, config, params })
    }

    pub fn zeros(joints: usize, volumetric: bool, config: ModelConfig) -> Result<Self> {
        let n = Self::parameter_count_for(joints, volumetric, &config);
        Self::from_parameters(joints, volumetric, config, vec![0.0; n])
    }

    /// Random initialisation: filters `N(0, 1/fan_in)`, planar output
    /// filters scaled by 0.1, biases zero, depth output filters zero (so an
    /// untrained model decodes depth at the grid centre).
    pub fn init(spec: &GridSpec, config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut model = Self::zeros(spec.joints, spec.is_volumetric(), config)?;
        let l = model.layout();
        let normal = |std: f64| Normal::new(0.0, std).expect("positive std");
        let first = normal((1.0 / (l.t * l.t) as f64).sqrt());
        let second = normal(0.1 * (1.0 / (l.c * l.t * l.t) as f64).sqrt());
        let depth = normal((1.0 / l.tz as f64).sqrt());
        let k = model.joints;
        for p in &mut model.params[l.w1..l.b1] {
            *p = first.sample(rng);
        }
        for p in &mut model.params[l.w2..l.w2 + k * l.c * l.t * l.t] {
            *p = second.sample(rng);
        }
        if model.volumetric {
            for p in &mut model.params[l.v1..l.c1] {
                *p = depth.sample(rng);
            }
        }
        Ok(model)
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn is_volumetric(&self) -> bool {
        self.volumetric
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        Self::tensor_table(self.joints, self.volumetric, &self.config)
    }

    /// Range of the named tensor inside [`parameters`](Self::parameters).
    pub fn tensor_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for t in self.tensors() {
            if t.name == name {
                return Some(start..start + t.len());
            }
            start += t.len();
        }
        None
    }

    fn check(&self, spec: &GridSpec) -> Result<()> {
        if spec.joints != self.joints {
            return Err(Error::contract(format!(
                "model has {} joints, evidence has {}",
                self.joints, spec.joints
            )));
        }
        if spec.is_volumetric() != self.volumetric {
            return Err(Error::contract(
                "model and evidence disagree on whether the grid has depth",
            ));
        }
        Ok(())
    }

    pub fn forward(&self, evidence: &Heatmap) -> Result<Heatmap> {
        Ok(self.forward_cached(evidence)?.0)
    }

    pub fn forward_cached(&self, evidence: &Heatmap) -> Result<(Heatmap, ForwardCache)> {
        let spec = *evidence.spec();
        self.check(&spec)?;
        let l = self.layout();
        let p = &self.params;
        let (d, h, w) = (spec.depth, spec.height, spec.width);
        let hw = h * w;
        let r = self.config.radius as isize;
        let rz = self.config.depth_radius as isize;
        let ln_d = (d as f64).ln();
        let mut scores = Vec::with_capacity(spec.len());
        let mut cache = ForwardCache {
            spec,
            evidence: evidence.scores().to_vec(),
            mean: Vec::with_capacity(self.joints),
            hidden: Vec::with_capacity(self.joints),
            depth_hidden: Vec::with_capacity(self.joints),
            column_probs: Vec::with_capacity(self.joints),
        };
        for k in 0..self.joints {
            let ev = evidence.joint(k);
            let mut m = vec![0.0; hw];
            for z in 0..d {
                for (mi, e) in m.iter_mut().zip(&ev[z * hw..(z + 1) * hw]) {
                    *mi += e;
                }
            }
            for mi in &mut m {
                *mi /= d as f64;
            }

            let mut hid = vec![0.0; l.c * hw];
            for c in 0..l.c {
                let wk = l.w1 + (k * l.c + c) * l.t * l.t;
                let bias = p[l.b1 + k * l.c + c];
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bias;
                        for ty in 0..l.t {
                            let yy = y as isize + ty as isize - r;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for tx in 0..l.t {
                                let xx = x as isize + tx as isize - r;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += p[wk + ty * l.t + tx] * m[yy as usize * w + xx as usize];
                            }
                        }
                        hid[c * hw + y * w + x] = acc.tanh();
                    }
                }
            }

            let mut a = vec![p[l.b2 + k]; hw];
            for c in 0..l.c {
                let wk = l.w2 + (k * l.c + c) * l.t * l.t;
                let hc = &hid[c * hw..(c + 1) * hw];
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for ty in 0..l.t {
                            let yy = y as isize + ty as isize - r;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for tx in 0..l.t {
                                let xx = x as isize + tx as isize - r;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += p[wk + ty * l.t + tx] * hc[yy as usize * w + xx as usize];
                            }
                        }
                        a[y * w + x] += acc;
                    }
                }
            }

            let mut shift = vec![0.0; d * hw];
            let mut g_all = Vec::new();
            let mut q_all = Vec::new();
            if self.volumetric {
                g_all = vec![0.0; hw * l.cz * d];
                q_all = vec![0.0; hw * d];
                let mut e = vec![0.0; d];
                let mut b = vec![0.0; d];
                for yx in 0..hw {
                    for z in 0..d {
                        e[z] = ev[z * hw + yx];
                    }
                    let g = &mut g_all[yx * l.cz * d..(yx + 1) * l.cz * d];
                    for c in 0..l.cz {
                        let vk = l.v1 + (k * l.cz + c) * l.tz;
                        let bias = p[l.c1 + k * l.cz + c];
                        for z in 0..d {
                            let mut acc = bias;
                            for t in 0..l.tz {
                                let zz = z as isize + t as isize - rz;
                                if zz >= 0 && zz < d as isize {
                                    acc += p[vk + t] * e[zz as usize];
                                }
                            }
                            g[c * d + z] = acc.tanh();
                        }
                    }
                    b.iter_mut().for_each(|v| *v = 0.0);
                    for c in 0..l.cz {
                        let vk = l.v2 + (k * l.cz + c) * l.tz;
                        for (z, bz) in b.iter_mut().enumerate() {
                            for t in 0..l.tz {
                                let zz = z as isize + t as isize - rz;
                                if zz >= 0 && zz < d as isize {
                                    *bz += p[vk + t] * g[c * d + zz as usize];
                                }
                            }
                        }
                    }
                    let mx = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = b.iter().map(|v| (v - mx).exp()).sum();
                    let lse = mx + sum.ln();
                    for z in 0..d {
                        q_all[yx * d + z] = (b[z] - mx).exp() / sum;
                        shift[z * hw + yx] = b[z] - lse + ln_d;
                    }
                }
            }
            for z in 0..d {
                for yx in 0..hw {
                    scores.push(a[yx] + shift[z * hw + yx]);
                }
            }
            cache.mean.push(m);
            cache.hidden.push(hid);
            cache.depth_hidden.push(g_all);
            cache.column_probs.push(q_all);
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain("model produced non-finite scores".into()));
        }
        Ok((Heatmap::new(spec, scores)?, cache))
    }

    /// Exact gradient of a scalar loss with respect to every parameter,
    /// given the loss gradient `d_scores` with respect to the output.
    pub fn backward(&self, cache: &ForwardCache, d_scores: &DecodeGradient) -> Result<Vec<f64>> {
        let spec = cache.spec;
        self.check(&spec)?;
        if *d_scores.spec() != spec {
            return Err(Error::contract("score gradient does not match the forward grid"));
        }
        let l = self.layout();
        let p = &self.params;
        let (d, h, w) = (spec.depth, spec.height, spec.width);
        let hw = h * w;
        let r = self.config.radius as isize;
        let rz = self.config.depth_radius as isize;
        let mut grad = vec![0.0; self.params.len()];
        for k in 0..self.joints {
            let ds = d_scores.joint(k);
            let ev = &cache.evidence[k * d * hw..(k + 1) * d * hw];
            let mut da = vec![0.0; hw];
            for z in 0..d {
                for (a, s) in da.iter_mut().zip(&ds[z * hw..(z + 1) * hw]) {
                    *a += s;
                }
            }

            if self.volumetric {
                let g_all = &cache.depth_hidden[k];
                let q_all = &cache.column_probs[k];
                let mut db = vec![0.0; d];
                let mut dg = vec![0.0; l.cz * d];
                for yx in 0..hw {
                    let total: f64 = (0..d).map(|z| ds[z * hw + yx]).sum();
                    for z in 0..d {
                        db[z] = ds[z * hw + yx] - q_all[yx * d + z] * total;
                    }
                    let g = &g_all[yx * l.cz * d..(yx + 1) * l.cz * d];
                    dg.iter_mut().for_each(|v| *v = 0.0);
                    for c in 0..l.cz {
                        let vk = l.v2 + (k * l.cz + c) * l.tz;
                        for (z, dbz) in db.iter().enumerate() {
                            for t in 0..l.tz {
                                let zz = z as isize + t as isize - rz;
                                if zz >= 0 && zz < d as isize {
                                    grad[vk + t] += dbz * g[c * d + zz as usize];
                                    dg[c * d + zz as usize] += p[vk + t] * dbz;
                                }
                            }
                        }
                    }
                    for c in 0..l.cz {
                        let vk = l.v1 + (k * l.cz + c) * l.tz;
                        for z in 0..d {
                            let gz = g[c * d + z];
                            let dpre = dg[c * d + z] * (1.0 - gz * gz);
                            grad[l.c1 + k * l.cz + c] += dpre;
                            for t in 0..l.tz {
                                let zz = z as isize + t as isize - rz;
                                if zz >= 0 && zz < d as isize {
                                    grad[vk + t] += dpre * ev[zz as usize * hw + yx];
                                }
                            }
                        }
                    }
                }
            }

            grad[l.b2 + k] += da.iter().sum::<f64>();
            let hid = &cache.hidden[k];
            let m = &cache.mean[k];
            let mut dh = vec![0.0; hw];
            for c in 0..l.c {
                let w2k = l.w2 + (k * l.c + c) * l.t * l.t;
                let hc = &hid[c * hw..(c + 1) * hw];
                dh.iter_mut().for_each(|v| *v = 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let g = da[y * w + x];
                        for ty in 0..l.t {
                            let yy = y as isize + ty as isize - r;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for tx in 0..l.t {
                                let xx = x as isize + tx as isize - r;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let at = yy as usize * w + xx as usize;
                                grad[w2k + ty * l.t + tx] += g * hc[at];
                                dh[at] += p[w2k + ty * l.t + tx] * g;
                            }
                        }
                    }
                }
                let w1k = l.w1 + (k * l.c + c) * l.t * l.t;
                for y in 0..h {
                    for x in 0..w {
                        let hv = hc[y * w + x];
                        let dpre = dh[y * w + x] * (1.0 - hv * hv);
                        grad[l.b1 + k * l.c + c] += dpre;
                        for ty in 0..l.t {
                            let yy = y as isize + ty as isize - r;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for tx in 0..l.t {
                                let xx = x as isize + tx as isize - r;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                grad[w1k + ty * l.t + tx] += dpre * m[yy as usize * w + xx as usize];
                            }
                        }
                    }
                }
            }
        }
        Ok(grad)
    }
}
