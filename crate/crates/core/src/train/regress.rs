//! Direct-regression baseline: pointwise features, average pooling onto a
//! coarse grid of bins, and a per-joint affine head producing coordinates.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Heatmap, JointSet};

use super::model::Tensor;

fn default_hidden() -> usize {
    4
}
fn default_pool() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Bins per axis, capped by the axis length.
    #[serde(default = "default_pool")]
    pub pool: usize,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            hidden: default_hidden(),
            pool: default_pool(),
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.pool == 0 {
            return Err(Error::contract("regressor hidden and pool must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    grid: GridSpec,
    config: RegressorConfig,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RegressorCache {
    evidence: Vec<f64>,
    /// Per joint, pooled features of length `F`.
    pooled: Vec<Vec<f64>>,
}

impl Regressor {
    fn bins(grid: &GridSpec, config: &RegressorConfig) -> [usize; 3] {
        grid.extent().map(|len| config.pool.min(len))
    }

    fn features(grid: &GridSpec, config: &RegressorConfig) -> usize {
        config.hidden * Self::bins(grid, config).iter().product::<usize>()
    }

    pub fn tensor_table(grid: &GridSpec, config: &RegressorConfig) -> Vec<Tensor> {
        let (k, c, f) = (grid.joints, config.hidden, Self::features(grid, config));
        vec![
            Tensor { name: "w", shape: vec![k, c] },
            Tensor { name: "b", shape: vec![k, c] },
            Tensor { name: "head", shape: vec![k, 3, f] },
            Tensor { name: "offset", shape: vec![k, 3] },
        ]
    }

    pub fn from_parameters(grid: GridSpec, config: RegressorConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected: usize = Self::tensor_table(&grid, &config).iter().map(Tensor::len).sum();
        if params.len() != expected {
            return Err(Error::contract(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("non-finite regressor parameter".into()));
        }
        Ok(Regressor { grid, config, params })
    }

    /// Feature weights `N(0, 1)`, zero head, offsets at the grid centre.
    pub fn init(grid: &GridSpec, config: RegressorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let table = Self::tensor_table(grid, &config);
        let n: usize = table.iter().map(Tensor::len).sum();
        let mut params = vec![0.0; n];
        let (k, c) = (grid.joints, config.hidden);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for p in &mut params[..2 * k * c] {
            *p = normal.sample(rng);
        }
        let ext = grid.extent();
        let off = n - 3 * k;
        for j in 0..k {
            for a in 0..3 {
                params[off + 3 * j + a] = (ext[a] - 1) as f64 / 2.0;
            }
        }
        Self::from_parameters(*grid, config, params)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn config(&self) -> &RegressorConfig {
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
        Self::tensor_table(&self.grid, &self.config)
    }

    fn offsets(&self) -> (usize, usize, usize, usize, usize) {
        let (k, c, f) = (self.grid.joints, self.config.hidden, Self::features(&self.grid, &self.config));
        let w = 0;
        let b = k * c;
        let head = 2 * k * c;
        let off = head + k * 3 * f;
        (w, b, head, off, f)
    }

    fn bin_of(&self) -> (Vec<usize>, Vec<f64>) {
        let bins = Self::bins(&self.grid, &self.config);
        let ext = self.grid.extent();
        let (n_bins, cells) = (bins.iter().product::<usize>(), self.grid.cells());
        let mut index = Vec::with_capacity(cells);
        let mut counts = vec![0.0; n_bins];
        for z in 0..ext[2] {
            for y in 0..ext[1] {
                for x in 0..ext[0] {
                    let bx = x * bins[0] / ext[0];
                    let by = y * bins[1] / ext[1];
                    let bz = z * bins[2] / ext[2];
                    let i = (bz * bins[1] + by) * bins[0] + bx;
                    index.push(i);
                    counts[i] += 1.0;
                }
            }
        }
        (index, counts)
    }

    pub fn predict(&self, evidence: &Heatmap) -> Result<JointSet> {
        Ok(self.forward_cached(evidence)?.0)
    }

    pub fn forward_cached(&self, evidence: &Heatmap) -> Result<(JointSet, RegressorCache)> {
        if *evidence.spec() != self.grid {
            return Err(Error::contract("regressor was built for a different grid"));
        }
        let (wo, bo, head, off, f) = self.offsets();
        let c = self.config.hidden;
        let (index, counts) = self.bin_of();
        let n_bins = counts.len();
        let p = &self.params;
        let mut coords = Vec::with_capacity(self.grid.joints);
        let mut pooled_all = Vec::with_capacity(self.grid.joints);
        for k in 0..self.grid.joints {
            let ev = evidence.joint(k);
            let mut pooled = vec![0.0; f];
            for ch in 0..c {
                let (w, b) = (p[wo + k * c + ch], p[bo + k * c + ch]);
                for (cell, e) in ev.iter().enumerate() {
                    pooled[ch * n_bins + index[cell]] += (w * e + b).tanh();
                }
                for (i, cnt) in counts.iter().enumerate() {
                    pooled[ch * n_bins + i] /= cnt;
                }
            }
            let mut j = [0.0; 3];
            for (a, ja) in j.iter_mut().enumerate() {
                let row = &p[head + (k * 3 + a) * f..head + (k * 3 + a + 1) * f];
                *ja = p[off + 3 * k + a] + row.iter().zip(&pooled).map(|(r, v)| r * v).sum::<f64>();
            }
            coords.push(j);
            pooled_all.push(pooled);
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("regressor produced non-finite coordinates".into()));
        }
        let joints = JointSet::fully_masked(coords)?;
        Ok((
            joints,
            RegressorCache {
                evidence: evidence.scores().to_vec(),
                pooled: pooled_all,
            },
        ))
    }

    /// Parameter gradient for an upstream gradient on the coordinates.
    pub fn backward(&self, cache: &RegressorCache, d_coords: &[[f64; 3]]) -> Result<Vec<f64>> {
        if d_coords.len() != self.grid.joints {
            return Err(Error::contract("coordinate gradient has the wrong joint count"));
        }
        let (wo, bo, head, off, f) = self.offsets();
        let c = self.config.hidden;
        let (index, counts) = self.bin_of();
        let n_bins = counts.len();
        let cells = self.grid.cells();
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        for (k, dj) in d_coords.iter().enumerate() {
            let pooled = &cache.pooled[k];
            let mut dpool = vec![0.0; f];
            for a in 0..3 {
                grad[off + 3 * k + a] += dj[a];
                let base = head + (k * 3 + a) * f;
                for i in 0..f {
                    grad[base + i] += dj[a] * pooled[i];
                    dpool[i] += dj[a] * p[base + i];
                }
            }
            let ev = &cache.evidence[k * cells..(k + 1) * cells];
            for ch in 0..c {
                let (w, b) = (p[wo + k * c + ch], p[bo + k * c + ch]);
                let (mut gw, mut gb) = (0.0, 0.0);
                for (cell, e) in ev.iter().enumerate() {
                    let bin = index[cell];
                    let t = (w * e + b).tanh();
                    let g = dpool[ch * n_bins + bin] / counts[bin] * (1.0 - t * t);
                    gw += g * e;
                    gb += g;
                }
                grad[wo + k * c + ch] += gw;
                grad[bo + k * c + ch] += gb;
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{joint_loss, JointLossKind};
    use crate::synth::{generate, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn initial_prediction_is_grid_centre() {
        let grid = GridSpec::new(2, 4, 6, 8).unwrap();
        let r = Regressor::init(&grid, RegressorConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s = generate(&SynthConfig::new(1, grid), 1).unwrap().remove(0);
        let j = r.predict(&s.evidence).unwrap();
        assert_eq!(j.coord(1), [3.5, 2.5, 1.5]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let grid = GridSpec::new(2, 3, 5, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = Regressor::init(&grid, RegressorConfig { hidden: 2, pool: 2 }, &mut rng).unwrap();
        let normal = Normal::new(0.0, 0.3).unwrap();
        for p in r.parameters_mut() {
            *p += normal.sample(&mut rng);
        }
        let mut c = SynthConfig::new(3, grid);
        c.noise_std = 0.1;
        let s = generate(&c, 1).unwrap().remove(0);
        let f = |m: &Regressor| joint_loss(&m.predict(&s.evidence).unwrap(), &s.gt, JointLossKind::L2).unwrap().value;
        let (j, cache) = r.forward_cached(&s.evidence).unwrap();
        let jl = joint_loss(&j, &s.gt, JointLossKind::L2).unwrap();
        let g = r.backward(&cache, &jl.d_coords).unwrap();
        let (mut num, mut na) = (0.0f64, 0.0f64);
        for i in 0..r.parameter_count() {
            let (mut a, mut b) = (r.clone(), r.clone());
            a.parameters_mut()[i] += 1e-5;
            b.parameters_mut()[i] -= 1e-5;
            let fd = (f(&a) - f(&b)) / 2e-5;
            num += (fd - g[i]).powi(2);
            na += g[i] * g[i];
        }
        assert!(num.sqrt() / na.sqrt() < 1e-6);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let grid = GridSpec::planar(1, 6, 6).unwrap();
        let r = Regressor::init(&grid, RegressorConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let other = Heatmap::zeros(GridSpec::planar(1, 6, 7).unwrap());
        assert!(r.predict(&other).is_err());
    }
}
