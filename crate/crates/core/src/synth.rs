//! Seeded synthetic pose data.
//!
//! A sample's evidence is a heatmap with a peak-1 Gaussian at every joint
//! plus optional weaker distractor blobs and additive Gaussian noise. The
//! random stream is `ChaCha8Rng::seed_from_u64(seed)` from `rand_chacha`,
//! consumed in a fixed order: per sample, joint coordinates (x, y, z per
//! joint), then distractor centres, then per-cell noise in storage order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Heatmap, JointSet};
use crate::io::{load_heatmap, save_heatmap};

fn default_sigma() -> f64 {
    1.0
}
fn default_amplitude() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub grid: GridSpec,
    /// Evidence blob standard deviation in cells.
    #[serde(default = "default_sigma")]
    pub blob_sigma: f64,
    #[serde(default)]
    pub distractor_count: usize,
    #[serde(default = "default_amplitude")]
    pub distractor_amplitude: f64,
    #[serde(default)]
    pub noise_std: f64,
    /// Share of samples whose depth is unannotated.
    #[serde(default)]
    pub fraction_2d: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, grid: GridSpec) -> Self {
        SynthConfig {
            seed,
            grid,
            blob_sigma: default_sigma(),
            distractor_count: 0,
            distractor_amplitude: default_amplitude(),
            noise_std: 0.0,
            fraction_2d: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blob_sigma > 0.0 && self.blob_sigma.is_finite()) {
            return Err(Error::contract("blob_sigma must be positive"));
        }
        if !(0.0..=1.0).contains(&self.distractor_amplitude) {
            return Err(Error::contract("distractor_amplitude must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::contract("noise_std must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.fraction_2d) {
            return Err(Error::contract("fraction_2d must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainTag {
    #[serde(rename = "2D")]
    Planar,
    #[serde(rename = "3D")]
    Volumetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub evidence: Heatmap,
    pub gt: JointSet,
    pub domain_tag: DomainTag,
}

/// Deterministic interleave: sample `i` is planar iff
/// `floor((i + 1) f) > floor(i f)`, so exactly `floor(n f)` of the first `n`
/// samples are planar.
pub fn domain_tag(index: usize, fraction_2d: f64) -> DomainTag {
    let before = (index as f64 * fraction_2d).floor();
    let after = ((index + 1) as f64 * fraction_2d).floor();
    if after > before {
        DomainTag::Planar
    } else {
        DomainTag::Volumetric
    }
}

fn mask_for(tag: DomainTag, grid: &GridSpec) -> [bool; 3] {
    [true, true, tag == DomainTag::Volumetric && grid.is_volumetric()]
}

/// Interior range `[lo, hi]` of an axis of `len` cells with a one-cell margin
/// (shrunk for axes too short to have one).
fn interior(len: usize) -> (f64, f64) {
    let top = (len - 1) as f64;
    let margin = 1.0f64.min(top / 2.0);
    (margin, top - margin)
}

fn uniform_point(rng: &mut impl Rng, ranges: &[(f64, f64); 3]) -> [f64; 3] {
    ranges.map(|(lo, hi)| lo + rng.random::<f64>() * (hi - lo))
}

fn gaussian_profile(len: usize, centre: f64, sigma: f64) -> Vec<f64> {
    let denom = 2.0 * sigma * sigma;
    (0..len)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / denom).exp()
        })
        .collect()
}

/// Blob centres of one sample: the joint plus its distractors.
struct Scene<'a> {
    joints: &'a [[f64; 3]],
    distractors: &'a [Vec<[f64; 3]>],
}

/// Renders evidence; `sigma` is per axis, noise is drawn from `rng` in
/// storage order.
fn render(
    grid: &GridSpec,
    scene: &Scene<'_>,
    sigma: [f64; 3],
    amplitude: f64,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<Heatmap> {
    let ext = grid.extent();
    let planar = !grid.is_volumetric();
    let mut scores = Vec::with_capacity(grid.len());
    for k in 0..grid.joints {
        let mut blobs = vec![(scene.joints[k], 1.0)];
        blobs.extend(scene.distractors[k].iter().map(|&c| (c, amplitude)));
        let profiles: Vec<[Vec<f64>; 3]> = blobs
            .iter()
            .map(|(c, _)| {
                [0, 1, 2].map(|a| {
                    if a == 2 && planar {
                        vec![1.0]
                    } else {
                        gaussian_profile(ext[a], c[a], sigma[a])
                    }
                })
            })
            .collect();
        for z in 0..grid.depth {
            for y in 0..grid.height {
                for x in 0..grid.width {
                    let mut v = 0.0;
                    for (p, (_, amp)) in profiles.iter().zip(&blobs) {
                        v += amp * p[0][x] * p[1][y] * p[2][z];
                    }
                    scores.push(v);
                }
            }
        }
    }
    if noise_std > 0.0 {
        for s in &mut scores {
            let n: f64 = rng.sample(StandardNormal);
            *s += noise_std * n;
        }
    }
    for s in &mut scores {
        if !s.is_finite() {
            *s = 0.0;
        }
    }
    Heatmap::new(*grid, scores)
}

/// `n` samples, a pure function of `(config, n)`.
pub fn generate(config: &SynthConfig, n: usize) -> Result<Vec<SynthSample>> {
    config.validate()?;
    let grid = config.grid;
    let ext = grid.extent();
    let ranges = ext.map(interior);
    let full = ext.map(|l| (0.0, (l - 1) as f64));
    let sigma = [config.blob_sigma; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let joints: Vec<[f64; 3]> = (0..grid.joints)
            .map(|_| uniform_point(&mut rng, &ranges))
            .collect();
        let distractors: Vec<Vec<[f64; 3]>> = (0..grid.joints)
            .map(|_| {
                (0..config.distractor_count)
                    .map(|_| uniform_point(&mut rng, &full))
                    .collect()
            })
            .collect();
        let scene = Scene {
            joints: &joints,
            distractors: &distractors,
        };
        let evidence = render(
            &grid,
            &scene,
            sigma,
            config.distractor_amplitude,
            config.noise_std,
            &mut rng,
        )?;
        let tag = domain_tag(i, config.fraction_2d);
        let mask = vec![mask_for(tag, &grid); grid.joints];
        out.push(SynthSample {
            evidence,
            gt: JointSet::new(joints, mask)?,
            domain_tag: tag,
        });
    }
    Ok(out)
}

/// Target grid of a resolution sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSize {
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub depth: usize,
}

fn one() -> usize {
    1
}

impl SweepSize {
    pub fn square(size: usize) -> Self {
        SweepSize {
            height: size,
            width: size,
            depth: 1,
        }
    }
}

/// One re-rendering of the shared scenes.
#[derive(Debug, Clone)]
pub struct SweepDataset {
    pub grid: GridSpec,
    /// Per-axis factor from the base frame to this grid, `[x, y, z]`.
    pub scale: [f64; 3],
    pub samples: Vec<SynthSample>,
}

/// Renders the same continuous scenes at several grid sizes.
///
/// Scenes are drawn once in the frame of `base.grid`, restricted so every
/// joint stays at least one cell inside every requested grid, then scaled
/// proportionally (`x' = x * size / base_size`) together with the blob width
/// and distractor centres. Noise, if any, is drawn independently per size.
pub fn resolution_sweep(
    base: &SynthConfig,
    n: usize,
    sizes: &[SweepSize],
) -> Result<Vec<SweepDataset>> {
    base.validate()?;
    if sizes.is_empty() {
        return Err(Error::contract("resolution sweep needs at least one size"));
    }
    let grids = sizes
        .iter()
        .map(|s| GridSpec::new(base.grid.joints, s.depth, s.height, s.width))
        .collect::<Result<Vec<_>>>()?;
    let base_ext = base.grid.extent().map(|l| l as f64);
    let scales: Vec<[f64; 3]> = grids
        .iter()
        .map(|g| {
            let e = g.extent();
            [0, 1, 2].map(|a| e[a] as f64 / base_ext[a])
        })
        .collect();

    let mut ranges = base.grid.extent().map(interior);
    for (g, r) in grids.iter().zip(&scales) {
        let e = g.extent();
        for a in 0..3 {
            let (lo, hi) = interior(e[a]);
            ranges[a].0 = ranges[a].0.max(lo / r[a]);
            ranges[a].1 = ranges[a].1.min(hi / r[a]);
        }
    }
    if ranges.iter().any(|(lo, hi)| lo > hi) {
        return Err(Error::contract("requested sizes leave no common interior"));
    }
    let full = base.grid.extent().map(|l| (0.0, (l - 1) as f64));

    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    let scenes: Vec<(Vec<[f64; 3]>, Vec<Vec<[f64; 3]>>)> = (0..n)
        .map(|_| {
            let joints = (0..base.grid.joints)
                .map(|_| uniform_point(&mut rng, &ranges))
                .collect();
            let distractors = (0..base.grid.joints)
                .map(|_| {
                    (0..base.distractor_count)
                        .map(|_| uniform_point(&mut rng, &full))
                        .collect()
                })
                .collect();
            (joints, distractors)
        })
        .collect();

    grids
        .iter()
        .zip(&scales)
        .enumerate()
        .map(|(si, (grid, r))| {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(base.seed);
            noise_rng.set_stream(si as u64 + 1);
            let scale_pt = |p: &[f64; 3]| [p[0] * r[0], p[1] * r[1], p[2] * r[2]];
            let sigma = r.map(|f| base.blob_sigma * f);
            let samples = scenes
                .iter()
                .enumerate()
                .map(|(i, (joints, distractors))| {
                    let joints: Vec<[f64; 3]> = joints
                        .iter()
                        .map(|p| {
                            let mut q = scale_pt(p);
                            if !grid.is_volumetric() {
                                q[2] = 0.0;
                            }
                            q
                        })
                        .collect();
                    let distractors: Vec<Vec<[f64; 3]>> = distractors
                        .iter()
                        .map(|d| d.iter().map(scale_pt).collect())
                        .collect();
                    let scene = Scene {
                        joints: &joints,
                        distractors: &distractors,
                    };
                    let evidence = render(
                        grid,
                        &scene,
                        sigma,
                        base.distractor_amplitude,
                        base.noise_std,
                        &mut noise_rng,
                    )?;
                    let tag = domain_tag(i, base.fraction_2d);
                    let mask = vec![mask_for(tag, grid); grid.joints];
                    Ok(SynthSample {
                        evidence,
                        gt: JointSet::new(joints, mask)?,
                        domain_tag: tag,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepDataset {
                grid: *grid,
                scale: *r,
                samples,
            })
        })
        .collect()
}

/// Scores whose softmax is the evidence itself, `ln(max(e, floor))`: the
/// output of a model that reproduces the clean likelihood exactly.
pub fn likelihood_scores(evidence: &Heatmap, floor: f64) -> Result<Heatmap> {
    evidence.map(|e| e.max(floor).ln())
}

pub const LIKELIHOOD_FLOOR: f64 = 1e-300;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "posecast-dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub domain_tag: DomainTag,
    pub gt: JointSet,
}

/// Dataset index written next to the heatmap binaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub grid: GridSpec,
    pub config: Option<SynthConfig>,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count(&self, tag: DomainTag) -> usize {
        self.samples.iter().filter(|s| s.domain_tag == tag).count()
    }
}

/// Writes one `sample_NNNNNN.ihpr` per sample plus `manifest.json`; returns
/// the manifest path.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    samples: &[SynthSample],
    config: Option<&SynthConfig>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("refusing to write an empty dataset"))?;
    let grid = *first.evidence.spec();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if *s.evidence.spec() != grid {
            return Err(Error::contract("all samples of a dataset must share one grid"));
        }
        let file = format!("sample_{i:06}.ihpr");
        save_heatmap(&s.evidence, dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            domain_tag: s.domain_tag,
            gt: s.gt.clone(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        grid,
        config: config.cloned(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST_NAME))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
        return Err(Error::format(0, "not a version-1 posecast dataset manifest"));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<SynthSample>)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let evidence: Heatmap = load_heatmap(dir.join(&e.file))?;
            if *evidence.spec() != manifest.grid {
                return Err(Error::contract(format!("{} has the wrong grid", e.file)));
            }
            let gt = JointSet::new(e.gt.coords().to_vec(), e.gt.mask().to_vec())?;
            Ok(SynthSample {
                evidence,
                gt,
                domain_tag: e.domain_tag,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
