//! Training loop, schedules, batching and evaluation.

mod checkpoint;
mod model;
mod optim;
mod regress;
mod sweep;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use model::{ForwardCache, ModelConfig, Tensor, ToyModel};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use regress::{Regressor, RegressorCache, RegressorConfig};
pub use sweep::{decoder_sweep, sweep_csv, SweepRow};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{argmax_decode, integral_decode, normalize};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, Heatmap, JointSet};
use crate::losses::{compose_loss, joint_loss, HeatmapLoss, JointLossKind, LossSpec};
use crate::metrics::{MetricOptions, MetricReport, PoseEvalItem};
use crate::synth::{likelihood_scores, DomainTag, SynthSample, LIKELIHOOD_FLOOR};
use crate::table::{sig9, CsvTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    FromScratch,
    /// The first `pretrain_steps` steps drop the joint term.
    PretrainHeatmapThenIntegral { pretrain_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Heatmap {
        #[serde(flatten)]
        config: ModelConfig,
    },
    DirectRegression {
        #[serde(flatten)]
        config: RegressorConfig,
    },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Heatmap { config: ModelConfig::default() }
    }
}

fn default_batch() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub mixed_2d3d: bool,
    #[serde(default)]
    pub model: Architecture,
}

impl TrainConfig {
    pub fn new(loss: LossSpec, steps: usize, seed: u64) -> Self {
        TrainConfig {
            loss,
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch(),
            steps,
            seed,
            schedule: Schedule::FromScratch,
            mixed_2d3d: false,
            model: Architecture::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if let Schedule::PretrainHeatmapThenIntegral { pretrain_steps } = self.schedule {
            if pretrain_steps > self.steps {
                return Err(Error::contract("pretrain_steps exceeds steps"));
            }
            if self.loss.joint_loss == JointLossKind::None {
                return Err(Error::contract("pretraining schedule needs a joint loss to switch to"));
            }
        }
        match self.model {
            Architecture::Heatmap { config } => config.validate(),
            Architecture::DirectRegression { config } => {
                if self.schedule != Schedule::FromScratch {
                    return Err(Error::contract("the direct regressor has no heatmap to pretrain"));
                }
                config.validate()
            }
        }
    }

    /// Loss used during pretraining: the configured heatmap loss (H1 when
    /// none is configured) with the joint term dropped.
    pub fn pretrain_loss(&self) -> LossSpec {
        let heatmap_loss = match self.loss.heatmap_loss {
            HeatmapLoss::None => HeatmapLoss::H1GaussianMse,
            other => other,
        };
        LossSpec {
            heatmap_loss,
            joint_loss: JointLossKind::None,
            ..self.loss
        }
    }

    pub fn phase_at(&self, step: usize) -> Phase {
        match self.schedule {
            Schedule::PretrainHeatmapThenIntegral { pretrain_steps } if step < pretrain_steps => Phase::Pretrain,
            _ => Phase::Main,
        }
    }

    pub fn loss_at(&self, step: usize) -> LossSpec {
        match self.phase_at(step) {
            Phase::Pretrain => self.pretrain_loss(),
            Phase::Main => self.loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Main,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Main => "main",
        }
    }
}

/// Batch-mean loss terms of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub phase: Phase,
    pub total: f64,
    pub heatmap_term: f64,
    pub joint_term: f64,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut t = CsvTable::with_header(&["step", "phase", "total", "heatmap_term", "joint_term"]);
    for r in trace {
        t.row([
            r.step.to_string(),
            r.phase.as_str().to_string(),
            sig9(r.total),
            sig9(r.heatmap_term),
            sig9(r.joint_term),
        ]);
    }
    t.into_string()
}

/// A trained predictor of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Heatmap(ToyModel),
    Regression(Regressor),
}

impl Model {
    pub fn init(arch: &Architecture, grid: &GridSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match *arch {
            Architecture::Heatmap { config } => Model::Heatmap(ToyModel::init(grid, config, &mut rng)?),
            Architecture::DirectRegression { config } => {
                Model::Regression(Regressor::init(grid, config, &mut rng)?)
            }
        })
    }

    pub fn parameters(&self) -> &[f64] {
        match self {
            Model::Heatmap(m) => m.parameters(),
            Model::Regression(r) => r.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        match self {
            Model::Heatmap(m) => m.parameters_mut(),
            Model::Regression(r) => r.parameters_mut(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().len()
    }
}

/// Parameters and batch-mean loss of one sample set.
struct StepResult {
    grad: Vec<f64>,
    total: f64,
    heatmap_term: f64,
    joint_term: f64,
}

fn sample_gradient(model: &Model, loss: &LossSpec, sample: &SynthSample) -> Result<StepResult> {
    match model {
        Model::Heatmap(m) => {
            let (scores, cache) = m.forward_cached(&sample.evidence)?;
            let lv = compose_loss(loss, &scores, &sample.gt)?;
            Ok(StepResult {
                grad: m.backward(&cache, &lv.d_scores)?,
                total: lv.total,
                heatmap_term: lv.heatmap_term,
                joint_term: lv.joint_term,
            })
        }
        Model::Regression(r) => {
            let (joints, cache) = r.forward_cached(&sample.evidence)?;
            let jl = joint_loss(&joints, &sample.gt, JointLossKind::L1)?;
            Ok(StepResult {
                grad: r.backward(&cache, &jl.d_coords)?,
                total: jl.value,
                heatmap_term: 0.0,
                joint_term: jl.value,
            })
        }
    }
}

/// Batch mean of per-sample gradients; samples run in parallel, the sum is
/// taken in batch order.
fn batch_gradient(model: &Model, loss: &LossSpec, batch: &[&SynthSample]) -> Result<StepResult> {
    let parts = batch
        .par_iter()
        .map(|s| sample_gradient(model, loss, s))
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len() as f64;
    let mut acc = StepResult {
        grad: vec![0.0; model.parameter_count()],
        total: 0.0,
        heatmap_term: 0.0,
        joint_term: 0.0,
    };
    for p in parts {
        for (a, g) in acc.grad.iter_mut().zip(&p.grad) {
            *a += g;
        }
        acc.total += p.total;
        acc.heatmap_term += p.heatmap_term;
        acc.joint_term += p.joint_term;
    }
    acc.grad.iter_mut().for_each(|g| *g /= n);
    acc.total /= n;
    acc.heatmap_term /= n;
    acc.joint_term /= n;
    Ok(acc)
}

/// Cycles through a pool of dataset indices, reshuffling every pass.
struct Pool {
    order: Vec<usize>,
    pos: usize,
}

impl Pool {
    fn new(indices: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut order = indices;
        order.shuffle(rng);
        Pool { order, pos: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Deterministic batch assembly. With `mixed` and both domains present,
/// batch slots alternate strictly planar, volumetric, planar, ...
pub struct BatchSampler {
    pools: Vec<Pool>,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(samples: &[SynthSample], mixed: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let planar: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].domain_tag == DomainTag::Planar)
            .collect();
        let volumetric: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].domain_tag == DomainTag::Volumetric)
            .collect();
        let pools = if mixed && !planar.is_empty() && !volumetric.is_empty() {
            vec![Pool::new(planar, &mut rng), Pool::new(volumetric, &mut rng)]
        } else {
            vec![Pool::new((0..samples.len()).collect(), &mut rng)]
        };
        BatchSampler { pools, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let n = self.pools.len();
        (0..size).map(|j| self.pools[j % n].next(&mut self.rng)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
}

/// Trains a freshly initialised model (seeded by `config.seed`).
pub fn train(config: &TrainConfig, dataset: &[SynthSample]) -> Result<TrainOutcome> {
    let grid = *dataset
        .first()
        .ok_or_else(|| Error::contract("cannot train on an empty dataset"))?
        .evidence
        .spec();
    let model = Model::init(&config.model, &grid, config.seed)?;
    train_from(model, config, dataset)
}

/// Continues training `model`; `config.model` is ignored.
pub fn train_from(mut model: Model, config: &TrainConfig, dataset: &[SynthSample]) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    let grid = *dataset[0].evidence.spec();
    if dataset.iter().any(|s| *s.evidence.spec() != grid) {
        return Err(Error::contract("training samples must share one grid"));
    }
    let mut sampler = BatchSampler::new(dataset, config.mixed_2d3d, config.seed);
    let mut opt = Optimizer::new(config.optimizer, model.parameter_count());
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let loss = config.loss_at(step);
        // reduced in index order, so a batch acts as a multiset
        let mut indices = sampler.next_batch(config.batch_size);
        indices.sort_unstable();
        let batch: Vec<&SynthSample> = indices.into_iter().map(|i| &dataset[i]).collect();
        let r = batch_gradient(&model, &loss, &batch).map_err(|e| match e {
            Error::Domain(_) => Error::Divergence { step },
            other => other,
        })?;
        if !r.total.is_finite() || r.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step });
        }
        trace.push(TraceRow {
            step,
            phase: config.phase_at(step),
            total: r.total,
            heatmap_term: r.heatmap_term,
            joint_term: r.joint_term,
        });
        opt.step(model.parameters_mut(), &r.grad);
        if model.parameters().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { step });
        }
    }
    log::debug!("trained {} steps", config.steps);
    Ok(TrainOutcome { model, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    Argmax,
    Integral,
}

impl Decoder {
    pub fn as_str(self) -> &'static str {
        match self {
            Decoder::Argmax => "argmax",
            Decoder::Integral => "integral",
        }
    }

    pub fn decode(self, scores: &Heatmap) -> Result<JointSet> {
        match self {
            Decoder::Argmax => Ok(argmax_decode(scores)),
            Decoder::Integral => Ok(integral_decode(&normalize(scores)?)),
        }
    }
}

impl std::str::FromStr for Decoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Decoder::Argmax),
            "integral" => Ok(Decoder::Integral),
            other => Err(Error::contract(format!("unknown decoder {other:?}"))),
        }
    }
}

/// Anything that maps evidence to decoded joints.
pub trait Predictor: Sync {
    fn predict(&self, evidence: &Heatmap, decoder: Decoder) -> Result<JointSet>;

    /// Decoder name recorded in reports.
    fn label(&self, decoder: Decoder) -> &'static str {
        decoder.as_str()
    }
}

impl Predictor for Model {
    fn predict(&self, evidence: &Heatmap, decoder: Decoder) -> Result<JointSet> {
        match self {
            Model::Heatmap(m) => decoder.decode(&m.forward(evidence)?),
            Model::Regression(r) => r.predict(evidence),
        }
    }

    fn label(&self, decoder: Decoder) -> &'static str {
        match self {
            Model::Heatmap(_) => decoder.as_str(),
            Model::Regression(_) => "regression",
        }
    }
}

impl Predictor for ToyModel {
    fn predict(&self, evidence: &Heatmap, decoder: Decoder) -> Result<JointSet> {
        decoder.decode(&self.forward(evidence)?)
    }
}

/// Scores equal to the log-evidence: a model that reproduces the rendered
/// likelihood exactly.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl Predictor for Passthrough {
    fn predict(&self, evidence: &Heatmap, decoder: Decoder) -> Result<JointSet> {
        decoder.decode(&likelihood_scores(evidence, LIKELIHOOD_FLOOR)?)
    }
}

/// Decodes every sample and reports metrics against its ground truth.
/// Read-only: repeated calls give identical reports.
pub fn evaluate(
    model: &impl Predictor,
    dataset: &[SynthSample],
    decoder: Decoder,
    options: &MetricOptions,
) -> Result<MetricReport> {
    options.validate()?;
    let kappa = vec![options.kappa; dataset.first().map_or(0, |s| s.gt.len())];
    let items = dataset
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.evidence, decoder)?;
            PoseEvalItem::new(pred, s.gt.clone(), options.head_length, options.person_scale, kappa.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::compute(model.label(decoder), &items, options.stride)
}
