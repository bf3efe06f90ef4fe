//! Toy fine-tuning with noise-augmented quantization, and the ablation
//! harness.
//!
//! Training runs the global view on one process: device boundaries are
//! simulated by the attention mask, remote tokens go through each layer's
//! codebook (plus noise), and gradients pass the quantizer straight through.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::{Graph, ScalarFn, Tape};
use crate::cluster::{partition_tokens, ShardPlan};
use crate::comms::Sig6;
use crate::error::{Error, Result};
use crate::model::{argmax, ClassTokenMode, Input, Model, ModelConfig, ModelKind, Quantization};
use crate::rng::{mix, stream, substream};
use crate::tensor::{self, Precision, Tensor};
use crate::vq::{CovarianceMode, KMeansOptions, NoiseConfig, ResidualStats, RunMode};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Commitment weight.
    pub beta: f64,
    /// Noise magnitude.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub cls_mode: ClassTokenMode,
    pub adam: AdamConfig,
    /// Simulated devices the sequence is split over.
    pub devices: usize,
    /// Train a vanilla Transformer: no codebooks, no commitment, no noise.
    pub exact: bool,
    /// Keep the residual statistics from codebook initialisation instead of
    /// refitting them from every batch.
    pub freeze_residuals: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 5e-4,
            lambda: 1.0,
            lr: 3e-3,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            cls_mode: ClassTokenMode::Distributed,
            adam: AdamConfig::default(),
            devices: 4,
            exact: false,
            freeze_residuals: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Precondition(format!("β={} must be ≥ 0", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Precondition(format!("λ={} outside [0, 1]", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Precondition(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.batch_size == 0 || self.devices == 0 {
            return Err(Error::Precondition("batch size and devices must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Precondition("Adam moments need β₁, β₂ in [0, 1) and ε > 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskKind {
    /// Each class is a fixed sequence of 2-D cluster ids, one per position.
    /// Tokens are noisy samples of those clusters lifted to `input_dim`.
    BlobClassify {
        classes: usize,
        clusters: usize,
        input_dim: usize,
        noise: f64,
    },
    /// Sequences from a sparse random Markov chain over `vocab` symbols.
    ToyLm { vocab: usize },
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::BlobClassify { .. } => "blob-classify",
            TaskKind::ToyLm { .. } => "toy-lm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub tokens: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Next-token targets, one per input position.
    Next(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Input,
    pub target: Target,
}

pub const MAX_LM_VOCAB: usize = 64;
const LM_SUCCESSORS: usize = 3;

impl SyntheticTask {
    pub fn blob(tokens: usize, classes: usize, input_dim: usize, seed: u64) -> Self {
        SyntheticTask {
            kind: TaskKind::BlobClassify {
                classes,
                clusters: 4,
                input_dim,
                noise: 0.8,
            },
            tokens,
            train_size: 256,
            val_size: 256,
            seed,
        }
    }

    pub fn toy_lm(tokens: usize, vocab: usize, seed: u64) -> Self {
        SyntheticTask {
            kind: TaskKind::ToyLm { vocab },
            tokens,
            train_size: 256,
            val_size: 128,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 {
            return Err(Error::Precondition("task needs at least one token".into()));
        }
        match self.kind {
            TaskKind::BlobClassify {
                classes,
                clusters,
                input_dim,
                noise,
            } => {
                if classes < 2 || clusters < 2 || input_dim < 2 || !(noise >= 0.0) {
                    return Err(Error::Precondition(
                        "blob task needs ≥2 classes, ≥2 clusters, input_dim ≥ 2 and noise ≥ 0".into(),
                    ));
                }
            }
            TaskKind::ToyLm { vocab } => {
                if !(2..=MAX_LM_VOCAB).contains(&vocab) {
                    return Err(Error::Precondition(format!("vocabulary {vocab} outside 2..={MAX_LM_VOCAB}")));
                }
            }
        }
        Ok(())
    }

    /// Model kind matching this task.
    pub fn model_kind(&self) -> ModelKind {
        match self.kind {
            TaskKind::BlobClassify { classes, input_dim, .. } => ModelKind::Classifier { input_dim, classes },
            TaskKind::ToyLm { vocab } => ModelKind::Decoder { vocab },
        }
    }

    /// Deterministic examples for `split`.
    pub fn generate(&self, split: Split) -> Result<Vec<Example>> {
        self.validate()?;
        let count = match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
        };
        let mut r = stream(self.seed, if split == Split::Train { "task-train" } else { "task-val" });
        match self.kind {
            TaskKind::BlobClassify {
                classes,
                clusters,
                input_dim,
                noise,
            } => {
                let mut w = stream(self.seed, "task-world");
                let centers: Vec<[f64; 2]> = (0..clusters)
                    .map(|i| {
                        let a = std::f64::consts::TAU * i as f64 / clusters as f64;
                        [a.cos(), a.sin()]
                    })
                    .collect();
                let patterns: Vec<Vec<usize>> = (0..classes)
                    .map(|_| (0..self.tokens).map(|_| w.random_range(0..clusters)).collect())
                    .collect();
                let lift = Normal::new(0.0, 1.0 / 2f64.sqrt()).unwrap();
                let proj: Vec<f64> = (0..2 * input_dim).map(|_| lift.sample(&mut w)).collect();
                let jitter = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
                (0..count)
                    .map(|_| {
                        let c = r.random_range(0..classes);
                        let mut data = Vec::with_capacity(self.tokens * input_dim);
                        for t in 0..self.tokens {
                            let ctr = centers[patterns[c][t]];
                            let p = [
                                ctr[0] + if noise > 0.0 { jitter.sample(&mut r) } else { 0.0 },
                                ctr[1] + if noise > 0.0 { jitter.sample(&mut r) } else { 0.0 },
                            ];
                            for d in 0..input_dim {
                                data.push(proj[2 * d] * p[0] + proj[2 * d + 1] * p[1]);
                            }
                        }
                        Ok(Example {
                            input: Input::Embeddings(Tensor::matrix(self.tokens, input_dim, data, Precision::F64)?),
                            target: Target::Class(c),
                        })
                    })
                    .collect()
            }
            TaskKind::ToyLm { vocab } => {
                let mut w = stream(self.seed, "task-world");
                let chain: Vec<Vec<(usize, f64)>> = (0..vocab)
                    .map(|_| {
                        let succ: Vec<usize> = (0..LM_SUCCESSORS).map(|_| w.random_range(0..vocab)).collect();
                        let weights: Vec<f64> = (0..LM_SUCCESSORS).map(|_| w.random_range(0.1..1.0)).collect();
                        let s: f64 = weights.iter().sum();
                        succ.into_iter().zip(weights.into_iter().map(|x| x / s)).collect()
                    })
                    .collect();
                (0..count)
                    .map(|_| {
                        let mut seq = vec![r.random_range(0..vocab)];
                        for _ in 0..self.tokens {
                            let u: f64 = r.random_range(0.0..1.0);
                            let row = &chain[*seq.last().unwrap()];
                            let mut acc = 0.0;
                            let mut next = row[row.len() - 1].0;
                            for &(s, p) in row {
                                acc += p;
                                if u < acc {
                                    next = s;
                                    break;
                                }
                            }
                            seq.push(next);
                        }
                        Ok(Example {
                            input: Input::Tokens(seq[..self.tokens].to_vec()),
                            target: Target::Next(seq[1..].to_vec()),
                        })
                    })
                    .collect()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Loss and optimiser
// ---------------------------------------------------------------------------

/// `L = L_task + β·Σ_l ‖X_l − sg(X̂_l)‖²`, averaged over the batch. Returns
/// `(total, task, commitment)` where the last two are plain values.
pub fn total_loss<G: Graph>(
    g: &mut G,
    model: &Model,
    params: &[G::V],
    batch: &[Example],
    plan: &ShardPlan,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(G::V, f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if !cfg.exact && !model.has_codebooks() {
        return Err(Error::Lifecycle("codebooks must be initialised before training".into()));
    }
    let mut total: Option<G::V> = None;
    let (mut task_sum, mut commit_sum) = (0.0, 0.0);
    for (i, ex) in batch.iter().enumerate() {
        let noise = NoiseConfig {
            lambda: cfg.lambda,
            enabled: cfg.lambda > 0.0,
            stream_key: mix(&[cfg.seed, step, i as u64]),
        };
        let quant = if cfg.exact {
            Quantization::Exact
        } else {
            Quantization::Codebooks {
                noise: Some(&noise),
                mode: RunMode::Training,
            }
        };
        let out = model.forward_global(g, params, &ex.input, plan, quant)?;
        let task = match &ex.target {
            Target::Class(c) => g.cross_entropy(&out.logits, &[*c])?,
            Target::Next(ids) => g.cross_entropy(&out.logits, ids)?,
        };
        task_sum += g.value(&task).item();
        let mut loss = task;
        if let Some(c) = out.commitment {
            commit_sum += g.value(&c).item();
            if cfg.beta != 0.0 {
                let weighted = g.scale(&c, cfg.beta);
                loss = g.add(&loss, &weighted)?;
            }
        }
        total = Some(match total {
            Some(acc) => g.add(&acc, &loss)?,
            None => loss,
        });
    }
    let n = batch.len() as f64;
    let total = g.scale(&total.expect("non-empty batch"), 1.0 / n);
    Ok((total, task_sum / n, commit_sum / n))
}

/// [`total_loss`] as a function of the parameter list, for gradient checks.
pub struct TotalLoss<'a> {
    pub model: &'a Model,
    pub batch: &'a [Example],
    pub plan: &'a ShardPlan,
    pub cfg: &'a TrainConfig,
    pub step: u64,
}

impl ScalarFn for TotalLoss<'_> {
    fn eval<G: Graph>(&self, g: &mut G, params: &[G::V]) -> Result<G::V> {
        Ok(total_loss(g, self.model, params, self.batch, self.plan, self.cfg, self.step)?.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            lr,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim("adam", "parameter count changed"));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::dim("adam", "gradient shape differs from parameter"));
            }
            let mut data = p.data().to_vec();
            for (j, (w, gj)) in data.iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = beta1 * *m + (1.0 - beta1) * gj;
                *v = beta2 * *v + (1.0 - beta2) * gj * gj;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            *p = Tensor::new(p.shape().to_vec(), data, p.precision())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub total: f64,
    pub task: f64,
    pub commitment: f64,
}

/// One optimisation step: loss and gradients on a tape, Adam update, then
/// EMA codebook updates and (unless frozen) a residual refit from the batch
/// activations.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[Example],
    plan: &ShardPlan,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let vars: Vec<_> = model.params.iter().map(|p| tape.leaf(p.clone())).collect();
    let (loss, task, commitment) = total_loss(&mut tape, model, &vars, batch, plan, cfg, step)?;
    let total = tape.value(&loss).item();
    let grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
    // Activations at the pre-update parameters feed the codebook update.
    let captures = if cfg.exact { Vec::new() } else { batch_captures(model, batch)? };
    opt.step(&mut model.params, &grads)?;
    for (l, h) in captures.iter().enumerate() {
        let cb = &mut model.codebooks[l];
        let (q, x_hat) = cb.quantize(h)?;
        if !cfg.freeze_residuals {
            let mode = model.residuals[l].as_ref().map_or(CovarianceMode::Isotropic, |r| r.mode());
            model.residuals[l] = Some(ResidualStats::fit(l as u32, h, &x_hat, mode)?);
        }
        cb.ema_update(h, &q)?;
    }
    Ok(StepStats {
        step,
        total,
        task,
        commitment,
    })
}

/// Per-layer first-layer-norm outputs of a batch, rows concatenated.
fn batch_captures(model: &Model, batch: &[Example]) -> Result<Vec<Tensor>> {
    let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); model.config.layers];
    for ex in batch {
        for (l, h) in model.capture_activations(&ex.input)?.into_iter().enumerate() {
            per_layer[l].push(h);
        }
    }
    per_layer
        .iter()
        .map(|hs| tensor::concat_rows(&hs.iter().collect::<Vec<_>>()))
        .collect()
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    Accuracy(f64),
    Perplexity(f64),
}

impl Metric {
    pub fn value(&self) -> f64 {
        match *self {
            Metric::Accuracy(v) | Metric::Perplexity(v) => v,
        }
    }
}

/// Top-1 accuracy of logit rows against labels.
pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Contract("accuracy needs equally many, non-zero predictions and labels".into()));
    }
    let hits = logits.iter().zip(labels).filter(|(l, y)| argmax(l) == **y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `exp` of the mean token cross-entropy.
pub fn perplexity(total_nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::Contract("perplexity over zero tokens".into()));
    }
    Ok((total_nll / tokens as f64).exp())
}

/// Accuracy (classifier) or perplexity (decoder) over `examples`, through
/// the quantized inference path when codebooks are present.
pub fn evaluate(model: &Model, examples: &[Example], plan: &ShardPlan, exact: bool) -> Result<Metric> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let quant = if exact || !model.has_codebooks() {
        Quantization::Exact
    } else {
        Quantization::Codebooks {
            noise: None,
            mode: RunMode::Inference,
        }
    };
    match model.config.kind {
        ModelKind::Classifier { .. } => {
            let mut rows = Vec::with_capacity(examples.len());
            let mut labels = Vec::with_capacity(examples.len());
            for ex in examples {
                let Target::Class(c) = ex.target else {
                    return Err(Error::Contract("classifier needs class targets".into()));
                };
                rows.push(model.logits(&ex.input, plan, quant)?.data().to_vec());
                labels.push(c);
            }
            Ok(Metric::Accuracy(accuracy(&rows, &labels)?))
        }
        ModelKind::Decoder { .. } => {
            let (mut nll, mut count) = (0.0, 0);
            for ex in examples {
                let Target::Next(ids) = &ex.target else {
                    return Err(Error::Contract("decoder needs next-token targets".into()));
                };
                let logits = model.logits(&ex.input, plan, quant)?;
                let (loss, _) = tensor::cross_entropy(&logits, ids)?;
                nll += loss.item() * ids.len() as f64;
                count += ids.len();
            }
            Ok(Metric::Perplexity(perplexity(nll, count)?))
        }
    }
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepStats>,
    pub train_metric: Metric,
    pub val_metric: Metric,
}

impl TrainOutcome {
    /// Train minus validation metric.
    pub fn gap(&self) -> f64 {
        self.train_metric.value() - self.val_metric.value()
    }
}

/// Calibration examples used for k-means.
const CALIBRATION_EXAMPLES: usize = 64;

/// Seeded model for `task` with k-means codebooks on the training split.
pub fn prepare_model(task: &SyntheticTask, mut model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<Model> {
    model_cfg.kind = task.model_kind();
    model_cfg.cls_mode = cfg.cls_mode;
    model_cfg.max_tokens = model_cfg.max_tokens.max(task.tokens);
    let mut model = Model::new(model_cfg, mix(&[cfg.seed, 0x6d6f64656c]))?;
    if !cfg.exact {
        let train = task.generate(Split::Train)?;
        let calib: Vec<Input> = train
            .iter()
            .take(CALIBRATION_EXAMPLES)
            .map(|e| e.input.clone())
            .collect();
        model.init_codebooks(&calib, cfg.seed, KMeansOptions::default(), CovarianceMode::Isotropic)?;
    }
    Ok(model)
}

/// Full run: prepare, train for `cfg.epochs`, evaluate both splits.
pub fn train(task: &SyntheticTask, model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = prepare_model(task, model_cfg, cfg)?;
    let train_set = task.generate(Split::Train)?;
    let val_set = task.generate(Split::Val)?;
    if train_set.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let plan = partition_tokens(task.tokens, cfg.devices)?;
    let mut opt = Adam::new(&model.params, cfg.lr, cfg.adam);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, "shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            history.push(train_step(&mut model, &mut opt, &batch, &plan, cfg, step)?);
            step += 1;
        }
    }
    let train_metric = evaluate(&model, &train_set, &plan, cfg.exact)?;
    let val_metric = evaluate(&model, &val_set, &plan, cfg.exact)?;
    Ok(TrainOutcome {
        model,
        history,
        train_metric,
        val_metric,
    })
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub task: SyntheticTask,
    pub model: ModelConfig,
    pub base: TrainConfig,
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    pub cls_modes: Vec<ClassTokenMode>,
    pub groups: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    pub fn cells(&self) -> usize {
        self.lambdas.len() * self.betas.len() * self.cls_modes.len() * self.groups.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells() == 0 || self.seeds.is_empty() {
            return Err(Error::Precondition("ablation grid has an empty axis".into()));
        }
        self.task.validate()?;
        for &lambda in &self.lambdas {
            for &beta in &self.betas {
                TrainConfig { lambda, beta, ..self.base }.validate()?;
            }
        }
        for &g in &self.groups {
            ModelConfig { groups: g, ..self.model }.validate()?;
        }
        Ok(())
    }

    /// `(λ, β, cls_mode, groups, seed)` runs in output order.
    fn runs(&self) -> Vec<(f64, f64, ClassTokenMode, usize, u64)> {
        let mut out = Vec::new();
        for &l in &self.lambdas {
            for &b in &self.betas {
                for &g in &self.groups {
                    for &c in &self.cls_modes {
                        for &s in &self.seeds {
                            out.push((l, b, c, g, s));
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn cls_mode_name(m: ClassTokenMode) -> &'static str {
    match m {
        ClassTokenMode::Single => "single",
        ClassTokenMode::Distributed => "distributed",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub task: &'static str,
    pub lambda: f64,
    pub beta: f64,
    pub groups: usize,
    pub cls_mode: ClassTokenMode,
    pub seed: u64,
    pub train_metric: f64,
    pub val_metric: f64,
}

impl AblationRow {
    pub fn gap(&self) -> f64 {
        self.train_metric - self.val_metric
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub lambda: f64,
    pub beta: f64,
    pub groups: usize,
    pub cls_mode: ClassTokenMode,
    pub seeds: usize,
    pub train_mean: f64,
    pub val_mean: f64,
    pub val_std: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationResult {
    /// Per-cell mean ± sample standard deviation over seeds, in grid order.
    pub fn summaries(&self) -> Vec<CellSummary> {
        let mut out: Vec<CellSummary> = Vec::new();
        let mut i = 0;
        while i < self.rows.len() {
            let r = &self.rows[i];
            let same = |o: &AblationRow| {
                o.lambda == r.lambda && o.beta == r.beta && o.groups == r.groups && o.cls_mode == r.cls_mode
            };
            let cell: Vec<&AblationRow> = self.rows[i..].iter().take_while(|o| same(o)).collect();
            let train: Vec<f64> = cell.iter().map(|c| c.train_metric).collect();
            let val: Vec<f64> = cell.iter().map(|c| c.val_metric).collect();
            let gap: Vec<f64> = cell.iter().map(|c| c.gap()).collect();
            let (val_mean, val_std) = mean_std(&val);
            let (gap_mean, gap_std) = mean_std(&gap);
            out.push(CellSummary {
                lambda: r.lambda,
                beta: r.beta,
                groups: r.groups,
                cls_mode: r.cls_mode,
                seeds: cell.len(),
                train_mean: mean_std(&train).0,
                val_mean,
                val_std,
                gap_mean,
                gap_std,
            });
            i += cell.len();
        }
        out
    }

    pub fn find(&self, lambda: f64, beta: f64, groups: usize, cls: ClassTokenMode) -> Option<CellSummary> {
        self.summaries()
            .into_iter()
            .find(|s| s.lambda == lambda && s.beta == beta && s.groups == groups && s.cls_mode == cls)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,lambda,beta,groups,cls_mode,seed,train_metric,val_metric,gap\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.task,
                Sig6(r.lambda),
                Sig6(r.beta),
                r.groups,
                cls_mode_name(r.cls_mode),
                r.seed,
                Sig6(r.train_metric),
                Sig6(r.val_metric),
                Sig6(r.gap())
            );
        }
        s
    }

    /// Cell means with deltas: validation metric of distributed over single
    /// (same λ, β, G), and gap relative to the λ=0 cell (same β, G, mode).
    pub fn summary_csv(&self) -> String {
        let task = self.rows.first().map_or("", |r| r.task);
        let sums = self.summaries();
        let mut s = String::from(
            "task,lambda,beta,groups,cls_mode,seeds,train_mean,val_mean,val_std,gap_mean,gap_std,delta_val_vs_single,delta_gap_vs_lambda0\n",
        );
        for c in &sums {
            let vs_single = (c.cls_mode == ClassTokenMode::Distributed)
                .then(|| {
                    sums.iter().find(|o| {
                        o.cls_mode == ClassTokenMode::Single && o.lambda == c.lambda && o.beta == c.beta && o.groups == c.groups
                    })
                })
                .flatten()
                .map(|o| Sig6(c.val_mean - o.val_mean).to_string())
                .unwrap_or_default();
            let vs_l0 = (c.lambda != 0.0)
                .then(|| {
                    sums.iter().find(|o| {
                        o.lambda == 0.0 && o.cls_mode == c.cls_mode && o.beta == c.beta && o.groups == c.groups
                    })
                })
                .flatten()
                .map(|o| Sig6(c.gap_mean - o.gap_mean).to_string())
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{task},{},{},{},{},{},{},{},{},{},{},{vs_single},{vs_l0}",
                Sig6(c.lambda),
                Sig6(c.beta),
                c.groups,
                cls_mode_name(c.cls_mode),
                c.seeds,
                Sig6(c.train_mean),
                Sig6(c.val_mean),
                Sig6(c.val_std),
                Sig6(c.gap_mean),
                Sig6(c.gap_std)
            );
        }
        s
    }
}

/// Trains every grid cell for every seed. Runs execute in parallel; the
/// result order is the grid order, so output bytes do not depend on the
/// worker count.
pub fn run_ablation(grid: &AblationGrid) -> Result<AblationResult> {
    grid.validate()?;
    let task_name = grid.task.kind.name();
    let rows: Vec<AblationRow> = grid
        .runs()
        .into_par_iter()
        .map(|(lambda, beta, cls_mode, groups, seed)| {
            let cfg = TrainConfig {
                lambda,
                beta,
                cls_mode,
                seed,
                ..grid.base
            };
            let model_cfg = ModelConfig { groups, ..grid.model };
            let out = train(&grid.task, model_cfg, &cfg)?;
            Ok(AblationRow {
                task: task_name,
                lambda,
                beta,
                groups,
                cls_mode,
                seed,
                train_metric: out.train_metric.value(),
                val_metric: out.val_metric.value(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationResult { rows })
}
