//! Subcommand bodies. Each returns its output files in memory; nothing is
//! written until the whole run has succeeded.

use std::fmt::Write as _;

use rand::Rng;
use vqsp_core::cluster::{partition_tokens, Cluster, Fault};
use vqsp_core::comms::{self, Sig6};
use vqsp_core::model::{argmax, ClassTokenMode, Input, Model, ModelKind};
use vqsp_core::rng::{mix, stream};
use vqsp_core::theorem::{
    check_variance_bound, mc_variance_reduction, theorem1_suite, variance_reduction_csv, verify_theorem1,
    GaussianSpec, VarianceReductionConfig,
};
use vqsp_core::train::{self, cls_mode_name, AblationGrid};
use vqsp_core::vq::{Codebook, CovarianceMode, EmaConfig, KMeansOptions, ResidualStats};
use vqsp_core::{Precision, Tensor};

use crate::config::{CodebookInit, ExperimentConfig};
use crate::CliError;

/// Everything a subcommand produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOutput {
    pub files: Vec<(String, Vec<u8>)>,
    /// The single stdout line.
    pub summary: String,
    /// Extra stderr lines.
    pub diagnostics: Vec<String>,
    pub violations: usize,
}

impl RunOutput {
    fn add(&mut self, name: &str, text: String) {
        self.files.push((name.to_string(), text.into_bytes()));
    }

    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))
}

// Stream tags under the top-level seed.
const MODEL_STREAM: u64 = 1;

fn random_input(kind: ModelKind, tokens: usize, rng: &mut impl Rng) -> Result<Input, CliError> {
    Ok(match kind {
        ModelKind::Classifier { input_dim, .. } => Input::Embeddings(Tensor::matrix(
            tokens,
            input_dim,
            (0..tokens * input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            Precision::F64,
        )?),
        ModelKind::Decoder { vocab } => Input::Tokens((0..tokens).map(|_| rng.random_range(0..vocab)).collect()),
    })
}

fn build_model(cfg: &ExperimentConfig) -> Result<Model, CliError> {
    let inf = &cfg.infer;
    if let Some(path) = &inf.checkpoint {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))?;
        return Ok(Model::from_bytes(&bytes)?);
    }
    let mcfg = cfg.model.to_model_config(inf.tokens + inf.generate_steps);
    let mut model = Model::new(mcfg, mix(&[cfg.seed, MODEL_STREAM]))?;
    if inf.devices > 1 {
        match inf.codebook_init {
            CodebookInit::Kmeans => {
                if inf.calibration == 0 {
                    return Err(CliError::Config("infer.calibration must be positive for k-means".into()));
                }
                let mut r = stream(cfg.seed, "calibration");
                let calib = (0..inf.calibration)
                    .map(|_| random_input(mcfg.kind, inf.tokens, &mut r))
                    .collect::<Result<Vec<_>, _>>()?;
                model.init_codebooks(&calib, cfg.seed, KMeansOptions::default(), CovarianceMode::Isotropic)?;
            }
            CodebookInit::Random => {
                let mut r = stream(cfg.seed, "codebooks");
                let sub = mcfg.hidden / mcfg.groups;
                model.codebooks = (0..mcfg.layers)
                    .map(|l| {
                        let c = (0..mcfg.groups * mcfg.codebook_size * sub)
                            .map(|_| r.random_range(-1.0f32..1.0))
                            .collect();
                        Codebook::from_centroids(l as u32, mcfg.groups, mcfg.codebook_size, sub, c, EmaConfig::default())
                    })
                    .collect::<Result<_, _>>()?;
            }
        }
    }
    Ok(model)
}

/// Distributed inference on the lockstep simulator.
pub fn cmd_infer(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let inf = &cfg.infer;
    let model = build_model(cfg)?;
    let kind = model.config.kind;
    if inf.generate_steps > 0 && !matches!(kind, ModelKind::Decoder { .. }) {
        return Err(CliError::Config("generate_steps needs a decoder model".into()));
    }
    let fault = match (inf.fault_layer, inf.fault_sender) {
        (Some(layer), Some(sender)) => Some(Fault { layer, sender }),
        (None, None) => None,
        _ => return Err(CliError::Config("fault_layer and fault_sender go together".into())),
    };
    let input = random_input(kind, inf.tokens, &mut stream(cfg.seed, "input"))?;
    let plan = partition_tokens(inf.tokens, inf.devices)?;

    let mut cluster = Cluster::new(&model, plan, cfg.threads)?;
    if let Some(f) = fault {
        cluster.inject_fault(f);
    }
    cluster.prefill(&input)?;
    let (logits, generated) = match kind {
        ModelKind::Classifier { .. } => (cluster.class_logits()?, Vec::new()),
        ModelKind::Decoder { .. } => {
            let l = cluster.prefill_logits()?;
            (l, cluster.decode(inf.generate_steps)?)
        }
    };
    let ledger = cluster.ledger().clone();

    let mut out = RunOutput::default();
    let mut csv = String::from("index,logit\n");
    for (i, v) in logits.data().iter().enumerate() {
        let _ = writeln!(csv, "{i},{}", Sig6(*v));
    }
    out.add("logits.csv", csv);
    if !generated.is_empty() {
        let mut csv = String::from("step,token\n");
        for (i, t) in generated.iter().enumerate() {
            let _ = writeln!(csv, "{i},{t}");
        }
        out.add("tokens.csv", csv);
    }
    out.add("ledger.csv", ledger.to_csv());
    let bits = ledger.per_token_bits(inf.tokens);
    out.summary = format!(
        "infer ok: devices={} tokens={} layers={} per_token_bits={} bits_sent={} prediction={}",
        inf.devices,
        inf.tokens,
        model.config.layers,
        bits,
        ledger.total_sent(),
        argmax(logits.data())
    );
    Ok(out)
}

/// Latency sweep from the analytical model.
pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let sweep = cfg.bench.to_sweep()?;
    let rows = comms::speedup_table(&sweep)?;
    let mut out = RunOutput::default();
    out.add("speedup.csv", comms::speedup_csv(&rows));
    out.add("speedup_long.csv", comms::speedup_long_csv(&rows));
    let best = rows
        .iter()
        .filter(|r| r.method.starts_with("astra"))
        .map(|r| r.report.speedup)
        .fold(f64::NAN, f64::max);
    out.summary = format!("bench ok: {} rows, best astra speedup {}", rows.len(), Sig6(best));
    Ok(out)
}

/// Theorem suites. Violations are reported through the exit code.
pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let v = &cfg.verify;
    pool(cfg.threads)?.install(|| {
        let mut out = RunOutput::default();
        let mut text = String::new();
        let mut violations = 0;

        if let Some(lambda) = v.lambda {
            let e = GaussianSpec::isotropic(vec![0.0], 1.0)?;
            let r = ResidualStats::from_moments(0, CovarianceMode::Isotropic, 2, vec![0.0], vec![1.0])?;
            let inst = verify_theorem1(&e, &r, lambda)?;
            let _ = writeln!(
                text,
                "explicit instance λ={}: W2(X,X̂)={} W2(X,X̃)={} {}",
                Sig6(lambda),
                Sig6(inst.w2_quantized),
                Sig6(inst.w2_noisy),
                if inst.holds() { "ok" } else { "VIOLATION" }
            );
            violations += usize::from(!inst.holds());
        }

        let t1 = theorem1_suite(v.theorem1_instances, v.theorem1_max_dim, cfg.seed)?;
        let identity_bad = t1.instances.iter().filter(|i| i.mean_identity_error > 1e-10).count();
        violations += t1.violations() + identity_bad;
        let _ = writeln!(text, "{}", t1.summary());
        out.add("theorem1.csv", t1.to_csv());

        let mut asserted = Vec::new();
        for &n in &v.devices {
            let r = mc_variance_reduction(&VarianceReductionConfig {
                tokens: v.tokens,
                devices: n,
                dim: v.dim,
                sigma_k: v.sigma,
                sigma_v: v.sigma,
                trials: v.trials,
                seed: cfg.seed,
            })?;
            let ok = if n == 1 { r.ratio == 1.0 } else { r.relative_error() <= v.tolerance };
            violations += usize::from(!ok);
            let _ = writeln!(
                text,
                "class-token error ratio N={n}: {} (expected {}) {}",
                Sig6(r.ratio),
                Sig6(r.expected()),
                if ok { "ok" } else { "VIOLATION" }
            );
            asserted.push(r);
        }
        out.add("theorem2.csv", variance_reduction_csv(&asserted, v.tolerance));

        let mut reported = Vec::new();
        for &sigma in &v.report_sigmas {
            for &n in v.devices.iter().filter(|&&n| n > 1) {
                reported.push(mc_variance_reduction(&VarianceReductionConfig {
                    tokens: v.tokens,
                    devices: n,
                    dim: v.dim,
                    sigma_k: sigma,
                    sigma_v: sigma,
                    trials: v.trials,
                    seed: cfg.seed,
                })?);
            }
        }
        if !reported.is_empty() {
            for r in &reported {
                let _ = writeln!(
                    text,
                    "reported only: σ={} N={} ratio {}",
                    Sig6(r.config.sigma_k),
                    r.config.devices,
                    Sig6(r.ratio)
                );
            }
            out.add("theorem2_reported.csv", variance_reduction_csv(&reported, v.tolerance));
        }

        let bound = check_variance_bound(
            v.tokens,
            v.bound_devices,
            v.dim,
            v.sigma,
            v.bound_instances,
            v.bound_samples,
            cfg.seed,
        )?;
        let frac = bound.fraction_within();
        let bound_ok = frac >= v.bound_fraction;
        violations += usize::from(!bound_ok);
        let _ = writeln!(
            text,
            "variance bound: {} of coordinates within C1σv²+C2σk² {}",
            Sig6(frac),
            if bound_ok { "ok" } else { "VIOLATION" }
        );
        out.add("bound.csv", bound.to_csv());

        let _ = writeln!(text, "violations: {violations}");
        out.add("verify.txt", text);
        out.violations = violations;
        out.summary = format!("verify {}: {violations} violations", if violations == 0 { "ok" } else { "failed" });
        Ok(out)
    })
}

/// One training run with checkpoint and metrics.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let task = cfg.task.to_task(cfg.seed);
    let tcfg = cfg.train.to_train_config(cfg.seed, cfg.model.cls_mode.into());
    let mcfg = cfg.model.to_model_config(task.tokens);
    let result = train::train(&task, mcfg, &tcfg)?;
    let mut out = RunOutput::default();
    let mut hist = String::from("step,total_loss,task_loss,commitment\n");
    for s in &result.history {
        let _ = writeln!(hist, "{},{},{},{}", s.step, Sig6(s.total), Sig6(s.task), Sig6(s.commitment));
    }
    out.add("history.csv", hist);
    let metric = match result.train_metric {
        train::Metric::Accuracy(_) => "accuracy",
        train::Metric::Perplexity(_) => "perplexity",
    };
    out.add(
        "metrics.csv",
        format!(
            "split,metric,value\ntrain,{metric},{}\nval,{metric},{}\ngap,{metric},{}\n",
            Sig6(result.train_metric.value()),
            Sig6(result.val_metric.value()),
            Sig6(result.gap())
        ),
    );
    out.files.push(("model.ckpt".into(), result.model.to_bytes()));
    out.summary = format!(
        "train ok: {} {} steps, train {metric} {}, val {metric} {}",
        task.kind.name(),
        result.history.len(),
        Sig6(result.train_metric.value()),
        Sig6(result.val_metric.value())
    );
    Ok(out)
}

/// Ablation grid over λ, β, class-token mode and groups.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let a = &cfg.ablate;
    let task = cfg.task.to_task(cfg.seed);
    let grid = AblationGrid {
        task,
        model: cfg.model.to_model_config(task.tokens),
        base: cfg.train.to_train_config(cfg.seed, ClassTokenMode::Distributed),
        lambdas: a.lambdas.clone(),
        betas: a.betas.clone(),
        cls_modes: a.cls_modes.iter().map(|&m| m.into()).collect(),
        groups: a.groups.clone(),
        seeds: a.seeds.clone(),
    };
    let result = pool(cfg.threads)?.install(|| train::run_ablation(&grid))?;
    let mut out = RunOutput::default();
    out.add("ablation.csv", result.to_csv());
    out.add("ablation_summary.csv", result.summary_csv());
    for s in result.summaries() {
        out.diagnostics.push(format!(
            "λ={} β={} G={} {}: val {} ± {}, gap {}",
            Sig6(s.lambda),
            Sig6(s.beta),
            s.groups,
            cls_mode_name(s.cls_mode),
            Sig6(s.val_mean),
            Sig6(s.val_std),
            Sig6(s.gap_mean)
        ));
    }
    out.summary = format!("ablate ok: {} cells x {} seeds", grid.cells(), grid.seeds.len());
    Ok(out)
}
