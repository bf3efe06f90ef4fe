//! Experiment configuration: one TOML document per run.
//!
//! Every section is optional and falls back to the defaults below. Unknown
//! keys anywhere are rejected. `--set a.b=value` overrides are applied to
//! the parsed document before it is checked against the schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vqsp_core::comms::{BpCoefficients, CommsConfig, DeviceProfile, Method, Sweep, DEFAULT_ANCHOR_S};
use vqsp_core::model::{ClassTokenMode, ModelConfig, ModelKind};
use vqsp_core::train::{AdamConfig, SyntheticTask, TaskKind, TrainConfig};
use vqsp_core::Precision;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads for parallel sections. Outputs do not depend on it.
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub infer: InferSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_threads() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindName {
    Classifier,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsModeName {
    Single,
    Distributed,
}

impl From<ClsModeName> for ClassTokenMode {
    fn from(m: ClsModeName) -> Self {
        match m {
            ClsModeName::Single => ClassTokenMode::Single,
            ClsModeName::Distributed => ClassTokenMode::Distributed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionName {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookInit {
    /// k-means on seeded calibration inputs.
    Kmeans,
    /// Uniform random centroids; only the bit accounting is meaningful.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskName {
    BlobClassify,
    ToyLm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: KindName,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub vocab: usize,
    /// Defaults to the longest sequence the run needs.
    pub max_tokens: Option<usize>,
    pub codebook_size: usize,
    pub groups: usize,
    pub cls_mode: ClsModeName,
    pub precision: PrecisionName,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: KindName::Classifier,
            layers: 2,
            hidden: 32,
            heads: 4,
            mlp_ratio: 2,
            input_dim: 8,
            classes: 4,
            vocab: 32,
            max_tokens: None,
            codebook_size: 16,
            groups: 1,
            cls_mode: ClsModeName::Distributed,
            precision: PrecisionName::F32,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, needed_tokens: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            kind: match self.kind {
                KindName::Classifier => ModelKind::Classifier {
                    input_dim: self.input_dim,
                    classes: self.classes,
                },
                KindName::Decoder => ModelKind::Decoder { vocab: self.vocab },
            },
            max_tokens: self.max_tokens.unwrap_or(needed_tokens),
            codebook_size: self.codebook_size,
            groups: self.groups,
            cls_mode: self.cls_mode.into(),
            precision: match self.precision {
                PrecisionName::F32 => Precision::F32,
                PrecisionName::F64 => Precision::F64,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub devices: usize,
    pub tokens: usize,
    /// Decoder only: tokens generated after the prompt.
    pub generate_steps: usize,
    pub codebook_init: CodebookInit,
    /// Calibration sequences for k-means.
    pub calibration: usize,
    /// Model checkpoint to load instead of a seeded initialisation.
    pub checkpoint: Option<PathBuf>,
    /// Drop one device's indices at one layer to exercise the stall path.
    pub fault_layer: Option<usize>,
    pub fault_sender: Option<usize>,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            devices: 4,
            tokens: 64,
            generate_steps: 0,
            codebook_init: CodebookInit::Kmeans,
            calibration: 4,
            checkpoint: None,
            fault_layer: None,
            fault_sender: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub bandwidths_mbps: Vec<f64>,
    pub devices: Vec<u64>,
    pub tokens: Vec<u64>,
    /// `single`, `astra`, `tp`, `sp`, `bp_ag`, `bp_sp`.
    pub methods: Vec<String>,
    /// Retained blocks for the block-parallel baselines.
    pub nb: Vec<u64>,
    pub layers: u64,
    pub hidden: u64,
    pub precision_bits: u64,
    pub codebook_size: u64,
    pub groups: u64,
    pub latency_s: f64,
    /// Single-device time of the calibration shape.
    pub anchor_s: f64,
    pub anchor_layers: u64,
    pub anchor_hidden: u64,
    pub anchor_tokens: u64,
    pub bp_ag_compute: f64,
    pub bp_sp_compute: f64,
    pub bp_sp_rounds: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            bandwidths_mbps: vec![10.0, 20.0, 50.0, 100.0, 200.0, 500.0],
            devices: vec![4],
            tokens: vec![1024],
            methods: ["single", "astra", "tp", "sp", "bp_ag", "bp_sp"].map(String::from).to_vec(),
            nb: vec![1],
            layers: 12,
            hidden: 768,
            precision_bits: 32,
            codebook_size: 1024,
            groups: 1,
            latency_s: 0.0,
            anchor_s: DEFAULT_ANCHOR_S,
            anchor_layers: 12,
            anchor_hidden: 768,
            anchor_tokens: 1024,
            bp_ag_compute: 1.25,
            bp_sp_compute: 1.1,
            bp_sp_rounds: 2,
        }
    }
}

impl BenchSection {
    pub fn to_sweep(&self) -> Result<Sweep, CliError> {
        let mut methods = Vec::new();
        for m in &self.methods {
            if m == "bp_ag" || m == "bp_sp" {
                for &nb in &self.nb {
                    methods.push(Method::parse(m, nb).map_err(|e| CliError::Config(format!("bench.methods: {e}")))?);
                }
            } else {
                methods.push(Method::parse(m, 0).map_err(|e| CliError::Config(format!("bench.methods: {e}")))?);
            }
        }
        if self.bandwidths_mbps.is_empty() || self.devices.is_empty() || self.tokens.is_empty() || methods.is_empty() {
            return Err(CliError::Config("bench sweep has an empty axis".into()));
        }
        if !(self.anchor_s > 0.0) || self.anchor_layers == 0 || self.anchor_hidden == 0 || self.anchor_tokens == 0 {
            return Err(CliError::Config("bench anchor must be positive".into()));
        }
        Ok(Sweep {
            base: CommsConfig {
                precision_bits: self.precision_bits,
                hidden: self.hidden,
                layers: self.layers,
                tokens: self.tokens[0],
                devices: self.devices[0],
                bandwidth_bps: self.bandwidths_mbps[0] * 1e6,
                latency_s: self.latency_s,
                codebook_size: self.codebook_size,
                groups: self.groups,
            },
            bandwidths_mbps: self.bandwidths_mbps.clone(),
            devices: self.devices.clone(),
            tokens: self.tokens.clone(),
            methods,
            profile: DeviceProfile::calibrated(self.anchor_s, self.anchor_layers, self.anchor_hidden, self.anchor_tokens),
            bp: BpCoefficients {
                ag_compute: self.bp_ag_compute,
                sp_compute: self.bp_sp_compute,
                sp_rounds: self.bp_sp_rounds,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub theorem1_instances: usize,
    pub theorem1_max_dim: usize,
    /// Extra explicit instance: a 1-D unit Gaussian with unit residual at
    /// this λ. Must lie in (0, 1].
    pub lambda: Option<f64>,
    pub devices: Vec<usize>,
    pub tokens: usize,
    pub dim: usize,
    pub sigma: f64,
    pub trials: usize,
    /// Relative tolerance on the `1/N` ratio.
    pub tolerance: f64,
    /// Noise scales whose ratios are reported but not asserted.
    pub report_sigmas: Vec<f64>,
    pub bound_devices: usize,
    pub bound_instances: usize,
    pub bound_samples: usize,
    /// Minimum fraction of coordinates inside the variance bound.
    pub bound_fraction: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            theorem1_instances: 200,
            theorem1_max_dim: 8,
            lambda: None,
            devices: vec![1, 2, 4, 8],
            tokens: 16,
            dim: 8,
            sigma: 1e-3,
            trials: 10_000,
            tolerance: 0.2,
            report_sigmas: vec![1e-2],
            bound_devices: 4,
            bound_instances: 16,
            bound_samples: 10_000,
            bound_fraction: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskName,
    pub tokens: usize,
    pub classes: usize,
    pub clusters: usize,
    pub input_dim: usize,
    pub noise: f64,
    pub vocab: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: TaskName::BlobClassify,
            tokens: 16,
            classes: 4,
            clusters: 4,
            input_dim: 8,
            noise: 0.8,
            vocab: 32,
            train_size: 256,
            val_size: 256,
        }
    }
}

impl TaskSection {
    pub fn to_task(&self, seed: u64) -> SyntheticTask {
        SyntheticTask {
            kind: match self.kind {
                TaskName::BlobClassify => TaskKind::BlobClassify {
                    classes: self.classes,
                    clusters: self.clusters,
                    input_dim: self.input_dim,
                    noise: self.noise,
                },
                TaskName::ToyLm => TaskKind::ToyLm { vocab: self.vocab },
            },
            tokens: self.tokens,
            train_size: self.train_size,
            val_size: self.val_size,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub devices: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub freeze_residuals: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            beta: t.beta,
            lambda: t.lambda,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            devices: t.devices,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            freeze_residuals: t.freeze_residuals,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64, cls_mode: ClassTokenMode) -> TrainConfig {
        TrainConfig {
            beta: self.beta,
            lambda: self.lambda,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            cls_mode,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            devices: self.devices,
            exact: false,
            freeze_residuals: self.freeze_residuals,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    pub cls_modes: Vec<ClsModeName>,
    pub groups: Vec<usize>,
    /// Training seeds per cell. The top-level seed drives the task data.
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            lambdas: vec![0.0, 0.1, 0.3, 1.0],
            betas: vec![5e-4],
            cls_modes: vec![ClsModeName::Single, ClsModeName::Distributed],
            groups: vec![1],
            seeds: vec![0, 1, 2],
        }
    }
}

/// Applies one `key=value` override. The value is read as a TOML value when
/// it parses as one, otherwise as a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Parses, overrides and schema-checks a config document.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("parse error: {e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e| CliError::Config(format!("schema error: {e}")))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    if cfg.threads == 0 {
        return Err(CliError::Config("threads must be at least 1".into()));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

impl ExperimentConfig {
    /// Canonical TOML of the effective config (defaults filled in).
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn sha256(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_takes_defaults() {
        let c = parse_config("schema_version = 1\n", &[]).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.infer, InferSection::default());
        assert_eq!(c.verify.devices, vec![1, 2, 4, 8]);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(matches!(parse_config("schema_version = 1\nfoo = 2\n", &[]), Err(CliError::Config(_))));
        assert!(matches!(
            parse_config("schema_version = 1\n[model]\nlayerz = 2\n", &[]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(parse_config("schema_version = 2\n", &[]), Err(CliError::Config(_))));
        assert!(matches!(parse_config("seed = 1\n", &[]), Err(CliError::Config(_))));
        assert!(matches!(parse_config("schema_version = [\n", &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_apply_before_validation() {
        let c = parse_config(
            "schema_version = 1\n",
            &[
                "infer.devices=2".into(),
                "bench.bandwidths_mbps=[10, 20]".into(),
                "model.cls_mode=single".into(),
                "output_dir=elsewhere".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.infer.devices, 2);
        assert_eq!(c.bench.bandwidths_mbps, vec![10.0, 20.0]);
        assert_eq!(c.model.cls_mode, ClsModeName::Single);
        assert_eq!(c.output_dir, PathBuf::from("elsewhere"));
        assert!(parse_config("schema_version = 1\n", &["infer.bogus=1".into()]).is_err());
        assert!(parse_config("schema_version = 1\n", &["novalue".into()]).is_err());
    }

    #[test]
    fn hash_is_stable_over_equivalent_documents() {
        let a = parse_config("schema_version = 1\nseed = 3\n", &[]).unwrap();
        let b = parse_config("seed = 3\nschema_version = 1\n[infer]\ndevices = 4\n", &[]).unwrap();
        assert_eq!(a.sha256(), b.sha256());
        let c = parse_config("schema_version = 1\nseed = 4\n", &[]).unwrap();
        assert_ne!(a.sha256(), c.sha256());
    }
}
