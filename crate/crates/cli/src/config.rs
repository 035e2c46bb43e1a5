//! Run configuration shared by every subcommand.
//!
//! Values resolve in precedence order: built-in defaults, then the JSON
//! config file (`--config`), then the `GRAPHMASK_OUT` environment variable
//! (output root only), then command-line flags. The fully merged
//! configuration is embedded verbatim in every report the tool writes,
//! together with content hashes of the checkpoints involved and the seed
//! list, so each report doubles as a recipe for its own rerun.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use graphmask_core::baselines::gnn_explainer::GnnExplainerConfig;
use graphmask_core::baselines::information_bottleneck::IbConfig;
use graphmask_core::error::{Error, Result};
use graphmask_core::gates::HardConcrete;
use graphmask_core::gnn::{RgcnConfig, ToyTrainConfig};
use graphmask_core::graphmask::{GraphMaskConfig, NonAmortizedConfig};
use graphmask_core::graphs::{DatasetConfig, DatasetSplits, StarGraphExample};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Attribution methods, in default report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    GraphMask,
    NonAmortized,
    Erasure,
    GnnExplainer,
    Ig,
    Ib,
}

impl Method {
    pub fn all() -> Vec<Method> {
        vec![
            Method::GraphMask,
            Method::NonAmortized,
            Method::Erasure,
            Method::GnnExplainer,
            Method::Ig,
            Method::Ib,
        ]
    }

    /// Canonical name, used for report rows and attribution file names.
    pub fn as_str(self) -> &'static str {
        match self {
            Method::GraphMask => "graphmask",
            Method::NonAmortized => "nonamortized",
            Method::Erasure => "erasure",
            Method::GnnExplainer => "gnnexplainer",
            Method::Ig => "ig",
            Method::Ib => "ib",
        }
    }

    /// True for the two gate-classifier variants served by `explain`; the
    /// rest belong to the `baseline` subcommand.
    pub fn is_explain(self) -> bool {
        matches!(self, Method::GraphMask | Method::NonAmortized)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "graphmask" => Ok(Method::GraphMask),
            "nonamortized" => Ok(Method::NonAmortized),
            "erasure" => Ok(Method::Erasure),
            "gnnexplainer" => Ok(Method::GnnExplainer),
            "ig" => Ok(Method::Ig),
            "ib" => Ok(Method::Ib),
            other => Err(format!(
                "unknown method '{other}' (expected one of: graphmask, nonamortized, \
                 erasure, gnnexplainer, ig, ib)"
            )),
        }
    }
}

/// Dataset split selector for explain/baseline/evaluate targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn of<'a>(self, splits: &'a DatasetSplits) -> &'a [StarGraphExample] {
        match self {
            Split::Train => &splits.train,
            Split::Validation => &splits.validation,
            Split::Test => &splits.test,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split '{other}' (expected train, validation, or test)"
            )),
        }
    }
}

/// Every knob of a run. Paper-specified values keep their published
/// defaults (β = 0.03, δ = 1, τ = 1/3, stretch [-0.1, 1.1], location bias
/// c = 2, Adam 1e-4, RMSProp 1e-2); everything else is an artifact default
/// documented on the field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: dataset generation, model training, render sampling.
    pub seed: u64,
    /// Stability-study seeds; each retrains the gate classifier.
    pub seeds: Vec<u64>,

    // Dataset.
    /// Total examples across all three splits (10000/1000/1000 by default).
    pub count: usize,
    pub num_colors: usize,
    /// Split directory, relative paths resolve under `output_dir`.
    pub data_dir: PathBuf,

    // Model architecture.
    pub state_dim: usize,
    pub model_hidden_dim: usize,
    pub num_layers: usize,
    pub shared_weights: bool,

    // Model training.
    pub model_lr: f64,
    pub model_batch_size: usize,
    pub model_max_epochs: usize,
    pub target_accuracy: f64,

    // Checkpoints.
    pub model_checkpoint: PathBuf,
    pub classifier_checkpoint: PathBuf,
    pub ib_checkpoint: PathBuf,

    // Gate-classifier training.
    /// Divergence tolerance β.
    pub beta: f64,
    pub lr: f64,
    pub lambda_lr: f64,
    pub lambda_init: f64,
    /// Coefficient on the expected-L0 term of the gate objectives.
    pub penalty_scaling: f64,
    pub batch_size: usize,
    /// Epochs per layer-enablement stage (δ).
    pub delta_epochs: usize,
    pub max_epochs_after_full: usize,
    /// Gate MLP hidden width; defaults to the model state dimension.
    pub gate_hidden_dim: Option<usize>,
    /// Hard Concrete temperature τ.
    pub tau: f64,
    pub stretch_low: f64,
    pub stretch_high: f64,
    /// Location bias c.
    pub location_bias: f64,

    // Baselines.
    pub nonamortized_steps: usize,
    pub nonamortized_lr: f64,
    pub ig_steps: usize,
    pub ib_lr: f64,
    pub ib_beta: f64,
    pub ib_epochs: usize,
    pub ib_batch_size: usize,
    pub gnnexplainer_steps: usize,
    pub gnnexplainer_lr: f64,
    pub gnnexplainer_sparsity_weight: f64,
    pub gnnexplainer_entropy_weight: f64,

    // Evaluation.
    /// Binarization grid for soft methods, scanned in order with
    /// earliest-wins ties.
    pub thresholds: Vec<f64>,
    pub methods: Vec<Method>,
    pub degradation_fractions: Vec<f64>,
    pub degradation_resamples: usize,
    /// Test examples sampled for SVG rendering by the pipeline.
    pub render_count: usize,

    /// Output root for data, checkpoints, attributions, reports, renders.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            count: 12_000,
            num_colors: 6,
            data_dir: "data".into(),
            state_dim: 50,
            model_hidden_dim: 100,
            num_layers: 1,
            shared_weights: true,
            model_lr: 1e-4,
            model_batch_size: 32,
            model_max_epochs: 200,
            target_accuracy: 0.995,
            model_checkpoint: "checkpoints/model.json".into(),
            classifier_checkpoint: "checkpoints/gate-classifier.json".into(),
            ib_checkpoint: "checkpoints/ib-readout.json".into(),
            beta: 0.03,
            lr: 1e-4,
            lambda_lr: 1e-2,
            lambda_init: 0.0,
            penalty_scaling: 0.2,
            batch_size: 8,
            delta_epochs: 1,
            max_epochs_after_full: 50,
            gate_hidden_dim: None,
            tau: 1.0 / 3.0,
            stretch_low: -0.1,
            stretch_high: 1.1,
            location_bias: 2.0,
            nonamortized_steps: 300,
            nonamortized_lr: 1e-2,
            ig_steps: 50,
            ib_lr: 1e-4,
            ib_beta: 0.1,
            ib_epochs: 3,
            ib_batch_size: 32,
            gnnexplainer_steps: 200,
            gnnexplainer_lr: 1e-2,
            gnnexplainer_sparsity_weight: 0.4,
            gnnexplainer_entropy_weight: 0.1,
            thresholds: graphmask_core::baselines::threshold::threshold_grid().collect(),
            methods: Method::all(),
            degradation_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            degradation_resamples: 5,
            render_count: 6,
            output_dir: "runs".into(),
        }
    }
}

impl RunConfig {
    /// Parse a JSON config file. Unknown keys are rejected so typos fail
    /// loudly instead of silently keeping a default.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("malformed config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("dataset count must be positive".into()));
        }
        if self.num_colors < 2 {
            return Err(Error::Config(format!(
                "need at least two colors to pose a query, got {}",
                self.num_colors
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(&dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("duplicate stability seed {dup}")));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(&dup) = self.methods.iter().find(|m| !seen.insert(m.as_str())) {
            return Err(Error::Config(format!("duplicate method '{dup}'")));
        }
        if self.thresholds.is_empty() {
            return Err(Error::Config("threshold grid is empty".into()));
        }
        if let Some(&t) = self.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
        }
        if let Some(&f) = self
            .degradation_fractions
            .iter()
            .find(|f| !(0.0..=1.0).contains(*f))
        {
            return Err(Error::Config(format!("degradation fraction {f} outside [0, 1]")));
        }
        Ok(())
    }

    /// Resolve a configured path: absolute paths pass through, relative
    /// ones live under the output root.
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_dir.join(p)
        }
    }

    pub fn split_path(&self, split: Split) -> PathBuf {
        self.path(&self.data_dir.join(format!("{split}.jsonl")))
    }

    pub fn model_ckpt(&self) -> PathBuf {
        self.path(&self.model_checkpoint)
    }

    pub fn classifier_ckpt(&self) -> PathBuf {
        self.path(&self.classifier_checkpoint)
    }

    /// Per-seed classifier checkpoint used by the stability study.
    pub fn classifier_ckpt_for_seed(&self, seed: u64) -> PathBuf {
        let main = self.classifier_ckpt();
        let stem = main.file_stem().and_then(|s| s.to_str()).unwrap_or("gate-classifier");
        main.with_file_name(format!("{stem}-s{seed}.json"))
    }

    pub fn ib_ckpt(&self) -> PathBuf {
        self.path(&self.ib_checkpoint)
    }

    pub fn attributions_dir(&self) -> PathBuf {
        self.output_dir.join("attributions")
    }

    pub fn attribution_path(&self, method: Method) -> PathBuf {
        self.attributions_dir().join(format!("{method}.json"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }

    pub fn renders_dir(&self) -> PathBuf {
        self.output_dir.join("renders")
    }

    // Builders for the core config structs.

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            count: self.count,
            num_colors: self.num_colors,
            ..DatasetConfig::default()
        }
    }

    pub fn rgcn_config(&self) -> RgcnConfig {
        RgcnConfig {
            num_relations: self.num_colors,
            state_dim: self.state_dim,
            hidden_dim: self.model_hidden_dim,
            num_layers: self.num_layers,
            num_classes: 2,
            shared_weights: self.shared_weights,
        }
    }

    pub fn toy_train_config(&self) -> ToyTrainConfig {
        ToyTrainConfig {
            seed: self.seed,
            lr: self.model_lr,
            batch_size: self.model_batch_size,
            max_epochs: self.model_max_epochs,
            target_accuracy: self.target_accuracy,
        }
    }

    pub fn hard_concrete(&self) -> HardConcrete {
        HardConcrete {
            temperature: self.tau,
            stretch_low: self.stretch_low,
            stretch_high: self.stretch_high,
            location_bias: self.location_bias,
        }
    }

    pub fn graphmask_config(&self, seed: u64) -> GraphMaskConfig {
        GraphMaskConfig {
            seed,
            beta: self.beta,
            lr: self.lr,
            lambda_lr: self.lambda_lr,
            lambda_init: self.lambda_init,
            penalty_scaling: self.penalty_scaling,
            batch_size: self.batch_size,
            delta_epochs: self.delta_epochs,
            max_epochs_after_full: self.max_epochs_after_full,
            hidden_dim: self.gate_hidden_dim,
            hard_concrete: self.hard_concrete(),
        }
    }

    pub fn nonamortized_config(&self) -> NonAmortizedConfig {
        NonAmortizedConfig {
            seed: self.seed,
            beta: self.beta,
            lr: self.nonamortized_lr,
            lambda_lr: self.lambda_lr,
            lambda_init: self.lambda_init,
            penalty_scaling: self.penalty_scaling,
            steps: self.nonamortized_steps,
            hard_concrete: self.hard_concrete(),
        }
    }

    pub fn ib_config(&self) -> IbConfig {
        IbConfig {
            seed: self.seed,
            lr: self.ib_lr,
            beta: self.ib_beta,
            epochs: self.ib_epochs,
            batch_size: self.ib_batch_size,
            hidden_dim: self.gate_hidden_dim,
        }
    }

    pub fn gnnexplainer_config(&self) -> GnnExplainerConfig {
        GnnExplainerConfig {
            steps: self.gnnexplainer_steps,
            lr: self.gnnexplainer_lr,
            sparsity_weight: self.gnnexplainer_sparsity_weight,
            entropy_weight: self.gnnexplainer_entropy_weight,
            init_logit: 0.0,
        }
    }
}

/// Content hash of a checkpoint file in git's blob format
/// (`"blob {len}\0" + bytes`), digested with SHA-256 — the same value
/// `git hash-object` produces under its sha256 object format.
pub fn blob_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot hash checkpoint {}: {e}", path.display())))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    let digest = h.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// The provenance block embedded in every report: the merged config
/// verbatim, content hashes of the checkpoints the run depends on, and the
/// seed list.
pub fn provenance(
    cfg: &RunConfig,
    checkpoints: &[(String, PathBuf)],
    seeds: &[u64],
) -> Result<serde_json::Value> {
    let mut hashes = BTreeMap::new();
    for (name, path) in checkpoints {
        hashes.insert(name.clone(), blob_digest(path)?);
    }
    Ok(serde_json::json!({
        "config": cfg,
        "checkpoints": hashes,
        "seeds": seeds,
    }))
}

/// Parse "0..4" / "0..=4" (both inclusive) or a comma list "0,1,2".
pub fn parse_index_list(s: &str) -> std::result::Result<Vec<u64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err("empty list".into());
    }
    let range = |lo: &str, hi: &str| -> std::result::Result<Vec<u64>, String> {
        let lo: u64 = lo.trim().parse().map_err(|e| format!("bad range start '{lo}': {e}"))?;
        let hi: u64 = hi.trim().parse().map_err(|e| format!("bad range end '{hi}': {e}"))?;
        if hi < lo {
            return Err(format!("range {lo}..{hi} is empty"));
        }
        Ok((lo..=hi).collect())
    };
    if let Some((lo, hi)) = s.split_once("..=") {
        return range(lo, hi);
    }
    if let Some((lo, hi)) = s.split_once("..") {
        return range(lo, hi);
    }
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<u64>()
                .map_err(|e| format!("bad index '{part}': {e}"))
        })
        .collect()
}
