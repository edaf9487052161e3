use std::path::PathBuf;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::data::{inject_label_noise, load_idx, make_blobs, BlobSpec, Dataset};
use crate::contsparse::CsConfig;
use crate::error::{Error, Result};
use crate::hessian::CurvatureConfig;
use crate::imp::ImpConfig;
use crate::masking::{PruneCriterion, Scope};
use crate::nn::{Activation, Mlp, MlpSpec};
use crate::optim::{OptimizerConfig, OptimizerKind, RegularizerConfig, RegularizerKind};
use crate::pacbayes::{BoundConfig, PosteriorFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RecipeName {
    LrSweep,
    RegularizerSweep,
    Flatness,
    ParamDist,
}

impl RecipeName {
    pub fn as_str(self) -> &'static str {
        match self {
            RecipeName::LrSweep => "lr_sweep",
            RecipeName::RegularizerSweep => "regularizer_sweep",
            RecipeName::Flatness => "flatness",
            RecipeName::ParamDist => "param_dist",
        }
    }
}

/// Hidden widths; input and output widths come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 32],
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input: usize, classes: usize) -> MlpSpec {
        let mut widths = vec![input];
        widths.extend(&self.hidden);
        widths.push(classes);
        MlpSpec::new(widths, self.activation)
    }

    pub fn build(&self, data: &Dataset) -> Result<Mlp> {
        Mlp::new(self.spec(data.dim(), data.classes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "ten")]
    pub classes: usize,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

fn ten() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Blobs(BlobSpec),
    Idx(IdxConfig),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Blobs(BlobSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSettings {
    pub prune_fraction: f64,
    pub target_sparsity: f64,
    pub rounds: Option<usize>,
    pub criterion: PruneCriterion,
    pub rewind_step: u64,
    pub prune_biases: bool,
    pub scope: Scope,
}

impl Default for PruneSettings {
    fn default() -> Self {
        let d = ImpConfig::default();
        PruneSettings {
            prune_fraction: d.prune_fraction,
            target_sparsity: d.target_sparsity,
            rounds: d.rounds,
            criterion: d.criterion,
            rewind_step: d.rewind_step,
            prune_biases: d.prune_biases,
            scope: d.scope,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CsSettings {
    pub eta_pen: f64,
    pub beta0: f64,
    pub beta_final: f64,
    pub s_init: f64,
    pub threshold: f64,
    pub gate_lr: f64,
    /// Attach a spike-and-slab bound to the ticket.
    pub bound: bool,
}

impl Default for CsSettings {
    fn default() -> Self {
        let d = CsConfig::default();
        CsSettings {
            eta_pen: d.eta_pen,
            beta0: d.beta0,
            beta_final: d.beta_final,
            s_init: d.s_init,
            threshold: d.threshold,
            gate_lr: d.gate_lr,
            bound: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub learning_rates: Vec<f64>,
    /// Label-noise fractions crossed with the learning-rate grid.
    pub label_noise: Vec<f64>,
    pub reg_kinds: Vec<RegularizerKind>,
    pub reg_lambdas: Vec<f64>,
    pub optimizers: Vec<OptimizerKind>,
    pub quantiles: Vec<f64>,
    /// Compute bounds for every learning-rate sweep ticket.
    pub bounds: bool,
    pub families: Vec<PosteriorFamily>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            learning_rates: vec![0.003, 0.01, 0.03, 0.1, 0.3],
            label_noise: vec![0.0, 0.2],
            reg_kinds: vec![RegularizerKind::L2Init, RegularizerKind::L2Norm],
            reg_lambdas: vec![0.0, 1e-4, 1e-3, 1e-2],
            optimizers: vec![OptimizerKind::Sgd, OptimizerKind::Sam, OptimizerKind::Nvrm],
            quantiles: vec![0.2, 0.4, 0.6, 0.8],
            bounds: true,
            families: PosteriorFamily::ALL.to_vec(),
        }
    }
}

/// One experiment: model, data, training and analysis settings and the
/// seeds to run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub recipe: RecipeName,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Fraction of training labels flipped for single runs.
    pub label_noise: f64,
    pub optimizer: OptimizerConfig,
    pub regularizer: RegularizerConfig,
    pub imp: PruneSettings,
    pub cs: CsSettings,
    pub bound: BoundConfig,
    pub hessian: CurvatureConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            recipe: RecipeName::LrSweep,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            label_noise: 0.0,
            optimizer: OptimizerConfig::default(),
            regularizer: RegularizerConfig::default(),
            imp: PruneSettings::default(),
            cs: CsSettings::default(),
            bound: BoundConfig::default(),
            hessian: CurvatureConfig::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// JSON with every default materialized.
    pub fn resolved_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn schema_json() -> String {
        serde_json::to_string_pretty(&schemars::schema_for!(ExperimentConfig)).expect("schema serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let noise_ok = |f: f64| (0.0..1.0).contains(&f);
        if !noise_ok(self.label_noise) || !self.sweep.label_noise.iter().all(|&f| noise_ok(f)) {
            return Err(Error::Config("label noise fractions must be in [0, 1)".into()));
        }
        if !self.sweep.learning_rates.iter().all(|&lr| lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config("sweep learning rates must be positive".into()));
        }
        if !self.sweep.reg_lambdas.iter().all(|&l| l >= 0.0 && l.is_finite()) {
            return Err(Error::Config("regularizer strengths must be >= 0".into()));
        }
        if !self.sweep.quantiles.iter().all(|q| (0.0..=1.0).contains(q)) {
            return Err(Error::Config("quantiles must be in [0, 1]".into()));
        }
        self.imp_config(self.seeds[0], self.optimizer.lr, self.regularizer, self.optimizer.kind)
            .validate()?;
        self.cs_config(self.seeds[0], self.cs.eta_pen).validate()?;
        self.bound.validate()?;
        if self.hessian.trace_samples < 2 || self.hessian.slice_points < 2 {
            return Err(Error::Config("hessian needs trace_samples >= 2 and slice_points >= 2".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64, lr: f64, kind: OptimizerKind) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            lr,
            seed,
            ..self.optimizer.clone()
        }
    }

    pub fn imp_config(&self, seed: u64, lr: f64, reg: RegularizerConfig, kind: OptimizerKind) -> ImpConfig {
        let p = &self.imp;
        ImpConfig {
            prune_fraction: p.prune_fraction,
            target_sparsity: p.target_sparsity,
            rounds: p.rounds,
            criterion: p.criterion,
            rewind_step: p.rewind_step,
            prune_biases: p.prune_biases,
            scope: p.scope,
            train: self.train_config(seed, lr, kind),
            regularizer: reg,
            seed,
        }
    }

    pub fn cs_config(&self, seed: u64, eta_pen: f64) -> CsConfig {
        let c = &self.cs;
        CsConfig {
            eta_pen,
            beta0: c.beta0,
            beta_final: c.beta_final,
            s_init: c.s_init,
            threshold: c.threshold,
            gate_lr: c.gate_lr,
            prune_biases: self.imp.prune_biases,
            scope: self.imp.scope,
            train: self.train_config(seed, self.optimizer.lr, OptimizerKind::Sgd),
            bound: c.bound.then(|| self.bound_config(seed)),
            seed,
        }
    }

    pub fn bound_config(&self, seed: u64) -> BoundConfig {
        BoundConfig {
            seed,
            scope: self.imp.scope,
            ..self.bound.clone()
        }
    }

    /// Clean dataset described by `data`.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataConfig::Blobs(spec) => make_blobs(spec),
            DataConfig::Idx(c) => {
                let (train, p1) = load_idx(&c.train_images, &c.train_labels, c.classes, c.train_limit)?;
                let (test, p2) = load_idx(&c.test_images, &c.test_labels, c.classes, c.test_limit)?;
                Dataset::new(train, test, format!("train={p1};test={p2}"))
            }
        }
    }

    /// Seed used for label flips; shared by every job so all seeds see the
    /// same corrupted training set.
    pub fn noise_seed(&self) -> u64 {
        match &self.data {
            DataConfig::Blobs(spec) => spec.seed,
            DataConfig::Idx(_) => 0,
        }
    }

    /// Dataset with `fraction` of its training labels flipped, and the
    /// flipped indices.
    pub fn noisy_dataset(&self, clean: &Dataset, fraction: f64) -> Result<(Dataset, Vec<usize>)> {
        inject_label_noise(clean, fraction, self.noise_seed())
    }
}
