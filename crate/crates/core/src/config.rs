//! JSON experiment configuration. Unknown keys are rejected; every
//! omitted key takes the default listed in the README.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algos::{EigenSelection, StepDecay, TrainConfig};
use crate::error::{Error, Result};
use crate::mlp::{Activation, LossKind, MlpSpec};
use crate::tasks::{DigitSource, DEFAULT_ANGLES};

pub const DEFAULT_SEEDS: [u64; 5] = [11, 13, 21, 33, 55];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetConfig,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetConfig {
    Toy {
        #[serde(default = "default_toy_n")]
        n_per_class: usize,
    },
    Rotated {
        #[serde(default = "default_source")]
        source: DigitSource,
        #[serde(default = "default_angles")]
        angles: Vec<f64>,
        #[serde(default = "default_downscale")]
        downscale: usize,
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
    Split {
        #[serde(default = "default_source")]
        source: DigitSource,
        #[serde(default = "default_classes_per_task")]
        classes_per_task: usize,
        #[serde(default = "default_downscale")]
        downscale: usize,
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
}

fn default_toy_n() -> usize {
    100
}
fn default_source() -> DigitSource {
    DigitSource::Idx {
        root: None,
        allow_synthetic_fallback: true,
    }
}
fn default_angles() -> Vec<f64> {
    DEFAULT_ANGLES.to_vec()
}
fn default_downscale() -> usize {
    14
}
fn default_n_train() -> usize {
    2000
}
fn default_n_test() -> usize {
    500
}
fn default_classes_per_task() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    SgdDagger,
    Ogd,
    OgdGtl,
    Gpm,
    Mask,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::SgdDagger => "sgd_dagger",
            Algorithm::Ogd => "ogd",
            Algorithm::OgdGtl => "ogd_gtl",
            Algorithm::Gpm => "gpm",
            Algorithm::Mask => "mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// `None` means on for every algorithm except GPM.
    pub use_bias: Option<bool>,
    pub loss: LossKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![5, 5],
            activation: Activation::Relu,
            use_bias: None,
            loss: LossKind::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSchedule {
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub lr_schedule: Option<StepDecay>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Task 1.
    pub first: TaskSchedule,
    /// Tasks 2..T; `None` reuses `first`.
    pub rest: Option<TaskSchedule>,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            first: TaskSchedule {
                learning_rate: 0.01,
                epochs: 5,
                lr_schedule: None,
            },
            rest: None,
            batch_size: 10,
        }
    }
}

impl TrainingConfig {
    pub fn for_task(&self, t: usize, seed: u64) -> TrainConfig {
        let s = if t == 1 { &self.first } else { self.rest.as_ref().unwrap_or(&self.first) };
        TrainConfig {
            learning_rate: s.learning_rate,
            epochs: s.epochs,
            batch_size: self.batch_size,
            seed: seed.wrapping_mul(1000).wrapping_add(t as u64),
            lr_schedule: s.lr_schedule.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Spectral-energy cut for SGD† and GPM.
    pub epsilon: f64,
    /// Fixed eigenvector count for SGD†; overrides `epsilon` when set.
    pub k: Option<usize>,
    /// Samples per task offered to OGD and GPM.
    pub sample_cap: usize,
    /// Fraction of parameters each task owns under masking.
    pub mask_fraction: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            k: None,
            sample_cap: 200,
            mask_fraction: 0.2,
        }
    }
}

impl MemoryConfig {
    pub fn selection(&self) -> EigenSelection {
        match self.k {
            Some(k) => EigenSelection::Fixed(k),
            None => EigenSelection::Energy(self.epsilon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Dense Hessians at every task optimum, needed by every
    /// second-order metric.
    pub hessians: bool,
    /// Training samples the Hessians, gradients and Taylor losses use.
    pub hessian_samples: usize,
    /// Extra Taylor errors with rank-`r` Hessians.
    pub taylor_ranks: Vec<usize>,
    pub block_diagonality: bool,
    pub similarity: bool,
    /// `λ`-fractions for the effective-rank table; empty disables it.
    pub rank_fractions: Vec<f64>,
    pub save_checkpoints: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            hessians: true,
            hessian_samples: 1000,
            taylor_ranks: Vec::new(),
            block_diagonality: false,
            similarity: false,
            rank_fractions: Vec::new(),
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn use_bias(&self) -> bool {
        self.network.use_bias.unwrap_or(self.algorithm != Algorithm::Gpm)
    }

    pub fn n_tasks(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Toy { .. } => 3,
            DatasetConfig::Rotated { angles, .. } => angles.len(),
            DatasetConfig::Split { classes_per_task, .. } => 10 / (*classes_per_task).max(1),
        }
    }

    pub fn input_and_classes(&self) -> (usize, usize) {
        match &self.dataset {
            DatasetConfig::Toy { .. } => (2, 2),
            DatasetConfig::Rotated { downscale, .. } => (downscale * downscale, 10),
            DatasetConfig::Split {
                downscale,
                classes_per_task,
                ..
            } => (downscale * downscale, *classes_per_task),
        }
    }

    pub fn spec(&self) -> Result<MlpSpec> {
        let (d, c) = self.input_and_classes();
        let mut widths = vec![d];
        widths.extend(&self.network.hidden);
        widths.push(c);
        MlpSpec::new(widths, self.network.activation, self.use_bias(), self.network.loss)
    }

    /// Every problem found, each prefixed with its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.seeds.is_empty() {
            p.push("seeds: must list at least one seed".to_string());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            p.push("seeds: duplicates are not allowed".to_string());
        }
        match &self.dataset {
            DatasetConfig::Toy { n_per_class } => {
                if *n_per_class < 10 {
                    p.push(format!("dataset.n_per_class: must be at least 10, got {n_per_class}"));
                }
            }
            DatasetConfig::Rotated {
                angles,
                downscale,
                n_train,
                n_test,
                ..
            } => {
                if angles.is_empty() {
                    p.push("dataset.angles: must list at least one angle".into());
                }
                if angles.iter().any(|a| !a.is_finite()) {
                    p.push("dataset.angles: must be finite".into());
                }
                check_image(&mut p, *downscale, *n_train, *n_test);
            }
            DatasetConfig::Split {
                classes_per_task,
                downscale,
                n_train,
                n_test,
                ..
            } => {
                if *classes_per_task == 0 || 10 % classes_per_task != 0 {
                    p.push(format!("dataset.classes_per_task: must divide 10, got {classes_per_task}"));
                }
                check_image(&mut p, *downscale, *n_train, *n_test);
            }
        }
        if self.network.hidden.contains(&0) {
            p.push("network.hidden: widths must be positive".into());
        }
        if self.algorithm == Algorithm::Gpm && self.network.use_bias == Some(true) {
            p.push("network.use_bias: gpm requires a network without bias".into());
        }
        let tr = &self.training;
        if tr.batch_size == 0 {
            p.push("training.batch_size: must be positive".into());
        }
        check_schedule(&mut p, "training.first", &tr.first);
        if let Some(r) = &tr.rest {
            check_schedule(&mut p, "training.rest", r);
        }
        let m = &self.memory;
        if !(0.0..=1.0).contains(&m.epsilon) {
            p.push(format!("memory.epsilon: must lie in [0, 1], got {}", m.epsilon));
        }
        if m.sample_cap == 0 {
            p.push("memory.sample_cap: must be positive".into());
        }
        if !(m.mask_fraction > 0.0 && m.mask_fraction <= 1.0) {
            p.push(format!("memory.mask_fraction: must lie in (0, 1], got {}", m.mask_fraction));
        } else if self.algorithm == Algorithm::Mask && m.mask_fraction * self.n_tasks() as f64 > 1.0 + 1e-12 {
            p.push(format!(
                "memory.mask_fraction: {} per task over {} tasks exceeds the parameter budget",
                m.mask_fraction,
                self.n_tasks()
            ));
        }
        let dg = &self.diagnostics;
        if dg.hessian_samples == 0 {
            p.push("diagnostics.hessian_samples: must be positive".into());
        }
        if !dg.hessians
            && (!dg.taylor_ranks.is_empty() || dg.block_diagonality || dg.similarity || !dg.rank_fractions.is_empty())
        {
            p.push("diagnostics.hessians: the requested Hessian diagnostics need hessians = true".into());
        }
        if self.algorithm == Algorithm::SgdDagger && !dg.hessians {
            p.push("diagnostics.hessians: sgd_dagger needs hessians = true".into());
        }
        if dg.taylor_ranks.contains(&0) {
            p.push("diagnostics.taylor_ranks: ranks must be positive".into());
        }
        if dg.rank_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            p.push("diagnostics.rank_fractions: fractions must lie in (0, 1]".into());
        }
        if p.is_empty() {
            if let Err(e) = self.spec() {
                p.push(format!("network: {e}"));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Hex sha256 of the canonical JSON form, defaults filled in.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn default_out_dir(&self) -> PathBuf {
        let label = if self.name.is_empty() { self.algorithm.name() } else { &self.name };
        PathBuf::from("runs").join(format!("{label}-{}", &self.hash()[..12]))
    }
}

fn check_image(p: &mut Vec<String>, downscale: usize, n_train: usize, n_test: usize) {
    if downscale == 0 || downscale > 28 {
        p.push(format!("dataset.downscale: must lie in 1..=28, got {downscale}"));
    }
    if n_train == 0 {
        p.push("dataset.n_train: must be positive".into());
    }
    if n_test == 0 {
        p.push("dataset.n_test: must be positive".into());
    }
}

fn check_schedule(p: &mut Vec<String>, path: &str, s: &TaskSchedule) {
    if !(s.learning_rate >= 0.0 && s.learning_rate.is_finite()) {
        p.push(format!("{path}.learning_rate: must be finite and non-negative, got {}", s.learning_rate));
    }
    if s.epochs == 0 {
        p.push(format!("{path}.epochs: must be positive"));
    }
    if let Some(d) = &s.lr_schedule {
        if d.milestones.windows(2).any(|w| w[0] >= w[1]) {
            p.push(format!("{path}.lr_schedule.milestones: must be strictly increasing"));
        }
        if !(d.gamma > 0.0 && d.gamma.is_finite()) {
            p.push(format!("{path}.lr_schedule.gamma: must be positive, got {}", d.gamma));
        }
    }
}
