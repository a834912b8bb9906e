//! Experiment configuration: a TOML document with one table per concern.
//! Every key is optional and falls back to the default documented on its
//! field; unknown keys are rejected.

use std::path::{Path, PathBuf};

use ancl_core::analysis::GridExtents;
use ancl_core::losses::DEFAULT_TAU;
use ancl_core::tasks::BlobParams;
use ancl_core::trainer::AnalysisPlan;
use ancl_core::{ArchSpec, LossSpec, MethodId, Mode, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds to run; each seed draws its own data and initialization. Default `[0, 1, 2]`.
    pub seeds: Vec<u64>,
    /// Output directory. Default `ancl-out`.
    pub out: PathBuf,
    pub tasks: TaskSection,
    pub arch: ArchSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub grid: GridSection,
    pub analysis: AnalysisSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2],
            out: PathBuf::from("ancl-out"),
            tasks: TaskSection::default(),
            arch: ArchSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            grid: GridSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

/// Gaussian-blob task stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// Default 5.
    pub tasks: usize,
    /// Default 2.
    pub classes_per_task: usize,
    /// Samples per class before the 70/10/20 split. Default 100.
    pub per_class: usize,
    /// Input dimension. Default 8.
    pub dim: usize,
    /// Noise standard deviation around each class mean. Default 1.5.
    pub spread: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection { tasks: 5, classes_per_task: 2, per_class: 100, dim: 8, spread: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// One head per task, selected by task identity (task-incremental).
    Multi,
    /// One head over all classes (class-incremental).
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    /// Hidden layer widths. Default `[8, 4]`.
    pub hidden: Vec<usize>,
    /// Default `multi`.
    pub head: HeadKind,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection { hidden: vec![8, 4], head: HeadKind::Multi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// `ewc`, `mas`, `lwf`, `lfl` or `icarl`. Default `ewc`.
    pub method: MethodId,
    /// `finetune`, `cl` or `ancl`. Default `finetune`.
    pub mode: Mode,
    /// Default 1.
    pub lambda: f64,
    /// Default 0.
    pub lambda_a: f64,
    /// Distillation temperature. Default 2.
    pub tau: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { method: MethodId::Ewc, mode: Mode::Finetune, lambda: 1.0, lambda_a: 0.0, tau: DEFAULT_TAU }
    }
}

/// Optimizer and schedule; defaults match [`TrainConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Default 0.05.
    pub lr: f64,
    /// Default 3.
    pub lr_factor: f64,
    /// Default 5.
    pub patience: usize,
    /// Default 1e-4.
    pub min_lr: f64,
    /// Default 0.9.
    pub momentum: f64,
    /// Default 32.
    pub batch_size: usize,
    /// Default 200.
    pub max_epochs: usize,
    /// Exemplars per class; required by `icarl`. Default unset.
    pub replay: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            lr_factor: t.lr_factor,
            patience: t.patience,
            min_lr: t.min_lr,
            momentum: t.momentum,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            replay: t.replay,
        }
    }
}

/// Two-phase search grids for `gridsearch`. Both default to empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub lambdas: Vec<f64>,
    pub lambda_as: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Train the analysis networks during `run`. Default false.
    pub train: bool,
    /// Task under study (0-based, at least 1). Default 1.
    pub task: usize,
    /// Candidate λ for the classic-objective search on `task`; empty uses
    /// `loss.lambda`. Default empty.
    pub lambdas: Vec<f64>,
    /// λ_a sweep. Default `[0.001, 0.01, 0.1, 1, 2, 4]`.
    pub lambda_a_grid: Vec<f64>,
    /// Read `lambda_a_grid` as multiples of λ. Default true.
    pub relative: bool,
    /// Emit weight distances. Default true.
    pub wd: bool,
    /// Emit CKA similarities. Default true.
    pub cka: bool,
    /// Emit the accuracy landscape and projections. Default true.
    pub landscape: bool,
    /// Landscape grid points per axis. Default 25.
    pub resolution: usize,
    /// Default `[-0.5, 1.5]`.
    pub x_range: [f64; 2],
    /// Default `[-0.5, 1.5]`.
    pub y_range: [f64; 2],
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let g = GridExtents::default();
        AnalysisSection {
            train: false,
            task: 1,
            lambdas: vec![],
            lambda_a_grid: vec![0.001, 0.01, 0.1, 1.0, 2.0, 4.0],
            relative: true,
            wd: true,
            cka: true,
            landscape: true,
            resolution: g.resolution,
            x_range: [g.x_min, g.x_max],
            y_range: [g.y_min, g.y_max],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// The fully defaulted configuration, as written next to the outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.seeds.is_empty() {
            return Err("at least one seed is required".into());
        }
        self.arch_spec().validate().map_err(|e| e.to_string())?;
        self.train_config(self.seeds[0]).validate().map_err(|e| e.to_string())?;
        let a = &self.analysis;
        if a.train || !a.lambdas.is_empty() {
            if a.task == 0 || a.task >= self.tasks.tasks {
                return Err(format!("analysis.task must lie in 1..{}, got {}", self.tasks.tasks, a.task));
            }
            if a.lambda_a_grid.is_empty() {
                return Err("analysis.lambda_a_grid must not be empty".into());
            }
        }
        if a.resolution < 2 {
            return Err(format!("analysis.resolution must be >= 2, got {}", a.resolution));
        }
        Ok(())
    }

    pub fn arch_spec(&self) -> ArchSpec {
        let t = &self.tasks;
        match self.arch.head {
            HeadKind::Multi => ArchSpec::multi_head(t.dim, self.arch.hidden.clone(), vec![t.classes_per_task; t.tasks]),
            HeadKind::Single => ArchSpec::single_head(t.dim, self.arch.hidden.clone(), t.classes_per_task * t.tasks),
        }
    }

    pub fn blob_params(&self, seed: u64) -> BlobParams {
        let t = &self.tasks;
        BlobParams {
            tasks: t.tasks,
            classes_per_task: t.classes_per_task,
            per_class: t.per_class,
            dim: t.dim,
            spread: t.spread,
            seed,
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        let l = &self.loss;
        LossSpec { method: l.method, mode: l.mode, lambda: l.lambda, lambda_a: l.lambda_a, tau: l.tau }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            spec: self.loss_spec(),
            lr: t.lr,
            lr_factor: t.lr_factor,
            patience: t.patience,
            min_lr: t.min_lr,
            momentum: t.momentum,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            seed,
            replay: t.replay,
        }
    }

    pub fn analysis_plan(&self) -> AnalysisPlan {
        AnalysisPlan {
            t: self.analysis.task,
            lambdas: self.analysis.lambdas.clone(),
            lambda_a_grid: self.analysis.lambda_a_grid.clone(),
            relative: self.analysis.relative,
        }
    }

    pub fn extents(&self) -> GridExtents {
        let a = &self.analysis;
        GridExtents {
            x_min: a.x_range[0],
            x_max: a.x_range[1],
            y_min: a.y_range[0],
            y_max: a.y_range[1],
            resolution: a.resolution,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_documented_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train_config(4), TrainConfig { seed: 4, spec: cfg.loss_spec(), ..TrainConfig::default() });
        assert_eq!(cfg.arch_spec().param_count(), 8 * 8 + 8 + 8 * 4 + 4 + 5 * (4 * 2 + 2));
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "seeds = [7]\n[loss]\nmethod = \"lwf\"\nmode = \"ancl\"\nlambda = 2.5\n[train]\nreplay = 3\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.loss.method, MethodId::Lwf);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("sedes = [1]").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1").is_err());
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml("[loss]\nmethod = \"icarl\"").is_err());
        assert!(ExperimentConfig::from_toml("[analysis]\ntrain = true\ntask = 0").is_err());
    }
}
