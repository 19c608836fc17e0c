//! JSON experiment configuration. Every section has defaults, so `{}` is a
//! valid config; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kronprior::curvature::FisherConfig;
use kronprior::kronalg::PowerConfig;
use kronprior::laplace::TrainConfig;
use kronprior::net::Activation;
use kronprior::pacbayes::ScaleOptConfig;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    KronBench,
    Ablation,
    SmallData,
    ColdPosterior,
    Continual,
    LearnPrior,
    BoundReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    GaussianBlobs,
    MoonsLike,
    #[default]
    RotatedTransferPair,
    MnistIdx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub classes: usize,
    pub dim: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub test_per_class: usize,
    /// Norm of the class means.
    pub spread: f64,
    pub noise: f64,
    /// Rotation between source and target, in degrees.
    pub angle_deg: f64,
    /// Fraction of the target data used for training; the rest validates.
    pub train_fraction: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub subset_per_class: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            generator: Generator::RotatedTransferPair,
            classes: 4,
            dim: 8,
            source_per_class: 500,
            target_per_class: 100,
            test_per_class: 250,
            spread: 4.0,
            noise: 1.0,
            angle_deg: 20.0,
            train_fraction: 0.9,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
            subset_per_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            hidden: vec![16, 16],
            activation: Activation::Tanh,
        }
    }
}

/// How posterior scales are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScalesMode {
    /// `α = β = τ = 1`.
    Fixed,
    /// Shared grid, selected by validation accuracy.
    #[default]
    Grid,
    McAllester,
    Catoni,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KronBenchSpec {
    pub sizes: Vec<usize>,
    pub scales: Vec<f64>,
    pub gammas: Vec<f64>,
    pub instances: usize,
    /// Term counts for the many-term sweep (`M = N = 5`).
    pub term_counts: Vec<usize>,
    pub power: PowerConfig,
}

impl Default for KronBenchSpec {
    fn default() -> Self {
        KronBenchSpec {
            sizes: vec![2, 5, 10, 20],
            scales: vec![1e-5, 1e-2, 1.0, 1e2, 1e4],
            gammas: vec![1e-10, 1e-6, 1e-3, 1.0],
            instances: 10,
            term_counts: (2..=9).collect(),
            power: PowerConfig {
                max_steps: 200,
                tol: 1e-10,
                ..PowerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinualSpec {
    pub tasks: usize,
    /// 1-based layers receiving lateral connections.
    pub lateral_layers: Vec<usize>,
}

impl Default for ContinualSpec {
    fn default() -> Self {
        ContinualSpec {
            tasks: 3,
            lateral_layers: vec![2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Optional; when present it must match the subcommand.
    pub experiment: Option<ExperimentKind>,
    pub dataset: DatasetSpec,
    pub architecture: ArchSpec,
    /// Precision of the isotropic prior `N(0, γ⁻¹ I)`.
    pub gamma: f64,
    pub tau_grid: Vec<f64>,
    pub scales: ScalesMode,
    pub epsilon: f64,
    pub seeds: Vec<u64>,
    /// Posterior draws for predictions and Monte-Carlo bounds.
    pub n_samples: usize,
    /// Posterior draws per point of the validation grid search.
    pub grid_samples: usize,
    pub n_per_class: Vec<usize>,
    pub train: TrainConfig,
    pub fisher: FisherConfig,
    pub scale_opt: ScaleOptConfig,
    pub kron_bench: KronBenchSpec,
    pub continual: ContinualSpec,
    /// Learned-prior checkpoint read by `bound-report`.
    pub prior_checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: None,
            dataset: DatasetSpec::default(),
            architecture: ArchSpec::default(),
            gamma: 1.0,
            tau_grid: (0..=8).map(|i| 10f64.powi(-i)).collect(),
            scales: ScalesMode::Grid,
            epsilon: kronprior::pacbayes::DEFAULT_EPSILON,
            seeds: (0..5).collect(),
            n_samples: 100,
            grid_samples: 8,
            n_per_class: vec![2, 4, 8, 16, 32],
            train: TrainConfig {
                lr: 5e-3,
                max_epochs: 150,
                ..TrainConfig::default()
            },
            fisher: FisherConfig::default(),
            scale_opt: ScaleOptConfig::default(),
            kron_bench: KronBenchSpec::default(),
            continual: ContinualSpec::default(),
            prior_checkpoint: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if self.tau_grid.is_empty() || self.tau_grid.iter().any(|t| !(*t > 0.0)) {
            return bad("tau_grid must be a non-empty list of positive values".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.n_samples == 0 || self.grid_samples == 0 {
            return bad("n_samples and grid_samples must be at least 1".into());
        }
        if self.architecture.hidden.iter().any(|&h| h == 0) {
            return bad("hidden widths must be positive".into());
        }
        if self.n_per_class.iter().any(|&n| n == 0) {
            return bad("n_per_class entries must be positive".into());
        }
        Ok(())
    }

    /// Checks the optional `experiment` field against the subcommand.
    pub fn expect_kind(&self, kind: ExperimentKind) -> Result<()> {
        match self.experiment {
            Some(k) if k != kind => Err(HarnessError::Config(format!(
                "config is for {k:?} but {kind:?} was requested"
            ))),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_uses_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"gama": 1.0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"dataset": {"colour": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"epsilon": 1.5}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"tau_grid": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"scales": "bogus"}"#).is_err());
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let c = ExperimentConfig::from_json(r#"{"experiment": "ablation"}"#).unwrap();
        assert!(c.expect_kind(ExperimentKind::Ablation).is_ok());
        assert!(c.expect_kind(ExperimentKind::KronBench).is_err());
    }
}
