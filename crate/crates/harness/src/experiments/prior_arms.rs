//! Experiments comparing the learned prior with isotropic priors centred at
//! zero and at the source weights, plus the prior-learning and bound-report
//! drivers.

use kronprior::curvature::fisher;
use kronprior::data::Dataset;
use kronprior::gaussdist::{LayerGaussian, NetworkGaussian, Precision};
use kronprior::kronalg::KronFactored;
use kronprior::laplace::{learn_prior, map_train, metrics, predictive, LearnedPrior, Metrics, PriorConfig, TrainConfig};
use kronprior::net::{MlpArchitecture, Params};
use kronprior::pacbayes::{true_bound_mc, whiten, BoundReport, CurvatureScales};

use crate::config::ExperimentConfig;
use crate::datagen::generate_transfer_pair;
use crate::error::{HarnessError, Result};
use crate::experiments::{architecture, choose_scales, fmt, mean, rng, split_target, to_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Learned,
    IsoZero,
    IsoPretrained,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Learned, Arm::IsoZero, Arm::IsoPretrained];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Learned => "learned",
            Arm::IsoZero => "iso_zero",
            Arm::IsoPretrained => "iso_pretrained",
        }
    }
}

fn prior_config(cfg: &ExperimentConfig, train: TrainConfig) -> PriorConfig {
    PriorConfig {
        train,
        fisher: cfg.fisher,
        epsilon: cfg.epsilon,
        scale_opt: cfg.scale_opt,
        ..PriorConfig::default()
    }
}

/// Source-side quantities shared by every arm of one seed.
pub struct ArmSetup {
    pub arch: MlpArchitecture,
    pub learned: NetworkGaussian,
    pub init: Params,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub train_cfg: TrainConfig,
}

pub fn arm_setup(cfg: &ExperimentConfig, seed: u64) -> Result<ArmSetup> {
    let pair = generate_transfer_pair(&cfg.dataset, seed)?;
    let arch = architecture(cfg, pair.target.dim(), pair.target.num_classes)?;
    let init = arch.init(&mut rng(seed, 50));
    let train_cfg = TrainConfig { seed, ..cfg.train };
    let learned = learn_prior(&arch, &init, &pair.source, cfg.gamma, &prior_config(cfg, train_cfg))?.prior;
    let (train, val) = split_target(&pair.target, cfg.dataset.train_fraction, seed);
    Ok(ArmSetup {
        arch,
        learned,
        init,
        train,
        val,
        test: pair.test,
        train_cfg,
    })
}

/// Prior of an arm and the MAP starting point.
pub fn arm_prior(s: &ArmSetup, arm: Arm, gamma: f64) -> Result<(NetworkGaussian, Params)> {
    match arm {
        Arm::Learned => Ok((s.learned.clone(), s.learned.mean())),
        Arm::IsoZero => Ok((NetworkGaussian::isotropic(&s.arch.block_shapes(), gamma)?, s.init.clone())),
        Arm::IsoPretrained => {
            let layers = s
                .learned
                .layers
                .iter()
                .map(|l| {
                    let (m, n) = l.shape();
                    LayerGaussian::new(
                        l.mean.clone(),
                        Precision::Kron(KronFactored::scaled_identity(m, n, gamma)),
                        gamma,
                        1.0,
                    )
                })
                .collect::<kronprior::Result<_>>()?;
            Ok((NetworkGaussian::new(layers), s.learned.mean()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmRow {
    pub arm: Arm,
    /// `n_per_class` for the small-data sweep, `τ` for the cold-posterior sweep.
    pub setting: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

fn arm_rows_csv(first: &str, rows: &[ArmRow]) -> Result<String> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.arm.name().to_string(),
                fmt(r.setting),
                r.seed.to_string(),
                fmt(r.metrics.accuracy),
                fmt(r.metrics.nll),
                fmt(r.metrics.ece),
            ]
        })
        .collect();
    to_csv(&["arm", first, "seed", "accuracy", "nll", "ece"], &body)
}

pub fn small_data_csv(rows: &[ArmRow]) -> Result<String> {
    arm_rows_csv("n_per_class", rows)
}

pub fn cold_posterior_csv(rows: &[ArmRow]) -> Result<String> {
    arm_rows_csv("tau", rows)
}

/// Accuracy as the number of target examples per class grows.
pub fn small_data(cfg: &ExperimentConfig) -> Result<Vec<ArmRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let s = arm_setup(cfg, seed)?;
        for &n in &cfg.n_per_class {
            let sub = s.train.per_class(n);
            for arm in Arm::ALL {
                let (prior, init) = arm_prior(&s, arm, cfg.gamma)?;
                let theta = map_train(&s.arch, &init, &sub, None, &prior, &s.train_cfg)?.params;
                let est = fisher(&s.arch, &theta, &sub, &cfg.fisher)?;
                let spectrum = whiten(&est.total_blocks(), &prior, &theta)?;
                let val = (!s.val.is_empty()).then_some(&s.val);
                let (scales, _) = choose_scales(cfg, cfg.scales, &s.arch, &spectrum, val, est.data_nll, sub.len(), seed)?;
                let posterior = spectrum.posterior(&scales)?;
                let probs = predictive(&s.arch, &posterior, &s.test.inputs, cfg.n_samples, seed)?;
                rows.push(ArmRow {
                    arm,
                    setting: n as f64,
                    seed,
                    metrics: metrics(&probs, &s.test.labels)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Test accuracy over the temperature grid with `α = β = 1`. Training uses
/// `dataset.subset_per_class` examples per class when set.
pub fn cold_posterior(cfg: &ExperimentConfig) -> Result<Vec<ArmRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let s = arm_setup(cfg, seed)?;
        let train = match cfg.dataset.subset_per_class {
            Some(n) => s.train.per_class(n),
            None => s.train.clone(),
        };
        for arm in Arm::ALL {
            let (prior, init) = arm_prior(&s, arm, cfg.gamma)?;
            let theta = map_train(&s.arch, &init, &train, None, &prior, &s.train_cfg)?.params;
            let est = fisher(&s.arch, &theta, &train, &cfg.fisher)?;
            let spectrum = whiten(&est.total_blocks(), &prior, &theta)?;
            for &tau in &cfg.tau_grid {
                let scales = CurvatureScales::shared(spectrum.num_layers(), 1.0, 1.0, tau);
                let posterior = spectrum.posterior(&scales)?;
                let probs = predictive(&s.arch, &posterior, &s.test.inputs, cfg.n_samples, seed)?;
                rows.push(ArmRow {
                    arm,
                    setting: tau,
                    seed,
                    metrics: metrics(&probs, &s.test.labels)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Temperature with the highest seed-mean accuracy for `arm`; ties go to
/// the largest temperature.
pub fn best_tau(rows: &[ArmRow], arm: Arm) -> Option<f64> {
    let mut taus: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(|r| r.setting).collect();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let mut best: Option<(f64, f64)> = None;
    for tau in taus {
        let acc: Vec<f64> = rows
            .iter()
            .filter(|r| r.arm == arm && r.setting == tau)
            .map(|r| r.metrics.accuracy)
            .collect();
        let m = mean(&acc);
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((tau, m));
        }
    }
    best.map(|b| b.0)
}

/// Seed-mean accuracy of an arm at one setting.
pub fn mean_accuracy(rows: &[ArmRow], arm: Arm, setting: f64) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.arm == arm && r.setting == setting)
        .map(|r| r.metrics.accuracy)
        .collect();
    mean(&v)
}

/// Learns the prior from the source task of the first seed.
pub fn learn_prior_driver(cfg: &ExperimentConfig, seed: u64) -> Result<LearnedPrior> {
    let pair = generate_transfer_pair(&cfg.dataset, seed)?;
    let arch = architecture(cfg, pair.source.dim(), pair.source.num_classes)?;
    let init = arch.init(&mut rng(seed, 50));
    let train_cfg = TrainConfig { seed, ..cfg.train };
    Ok(learn_prior(&arch, &init, &pair.source, cfg.gamma, &prior_config(cfg, train_cfg))?)
}

/// MAP under a stored prior on the target task, scale selection and a
/// report with Monte-Carlo true bounds.
pub fn bound_report_driver(cfg: &ExperimentConfig, seed: u64) -> Result<BoundReport> {
    let path = cfg
        .prior_checkpoint
        .as_ref()
        .ok_or_else(|| HarnessError::Config("bound-report needs prior_checkpoint".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let lp = LearnedPrior::from_json(&text).map_err(|e| HarnessError::Config(format!("bad prior checkpoint: {e}")))?;
    let pair = generate_transfer_pair(&cfg.dataset, seed)?;
    let arch = architecture(cfg, pair.target.dim(), pair.target.num_classes)?;
    if lp.prior.shapes() != arch.block_shapes() {
        return Err(HarnessError::Config(format!(
            "prior checkpoint has block shapes {:?}, architecture needs {:?}",
            lp.prior.shapes(),
            arch.block_shapes()
        )));
    }
    let (train, val) = split_target(&pair.target, cfg.dataset.train_fraction, seed);
    let train_cfg = TrainConfig { seed, ..cfg.train };
    let val_opt = (!val.is_empty()).then_some(&val);
    let theta = map_train(&arch, &lp.prior.mean(), &train, val_opt, &lp.prior, &train_cfg)?.params;
    let est = fisher(&arch, &theta, &train, &cfg.fisher)?;
    let spectrum = whiten(&est.total_blocks(), &lp.prior, &theta)?;
    let (scales, mut report) = choose_scales(cfg, cfg.scales, &arch, &spectrum, val_opt, est.data_nll, train.len(), seed)?;
    let posterior = spectrum.posterior(&scales)?;
    report.mc = Some(true_bound_mc(&arch, &posterior, &spectrum.prior(), &train, cfg.n_samples, cfg.epsilon, seed)?);
    report.prior_compression_residual = lp.max_residual();
    Ok(report)
}
