//! Five-rung bound ladder on a transfer pair: isotropic baseline, grid
//! search, learned prior, curvature scaling and frequentist projection.

use kronprior::curvature::fisher;
use kronprior::data::Dataset;
use kronprior::gaussdist::NetworkGaussian;
use kronprior::laplace::{learn_prior, map_train, PriorConfig, TrainConfig};
use kronprior::net::{MlpArchitecture, Params};
use kronprior::pacbayes::{
    best_grid_point, evaluate, frequentist_projection, gibbs_error, optimize_scales, true_bound_mc, whiten, BoundReport,
    CurvatureScales, McBound, Objective, WhitenedSpectrum,
};

use crate::config::ExperimentConfig;
use crate::datagen::generate_transfer_pair;
use crate::error::Result;
use crate::experiments::{architecture, fmt, mean, rng, split_target, std_dev, to_csv};

pub const HEADER: [&str; 8] = [
    "rung",
    "seed",
    "catoni",
    "mcallester",
    "true_catoni",
    "true_mcallester",
    "aer",
    "kl",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rung {
    Baseline,
    Grid,
    LearnedPrior,
    Curvature,
    Projection,
}

impl Rung {
    pub const ALL: [Rung; 5] = [Rung::Baseline, Rung::Grid, Rung::LearnedPrior, Rung::Curvature, Rung::Projection];

    pub fn name(self) -> &'static str {
        match self {
            Rung::Baseline => "baseline",
            Rung::Grid => "grid",
            Rung::LearnedPrior => "learned_prior",
            Rung::Curvature => "curvature",
            Rung::Projection => "projection",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RungResult {
    pub rung: Rung,
    pub seed: u64,
    pub scales: CurvatureScales,
    pub report: BoundReport,
    pub mc: McBound,
    /// Expected error rate of the posterior on the held-out test set.
    pub test_error: f64,
    pub test_error_se: f64,
}

/// Data, model and trained pieces shared between rungs of one seed.
pub struct SeedSetup {
    pub arch: MlpArchitecture,
    pub train: Dataset,
    pub val: Dataset,
    pub source: Dataset,
    pub test: Dataset,
    pub init: Params,
    pub train_cfg: TrainConfig,
}

pub fn setup(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let pair = generate_transfer_pair(&cfg.dataset, seed)?;
    let (train, val) = split_target(&pair.target, cfg.dataset.train_fraction, seed);
    let arch = architecture(cfg, pair.target.dim(), pair.target.num_classes)?;
    let init = arch.init(&mut rng(seed, 50));
    Ok(SeedSetup {
        arch,
        train,
        val,
        source: pair.source,
        test: pair.test,
        init,
        train_cfg: TrainConfig { seed, ..cfg.train },
    })
}

struct Fitted {
    spectrum: WhitenedSpectrum,
    data_nll: f64,
}

fn laplace_fit(cfg: &ExperimentConfig, s: &SeedSetup, theta: &Params, prior: &NetworkGaussian) -> Result<Fitted> {
    let est = fisher(&s.arch, theta, &s.train, &cfg.fisher)?;
    Ok(Fitted {
        spectrum: whiten(&est.total_blocks(), prior, theta)?,
        data_nll: est.data_nll,
    })
}

fn finish(
    cfg: &ExperimentConfig,
    s: &SeedSetup,
    rung: Rung,
    seed: u64,
    fit: &Fitted,
    scales: CurvatureScales,
) -> Result<RungResult> {
    let n = s.train.len();
    let mut report = evaluate(&fit.spectrum, &scales, fit.data_nll, n, cfg.epsilon)?;
    let posterior = fit.spectrum.posterior(&scales)?;
    let prior = fit.spectrum.prior();
    let mc_seed = seed.wrapping_mul(31).wrapping_add(rung as u64);
    let mc = true_bound_mc(&s.arch, &posterior, &prior, &s.train, cfg.n_samples, cfg.epsilon, mc_seed)?;
    let (test_error, test_error_se) = gibbs_error(&s.arch, &posterior, &s.test, cfg.n_samples, mc_seed ^ 0xabc)?;
    report.mc = Some(mc.clone());
    Ok(RungResult {
        rung,
        seed,
        scales,
        report,
        mc,
        test_error,
        test_error_se,
    })
}

/// Shared scales minimising the Catoni bound over the fixed grid.
fn grid_scales(cfg: &ExperimentConfig, fit: &Fitted, n: usize) -> Result<CurvatureScales> {
    Ok(best_grid_point(&fit.spectrum, fit.data_nll, n, cfg.epsilon, Objective::Catoni)?.0)
}

/// Scales minimising the Catoni bound, per layer.
fn curvature_scales(cfg: &ExperimentConfig, fit: &Fitted, n: usize) -> Result<CurvatureScales> {
    Ok(optimize_scales(&fit.spectrum, fit.data_nll, n, cfg.epsilon, Objective::Catoni, &cfg.scale_opt)?.scales)
}

/// All rungs up to and including `last` for one seed.
pub fn run_seed_until(cfg: &ExperimentConfig, seed: u64, last: Rung) -> Result<Vec<RungResult>> {
    let s = setup(cfg, seed)?;
    let n = s.train.len();
    let val_opt = (!s.val.is_empty()).then_some(&s.val);
    let mut out = Vec::new();

    let iso = NetworkGaussian::isotropic(&s.arch.block_shapes(), cfg.gamma)?;
    let theta = map_train(&s.arch, &s.init, &s.train, val_opt, &iso, &s.train_cfg)?.params;
    let fit = laplace_fit(cfg, &s, &theta, &iso)?;
    out.push(finish(cfg, &s, Rung::Baseline, seed, &fit, CurvatureScales::unit(fit.spectrum.num_layers()))?);
    if last == Rung::Baseline {
        return Ok(out);
    }
    let scales = grid_scales(cfg, &fit, n)?;
    out.push(finish(cfg, &s, Rung::Grid, seed, &fit, scales)?);
    if last == Rung::Grid {
        return Ok(out);
    }

    let prior_cfg = PriorConfig {
        train: s.train_cfg,
        fisher: cfg.fisher,
        epsilon: cfg.epsilon,
        scale_opt: cfg.scale_opt,
        ..PriorConfig::default()
    };
    let learned = learn_prior(&s.arch, &s.init, &s.source, cfg.gamma, &prior_cfg)?.prior;
    let theta = map_train(&s.arch, &learned.mean(), &s.train, val_opt, &learned, &s.train_cfg)?.params;
    let fit = laplace_fit(cfg, &s, &theta, &learned)?;
    let scales = grid_scales(cfg, &fit, n)?;
    out.push(finish(cfg, &s, Rung::LearnedPrior, seed, &fit, scales)?);
    if last == Rung::LearnedPrior {
        return Ok(out);
    }

    let scales = curvature_scales(cfg, &fit, n)?;
    // Temperature for the projection: geometric mean of the per-layer optimum.
    let log_tau = scales.layers.iter().map(|l| l.log_tau).sum::<f64>() / scales.layers.len() as f64;
    out.push(finish(cfg, &s, Rung::Curvature, seed, &fit, scales)?);
    if last == Rung::Curvature {
        return Ok(out);
    }

    let projected = frequentist_projection(
        &s.arch,
        &theta,
        &s.train,
        &learned,
        log_tau.exp(),
        cfg.epsilon,
        Objective::Catoni,
        &s.train_cfg,
    )?
    .params;
    let fit = laplace_fit(cfg, &s, &projected, &learned)?;
    let scales = curvature_scales(cfg, &fit, n)?;
    out.push(finish(cfg, &s, Rung::Projection, seed, &fit, scales)?);
    Ok(out)
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<RungResult>> {
    run_seed_until(cfg, seed, Rung::Projection)
}

pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RungResult>> {
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        all.extend(run_seed(cfg, seed)?);
    }
    Ok(all)
}

/// Seed-mean Catoni bound per rung, in ladder order.
pub fn mean_catoni(results: &[RungResult]) -> Vec<(Rung, f64)> {
    Rung::ALL
        .iter()
        .filter_map(|&r| {
            let v: Vec<f64> = results.iter().filter(|x| x.rung == r).map(|x| x.report.catoni).collect();
            (!v.is_empty()).then(|| (r, mean(&v)))
        })
        .collect()
}

fn values(r: &RungResult) -> [f64; 6] {
    [
        r.report.catoni,
        r.report.mcallester,
        r.mc.true_catoni,
        r.mc.true_mcallester,
        r.report.aer,
        r.report.kl,
    ]
}

/// Per-seed rows followed by `mean` and `std` rows for every rung.
pub fn rows_to_csv(results: &[RungResult]) -> Result<String> {
    let mut body: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let mut row = vec![r.rung.name().to_string(), r.seed.to_string()];
            row.extend(values(r).iter().map(|v| fmt(*v)));
            row
        })
        .collect();
    for rung in Rung::ALL {
        let rs: Vec<[f64; 6]> = results.iter().filter(|r| r.rung == rung).map(values).collect();
        if rs.is_empty() {
            continue;
        }
        for (label, f) in [("mean", mean as fn(&[f64]) -> f64), ("std", std_dev)] {
            let mut row = vec![rung.name().to_string(), label.to_string()];
            for k in 0..6 {
                let col: Vec<f64> = rs.iter().map(|v| v[k]).collect();
                row.push(fmt(f(&col)));
            }
            body.push(row);
        }
    }
    to_csv(&HEADER, &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetSpec;
    use kronprior::pacbayes::ScaleOptConfig;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec {
                source_per_class: 40,
                target_per_class: 20,
                test_per_class: 10,
                dim: 4,
                classes: 3,
                ..DatasetSpec::default()
            },
            architecture: crate::config::ArchSpec {
                hidden: vec![6, 6],
                ..Default::default()
            },
            train: TrainConfig {
                max_epochs: 20,
                lr: 1e-2,
                ..TrainConfig::default()
            },
            scale_opt: ScaleOptConfig {
                steps: 50,
                ..ScaleOptConfig::default()
            },
            n_samples: 10,
            grid_samples: 2,
            seeds: vec![0],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn ladder_produces_all_rungs_and_valid_reports() {
        let res = run(&tiny()).unwrap();
        assert_eq!(res.iter().map(|r| r.rung).collect::<Vec<_>>(), Rung::ALL.to_vec());
        for r in &res {
            kronprior::pacbayes::validate_report(&r.report).unwrap();
            assert!(r.mc.true_catoni <= 1.0);
        }
        let csv = rows_to_csv(&res).unwrap();
        assert!(csv.starts_with("rung,seed,catoni,mcallester,true_catoni,true_mcallester,aer,kl\n"));
        assert_eq!(csv.lines().count(), 1 + 5 + 10);
    }

    #[test]
    fn curvature_never_exceeds_learned_prior_grid() {
        let res = run(&tiny()).unwrap();
        let m = mean_catoni(&res);
        let grid = m.iter().find(|x| x.0 == Rung::LearnedPrior).unwrap().1;
        let opt = m.iter().find(|x| x.0 == Rung::Curvature).unwrap().1;
        assert!(opt <= grid + 1e-12);
    }
}
