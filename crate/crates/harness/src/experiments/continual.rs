//! Sequential tasks with a Bayesian progressive network.

use kronprior::bpnn::{BpnnArchitecture, BpnnModel, BpnnTrainConfig};
use kronprior::laplace::{learn_prior, metrics, PriorConfig, TrainConfig};
use kronprior::net::MlpArchitecture;
use kronprior::pacbayes::Objective;

use crate::config::{ExperimentConfig, ScalesMode};
use crate::datagen::task_sequence;
use crate::error::Result;
use crate::experiments::{fmt, rng, to_csv};

pub const HEADER: [&str; 8] = ["seed", "task", "evaluated_after", "accuracy", "nll", "ece", "catoni", "kl"];

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRow {
    pub seed: u64,
    pub task: usize,
    /// Number of columns trained when the task was evaluated.
    pub evaluated_after: usize,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub catoni: f64,
    pub kl: f64,
}

fn objective(mode: ScalesMode) -> Objective {
    match mode {
        ScalesMode::McAllester => Objective::McAllester,
        _ => Objective::Catoni,
    }
}

/// Trains one column per task and evaluates every earlier task after each
/// new column; returns the rows and the final model.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<TaskRow>, BpnnModel)> {
    let (source, tasks) = task_sequence(&cfg.dataset, cfg.continual.tasks, seed)?;
    let mut dims = vec![source.dim()];
    dims.extend(&cfg.architecture.hidden);
    dims.push(source.num_classes);
    let base = MlpArchitecture::new(dims, cfg.architecture.activation)?;
    let train = TrainConfig { seed, ..cfg.train };
    let prior_cfg = PriorConfig {
        train,
        fisher: cfg.fisher,
        epsilon: cfg.epsilon,
        scale_opt: cfg.scale_opt,
        ..PriorConfig::default()
    };
    let init = base.init(&mut rng(seed, 50));
    let learned = learn_prior(&base, &init, &source, cfg.gamma, &prior_cfg)?;
    let arch = BpnnArchitecture::new(
        source.dim(),
        cfg.architecture.hidden.clone(),
        cfg.architecture.activation,
        cfg.continual.lateral_layers.clone(),
    )?;
    let mut model = BpnnModel::new(arch, learned.prior, cfg.gamma)?;
    let bcfg = BpnnTrainConfig {
        train,
        fisher: cfg.fisher,
        objective: objective(cfg.scales),
        epsilon: cfg.epsilon,
        scale_opt: cfg.scale_opt,
    };
    let mut rows = Vec::new();
    for (t, (data, _)) in tasks.iter().enumerate() {
        model.train_task(data, &BpnnTrainConfig {
            train: TrainConfig {
                seed: seed.wrapping_add(t as u64),
                ..bcfg.train
            },
            ..bcfg.clone()
        })?;
        for (u, (_, test)) in tasks.iter().enumerate().take(t + 1) {
            let probs = model.predict(u, &test.inputs, cfg.n_samples, seed)?;
            let m = metrics(&probs, &test.labels)?;
            let col = &model.columns[u];
            rows.push(TaskRow {
                seed,
                task: u,
                evaluated_after: t + 1,
                accuracy: m.accuracy,
                nll: m.nll,
                ece: m.ece,
                catoni: col.report.catoni,
                kl: col.report.kl,
            });
        }
    }
    Ok((rows, model))
}

pub fn run(cfg: &ExperimentConfig) -> Result<Vec<TaskRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        rows.extend(run_seed(cfg, seed)?.0);
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[TaskRow]) -> Result<String> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                r.task.to_string(),
                r.evaluated_after.to_string(),
                fmt(r.accuracy),
                fmt(r.nll),
                fmt(r.ece),
                fmt(r.catoni),
                fmt(r.kl),
            ]
        })
        .collect();
    to_csv(&HEADER, &body)
}
