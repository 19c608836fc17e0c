//! MAP training under Gaussian priors, Laplace posteriors, prior learning
//! and Monte-Carlo prediction.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curvature::{damp, fisher, FisherBlock, FisherConfig, FisherEstimate};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussdist::{LayerGaussian, NetworkGaussian, Precision};
use crate::kronalg::{compress, KronFactored, KronSum, PowerConfig, DEFAULT_DENSE_LIMIT};
use crate::net::{argmax, softmax, Model, Params};
use crate::optim::{Adam, AdamConfig};
use crate::pacbayes::{
    catoni, optimize_scales, whiten, CurvatureScales, Objective, ScaleOptConfig,
};

/// Number of confidence bins used by [`expected_calibration_error`].
pub const ECE_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Capped at the dataset size.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without improvement of the monitored loss.
    pub patience: usize,
    /// Halve the learning rate after this many epochs without improvement.
    pub plateau: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            plateau: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best monitored epoch.
    pub params: Params,
    /// Full-batch training objective after every epoch (index 0 is the start).
    pub loss_trace: Vec<f64>,
    /// Monitored loss after every epoch: validation NLL per example when a
    /// validation set is given, otherwise the training objective.
    pub monitor_trace: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Effective log-prior quadratic `Σ_l q_l / τ_l` and the gradient of half of it.
pub fn tempered_penalty(prior: &NetworkGaussian, theta: &Params) -> Result<(f64, Params)> {
    theta.check_shapes(&prior.shapes())?;
    let mut q = 0.0;
    let mut blocks = Vec::with_capacity(theta.blocks.len());
    for (l, w) in prior.layers.iter().zip(&theta.blocks) {
        q += l.quadratic_form(w)? / l.tau;
        blocks.push(l.penalty_grad(w) / l.tau);
    }
    Ok((q, Params { blocks }))
}

/// Training objectives sharing one optimisation loop.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Loss<'a> {
    /// `−ln p(D|θ) + ½ q`.
    Map { prior: &'a NetworkGaussian },
    /// `NLL/(N ln 2) + √((q/(2τ) + ln(2N/ε))/(2N))`.
    McAllester { prior: &'a NetworkGaussian, tau: f64, epsilon: f64 },
    /// `c·NLL/(N ln 2) + (q/(2τ) − ln ε)/N`, with `c` refreshed every epoch.
    Catoni { prior: &'a NetworkGaussian, tau: f64, epsilon: f64 },
}

impl Loss<'_> {
    fn prior(&self) -> &NetworkGaussian {
        match self {
            Loss::Map { prior } | Loss::McAllester { prior, .. } | Loss::Catoni { prior, .. } => prior,
        }
    }

    /// Objective and gradient given an (unbiasedly rescaled) data NLL, its
    /// gradient and the dataset size.
    fn combine(
        &self,
        nll: f64,
        nll_grad: Option<Params>,
        theta: &Params,
        n: usize,
        c: f64,
    ) -> Result<(f64, Params)> {
        let (q, mut pg) = tempered_penalty(self.prior(), theta)?;
        let ln2n = std::f64::consts::LN_2 * n.max(1) as f64;
        let nf = n.max(1) as f64;
        let (value, data_scale) = match *self {
            Loss::Map { .. } => (nll + 0.5 * q, 1.0),
            Loss::McAllester { tau, epsilon, .. } => {
                let inner = (q / (2.0 * tau) + (2.0 * nf / epsilon).ln()) / (2.0 * nf);
                let root = inner.max(1e-300).sqrt();
                // d root / d θ = (1/(2 root)) (1/(2N)) (1/τ) P(θ−μ)
                pg.scale(1.0 / (4.0 * nf * root * tau));
                (nll / ln2n + root, 1.0 / ln2n)
            }
            Loss::Catoni { tau, epsilon, .. } => {
                pg.scale(1.0 / (tau * nf));
                (c * nll / ln2n + (q / (2.0 * tau) - epsilon.ln()) / nf, c / ln2n)
            }
        };
        if let Some(mut g) = nll_grad {
            g.scale(data_scale);
            pg.axpy(1.0, &g);
        }
        Ok((value, pg))
    }
}

/// Full-batch objective and gradient.
pub(crate) fn full_objective(
    model: &dyn Model,
    theta: &Params,
    data: &Dataset,
    loss: &Loss,
    c: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Params)> {
    if data.is_empty() {
        return loss.combine(0.0, None, theta, 0, c);
    }
    let (nll, g) = model.nll_grad(theta, &data.inputs, &data.labels, rng)?;
    loss.combine(nll, Some(g), theta, data.len(), c)
}

fn mean_nll(model: &dyn Model, theta: &Params, data: &Dataset) -> Result<f64> {
    let logits = model.logits(theta, &data.inputs)?;
    Ok(crate::net::nll(&logits, &data.labels)? / data.len() as f64)
}

fn data_nll(model: &dyn Model, theta: &Params, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let logits = model.logits(theta, &data.inputs)?;
    crate::net::nll(&logits, &data.labels)
}

/// Catoni scale `c` at the current parameters.
fn refresh_c(model: &dyn Model, theta: &Params, data: &Dataset, loss: &Loss) -> Result<f64> {
    match *loss {
        Loss::Catoni { prior, tau, epsilon } => {
            let n = data.len().max(1);
            let aer = data_nll(model, theta, data)? / (n as f64 * std::f64::consts::LN_2);
            let (q, _) = tempered_penalty(prior, theta)?;
            Ok(catoni(aer, q / (2.0 * tau), n, epsilon).c)
        }
        _ => Ok(1.0),
    }
}

fn deterministic_objective(
    model: &dyn Model,
    theta: &Params,
    data: &Dataset,
    loss: &Loss,
    c: f64,
) -> Result<f64> {
    let nll = data_nll(model, theta, data)?;
    Ok(loss.combine(nll, None, theta, data.len(), c)?.0)
}

/// Mini-batch Adam with early stopping and learning-rate halving.
pub(crate) fn fit(
    model: &dyn Model,
    init: &Params,
    train: &Dataset,
    val: Option<&Dataset>,
    loss: Loss,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    init.check_shapes(&model.block_shapes())?;
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let val = val.filter(|v| !v.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = init.clone();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        theta.num_params(),
    );
    let n = train.len();
    let batch = cfg.batch_size.clamp(1, n.max(1));
    let mut c = refresh_c(model, &theta, train, &loss)?;

    let monitor = |theta: &Params, c: f64| -> Result<(f64, f64)> {
        let obj = deterministic_objective(model, theta, train, &loss, c)?;
        let m = match val {
            Some(v) => mean_nll(model, theta, v)?,
            None => obj,
        };
        Ok((obj, m))
    };
    let (obj0, m0) = monitor(&theta, c)?;
    if !obj0.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            detail: "initial objective is not finite".into(),
        });
    }
    let mut loss_trace = vec![obj0];
    let mut monitor_trace = vec![m0];
    let mut best = (m0, theta.clone(), 0usize);
    let mut since_best = 0;
    let mut since_lr = 0;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        if n == 0 {
            let (_, g) = loss.combine(0.0, None, &theta, 0, c)?;
            opt.step_params(&mut theta, &g);
        } else {
            for idx in train.batch_indices(batch, Some(&mut rng)) {
                let b = train.subset(&idx);
                let (nll, mut g) = model.nll_grad(&theta, &b.inputs, &b.labels, &mut rng)?;
                let scale = n as f64 / idx.len() as f64;
                g.scale(scale);
                let (v, grad) = loss.combine(nll * scale, Some(g), &theta, n, c)?;
                if !v.is_finite() || !grad.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("mini-batch objective {v}"),
                    });
                }
                opt.step_params(&mut theta, &grad);
            }
        }
        if !theta.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "parameters became non-finite".into(),
            });
        }
        c = refresh_c(model, &theta, train, &loss)?;
        let (obj, m) = monitor(&theta, c)?;
        if !obj.is_finite() || !m.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("objective {obj}, monitored loss {m}"),
            });
        }
        loss_trace.push(obj);
        monitor_trace.push(m);
        if m < best.0 {
            best = (m, theta.clone(), epoch);
            since_best = 0;
            since_lr = 0;
        } else {
            since_best += 1;
            since_lr += 1;
            if since_best >= cfg.patience {
                break;
            }
            if since_lr >= cfg.plateau {
                opt.set_lr(opt.lr() * 0.5);
                since_lr = 0;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        loss_trace,
        monitor_trace,
        best_epoch: best.2,
        epochs_run,
    })
}

/// Minimises `−ln p(D|θ) + ½ Σ_l (θ_l − μ_l)ᵀ P_l (θ_l − μ_l) / τ_l`.
pub fn map_train(
    model: &dyn Model,
    init: &Params,
    train: &Dataset,
    val: Option<&Dataset>,
    prior: &NetworkGaussian,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    prior.mean().check_shapes(&model.block_shapes())?;
    fit(model, init, train, val, Loss::Map { prior }, cfg)
}

/// How the posterior precision `β F + α P̃` is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorForm {
    /// Exact, in the joint eigenbasis of prior and Fisher.
    #[default]
    Exact,
    /// One Kronecker product fitted by the power method.
    Compressed,
}

/// Laplace posterior `N(θ̂, τ_l (β_l F_l + α_l P̃_l)⁻¹)` per layer, with `F`
/// the total Fisher and `P̃` the prior precision divided by its temperature.
pub fn laplace_posterior(
    theta_hat: &Params,
    fisher: &FisherEstimate,
    prior: &NetworkGaussian,
    scales: &CurvatureScales,
    form: PosteriorForm,
    power: &PowerConfig,
) -> Result<NetworkGaussian> {
    if scales.layers.len() != prior.layers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scale triples for {} layers",
            scales.layers.len(),
            prior.layers.len()
        )));
    }
    let total = fisher.total_blocks();
    match form {
        PosteriorForm::Exact => whiten(&total, prior, theta_hat)?.posterior(scales),
        PosteriorForm::Compressed => {
            theta_hat.check_shapes(&prior.shapes())?;
            let layers = total
                .iter()
                .zip(&prior.layers)
                .zip(&theta_hat.blocks)
                .zip(&scales.layers)
                .map(|(((f, p), t), s)| {
                    let (alpha, beta) = (s.alpha(), s.beta());
                    let inv_tp = 1.0 / p.tau;
                    let precision = match (f, &p.precision) {
                        (FisherBlock::Kron(fk), Precision::Kron(pk)) => {
                            let sum = KronSum::new(vec![fk.scaled(beta), pk.scaled(alpha * inv_tp)])?;
                            Precision::Kron(compress(&sum, power).factors)
                        }
                        _ => {
                            let fd = f.to_dense(DEFAULT_DENSE_LIMIT)?;
                            let pd = p.precision.to_dense(DEFAULT_DENSE_LIMIT)?;
                            Precision::Dense(fd * beta + pd * (alpha * inv_tp))
                        }
                    };
                    LayerGaussian::new(t.clone(), precision, p.damping, s.tau())
                })
                .collect::<Result<_>>()?;
            Ok(NetworkGaussian::new(layers))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub train: TrainConfig,
    pub fisher: FisherConfig,
    /// Fraction of the source data held out for early stopping.
    pub val_fraction: f64,
    /// Curvature-scale the prior by minimising this bound on the source task.
    pub scale_objective: Option<Objective>,
    pub epsilon: f64,
    pub scale_opt: ScaleOptConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            train: TrainConfig::default(),
            fisher: FisherConfig::default(),
            val_fraction: 0.1,
            scale_objective: None,
            epsilon: crate::pacbayes::DEFAULT_EPSILON,
            scale_opt: ScaleOptConfig::default(),
        }
    }
}

/// A prior learned on a source task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnedPrior {
    /// `N(θ̂⁽⁰⁾, P⁻¹)` with Kronecker (or dense) `P` and unit temperature.
    pub prior: NetworkGaussian,
    /// Relative residual of each layer's Kronecker compression.
    pub compression_residuals: Vec<f64>,
    /// Source-task scales, when curvature scaling was requested.
    pub scales: Option<CurvatureScales>,
    pub source_size: usize,
}

impl LearnedPrior {
    pub fn max_residual(&self) -> f64 {
        self.compression_residuals.iter().cloned().fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Trains on the source task under `N(0, γ⁻¹ I)` and returns
/// `N(θ̂⁽⁰⁾, (F⁽⁰⁾ + γ I)⁻¹)`, or its curvature-scaled version
/// `N(θ̂⁽⁰⁾, τ (β F⁽⁰⁾ + α γ I)⁻¹)`, as a single Kronecker product per layer.
pub fn learn_prior(
    model: &dyn Model,
    init: &Params,
    source: &Dataset,
    gamma: f64,
    cfg: &PriorConfig,
) -> Result<LearnedPrior> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let shapes = model.block_shapes();
    let iso = NetworkGaussian::isotropic(&shapes, gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5eed);
    let (train, val) = if cfg.val_fraction > 0.0 && source.len() >= 10 {
        let (v, t) = source.split(cfg.val_fraction, &mut rng);
        (t, Some(v))
    } else {
        (source.clone(), None)
    };
    let fit = map_train(model, init, &train, val.as_ref(), &iso, &cfg.train)?;
    let theta0 = fit.params;
    let est = fisher(model, &theta0, source, &cfg.fisher)?;
    let total = est.total_blocks();

    let (precisions, residuals, scales) = match cfg.scale_objective {
        None => {
            let damped = damp(&total, gamma, &cfg.fisher.power)?;
            let res = damped.iter().map(|d| d.relative_residual).collect();
            (damped.into_iter().map(|d| d.precision).collect::<Vec<_>>(), res, None)
        }
        Some(obj) => {
            let spectrum = whiten(&total, &iso, &theta0)?;
            let fitted = optimize_scales(&spectrum, est.data_nll, source.len(), cfg.epsilon, obj, &cfg.scale_opt)?;
            let mut precisions = Vec::with_capacity(total.len());
            let mut res = Vec::with_capacity(total.len());
            for (f, s) in total.iter().zip(&fitted.scales.layers) {
                let (alpha, beta, tau) = (s.alpha(), s.beta(), s.tau());
                match f {
                    FisherBlock::Kron(k) => {
                        let (m, n) = k.dims();
                        let sum = KronSum::new(vec![
                            k.scaled(beta / tau),
                            KronFactored::scaled_identity(m, n, alpha * gamma / tau),
                        ])?;
                        let c = compress(&sum, &cfg.fisher.power);
                        res.push(c.relative_residual);
                        precisions.push(Precision::Kron(c.factors));
                    }
                    FisherBlock::Dense(d) => {
                        let n = d.nrows();
                        res.push(0.0);
                        precisions.push(Precision::Dense(
                            (d * beta + DMatrix::identity(n, n) * (alpha * gamma)) / tau,
                        ));
                    }
                }
            }
            (precisions, res, Some(fitted.scales))
        }
    };
    let layers = precisions
        .into_iter()
        .zip(&theta0.blocks)
        .map(|(p, m)| LayerGaussian::new(m.clone(), p, gamma, 1.0))
        .collect::<Result<_>>()?;
    Ok(LearnedPrior {
        prior: NetworkGaussian::new(layers),
        compression_residuals: residuals,
        scales,
        source_size: source.len(),
    })
}

/// Mean softmax over `n_samples` posterior draws.
pub fn predictive(
    model: &dyn Model,
    posterior: &NetworkGaussian,
    inputs: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let sampler = posterior.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = DMatrix::zeros(inputs.nrows(), model.num_classes());
    for _ in 0..n_samples {
        let theta = sampler.sample(&mut rng);
        acc += softmax(&model.logits(&theta, inputs)?);
    }
    Ok(acc / n_samples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean negative log predictive probability of the true label.
    pub nll: f64,
    pub ece: f64,
}

pub fn metrics(probs: &DMatrix<f64>, labels: &[usize]) -> Result<Metrics> {
    if probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("metrics need at least one example".into()));
    }
    let n = labels.len() as f64;
    let mut correct = 0usize;
    let mut nll = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = probs.row(i).iter().cloned().collect();
        if argmax(&row) == y {
            correct += 1;
        }
        nll -= probs[(i, y)].max(f64::MIN_POSITIVE).ln();
    }
    Ok(Metrics {
        accuracy: correct as f64 / n,
        nll: nll / n,
        ece: expected_calibration_error(probs, labels, ECE_BINS),
    })
}

/// `Σ_b (|b|/n) |acc(b) − conf(b)|` over equal-width confidence bins.
pub fn expected_calibration_error(probs: &DMatrix<f64>, labels: &[usize], bins: usize) -> f64 {
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = probs.row(i).iter().cloned().collect();
        let k = argmax(&row);
        let p = row[k];
        let b = ((p * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += p;
        if k == y {
            hits[b] += 1.0;
        }
    }
    let n = labels.len().max(1) as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n)
        .sum()
}

/// Mean predictive entropy in nats.
pub fn mean_entropy(probs: &DMatrix<f64>) -> f64 {
    let mut h = 0.0;
    for p in probs.iter() {
        if *p > 0.0 {
            h -= p * p.ln();
        }
    }
    h / probs.nrows().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{fisher_kfac, FisherMethod};
    use crate::net::{error_rate, Activation, MlpArchitecture};
    use crate::pacbayes::kl_of_scales;
    use rand_distr::{Distribution, StandardNormal};

    fn separable(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            let sign = if c == 0 { -1.0 } else { 1.0 };
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            x[(i, 0)] = sign * 2.0 + 0.4 * a;
            x[(i, 1)] = 0.4 * b;
            y.push(c);
        }
        Dataset::new(x, y, 2).unwrap()
    }

    fn arch() -> MlpArchitecture {
        MlpArchitecture::new(vec![2, 6, 2], Activation::Tanh).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            lr: 0.02,
            batch_size: 32,
            max_epochs: 150,
            ..Default::default()
        }
    }

    #[test]
    fn separable_data_reaches_zero_training_error() {
        let a = arch();
        let data = separable(100, 0);
        let init = a.init(&mut ChaCha8Rng::seed_from_u64(1));
        let prior = NetworkGaussian::isotropic(&a.block_shapes(), 1e-3).unwrap();
        let out = map_train(&a, &init, &data, None, &prior, &quick()).unwrap();
        let err = error_rate(&a.logits(&out.params, &data.inputs).unwrap(), &data.labels).unwrap();
        assert_eq!(err, 0.0);
        assert!(out.loss_trace.last().unwrap() < &out.loss_trace[0]);
    }

    #[test]
    fn empty_dataset_returns_prior_mean() {
        let a = arch();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shapes = a.block_shapes();
        let mean = Params::init(&shapes, 1.0, &mut rng);
        let mut prior = NetworkGaussian::isotropic(&shapes, 1.0).unwrap();
        for (l, m) in prior.layers.iter_mut().zip(&mean.blocks) {
            l.mean = m.clone();
        }
        let init = a.init(&mut rng);
        let cfg = TrainConfig {
            lr: 0.05,
            max_epochs: 3000,
            patience: 3000,
            plateau: 3000,
            ..Default::default()
        };
        let out = map_train(&a, &init, &Dataset::empty(2, 2), None, &prior, &cfg).unwrap();
        assert!(out.params.sub(&mean).norm() < 1e-3, "{}", out.params.sub(&mean).norm());
    }

    #[test]
    fn tempered_penalty_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = |r: &mut ChaCha8Rng, n: usize| {
            let m: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(r));
            &m * m.transpose() + DMatrix::identity(n, n)
        };
        let k = KronFactored::new(g(&mut rng, 3), g(&mut rng, 4)).unwrap();
        let mean = DMatrix::from_fn(3, 4, |_, _| StandardNormal.sample(&mut rng));
        let theta = DMatrix::from_fn(3, 4, |_, _| StandardNormal.sample(&mut rng));
        let prior = NetworkGaussian::new(vec![LayerGaussian::new(mean.clone(), Precision::Kron(k.clone()), 0.0, 2.0).unwrap()]);
        let (q, grad) = tempered_penalty(&prior, &Params { blocks: vec![theta.clone()] }).unwrap();
        let dense = k.to_dense(4096).unwrap();
        let d = crate::kronalg::vec_rows(&(&theta - &mean));
        let dv = nalgebra::DVector::from_vec(d);
        let expect = &dense * &dv / 2.0;
        let got = crate::kronalg::vec_rows(&grad.blocks[0]);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
        assert!((q - dv.dot(&(&dense * &dv)) / 2.0).abs() < 1e-10 * q.abs());
    }

    fn trained() -> (MlpArchitecture, Dataset, Params, FisherEstimate) {
        let a = arch();
        let data = separable(60, 4);
        let init = a.init(&mut ChaCha8Rng::seed_from_u64(5));
        let prior = NetworkGaussian::isotropic(&a.block_shapes(), 1.0).unwrap();
        let out = map_train(&a, &init, &data, None, &prior, &quick()).unwrap();
        let f = fisher_kfac(&a, &out.params, &data).unwrap();
        (a, data, out.params, f)
    }

    #[test]
    fn posterior_with_zero_fisher_is_prior() {
        let (a, _, theta, f) = trained();
        let zero = FisherEstimate {
            blocks: f
                .blocks
                .iter()
                .map(|b| match b {
                    FisherBlock::Kron(k) => FisherBlock::Kron(KronFactored::zeros(k.dims().0, k.dims().1)),
                    FisherBlock::Dense(d) => FisherBlock::Dense(d * 0.0),
                })
                .collect(),
            ..f
        };
        let prior = NetworkGaussian::isotropic(&a.block_shapes(), 0.5).unwrap();
        let unit = CurvatureScales::unit(2);
        for form in [PosteriorForm::Exact, PosteriorForm::Compressed] {
            let post = laplace_posterior(&theta, &zero, &prior, &unit, form, &PowerConfig::default()).unwrap();
            for (p, q) in post.layers.iter().zip(&prior.layers) {
                let a = p.precision.to_dense(4096).unwrap();
                let b = q.precision.to_dense(4096).unwrap();
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn exact_posterior_kl_matches_closed_form() {
        let (a, _, theta, f) = trained();
        let prior = NetworkGaussian::isotropic(&a.block_shapes(), 0.5).unwrap();
        let s = CurvatureScales::from_vec(&[0.1, -0.3, -2.0, -0.2, 0.4, -1.0]);
        let post = laplace_posterior(&theta, &f, &prior, &s, PosteriorForm::Exact, &PowerConfig::default()).unwrap();
        let spec = whiten(&f.total_blocks(), &prior, &theta).unwrap();
        let (k, _) = kl_of_scales(&spec, &s).unwrap();
        let direct = post.kl_divergence(&prior).unwrap();
        assert!(direct.is_finite());
        assert!((k - direct).abs() <= 1e-8 * direct.abs());
    }

    #[test]
    fn predictive_limits() {
        let (a, data, theta, f) = trained();
        let prior = NetworkGaussian::isotropic(&a.block_shapes(), 1.0).unwrap();
        let cold = CurvatureScales::shared(2, 1.0, 1.0, 1e-30);
        let post = laplace_posterior(&theta, &f, &prior, &cold, PosteriorForm::Exact, &PowerConfig::default()).unwrap();
        let p = predictive(&a, &post, &data.inputs, 5, 0).unwrap();
        let det = softmax(&a.logits(&theta, &data.inputs).unwrap());
        assert!((&p - &det).abs().max() < 1e-10);

        let warm = CurvatureScales::unit(2);
        let post = laplace_posterior(&theta, &f, &prior, &warm, PosteriorForm::Exact, &PowerConfig::default()).unwrap();
        let p1 = predictive(&a, &post, &data.inputs, 1, 9).unwrap();
        let draw = post.sample(9).unwrap();
        let d1 = softmax(&a.logits(&draw, &data.inputs).unwrap());
        assert_eq!(p1, d1);
        let p = predictive(&a, &post, &data.inputs, 20, 1).unwrap();
        for r in 0..p.nrows() {
            assert!((p.row(r).sum() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let (a, data, theta, f) = trained();
        let prior = NetworkGaussian::isotropic(&a.block_shapes(), 1.0).unwrap();
        let mut last = -1.0;
        for tau in [1e-4, 1e-2, 1.0, 10.0] {
            let s = CurvatureScales::shared(2, 1.0, 1.0, tau);
            let post = laplace_posterior(&theta, &f, &prior, &s, PosteriorForm::Exact, &PowerConfig::default()).unwrap();
            let h = mean_entropy(&predictive(&a, &post, &data.inputs, 200, 3).unwrap());
            assert!(h >= last - 1e-3, "entropy {h} after {last}");
            last = h;
        }
    }

    #[test]
    fn ece_of_perfectly_calibrated_one_hot_is_zero() {
        let probs = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let m = metrics(&probs, &[0, 1, 0]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.ece, 0.0);
        let half = DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.6, 0.4]);
        let e = expected_calibration_error(&half, &[0, 1], ECE_BINS);
        assert!((e - 0.1).abs() < 1e-12);
    }

    #[test]
    fn learned_prior_is_reproducible_and_round_trips() {
        let a = arch();
        let data = separable(80, 6);
        let init = a.init(&mut ChaCha8Rng::seed_from_u64(7));
        let cfg = PriorConfig {
            train: quick(),
            fisher: FisherConfig {
                method: FisherMethod::Kfoc,
                ..Default::default()
            },
            ..Default::default()
        };
        let p1 = learn_prior(&a, &init, &data, 1.0, &cfg).unwrap();
        let p2 = learn_prior(&a, &init, &data, 1.0, &cfg).unwrap();
        let j1 = p1.to_json().unwrap();
        assert_eq!(j1, p2.to_json().unwrap());
        let back = LearnedPrior::from_json(&j1).unwrap();
        assert_eq!(back.prior, p1.prior);
        assert!(p1.max_residual() < 1.0);
    }
}
