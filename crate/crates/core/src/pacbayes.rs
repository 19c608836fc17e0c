//! PAC-Bayes objectives over per-layer curvature scales.
//!
//! For a layer with prior precision `P̃`, Fisher `F` and scales `(α, β, τ)`
//! the posterior covariance is `τ (β F + α P̃)⁻¹`. Whitening by `P̃^{1/2}`
//! reduces every matrix function the bounds need to scalar functions of the
//! eigenvalues `g` of `P̃^{-1/2} F P̃^{-1/2}`:
//!
//! - `trace(F M⁻¹) = Σ g / (βg + α)`
//! - `trace(P̃ M⁻¹) = Σ 1 / (βg + α)`
//! - `ln det M = ln det P̃ + Σ ln(βg + α)`
//!
//! where `M = β F + α P̃`. With Kronecker `F` and `P̃` the whitened Fisher is
//! again Kronecker, so `g` is the outer product of two small spectra.
//! Scales are optimised in log space; all gradients are closed form.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curvature::FisherBlock;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussdist::{ EigenKron, LayerGaussian, NetworkGaussian, Precision};
use crate::laplace::{fit, full_objective, Loss, TrainConfig, TrainOutcome};
use crate::kronalg::{symmetric_eigen, KronFactored, DEFAULT_DENSE_LIMIT};
use crate::net::{error_rate, Model, Params};
use crate::optim::{Adam, AdamConfig};

/// Default confidence parameter.
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Search range for the Catoni scale `c`.
pub const CATONI_C_MIN: f64 = 1e-4;
pub const CATONI_C_MAX: f64 = 1e4;

/// Grid values for `α` and `β` in the shared-scale grid search.
pub const GRID_AB: [f64; 9] = [0.01, 0.1, 0.3, 0.5, 0.8, 0.9, 0.99, 1.0, 2.0];

/// `τ ∈ {10^0, 10^-1, …, 10^-26}`.
pub fn grid_tau() -> Vec<f64> {
    (0..=26).map(|i| 10f64.powi(-i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScales {
    pub log_alpha: f64,
    pub log_beta: f64,
    pub log_tau: f64,
}

impl LayerScales {
    pub fn from_values(alpha: f64, beta: f64, tau: f64) -> Self {
        LayerScales {
            log_alpha: alpha.ln(),
            log_beta: beta.ln(),
            log_tau: tau.ln(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

/// Per-layer `(ln α, ln β, ln τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureScales {
    pub layers: Vec<LayerScales>,
}

impl CurvatureScales {
    pub fn unit(layers: usize) -> Self {
        Self::shared(layers, 1.0, 1.0, 1.0)
    }

    pub fn shared(layers: usize, alpha: f64, beta: f64, tau: f64) -> Self {
        CurvatureScales {
            layers: vec![LayerScales::from_values(alpha, beta, tau); layers],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|s| [s.log_alpha, s.log_beta, s.log_tau])
            .collect()
    }

    pub fn from_vec(v: &[f64]) -> Self {
        CurvatureScales {
            layers: v
                .chunks(3)
                .map(|c| LayerScales {
                    log_alpha: c[0],
                    log_beta: c[1],
                    log_tau: c[2],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
enum Basis {
    /// `A_L = L̃^{1/2} U_L`, `A_R = R̃^{1/2} U_R`.
    Kron(DMatrix<f64>, DMatrix<f64>),
    /// `A = P̃^{1/2} U`.
    Dense(DMatrix<f64>),
}

/// Whitened Fisher spectrum of one layer plus what is needed to rebuild
/// the posterior.
#[derive(Debug, Clone)]
pub struct LayerSpectrum {
    pub shape: (usize, usize),
    /// Eigenvalues of the whitened Fisher; row-major `M × N` grid in the
    /// Kronecker case.
    pub g: Vec<f64>,
    /// `(θ̂ − θ̃)ᵀ P̃ (θ̂ − θ̃)`.
    pub q: f64,
    pub prior_logdet: f64,
    basis: Basis,
    prior: LayerGaussian,
    theta_hat: DMatrix<f64>,
}

/// Scalar sums over a layer spectrum at given `(α, β)`.
#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    /// `Σ g/(βg+α)`
    t1: f64,
    /// `Σ 1/(βg+α)`
    t0: f64,
    /// `Σ ln(βg+α)`
    logs: f64,
    /// `Σ 1/(βg+α)²`
    inv_sq: f64,
    /// `Σ g/(βg+α)²`
    g_sq: f64,
    /// `Σ g²/(βg+α)²`
    g2_sq: f64,
}

impl LayerSpectrum {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    fn sums(&self, alpha: f64, beta: f64) -> Sums {
        let mut s = Sums::default();
        for &g in &self.g {
            let d = beta * g + alpha;
            let inv = 1.0 / d;
            s.t1 += g * inv;
            s.t0 += inv;
            s.logs += d.ln();
            s.inv_sq += inv * inv;
            s.g_sq += g * inv * inv;
            s.g2_sq += g * g * inv * inv;
        }
        s
    }

    /// `trace(F (βF + αP̃)⁻¹)`.
    pub fn trace_fisher(&self, alpha: f64, beta: f64) -> f64 {
        self.sums(alpha, beta).t1
    }

    /// `trace(P̃ (βF + αP̃)⁻¹)`.
    pub fn trace_prior(&self, alpha: f64, beta: f64) -> f64 {
        self.sums(alpha, beta).t0
    }

    /// `ln det(βF + αP̃)`.
    pub fn logdet(&self, alpha: f64, beta: f64) -> f64 {
        self.prior_logdet + self.sums(alpha, beta).logs
    }

    pub fn prior(&self) -> &LayerGaussian {
        &self.prior
    }

    /// Posterior `N(θ̂, τ (βF + αP̃)⁻¹)`, represented exactly.
    pub fn posterior(&self, s: &LayerScales) -> Result<LayerGaussian> {
        let (alpha, beta) = (s.alpha(), s.beta());
        let precision = match &self.basis {
            Basis::Kron(al, ar) => {
                let (m, n) = self.shape;
                let diag = DMatrix::from_fn(m, n, |i, j| beta * self.g[i * n + j] + alpha);
                Precision::Eigen(EigenKron::new(al.clone(), ar.clone(), diag)?)
            }
            Basis::Dense(a) => {
                let d = DVector::from_iterator(self.g.len(), self.g.iter().map(|g| beta * g + alpha));
                let p = a * DMatrix::from_diagonal(&d) * a.transpose();
                Precision::Dense((&p + p.transpose()) * 0.5)
            }
        };
        LayerGaussian::new(self.theta_hat.clone(), precision, self.prior.damping, s.tau())
    }
}

/// Spectra of all layers.
#[derive(Debug, Clone)]
pub struct WhitenedSpectrum {
    pub layers: Vec<LayerSpectrum>,
}

impl WhitenedSpectrum {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn posterior(&self, scales: &CurvatureScales) -> Result<NetworkGaussian> {
        Ok(NetworkGaussian::new(
            self.layers
                .iter()
                .zip(&scales.layers)
                .map(|(l, s)| l.posterior(s))
                .collect::<Result<_>>()?,
        ))
    }

    /// The priors the spectrum was whitened against (temperature folded in).
    pub fn prior(&self) -> NetworkGaussian {
        NetworkGaussian::new(self.layers.iter().map(|l| l.prior.clone()).collect())
    }
}

fn sym_sqrt_and_inv(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let e = symmetric_eigen(a)?;
    e.require_positive()?;
    Ok((e.map(f64::sqrt), e.map(|v| 1.0 / v.sqrt()), e.logdet()?))
}

fn symmetrized(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

/// Removes the prior temperature: precision `P / τ_p` with `τ = 1`.
fn effective_prior(p: &LayerGaussian) -> Result<LayerGaussian> {
    if p.tau == 1.0 {
        return Ok(p.clone());
    }
    let s = 1.0 / p.tau;
    let precision = match &p.precision {
        Precision::Kron(k) => Precision::Kron(k.scaled(s)),
        Precision::Dense(d) => Precision::Dense(d * s),
        Precision::Eigen(e) => Precision::Eigen(EigenKron::new(
            e.left_map.clone(),
            e.right_map.clone(),
            &e.diag * s,
        )?),
    };
    LayerGaussian::new(p.mean.clone(), precision, p.damping, 1.0)
}

/// Whitens one layer's total Fisher against its prior.
pub fn whiten_layer(
    fisher: &FisherBlock,
    prior: &LayerGaussian,
    theta_hat: &DMatrix<f64>,
) -> Result<LayerSpectrum> {
    if theta_hat.shape() != prior.shape() {
        return Err(Error::DimensionMismatch("theta_hat and prior layouts differ".into()));
    }
    let prior = effective_prior(prior)?;
    let q = prior.quadratic_form(theta_hat)?;
    let shape = prior.shape();
    match (fisher, &prior.precision) {
        (FisherBlock::Kron(f), Precision::Kron(p)) => {
            if f.dims() != p.dims() {
                return Err(Error::DimensionMismatch("Fisher and prior factor sizes differ".into()));
            }
            let (sl, il, ldl) = sym_sqrt_and_inv(&p.left)?;
            let (sr, ir, ldr) = sym_sqrt_and_inv(&p.right)?;
            let el = symmetric_eigen(&symmetrized(&il * &f.left * &il))?;
            let er = symmetric_eigen(&symmetrized(&ir * &f.right * &ir))?;
            let (m, n) = shape;
            let mut g = Vec::with_capacity(m * n);
            for a in &el.values {
                for b in &er.values {
                    g.push((a * b).max(0.0));
                }
            }
            Ok(LayerSpectrum {
                shape,
                g,
                q,
                prior_logdet: n as f64 * ldl + m as f64 * ldr,
                basis: Basis::Kron(&sl * &el.vectors, &sr * &er.vectors),
                prior,
                theta_hat: theta_hat.clone(),
            })
        }
        _ => {
            let fd = fisher.to_dense(DEFAULT_DENSE_LIMIT)?;
            let pd = prior.precision.to_dense(DEFAULT_DENSE_LIMIT)?;
            if fd.shape() != pd.shape() {
                return Err(Error::DimensionMismatch("Fisher and prior sizes differ".into()));
            }
            let (s, is, ld) = sym_sqrt_and_inv(&pd)?;
            let e = symmetric_eigen(&symmetrized(&is * &fd * &is))?;
            Ok(LayerSpectrum {
                shape,
                g: e.values.iter().map(|v| v.max(0.0)).collect(),
                q,
                prior_logdet: ld,
                basis: Basis::Dense(&s * &e.vectors),
                prior,
                theta_hat: theta_hat.clone(),
            })
        }
    }
}

/// Whitens every layer. `fisher` must be the total (summed) Fisher.
pub fn whiten(
    fisher: &[FisherBlock],
    prior: &NetworkGaussian,
    theta_hat: &Params,
) -> Result<WhitenedSpectrum> {
    if fisher.len() != prior.layers.len() || theta_hat.blocks.len() != prior.layers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} Fisher blocks, {} prior layers, {} parameter blocks",
            fisher.len(),
            prior.layers.len(),
            theta_hat.blocks.len()
        )));
    }
    Ok(WhitenedSpectrum {
        layers: fisher
            .iter()
            .zip(&prior.layers)
            .zip(&theta_hat.blocks)
            .map(|((f, p), t)| whiten_layer(f, p, t))
            .collect::<Result<_>>()?,
    })
}

fn check_scales(spectrum: &WhitenedSpectrum, scales: &CurvatureScales) -> Result<()> {
    if spectrum.layers.len() != scales.layers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} spectrum layers vs {} scale triples",
            spectrum.layers.len(),
            scales.layers.len()
        )));
    }
    Ok(())
}

/// Approximate expected empirical error
/// `(data_nll + ½ Σ_l τ_l trace(F_l M_l⁻¹)) / (N ln 2)` and its gradient
/// with respect to the log-scales.
pub fn aer(
    spectrum: &WhitenedSpectrum,
    scales: &CurvatureScales,
    data_nll: f64,
    n: usize,
) -> Result<(f64, Vec<f64>)> {
    check_scales(spectrum, scales)?;
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let denom = n as f64 * std::f64::consts::LN_2;
    let mut num = data_nll;
    let mut grad = Vec::with_capacity(3 * scales.layers.len());
    for (l, s) in spectrum.layers.iter().zip(&scales.layers) {
        let (alpha, beta, tau) = (s.alpha(), s.beta(), s.tau());
        let sm = l.sums(alpha, beta);
        let term = 0.5 * tau * sm.t1;
        num += term;
        grad.push(-0.5 * tau * alpha * sm.g_sq / denom);
        grad.push(-0.5 * tau * beta * sm.g2_sq / denom);
        grad.push(term / denom);
    }
    Ok((num / denom, grad))
}

/// Closed-form `KL(posterior ‖ prior)` as a function of the scales, with
/// its log-scale gradient.
pub fn kl_of_scales(spectrum: &WhitenedSpectrum, scales: &CurvatureScales) -> Result<(f64, Vec<f64>)> {
    check_scales(spectrum, scales)?;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(3 * scales.layers.len());
    for (l, s) in spectrum.layers.iter().zip(&scales.layers) {
        let (alpha, beta, tau) = (s.alpha(), s.beta(), s.tau());
        let n = l.dim() as f64;
        let sm = l.sums(alpha, beta);
        total += 0.5 * (tau * sm.t0 - n * (1.0 + s.log_tau) + sm.logs + l.q);
        grad.push(0.5 * (-tau * alpha * sm.inv_sq + alpha * sm.t0));
        grad.push(0.5 * (-tau * beta * sm.g_sq + beta * sm.t1));
        grad.push(0.5 * (tau * sm.t0 - n));
    }
    Ok((total, grad))
}

/// Per-layer contributions to [`kl_of_scales`].
pub fn layer_kls(spectrum: &WhitenedSpectrum, scales: &CurvatureScales) -> Result<Vec<f64>> {
    check_scales(spectrum, scales)?;
    Ok(spectrum
        .layers
        .iter()
        .zip(&scales.layers)
        .map(|(l, s)| {
            let sm = l.sums(s.alpha(), s.beta());
            0.5 * (s.tau() * sm.t0 - l.dim() as f64 * (1.0 + s.log_tau) + sm.logs + l.q)
        })
        .collect())
}

fn check_bound_args(n: usize, epsilon: f64) {
    debug_assert!(n >= 1, "N must be positive");
    debug_assert!(epsilon > 0.0 && epsilon < 1.0, "epsilon must be in (0, 1)");
}

/// `aer + √((kl + ln(2√N/ε)) / (2N))`.
pub fn mcallester(aer: f64, kl: f64, n: usize, epsilon: f64) -> f64 {
    check_bound_args(n, epsilon);
    let nf = n as f64;
    aer + ((kl + (2.0 * nf.sqrt() / epsilon).ln()) / (2.0 * nf)).max(0.0).sqrt()
}

/// `(∂/∂aer, ∂/∂kl)` of [`mcallester`].
pub fn mcallester_grad(kl: f64, n: usize, epsilon: f64) -> (f64, f64) {
    let nf = n as f64;
    let root = ((kl + (2.0 * nf.sqrt() / epsilon).ln()) / (2.0 * nf)).max(1e-300).sqrt();
    (1.0, 1.0 / (4.0 * nf * root))
}

/// `(1 − exp(−c·aer − (kl − ln ε)/N)) / (1 − exp(−c))` at a fixed `c`.
pub fn catoni_at(aer: f64, kl: f64, n: usize, epsilon: f64, c: f64) -> f64 {
    let x = c * aer + (kl - epsilon.ln()) / n as f64;
    (-(-x).exp_m1()) / (-(-c).exp_m1())
}

/// `(∂/∂aer, ∂/∂kl)` of [`catoni_at`] at fixed `c`. At the minimising `c`
/// these are also the derivatives of the infimum.
pub fn catoni_grad(aer: f64, kl: f64, n: usize, epsilon: f64, c: f64) -> (f64, f64) {
    let nf = n as f64;
    let x = c * aer + (kl - epsilon.ln()) / nf;
    let den = -(-c).exp_m1();
    let e = (-x).exp();
    (c * e / den, e / (nf * den))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatoniResult {
    /// The infimum, clamped to at most 1.
    pub value: f64,
    pub c: f64,
    /// The minimiser sits at an end of the search range.
    pub at_boundary: bool,
}

/// Infimum of [`catoni_at`] over `ln c ∈ [ln 1e-4, ln 1e4]`: coarse scan,
/// then golden-section refinement to `|Δc|/c < 1e-8`.
pub fn catoni(aer: f64, kl: f64, n: usize, epsilon: f64) -> CatoniResult {
    check_bound_args(n, epsilon);
    let (lo, hi) = (CATONI_C_MIN.ln(), CATONI_C_MAX.ln());
    let f = |u: f64| catoni_at(aer, kl, n, epsilon, u.exp());
    let steps = 160;
    let h = (hi - lo) / steps as f64;
    let mut best: usize = 0;
    let mut best_v = f64::INFINITY;
    for i in 0..=steps {
        let v = f(lo + h * i as f64);
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    let mut a = lo + h * best.saturating_sub(1) as f64;
    let mut b = (lo + h * (best + 1) as f64).min(hi);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > 1e-8 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = f(x2);
        }
    }
    let mut u = 0.5 * (a + b);
    let mut v = f(u);
    for cand in [lo + h * best as f64, lo, hi] {
        let fc = f(cand);
        if fc < v {
            v = fc;
            u = cand;
        }
    }
    // Flat tails mean the interior optimum can be indistinguishable from an
    // end of the range; report that as a boundary hit too.
    let flat = |e: f64| f(e) <= v + 1e-12 * v.abs();
    let at_boundary = (u - lo).abs() < 1e-6 || (hi - u).abs() < 1e-6 || flat(lo) || flat(hi);
    CatoniResult {
        value: v.min(1.0),
        c: u.exp(),
        at_boundary,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    McAllester,
    #[default]
    Catoni,
}

/// Monte-Carlo estimate of the expected empirical error and the bounds
/// evaluated with it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McBound {
    pub expected_error: f64,
    pub samples: usize,
    pub std_error: f64,
    pub kl: f64,
    pub true_mcallester: f64,
    pub true_catoni: f64,
    pub true_catoni_c: f64,
}

/// Evaluated bound objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub aer: f64,
    pub kl: f64,
    pub mcallester: f64,
    pub catoni: f64,
    pub catoni_c: f64,
    pub epsilon: f64,
    #[serde(rename = "N")]
    pub n: usize,
    /// Largest relative residual of any Kronecker compression of the prior.
    pub prior_compression_residual: f64,
    pub mc: Option<McBound>,
}

/// JSON schema for serialized [`BoundReport`]s.
pub const BOUND_REPORT_SCHEMA: &str = include_str!("../schema/bound_report.schema.json");

impl BoundReport {
    pub fn from_values(aer: f64, kl: f64, n: usize, epsilon: f64) -> Self {
        let ca = catoni(aer, kl, n, epsilon);
        BoundReport {
            aer,
            kl,
            mcallester: mcallester(aer, kl, n, epsilon),
            catoni: ca.value,
            catoni_c: ca.c,
            epsilon,
            n,
            prior_compression_residual: 0.0,
            mc: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Approximate bounds at the given scales.
pub fn evaluate(
    spectrum: &WhitenedSpectrum,
    scales: &CurvatureScales,
    data_nll: f64,
    n: usize,
    epsilon: f64,
) -> Result<BoundReport> {
    let (a, _) = aer(spectrum, scales, data_nll, n)?;
    let (k, _) = kl_of_scales(spectrum, scales)?;
    Ok(BoundReport::from_values(a, k, n, epsilon))
}

/// Objective value and gradient; Catoni uses the inner minimiser `c`.
pub fn objective_and_grad(
    spectrum: &WhitenedSpectrum,
    scales: &CurvatureScales,
    data_nll: f64,
    n: usize,
    epsilon: f64,
    objective: Objective,
) -> Result<(f64, Vec<f64>)> {
    let (a, ga) = aer(spectrum, scales, data_nll, n)?;
    let (k, gk) = kl_of_scales(spectrum, scales)?;
    let (v, da, dk) = match objective {
        Objective::McAllester => {
            let (da, dk) = mcallester_grad(k, n, epsilon);
            (mcallester(a, k, n, epsilon), da, dk)
        }
        Objective::Catoni => {
            let ca = catoni(a, k, n, epsilon);
            let (da, dk) = catoni_grad(a, k, n, epsilon, ca.c);
            (catoni_at(a, k, n, epsilon, ca.c), da, dk)
        }
    };
    let grad = ga.iter().zip(&gk).map(|(x, y)| da * x + dk * y).collect();
    Ok((v, grad))
}

fn objective_value(
    spectrum: &WhitenedSpectrum,
    scales: &CurvatureScales,
    data_nll: f64,
    n: usize,
    epsilon: f64,
    objective: Objective,
) -> Result<f64> {
    let (a, _) = aer(spectrum, scales, data_nll, n)?;
    let (k, _) = kl_of_scales(spectrum, scales)?;
    Ok(match objective {
        Objective::McAllester => mcallester(a, k, n, epsilon),
        Objective::Catoni => {
            let ca = catoni(a, k, n, epsilon);
            catoni_at(a, k, n, epsilon, ca.c)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleOptConfig {
    pub steps: usize,
    pub lr: f64,
    /// Per-step learning-rate decay.
    pub decay: f64,
    /// Start from the best point of the shared `α × β × τ` grid.
    pub grid_warm_start: bool,
}

impl Default for ScaleOptConfig {
    fn default() -> Self {
        ScaleOptConfig {
            steps: 2000,
            lr: 0.05,
            decay: 0.999999,
            grid_warm_start: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScaleFit {
    pub scales: CurvatureScales,
    pub report: BoundReport,
    /// Best objective value seen after each step (non-increasing).
    pub best_trace: Vec<f64>,
}

/// Shared-scale grid point with the smallest objective.
pub fn best_grid_point(
    spectrum: &WhitenedSpectrum,
    data_nll: f64,
    n: usize,
    epsilon: f64,
    objective: Objective,
) -> Result<(CurvatureScales, f64)> {
    let layers = spectrum.num_layers();
    let mut best = (CurvatureScales::unit(layers), f64::INFINITY);
    for &alpha in &GRID_AB {
        for &beta in &GRID_AB {
            for tau in grid_tau() {
                let s = CurvatureScales::shared(layers, alpha, beta, tau);
                let v = objective_value(spectrum, &s, data_nll, n, epsilon, objective)?;
                if v < best.1 {
                    best = (s, v);
                }
            }
        }
    }
    Ok(best)
}

/// Minimises the chosen bound over per-layer log-scales with Adam.
pub fn optimize_scales(
    spectrum: &WhitenedSpectrum,
    data_nll: f64,
    n: usize,
    epsilon: f64,
    objective: Objective,
    cfg: &ScaleOptConfig,
) -> Result<ScaleFit> {
    let layers = spectrum.num_layers();
    let unit = CurvatureScales::unit(layers);
    let mut start = unit.clone();
    let mut start_v = objective_value(spectrum, &unit, data_nll, n, epsilon, objective)?;
    if !start_v.is_finite() {
        return Err(Error::NonFinite("bound objective at unit scales".into()));
    }
    if cfg.grid_warm_start {
        let (s, v) = best_grid_point(spectrum, data_nll, n, epsilon, objective)?;
        if v < start_v {
            start = s;
            start_v = v;
        }
    }
    let mut x = start.to_vec();
    let mut best_x = x.clone();
    let mut best_v = start_v;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(best_v);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            decay: cfg.decay,
            ..AdamConfig::default()
        },
        x.len(),
    );
    for _ in 0..cfg.steps {
        let s = CurvatureScales::from_vec(&x);
        let (v, g) = objective_and_grad(spectrum, &s, data_nll, n, epsilon, objective)?;
        if !v.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bound objective during scale optimisation".into()));
        }
        if v < best_v {
            best_v = v;
            best_x = x.clone();
        }
        trace.push(best_v);
        opt.step(&mut x, &g);
    }
    let s = CurvatureScales::from_vec(&x);
    let v = objective_value(spectrum, &s, data_nll, n, epsilon, objective)?;
    if v.is_finite() && v < best_v {
        best_v = v;
        best_x = x;
        if let Some(last) = trace.last_mut() {
            *last = best_v;
        }
    }
    let scales = CurvatureScales::from_vec(&best_x);
    let report = evaluate(spectrum, &scales, data_nll, n, epsilon)?;
    Ok(ScaleFit {
        scales,
        report,
        best_trace: trace,
    })
}

/// Trains parameters directly on a bound with the posterior collapsed to a
/// point mass, starting from `init`. McAllester minimises
/// `NLL/(N ln 2) + √((q/(2τ) + ln(2N/ε))/(2N))`; Catoni minimises the
/// linearised form at a `c` refreshed after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn frequentist_projection(
    model: &dyn Model,
    init: &Params,
    train: &Dataset,
    prior: &NetworkGaussian,
    tau: f64,
    epsilon: f64,
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if train.is_empty() {
        return Err(Error::Empty("frequentist projection needs data".into()));
    }
    let loss = match objective {
        Objective::McAllester => Loss::McAllester { prior, tau, epsilon },
        Objective::Catoni => Loss::Catoni { prior, tau, epsilon },
    };
    fit(model, init, train, None, loss, cfg)
}

/// Full-batch projection objective and its gradient; Catoni uses the given `c`.
#[allow(clippy::too_many_arguments)]
pub fn projection_objective(
    model: &dyn Model,
    theta: &Params,
    data: &Dataset,
    prior: &NetworkGaussian,
    tau: f64,
    epsilon: f64,
    objective: Objective,
    c: f64,
) -> Result<(f64, Params)> {
    let loss = match objective {
        Objective::McAllester => Loss::McAllester { prior, tau, epsilon },
        Objective::Catoni => Loss::Catoni { prior, tau, epsilon },
    };
    full_objective(model, theta, data, &loss, c, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Monte-Carlo estimate of `E_ρ[error rate]` on `data` and the resulting
/// true McAllester and Catoni bounds with the exact KL.
pub fn true_bound_mc(
    model: &dyn Model,
    posterior: &NetworkGaussian,
    prior: &NetworkGaussian,
    data: &Dataset,
    n_samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<McBound> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Empty("bound evaluation needs data".into()));
    }
    let kl = posterior.kl_divergence(prior)?;
    let (mean, se) = gibbs_error(model, posterior, data, n_samples, seed)?;
    let ca = catoni(mean, kl, data.len(), epsilon);
    Ok(McBound {
        expected_error: mean,
        samples: n_samples,
        std_error: se,
        kl,
        true_mcallester: mcallester(mean, kl, data.len(), epsilon),
        true_catoni: ca.value,
        true_catoni_c: ca.c,
    })
}

/// Mean and standard error over posterior draws of the error rate on `data`.
pub fn gibbs_error(
    model: &dyn Model,
    posterior: &NetworkGaussian,
    data: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let sampler = posterior.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let theta = sampler.sample(&mut rng);
        errs.push(error_rate(&model.logits(&theta, &data.inputs)?, &data.labels)?);
    }
    let s = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / s;
    let se = if errs.len() > 1 {
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (s - 1.0);
        (var / s).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

/// Checks the structural constraints of a serialized report.
pub fn validate_report(report: &BoundReport) -> Result<()> {
    let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
    if !(report.aer >= 0.0) {
        return bad("aer must be non-negative");
    }
    if !(report.kl >= -1e-9) {
        return bad("kl must be non-negative");
    }
    if !(report.catoni > 0.0 && report.catoni <= 1.0) {
        return bad("catoni must lie in (0, 1]");
    }
    if !(report.epsilon > 0.0 && report.epsilon < 1.0) {
        return bad("epsilon must lie in (0, 1)");
    }
    if report.n == 0 {
        return bad("N must be positive");
    }
    Ok(())
}

/// Layer prior with a Kronecker precision and unit temperature.
pub fn kron_prior(mean: DMatrix<f64>, k: KronFactored, damping: f64) -> Result<LayerGaussian> {
    LayerGaussian::new(mean, Precision::Kron(k), damping, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussdist::spd_logdet;
    use crate::net::{Activation, MlpArchitecture};
    use rand_distr::{Distribution, StandardNormal};

    fn rand_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        &g * g.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn instance(seed: u64) -> (WhitenedSpectrum, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = KronFactored::new(rand_spd(4, &mut rng), rand_spd(3, &mut rng)).unwrap();
        let p = KronFactored::new(rand_spd(4, &mut rng), rand_spd(3, &mut rng)).unwrap();
        let mean = DMatrix::from_fn(4, 3, |_, _| StandardNormal.sample(&mut rng));
        let theta = DMatrix::from_fn(4, 3, |_, _| StandardNormal.sample(&mut rng));
        let fd = f.to_dense(4096).unwrap();
        let pd = p.to_dense(4096).unwrap();
        let prior = kron_prior(mean, p, 0.0).unwrap();
        let spec = whiten(
            &[FisherBlock::Kron(f)],
            &NetworkGaussian::new(vec![prior]),
            &Params { blocks: vec![theta] },
        )
        .unwrap();
        (spec, fd, pd)
    }

    #[test]
    fn whitened_identities_match_dense() {
        let (spec, f, p) = instance(0);
        let l = &spec.layers[0];
        for (alpha, beta) in [(1.0, 1.0), (0.3, 2.0), (5.0, 0.01)] {
            let m = &f * beta + &p * alpha;
            let minv = m.clone().try_inverse().unwrap();
            let t1 = (&f * &minv).trace();
            let t0 = (&p * &minv).trace();
            let ld = spd_logdet(&m).unwrap();
            assert!((l.trace_fisher(alpha, beta) - t1).abs() <= 1e-8 * t1.abs());
            assert!((l.trace_prior(alpha, beta) - t0).abs() <= 1e-8 * t0.abs());
            assert!((l.logdet(alpha, beta) - ld).abs() <= 1e-8 * ld.abs());
        }
    }

    #[test]
    fn fisher_equal_to_prior_gives_unit_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = KronFactored::new(rand_spd(3, &mut rng), rand_spd(2, &mut rng)).unwrap();
        let prior = kron_prior(DMatrix::zeros(3, 2), p.clone(), 0.0).unwrap();
        let l = whiten_layer(&FisherBlock::Kron(p), &prior, &DMatrix::zeros(3, 2)).unwrap();
        assert!(l.g.iter().all(|g| (g - 1.0).abs() < 1e-10));
        assert!((l.trace_fisher(0.5, 1.5) - 6.0 / 2.0).abs() < 1e-10);
    }

    #[test]
    fn isotropic_prior_scales_fisher_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = KronFactored::new(rand_spd(3, &mut rng), rand_spd(2, &mut rng)).unwrap();
        let gamma = 0.7;
        let prior = LayerGaussian::isotropic((3, 2), gamma).unwrap();
        let l = whiten_layer(&FisherBlock::Kron(f.clone()), &prior, &DMatrix::zeros(3, 2)).unwrap();
        let mut expect = symmetric_eigen(&f.to_dense(4096).unwrap()).unwrap().values;
        expect.iter_mut().for_each(|v| *v /= gamma);
        let mut got = l.g.clone();
        got.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn kl_matches_materialised_distributions() {
        let (spec, _, _) = instance(3);
        let s = CurvatureScales::from_vec(&[0.2, -0.5, -1.3]);
        let (k, _) = kl_of_scales(&spec, &s).unwrap();
        let post = spec.posterior(&s).unwrap();
        let direct = post.kl_divergence(&spec.prior()).unwrap();
        assert!((k - direct).abs() <= 1e-8 * direct.abs(), "{k} vs {direct}");
        let dense = NetworkGaussian::new(vec![post.layers[0].to_dense(4096).unwrap()]);
        let dense_prior = NetworkGaussian::new(vec![spec.prior().layers[0].to_dense(4096).unwrap()]);
        let d2 = dense.kl_divergence(&dense_prior).unwrap();
        assert!((k - d2).abs() <= 1e-8 * d2.abs());
    }

    #[test]
    fn posterior_equal_to_prior_has_zero_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = KronFactored::new(rand_spd(3, &mut rng), rand_spd(2, &mut rng)).unwrap();
        let prior = LayerGaussian::isotropic((3, 2), 2.0).unwrap();
        let spec = WhitenedSpectrum {
            layers: vec![whiten_layer(&FisherBlock::Kron(f), &prior, &DMatrix::zeros(3, 2)).unwrap()],
        };
        let s = CurvatureScales {
            layers: vec![LayerScales::from_values(1.0, 0.0, 1.0)],
        };
        assert!(kl_of_scales(&spec, &s).unwrap().0.abs() < 1e-10);
    }

    fn fd_check(f: impl Fn(&[f64]) -> (f64, Vec<f64>), x: &[f64]) {
        let (_, g) = f(x);
        let h = 1e-6;
        for k in 0..x.len() {
            let mut p = x.to_vec();
            p[k] += h;
            let mut m = x.to_vec();
            m[k] -= h;
            let fd = (f(&p).0 - f(&m).0) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1e-6),
                "coordinate {k}: fd {fd} vs analytic {}",
                g[k]
            );
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (spec, _, _) = instance(5);
        let x = [0.3, -0.2, -2.0];
        fd_check(|v| aer(&spec, &CurvatureScales::from_vec(v), 12.0, 50).unwrap(), &x);
        fd_check(|v| kl_of_scales(&spec, &CurvatureScales::from_vec(v)).unwrap(), &x);
    }

    #[test]
    fn aer_limits() {
        let (spec, _, _) = instance(6);
        let cold = CurvatureScales::shared(1, 1.0, 1.0, 1e-30);
        let (a, _) = aer(&spec, &cold, 7.0, 20).unwrap();
        assert!((a - 7.0 / (20.0 * std::f64::consts::LN_2)).abs() < 1e-12);
        let zero = WhitenedSpectrum {
            layers: vec![whiten_layer(
                &FisherBlock::Kron(KronFactored::zeros(2, 2)),
                &LayerGaussian::isotropic((2, 2), 1.0).unwrap(),
                &DMatrix::zeros(2, 2),
            )
            .unwrap()],
        };
        assert_eq!(aer(&zero, &CurvatureScales::unit(1), 0.0, 10).unwrap().0, 0.0);
    }

    #[test]
    fn mcallester_hand_value() {
        let v = mcallester(0.0, 0.0, 100, 0.1);
        assert!((v - (200f64.ln() / 200.0).sqrt()).abs() < 1e-15);
        assert!((v - 0.16279).abs() < 1e-4);
        assert!(mcallester(0.1, 1.0, 100, 0.1) > mcallester(0.1, 0.5, 100, 0.1));
        assert!((mcallester(0.2, 3.0, 1 << 40, 0.1) - 0.2).abs() < 1e-5);
    }

    #[test]
    fn catoni_hand_values() {
        let r = catoni(0.0, 0.0, 100, 0.1);
        assert!((r.value - (1.0 - 0.1f64.powf(0.01))).abs() < 1e-9, "{}", r.value);
        assert!(r.at_boundary);
        let v = catoni(1.2, 5.0, 100, 0.1);
        assert!((v.value - 1.0).abs() < 1e-9);
        let mid = catoni(0.1, 10.0, 1000, 0.1);
        assert!(mid.value > 0.0 && mid.value <= 1.0);
        assert!(mid.value <= mcallester(0.1, 10.0, 1000, 0.1) + 1.0);
        // The refined c is a local minimum.
        let f = |c: f64| catoni_at(0.1, 10.0, 1000, 0.1, c);
        assert!(f(mid.c) <= f(mid.c * 1.001) && f(mid.c) <= f(mid.c / 1.001));
    }

    #[test]
    fn optimisation_beats_unit_scales_and_grid() {
        let (spec, _, _) = instance(7);
        let cfg = ScaleOptConfig {
            steps: 500,
            ..Default::default()
        };
        for obj in [Objective::McAllester, Objective::Catoni] {
            let fit = optimize_scales(&spec, 3.0, 200, 0.1, obj, &cfg).unwrap();
            let unit = objective_value(&spec, &CurvatureScales::unit(1), 3.0, 200, 0.1, obj).unwrap();
            let (_, grid) = best_grid_point(&spec, 3.0, 200, 0.1, obj).unwrap();
            let last = *fit.best_trace.last().unwrap();
            assert!(last <= unit && last <= grid);
            assert!(fit.best_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn schema_is_valid_json() {
        let v: serde_json::Value = serde_json::from_str(BOUND_REPORT_SCHEMA).unwrap();
        assert_eq!(v["type"], "object");
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let arch = MlpArchitecture::new(vec![3, 4, 2], Activation::Tanh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(15, 3, |_, _| StandardNormal.sample(&mut rng));
        let data = Dataset::new(x, (0..15).map(|i| i % 2).collect(), 2).unwrap();
        let mut prior = NetworkGaussian::isotropic(&arch.block_shapes(), 3.0).unwrap();
        for l in prior.layers.iter_mut() {
            l.mean = l.mean.map(|_| StandardNormal.sample(&mut rng));
        }
        let theta = arch.init(&mut rng);
        let shapes = arch.block_shapes();
        for obj in [Objective::McAllester, Objective::Catoni] {
            let f = |v: &[f64]| {
                let t = Params::unflatten(&shapes, v).unwrap();
                let (val, g) = projection_objective(&arch, &t, &data, &prior, 0.05, 0.1, obj, 2.5).unwrap();
                (val, g.flatten())
            };
            fd_check(f, &theta.flatten());
        }
    }

    #[test]
    fn projection_lowers_its_objective() {
        let arch = MlpArchitecture::new(vec![2, 5, 2], Activation::Tanh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = DMatrix::from_fn(60, 2, |i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if i % 2 == 0 { -1.0 + 0.5 * z } else { 1.0 + 0.5 * z }
        });
        let data = Dataset::new(x, (0..60).map(|i| i % 2).collect(), 2).unwrap();
        let prior = NetworkGaussian::isotropic(&arch.block_shapes(), 1.0).unwrap();
        let init = arch.init(&mut rng);
        let cfg = TrainConfig { lr: 0.01, max_epochs: 50, ..Default::default() };
        let out = frequentist_projection(&arch, &init, &data, &prior, 0.1, 0.1, Objective::McAllester, &cfg).unwrap();
        assert!(out.loss_trace.iter().cloned().fold(f64::INFINITY, f64::min) < out.loss_trace[0]);
    }

}
