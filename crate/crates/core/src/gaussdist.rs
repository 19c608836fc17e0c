//! Layer-wise Gaussian distributions over network weights.
//!
//! Each layer is a Gaussian over `vec(W_l)` with covariance `τ_l · P_l⁻¹`.
//! The precision `P_l` is either dense or Kronecker-factored as
//! `L ⊗ R`, where `L` acts on the output side and `R` on the homogeneous
//! input side; in the factored case the distribution is matrix-normal.
//! A third form, [`EigenKron`], stores `(A_L ⊗ A_R) diag(d) (A_L ⊗ A_R)ᵀ`
//! and represents a damped or rescaled sum of two Kronecker products exactly.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kronalg::{
    check_symmetric, frob_inner, kron_dense, symmetric_eigen, unvec_rows, vec_rows,
    KronFactored, DEFAULT_DENSE_LIMIT,
};
use crate::net::Params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Kron(KronFactored),
    Dense(#[serde(with = "crate::matrix_io")] DMatrix<f64>),
    Eigen(EigenKron),
}

/// `P = (A_L ⊗ A_R) diag(vec d) (A_L ⊗ A_R)ᵀ` with `d > 0`.
///
/// With `A_L = L̃^{1/2} U_L` and `A_R = R̃^{1/2} U_R` this is
/// `β F + α P̃` for `P̃ = L̃ ⊗ R̃` and whitened Fisher eigenbases `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenKron {
    #[serde(with = "crate::matrix_io")]
    pub left_map: DMatrix<f64>,
    #[serde(with = "crate::matrix_io")]
    pub right_map: DMatrix<f64>,
    /// `M × N` grid of diagonal entries, row-major over `vec`.
    #[serde(with = "crate::matrix_io")]
    pub diag: DMatrix<f64>,
}

impl EigenKron {
    pub fn new(left_map: DMatrix<f64>, right_map: DMatrix<f64>, diag: DMatrix<f64>) -> Result<Self> {
        if !left_map.is_square()
            || !right_map.is_square()
            || diag.shape() != (left_map.nrows(), right_map.nrows())
        {
            return Err(Error::DimensionMismatch(format!(
                "maps {:?}, {:?} and diagonal {:?} are inconsistent",
                left_map.shape(),
                right_map.shape(),
                diag.shape()
            )));
        }
        let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) || diag.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
        }
        Ok(EigenKron {
            left_map,
            right_map,
            diag,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.diag.shape()
    }

    pub fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.left_map.transpose() * x * &self.right_map;
        &self.left_map * y.component_mul(&self.diag) * self.right_map.transpose()
    }

    pub fn logdet(&self) -> Result<f64> {
        let (m, n) = self.dims();
        let gl = self.left_map.transpose() * &self.left_map;
        let gr = self.right_map.transpose() * &self.right_map;
        Ok(n as f64 * spd_logdet(&gl)?
            + m as f64 * spd_logdet(&gr)?
            + self.diag.iter().map(|v| v.ln()).sum::<f64>())
    }

    pub fn to_dense(&self, limit: usize) -> Result<DMatrix<f64>> {
        let k = kron_dense(
            &KronFactored {
                left: self.left_map.clone(),
                right: self.right_map.clone(),
            },
            limit,
        )?;
        let d = nalgebra::DVector::from_vec(vec_rows(&self.diag));
        Ok(&k * DMatrix::from_diagonal(&d) * k.transpose())
    }

    fn inverse_maps(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let inv = |a: &DMatrix<f64>| {
            a.clone()
                .try_inverse()
                .ok_or(Error::NotPositiveDefinite { min_eigenvalue: 0.0 })
        };
        Ok((inv(&self.left_map)?, inv(&self.right_map)?))
    }

    /// `trace(P_p P⁻¹)` for a Kronecker `P_p = L_p ⊗ R_p`.
    pub fn trace_against(&self, p: &KronFactored) -> Result<f64> {
        let (il, ir) = self.inverse_maps()?;
        let a = (&il * &p.left * il.transpose()).diagonal();
        let b = (&ir * &p.right * ir.transpose()).diagonal();
        let mut acc = 0.0;
        for i in 0..a.len() {
            for j in 0..b.len() {
                acc += a[i] * b[j] / self.diag[(i, j)];
            }
        }
        Ok(acc)
    }
}

impl Precision {
    pub fn dim(&self) -> usize {
        match self {
            Precision::Kron(k) => k.dim(),
            Precision::Dense(d) => d.nrows(),
            Precision::Eigen(e) => e.diag.len(),
        }
    }

    pub fn to_dense(&self, limit: usize) -> Result<DMatrix<f64>> {
        match self {
            Precision::Kron(k) => k.to_dense(limit),
            Precision::Dense(d) => Ok(d.clone()),
            Precision::Eigen(e) => e.to_dense(limit),
        }
    }

    /// `P x` for an `out × (in+1)` weight-shaped `x`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Precision::Kron(k) => k.apply_mat(x),
            Precision::Eigen(e) => e.apply_mat(x),
            Precision::Dense(d) => {
                let v = d * nalgebra::DVector::from_vec(vec_rows(x));
                unvec_rows(v.as_slice(), x.nrows(), x.ncols())
            }
        }
    }

    pub fn quadratic(&self, x: &DMatrix<f64>) -> f64 {
        frob_inner(x, &self.apply(x))
    }

    pub fn logdet(&self) -> Result<f64> {
        match self {
            Precision::Kron(k) => {
                let (m, n) = k.dims();
                Ok(n as f64 * spd_logdet(&k.left)? + m as f64 * spd_logdet(&k.right)?)
            }
            Precision::Dense(d) => spd_logdet(d),
            Precision::Eigen(e) => e.logdet(),
        }
    }
}

fn cholesky(a: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    a.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        min_eigenvalue: symmetric_eigen(a).map(|e| e.min_value()).unwrap_or(f64::NAN),
    })
}

/// `ln det A` for a symmetric positive definite `A`.
pub fn spd_logdet(a: &DMatrix<f64>) -> Result<f64> {
    let ch = cholesky(a)?;
    Ok(2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// `trace(A B⁻¹)` for symmetric `A` and SPD `B`.
pub fn trace_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ch = cholesky(b)?;
    Ok(ch.solve(a).trace())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGaussian {
    #[serde(with = "crate::matrix_io")]
    pub mean: DMatrix<f64>,
    /// Full precision, including any damping already folded in.
    pub precision: Precision,
    /// Damping `γ` that was added to the curvature to form `precision`.
    pub damping: f64,
    /// Temperature: the covariance is `tau · precision⁻¹`.
    pub tau: f64,
}

impl LayerGaussian {
    pub fn new(mean: DMatrix<f64>, precision: Precision, damping: f64, tau: f64) -> Result<Self> {
        let n = mean.len();
        if precision.dim() != n {
            return Err(Error::DimensionMismatch(format!(
                "precision of size {} for a {}x{} mean",
                precision.dim(),
                mean.nrows(),
                mean.ncols()
            )));
        }
        if let Precision::Kron(k) = &precision {
            if k.dims() != mean.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "Kronecker factors {:?} do not match mean shape {:?}",
                    k.dims(),
                    mean.shape()
                )));
            }
            check_symmetric(&k.left)?;
            check_symmetric(&k.right)?;
        }
        if let Precision::Dense(d) = &precision {
            check_symmetric(d)?;
        }
        if let Precision::Eigen(e) = &precision {
            if e.dims() != mean.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "eigen grid {:?} does not match mean shape {:?}",
                    e.dims(),
                    mean.shape()
                )));
            }
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        if !(damping >= 0.0) {
            return Err(Error::InvalidArgument(format!("damping must be >= 0, got {damping}")));
        }
        Ok(LayerGaussian {
            mean,
            precision,
            damping,
            tau,
        })
    }

    /// Zero-mean `N(0, γ⁻¹ I)`.
    pub fn isotropic(shape: (usize, usize), gamma: f64) -> Result<Self> {
        LayerGaussian::new(
            DMatrix::zeros(shape.0, shape.1),
            Precision::Kron(KronFactored::scaled_identity(shape.0, shape.1, gamma)),
            gamma,
            1.0,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        LayerGaussian {
            tau,
            ..self.clone()
        }
    }

    pub fn to_dense(&self, limit: usize) -> Result<Self> {
        Ok(LayerGaussian {
            precision: Precision::Dense(self.precision.to_dense(limit)?),
            ..self.clone()
        })
    }

    /// `(θ − μ)ᵀ P (θ − μ)` without the temperature.
    pub fn quadratic_form(&self, theta: &DMatrix<f64>) -> Result<f64> {
        if theta.shape() != self.mean.shape() {
            return Err(Error::DimensionMismatch("theta layout".into()));
        }
        Ok(self.precision.quadratic(&(theta - &self.mean)))
    }

    /// Gradient of `½ (θ − μ)ᵀ P (θ − μ)`, i.e. `P (θ − μ)`.
    pub fn penalty_grad(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        self.precision.apply(&(theta - &self.mean))
    }

    pub fn log_density(&self, theta: &DMatrix<f64>) -> Result<f64> {
        let n = self.dim() as f64;
        let q = self.quadratic_form(theta)?;
        Ok(-0.5 * (n * (2.0 * PI * self.tau).ln() - self.precision.logdet()? + q / self.tau))
    }

    /// `trace(F Σ)` with `Σ = τ P⁻¹`, for a Kronecker `F`.
    pub fn trace_covariance(&self, f: &KronFactored) -> Result<f64> {
        let t = match &self.precision {
            Precision::Eigen(e) => e.trace_against(f)?,
            Precision::Kron(k) => trace_solve(&f.left, &k.left)? * trace_solve(&f.right, &k.right)?,
            Precision::Dense(d) => trace_solve(&f.to_dense(d.nrows())?, d)?,
        };
        Ok(self.tau * t)
    }

    /// `KL(self ‖ prior)` in closed form.
    pub fn kl(&self, prior: &LayerGaussian) -> Result<f64> {
        if self.shape() != prior.shape() {
            return Err(Error::DimensionMismatch(format!(
                "layer shapes {:?} and {:?}",
                self.shape(),
                prior.shape()
            )));
        }
        let n = self.dim() as f64;
        let diff = &self.mean - &prior.mean;
        let (trace, logdet_q, logdet_p, quad) = match (&self.precision, &prior.precision) {
            (Precision::Kron(q), Precision::Kron(p)) => (
                trace_solve(&p.left, &q.left)? * trace_solve(&p.right, &q.right)?,
                self.precision.logdet()?,
                prior.precision.logdet()?,
                p.quadratic(&diff),
            ),
            (Precision::Eigen(q), Precision::Kron(p)) => (
                q.trace_against(p)?,
                q.logdet()?,
                prior.precision.logdet()?,
                p.quadratic(&diff),
            ),
            _ => {
                let pq = self.precision.to_dense(DEFAULT_DENSE_LIMIT)?;
                let pp = prior.precision.to_dense(DEFAULT_DENSE_LIMIT)?;
                (
                    trace_solve(&pp, &pq)?,
                    spd_logdet(&pq)?,
                    spd_logdet(&pp)?,
                    Precision::Dense(pp).quadratic(&diff),
                )
            }
        };
        let ratio = self.tau / prior.tau;
        let kl = 0.5
            * (ratio * trace - n + quad / prior.tau + n * (prior.tau / self.tau).ln() + logdet_q
                - logdet_p);
        if !kl.is_finite() {
            return Err(Error::NonFinite("layer KL".into()));
        }
        Ok(kl)
    }

    pub fn sampler(&self) -> Result<LayerSampler> {
        let root = match &self.precision {
            Precision::Kron(k) => {
                let l = symmetric_eigen(&k.left)?;
                let r = symmetric_eigen(&k.right)?;
                l.require_positive()?;
                r.require_positive()?;
                Root::Kron(
                    l.scaled_vectors(|v| v.powf(-0.5)),
                    r.scaled_vectors(|v| v.powf(-0.5)),
                )
            }
            Precision::Dense(d) => {
                let e = symmetric_eigen(d)?;
                e.require_positive()?;
                Root::Dense(e.scaled_vectors(|v| v.powf(-0.5)))
            }
            Precision::Eigen(e) => {
                let (il, ir) = e.inverse_maps()?;
                Root::Eigen(il.transpose(), ir, e.diag.map(|v| v.powf(-0.5)))
            }
        };
        Ok(LayerSampler {
            mean: self.mean.clone(),
            scale: self.tau.sqrt(),
            root,
        })
    }
}

#[derive(Debug, Clone)]
enum Root {
    /// `A = U_L Λ_L^{-1/2}`, `B = U_R Λ_R^{-1/2}`.
    Kron(DMatrix<f64>, DMatrix<f64>),
    Dense(DMatrix<f64>),
    /// `W = A_L^{-T} (Z ⊙ d^{-1/2}) A_R^{-1}`.
    Eigen(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>),
}

/// Precomputed square roots for repeated sampling of one layer.
#[derive(Debug, Clone)]
pub struct LayerSampler {
    mean: DMatrix<f64>,
    scale: f64,
    root: Root,
}

impl LayerSampler {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let (m, n) = self.mean.shape();
        let z = DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(rng));
        let noise = match &self.root {
            Root::Kron(a, b) => a * z * b.transpose(),
            Root::Eigen(a, b, d) => a * z.component_mul(d) * b,
            Root::Dense(c) => {
                let v = c * nalgebra::DVector::from_vec(vec_rows(&z));
                unvec_rows(v.as_slice(), m, n)
            }
        };
        &self.mean + noise * self.scale
    }
}

/// Block-diagonal Gaussian over all layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGaussian {
    pub layers: Vec<LayerGaussian>,
}

impl NetworkGaussian {
    pub fn new(layers: Vec<LayerGaussian>) -> Self {
        NetworkGaussian { layers }
    }

    pub fn isotropic(shapes: &[(usize, usize)], gamma: f64) -> Result<Self> {
        Ok(NetworkGaussian {
            layers: shapes
                .iter()
                .map(|&s| LayerGaussian::isotropic(s, gamma))
                .collect::<Result<_>>()?,
        })
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.shape()).collect()
    }

    pub fn mean(&self) -> Params {
        Params {
            blocks: self.layers.iter().map(|l| l.mean.clone()).collect(),
        }
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        NetworkGaussian {
            layers: self.layers.iter().map(|l| l.with_tau(tau)).collect(),
        }
    }

    fn check_layout(&self, theta: &Params) -> Result<()> {
        theta.check_shapes(&self.shapes())
    }

    pub fn quadratic_form(&self, theta: &Params) -> Result<f64> {
        self.check_layout(theta)?;
        let mut acc = 0.0;
        for (l, w) in self.layers.iter().zip(&theta.blocks) {
            acc += l.quadratic_form(w)?;
        }
        Ok(acc)
    }

    /// Gradient of `½ Σ_l (θ_l − μ_l)ᵀ P_l (θ_l − μ_l)`.
    pub fn penalty_grad(&self, theta: &Params) -> Result<Params> {
        self.check_layout(theta)?;
        Ok(Params {
            blocks: self
                .layers
                .iter()
                .zip(&theta.blocks)
                .map(|(l, w)| l.penalty_grad(w))
                .collect(),
        })
    }

    pub fn log_density(&self, theta: &Params) -> Result<f64> {
        self.check_layout(theta)?;
        let mut acc = 0.0;
        for (l, w) in self.layers.iter().zip(&theta.blocks) {
            acc += l.log_density(w)?;
        }
        Ok(acc)
    }

    pub fn layer_kls(&self, prior: &NetworkGaussian) -> Result<Vec<f64>> {
        if self.layers.len() != prior.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} posterior layers vs {} prior layers",
                self.layers.len(),
                prior.layers.len()
            )));
        }
        self.layers
            .iter()
            .zip(&prior.layers)
            .map(|(q, p)| q.kl(p))
            .collect()
    }

    pub fn kl_divergence(&self, prior: &NetworkGaussian) -> Result<f64> {
        Ok(self.layer_kls(prior)?.iter().sum())
    }

    pub fn sampler(&self) -> Result<NetworkSampler> {
        Ok(NetworkSampler {
            layers: self
                .layers
                .iter()
                .map(|l| l.sampler())
                .collect::<Result<_>>()?,
        })
    }

    /// One draw, deterministic in `seed`.
    pub fn sample(&self, seed: u64) -> Result<Params> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.sampler()?.sample(&mut rng))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone)]
pub struct NetworkSampler {
    layers: Vec<LayerSampler>,
}

impl NetworkSampler {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Params {
        Params {
            blocks: self.layers.iter().map(|l| l.sample(rng)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        &g * g.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn rand_layer(m: usize, n: usize, tau: f64, rng: &mut ChaCha8Rng) -> LayerGaussian {
        let mean = DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(rng));
        let k = KronFactored::new(rand_spd(m, rng), rand_spd(n, rng)).unwrap();
        LayerGaussian::new(mean, Precision::Kron(k), 0.0, tau).unwrap()
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = rand_layer(3, 4, 0.7, &mut rng);
        assert!(l.kl(&l).unwrap().abs() < 1e-10);
    }

    #[test]
    fn scalar_kl_matches_hand_formula() {
        let (m1, s1, m2, s2) = (0.3_f64, 0.8_f64, -0.4_f64, 1.7_f64);
        let q = LayerGaussian::new(
            DMatrix::from_element(1, 1, m1),
            Precision::Dense(DMatrix::from_element(1, 1, 1.0 / (s1 * s1))),
            0.0,
            1.0,
        )
        .unwrap();
        let p = LayerGaussian::new(
            DMatrix::from_element(1, 1, m2),
            Precision::Dense(DMatrix::from_element(1, 1, 1.0)),
            0.0,
            s2 * s2,
        )
        .unwrap();
        let expect = (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5;
        assert!((q.kl(&p).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn kron_and_dense_kl_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_layer(3, 4, 0.4, &mut rng);
        let p = rand_layer(3, 4, 1.3, &mut rng);
        let a = q.kl(&p).unwrap();
        let b = q.to_dense(4096).unwrap().kl(&p.to_dense(4096).unwrap()).unwrap();
        assert!((a - b).abs() <= 1e-8 * b.abs());
    }

    #[test]
    fn quadratic_form_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = rand_layer(2, 3, 1.0, &mut rng);
        assert_eq!(l.quadratic_form(&l.mean).unwrap(), 0.0);
        let iso = LayerGaussian::isotropic((2, 3), 1.0).unwrap();
        let theta = DMatrix::from_fn(2, 3, |i, j| (i + 2 * j) as f64);
        assert!((iso.quadratic_form(&theta).unwrap() - theta.norm_squared()).abs() < 1e-12);
        let dense = l.to_dense(4096).unwrap();
        let a = l.quadratic_form(&theta).unwrap();
        let b = dense.quadratic_form(&theta).unwrap();
        assert!((a - b).abs() <= 1e-10 * b.abs());
    }

    #[test]
    fn tiny_temperature_samples_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = rand_layer(3, 2, 1e-30, &mut rng);
        let s = l.sampler().unwrap().sample(&mut rng);
        assert!((s - &l.mean).norm() < 1e-10);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = NetworkGaussian::new(vec![rand_layer(2, 3, 1.0, &mut rng)]);
        assert_eq!(d.sample(11).unwrap(), d.sample(11).unwrap());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = NetworkGaussian::new(vec![rand_layer(2, 3, 0.3, &mut rng)]);
        let back = NetworkGaussian::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn rejects_inconsistent_layers() {
        let k = KronFactored::scaled_identity(2, 2, 1.0);
        assert!(LayerGaussian::new(DMatrix::zeros(2, 3), Precision::Kron(k.clone()), 0.0, 1.0).is_err());
        assert!(LayerGaussian::new(DMatrix::zeros(2, 2), Precision::Kron(k), 0.0, 0.0).is_err());
    }

    #[test]
    fn eigen_form_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let al: DMatrix<f64> = rand_spd(3, &mut rng);
        let ar: DMatrix<f64> = rand_spd(4, &mut rng);
        let diag = DMatrix::from_fn(3, 4, |i, j| 0.5 + (i + j) as f64);
        let e = EigenKron::new(al, ar, diag).unwrap();
        let dense = e.to_dense(4096).unwrap();
        let x = DMatrix::from_fn(3, 4, |_, _| StandardNormal.sample(&mut rng));
        let pe = Precision::Eigen(e.clone());
        let pd = Precision::Dense(dense.clone());
        assert!((pe.quadratic(&x) - pd.quadratic(&x)).abs() <= 1e-10 * pd.quadratic(&x).abs());
        assert!((pe.logdet().unwrap() - pd.logdet().unwrap()).abs() <= 1e-9 * pd.logdet().unwrap().abs());
        let q = LayerGaussian::new(x.clone(), pe, 0.0, 0.3).unwrap();
        let p = rand_layer(3, 4, 1.0, &mut rng);
        let a = q.kl(&p).unwrap();
        let b = q.to_dense(4096).unwrap().kl(&p.to_dense(4096).unwrap()).unwrap();
        assert!((a - b).abs() <= 1e-8 * b.abs(), "{a} vs {b}");
    }
}
