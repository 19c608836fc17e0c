//! Kronecker-factored matrix algebra.
//!
//! A [`KronFactored`] matrix `L ⊗ R` is stored as its two factors. With the
//! row-major vectorisation used across the crate, the dense product has
//! entries `(L ⊗ R)[(i1 * n + i2, j1 * n + j2)] = L[(i1, j1)] * R[(i2, j2)]`.
//!
//! A [`KronSum`] `Σ_k L^k ⊗ R^k` is not itself Kronecker-factored. The best
//! single product in Frobenius norm is the best rank-one approximation of the
//! rearranged matrix `Σ_k vec(L^k) vec(R^k)ᵀ`, which [`power_method_sum_kron`]
//! finds without ever forming it. [`svd_rank_one_oracle`] forms it and takes a
//! dense SVD instead; it exists to check the power method.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the side length of densely materialised matrices.
pub const DEFAULT_DENSE_LIMIT: usize = 4096;

/// Relative symmetry tolerance: `|A_ij − A_ji| ≤ SYMMETRY_TOL · max(1, ‖A‖_F)`.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues below `SPD_FLOOR · λ_max` are clamped by [`spd_project`].
pub const SPD_FLOOR: f64 = 1e-10;

/// Relative singular gap below which the rank-one optimum is not unique.
pub const DEGENERATE_GAP: f64 = 1e-6;

/// Row-major vectorisation.
pub fn vec_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Inverse of [`vec_rows`].
pub fn unvec_rows(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

/// Frobenius inner product `⟨A, B⟩_F`.
pub fn frob_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Checks squareness and symmetry within [`SYMMETRY_TOL`].
pub fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let asym = max_asymmetry(a);
    if asym > SYMMETRY_TOL * a.norm().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// A Kronecker product `left ⊗ right` with square factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KronFactored {
    #[serde(with = "crate::matrix_io")]
    pub left: DMatrix<f64>,
    #[serde(with = "crate::matrix_io")]
    pub right: DMatrix<f64>,
}

impl KronFactored {
    pub fn new(left: DMatrix<f64>, right: DMatrix<f64>) -> Result<Self> {
        if !left.is_square() || !right.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "Kronecker factors must be square, got {}x{} and {}x{}",
                left.nrows(),
                left.ncols(),
                right.nrows(),
                right.ncols()
            )));
        }
        Ok(KronFactored { left, right })
    }

    /// `scale · I_m ⊗ I_n`, split evenly as `√scale I ⊗ √scale I`.
    pub fn scaled_identity(m: usize, n: usize, scale: f64) -> Self {
        let s = scale.sqrt();
        KronFactored {
            left: DMatrix::identity(m, m) * s,
            right: DMatrix::identity(n, n) * s,
        }
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        KronFactored {
            left: DMatrix::zeros(m, m),
            right: DMatrix::zeros(n, n),
        }
    }

    /// Factor side lengths `(M, N)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.left.nrows(), self.right.nrows())
    }

    /// Side length `M · N` of the represented matrix.
    pub fn dim(&self) -> usize {
        self.left.nrows() * self.right.nrows()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.left.norm() * self.right.norm()
    }

    pub fn trace(&self) -> f64 {
        self.left.trace() * self.right.trace()
    }

    /// Multiplies the represented matrix by a scalar, folding it into the left factor.
    pub fn scaled(&self, s: f64) -> Self {
        KronFactored {
            left: &self.left * s,
            right: self.right.clone(),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        check_symmetric(&self.left).is_ok() && check_symmetric(&self.right).is_ok()
    }

    /// Dense `MN × MN` product.
    pub fn to_dense(&self, limit: usize) -> Result<DMatrix<f64>> {
        kron_dense(self, limit)
    }

    /// `(L ⊗ R) vec(X)` returned as the `M × N` matrix `L X Rᵀ`.
    pub fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.left * x * self.right.transpose()
    }

    /// `(L ⊗ R) x` for a row-major vectorised `x`.
    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let (m, n) = self.dims();
        vec_rows(&self.apply_mat(&unvec_rows(x, m, n)))
    }

    /// `vec(X)ᵀ (L ⊗ R) vec(X)` via two small products.
    pub fn quadratic(&self, x: &DMatrix<f64>) -> f64 {
        frob_inner(x, &self.apply_mat(x))
    }
}

/// Dense Kronecker product under the row-major convention.
pub fn kron_dense(k: &KronFactored, limit: usize) -> Result<DMatrix<f64>> {
    let (m, n) = k.dims();
    let size = m * n;
    if size > limit {
        return Err(Error::DenseLimitExceeded { size, limit });
    }
    let mut out = DMatrix::zeros(size, size);
    for i1 in 0..m {
        for j1 in 0..m {
            let a = k.left[(i1, j1)];
            if a == 0.0 {
                continue;
            }
            for i2 in 0..n {
                for j2 in 0..n {
                    out[(i1 * n + i2, j1 * n + j2)] = a * k.right[(i2, j2)];
                }
            }
        }
    }
    Ok(out)
}

/// An ordered, non-empty sum `Σ_k L^k ⊗ R^k` with shared factor sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KronSum {
    terms: Vec<KronFactored>,
}

impl KronSum {
    pub fn new(terms: Vec<KronFactored>) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Empty("Kronecker sum needs at least one term".into()))?;
        let dims = first.dims();
        if let Some(bad) = terms.iter().find(|t| t.dims() != dims) {
            return Err(Error::DimensionMismatch(format!(
                "Kronecker sum terms must share factor sizes: {:?} vs {:?}",
                dims,
                bad.dims()
            )));
        }
        Ok(KronSum { terms })
    }

    pub fn single(k: KronFactored) -> Self {
        KronSum { terms: vec![k] }
    }

    pub fn terms(&self) -> &[KronFactored] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.terms[0].dims()
    }

    pub fn push(&mut self, k: KronFactored) -> Result<()> {
        if k.dims() != self.dims() {
            return Err(Error::DimensionMismatch(format!(
                "term of size {:?} does not match {:?}",
                k.dims(),
                self.dims()
            )));
        }
        self.terms.push(k);
        Ok(())
    }

    /// `‖Σ_k L^k ⊗ R^k‖_F` from the factor Gram matrices.
    pub fn frobenius_norm(&self) -> f64 {
        let mut sq = 0.0;
        for a in &self.terms {
            for b in &self.terms {
                sq += frob_inner(&a.left, &b.left) * frob_inner(&a.right, &b.right);
            }
        }
        sq.max(0.0).sqrt()
    }

    /// The rearranged `M² × N²` matrix `Σ_k vec(L^k) vec(R^k)ᵀ`.
    pub fn rearranged(&self, limit: usize) -> Result<DMatrix<f64>> {
        let (m, n) = self.dims();
        let (rows, cols) = (m * m, n * n);
        if rows.max(cols) > limit {
            return Err(Error::DenseLimitExceeded {
                size: rows.max(cols),
                limit,
            });
        }
        let mut a = DMatrix::zeros(rows, cols);
        for t in &self.terms {
            let u = DVector::from_vec(vec_rows(&t.left));
            let v = DVector::from_vec(vec_rows(&t.right));
            a.ger(1.0, &u, &v, 1.0);
        }
        Ok(a)
    }

    pub fn to_dense(&self, limit: usize) -> Result<DMatrix<f64>> {
        let mut acc: Option<DMatrix<f64>> = None;
        for t in &self.terms {
            let d = kron_dense(t, limit)?;
            acc = Some(match acc {
                None => d,
                Some(a) => a + d,
            });
        }
        Ok(acc.expect("non-empty sum"))
    }

    /// `‖Σ_k L^k ⊗ R^k − L ⊗ R‖_F`.
    ///
    /// Evaluated in the rearranged space as `‖P Bᵀ‖_F` with a thin QR of the
    /// left vectors, which keeps absolute accuracy near machine precision
    /// even when the residual is tiny relative to the sum.
    pub fn residual_norm(&self, approx: &KronFactored) -> f64 {
        let (m, n) = self.dims();
        let j = self.terms.len() + 1;
        let mut p = DMatrix::zeros(m * m, j);
        let mut b = DMatrix::zeros(n * n, j);
        for (k, t) in self.terms.iter().enumerate() {
            p.set_column(k, &DVector::from_vec(vec_rows(&t.left)));
            b.set_column(k, &DVector::from_vec(vec_rows(&t.right)));
        }
        p.set_column(j - 1, &DVector::from_vec(vec_rows(&approx.left)));
        b.set_column(j - 1, &(-DVector::from_vec(vec_rows(&approx.right))));
        let r = p.qr().r();
        (r * b.transpose()).norm()
    }

    /// Residual divided by `‖Σ_k L^k ⊗ R^k‖_F` (zero for a zero sum).
    pub fn relative_residual(&self, approx: &KronFactored) -> f64 {
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            return approx.frobenius_norm();
        }
        self.residual_norm(approx) / norm
    }
}

/// Stopping rule and seed for [`power_method_sum_kron`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerConfig {
    pub max_steps: usize,
    pub tol: f64,
    pub seed: u64,
    /// Record the relative residual at every iteration (costs one QR per step).
    pub record_trajectory: bool,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            max_steps: 100,
            tol: 1e-5,
            seed: 0,
            record_trajectory: false,
        }
    }
}

impl PowerConfig {
    pub fn with_seed(seed: u64) -> Self {
        PowerConfig {
            seed,
            ..Default::default()
        }
    }
}

/// Result of the power method.
#[derive(Debug, Clone)]
pub struct PowerOutcome {
    /// `(L̂, R̂)` with `‖L̂‖_F = 1` and `trace(L̂) ≥ 0`.
    pub factors: KronFactored,
    pub iterations: usize,
    pub converged: bool,
    /// The sum was zero, or a zero iterate survived one re-randomisation.
    pub degenerate: bool,
    /// A zero intermediate norm forced a fresh random iterate.
    pub reseeded: bool,
    /// `trajectory[n - 1]` is the relative residual of `L^(n-1) ⊗ R̄^(n)`
    /// (iteration `n`); the last entry belongs to the returned factors.
    pub trajectory: Vec<f64>,
}

fn random_unit(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut l = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(rng));
    let norm = l.norm();
    if norm > 0.0 {
        l /= norm;
    }
    l
}

fn weighted_sum(mats: &[&DMatrix<f64>], weights: &[f64]) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(mats[0].nrows(), mats[0].ncols());
    for (m, w) in mats.iter().zip(weights) {
        if *w != 0.0 {
            acc += *m * *w;
        }
    }
    acc
}

/// Sign convention: `trace(L) > 0`, or the largest-magnitude entry positive
/// when the trace vanishes.
fn canonical_sign(l: &DMatrix<f64>) -> f64 {
    let tr = l.trace();
    if tr.abs() > 1e-14 * l.norm() {
        return tr.signum();
    }
    let mut best = 0.0_f64;
    for v in l.iter() {
        if v.abs() > best.abs() {
            best = *v;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Best single Kronecker product approximating a sum of Kronecker products,
/// started from a standard-normal left factor.
pub fn power_method_sum_kron(s: &KronSum, cfg: &PowerConfig) -> PowerOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = random_unit(s.dims().0, &mut rng);
    power_iterate(s, init, cfg, rng)
}

/// As [`power_method_sum_kron`] but started from a given left factor.
pub fn power_method_from(s: &KronSum, init: &DMatrix<f64>, cfg: &PowerConfig) -> PowerOutcome {
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    power_iterate(s, init.clone(), cfg, rng)
}

fn power_iterate(
    s: &KronSum,
    init: DMatrix<f64>,
    cfg: &PowerConfig,
    mut rng: ChaCha8Rng,
) -> PowerOutcome {
    let (m, n) = s.dims();
    let lefts: Vec<&DMatrix<f64>> = s.terms().iter().map(|t| &t.left).collect();
    let rights: Vec<&DMatrix<f64>> = s.terms().iter().map(|t| &t.right).collect();
    let degenerate_outcome = |reseeded| PowerOutcome {
        factors: KronFactored::zeros(m, n),
        iterations: 0,
        converged: false,
        degenerate: true,
        reseeded,
        trajectory: Vec::new(),
    };
    if s.frobenius_norm() == 0.0 {
        return degenerate_outcome(false);
    }

    let mut l = init;
    let mut reseeded = false;
    let norm = l.norm();
    if norm == 0.0 || !norm.is_finite() {
        l = random_unit(m, &mut rng);
        reseeded = true;
    } else {
        l /= norm;
    }

    let right_for = |l: &DMatrix<f64>| {
        let coeffs: Vec<f64> = lefts.iter().map(|lk| frob_inner(lk, l)).collect();
        weighted_sum(&rights, &coeffs)
    };

    let mut trajectory = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut n_step = 1;
    while n_step <= cfg.max_steps {
        let r_bar = right_for(&l);
        if cfg.record_trajectory {
            trajectory.push(s.relative_residual(&KronFactored {
                left: l.clone(),
                right: r_bar.clone(),
            }));
        }
        let r_norm = r_bar.norm();
        let l_bar = if r_norm > 0.0 {
            let r = r_bar / r_norm;
            let coeffs: Vec<f64> = rights.iter().map(|rk| frob_inner(rk, &r)).collect();
            weighted_sum(&lefts, &coeffs)
        } else {
            DMatrix::zeros(m, m)
        };
        let l_norm = l_bar.norm();
        if l_norm == 0.0 || !l_norm.is_finite() {
            if reseeded {
                return degenerate_outcome(true);
            }
            reseeded = true;
            l = random_unit(m, &mut rng);
            trajectory.clear();
            continue;
        }
        let l_next = l_bar / l_norm;
        let delta = (&l_next - &l).norm();
        l = l_next;
        iterations = n_step;
        n_step += 1;
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }

    l *= canonical_sign(&l);
    let r_hat = right_for(&l);
    let factors = KronFactored {
        left: l,
        right: r_hat,
    };
    if cfg.record_trajectory {
        trajectory.push(s.relative_residual(&factors));
    }
    PowerOutcome {
        factors,
        iterations,
        converged,
        degenerate: false,
        reseeded,
        trajectory,
    }
}

/// Dense reference solution of the Kronecker rank-one problem.
#[derive(Debug, Clone)]
pub struct RankOneOracle {
    pub factors: KronFactored,
    pub optimal_residual: f64,
    /// Singular values of the rearranged matrix, descending.
    pub singular_values: Vec<f64>,
    /// `σ₁ − σ₂ < DEGENERATE_GAP · σ₁`: any top singular pair is optimal.
    pub non_unique: bool,
}

/// Forms `A = Σ_k vec(L^k) vec(R^k)ᵀ`, takes its SVD and returns
/// `vec(L̂) = u₁`, `vec(R̂) = σ₁ v₁` with residual `√(Σ_{i≥2} σ_i²)`.
pub fn svd_rank_one_oracle(s: &KronSum, limit: usize) -> Result<RankOneOracle> {
    let (m, n) = s.dims();
    let a = s.rearranged(limit)?;
    let svd = a.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let top = order[0];
    let sigma1 = sv[0];
    let l = unvec_rows(u.column(top).as_slice(), m, m);
    let r_vec: Vec<f64> = vt.row(top).iter().map(|x| x * sigma1).collect();
    let r = unvec_rows(&r_vec, n, n);
    let sign = canonical_sign(&l);
    let residual = sv.iter().skip(1).map(|x| x * x).sum::<f64>().sqrt();
    let sigma2 = sv.get(1).copied().unwrap_or(0.0);
    Ok(RankOneOracle {
        factors: KronFactored {
            left: l * sign,
            right: r * sign,
        },
        optimal_residual: residual,
        non_unique: sigma1 - sigma2 < DEGENERATE_GAP * sigma1,
        singular_values: sv,
    })
}

/// Naive approximation `(Σ_k L^k) ⊗ (Σ_k R^k)`.
///
/// For the damped pair `L ⊗ R + γ I ⊗ I`, with the identity term stored as
/// `√γ I ⊗ √γ I`, this is `(L + √γ I) ⊗ (R + √γ I)`.
pub fn factor_sum_baseline(s: &KronSum) -> KronFactored {
    let (m, n) = s.dims();
    let mut l = DMatrix::zeros(m, m);
    let mut r = DMatrix::zeros(n, n);
    for t in s.terms() {
        l += &t.left;
        r += &t.right;
    }
    KronFactored { left: l, right: r }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub vectors: DMatrix<f64>,
    pub values: Vec<f64>,
}

impl SymmetricEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `U f(Λ) Uᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = DVector::from_iterator(self.values.len(), self.values.iter().map(|&v| f(v)));
        let scaled = &self.vectors * DMatrix::from_diagonal(&d);
        scaled * self.vectors.transpose()
    }

    /// `U f(Λ)`: a one-sided root when `f = x^{±1/2}`.
    pub fn scaled_vectors(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut out = self.vectors.clone();
        for (j, &v) in self.values.iter().enumerate() {
            let s = f(v);
            out.column_mut(j).scale_mut(s);
        }
        out
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map(|v| v)
    }

    pub fn min_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    pub fn max_value(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    /// Requires strictly positive eigenvalues.
    pub fn logdet(&self) -> Result<f64> {
        self.require_positive()?;
        Ok(self.values.iter().map(|v| v.ln()).sum())
    }

    pub fn require_positive(&self) -> Result<()> {
        let min = self.min_value();
        if min > 0.0 && min.is_finite() {
            Ok(())
        } else {
            Err(Error::NotPositiveDefinite {
                min_eigenvalue: min,
            })
        }
    }
}

/// Orthogonal eigenbasis of a symmetric matrix with descending eigenvalues.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen> {
    check_symmetric(a)?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric_eigen input".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let n = a.nrows();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymmetricEigen {
        vectors,
        values: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
    })
}

/// Eigenbases of both factors of a symmetric Kronecker product.
#[derive(Debug, Clone)]
pub struct KronEigenbasis {
    pub left_vectors: DMatrix<f64>,
    pub left_values: Vec<f64>,
    pub right_vectors: DMatrix<f64>,
    pub right_values: Vec<f64>,
}

impl KronEigenbasis {
    pub fn new(k: &KronFactored) -> Result<Self> {
        let l = symmetric_eigen(&k.left)?;
        let r = symmetric_eigen(&k.right)?;
        Ok(KronEigenbasis {
            left_vectors: l.vectors,
            left_values: l.values,
            right_vectors: r.vectors,
            right_values: r.values,
        })
    }

    /// All eigenvalues `λ_i(L) λ_j(R)` of `L ⊗ R`, in row-major grid order.
    pub fn product_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.left_values.len() * self.right_values.len());
        for a in &self.left_values {
            for b in &self.right_values {
                out.push(a * b);
            }
        }
        out
    }
}

/// Symmetrises and clamps eigenvalues below `SPD_FLOOR · λ_max` to that
/// floor. Returns whether any eigenvalue was raised.
pub fn spd_project(a: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(a);
    let eig = match symmetric_eigen(&sym) {
        Ok(e) => e,
        Err(_) => return (sym, true),
    };
    let floor = SPD_FLOOR * eig.max_value().max(0.0);
    let altered = eig.values.iter().any(|&v| v < floor);
    if !altered {
        return (sym, false);
    }
    (eig.map(|v| v.max(floor)), true)
}

/// Symmetrises and clamps negative eigenvalues to zero. The flag is raised
/// only when some eigenvalue was below `−1e-12 · λ_max`, i.e. beyond roundoff.
pub fn psd_project(a: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(a);
    let eig = match symmetric_eigen(&sym) {
        Ok(e) => e,
        Err(_) => return (sym, true),
    };
    let min = eig.min_value();
    if min >= 0.0 {
        return (sym, false);
    }
    let flagged = min < -1e-12 * eig.max_value().max(0.0);
    (eig.map(|v| v.max(0.0)), flagged)
}

/// Power-method compression of a sum followed by SPD projection of both factors.
#[derive(Debug, Clone)]
pub struct Compressed {
    pub factors: KronFactored,
    pub relative_residual: f64,
    pub converged: bool,
    pub projected: bool,
}

/// Compresses a sum of Kronecker products of symmetric PSD matrices into
/// one SPD-projected product. Single-term sums are returned as-is.
pub fn compress(s: &KronSum, cfg: &PowerConfig) -> Compressed {
    if s.len() == 1 {
        let t = &s.terms()[0];
        let (left, pl) = spd_project(&t.left);
        let (right, pr) = spd_project(&t.right);
        return Compressed {
            factors: KronFactored { left, right },
            relative_residual: 0.0,
            converged: true,
            projected: pl || pr,
        };
    }
    let out = power_method_sum_kron(s, cfg);
    let (left, pl) = spd_project(&out.factors.left);
    let (right, pr) = spd_project(&out.factors.right);
    let factors = KronFactored { left, right };
    let relative_residual = s.relative_residual(&factors);
    Compressed {
        factors,
        relative_residual,
        converged: out.converged && !out.degenerate,
        projected: pl || pr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn rand_sym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = rand_mat(n, n, rng);
        (&a + a.transpose()) * 0.5
    }

    fn rand_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = rand_mat(n, n, rng);
        &g * g.transpose() + DMatrix::identity(n, n) * 1e-8
    }

    #[test]
    fn identity_kron_identity_is_identity() {
        let k = KronFactored::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3)).unwrap();
        assert_eq!(kron_dense(&k, 4096).unwrap(), DMatrix::identity(6, 6));
    }

    #[test]
    fn scalar_left_factor_scales_right() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = rand_mat(4, 4, &mut rng);
        let k = KronFactored::new(DMatrix::from_element(1, 1, 2.0), r.clone()).unwrap();
        assert_eq!(kron_dense(&k, 4096).unwrap(), r * 2.0);
    }

    #[test]
    fn dense_matches_index_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(3, 3, &mut rng);
        let b = rand_mat(4, 4, &mut rng);
        let d = kron_dense(&KronFactored::new(a.clone(), b.clone()).unwrap(), 4096).unwrap();
        for i1 in 0..3 {
            for j1 in 0..3 {
                for i2 in 0..4 {
                    for j2 in 0..4 {
                        assert_eq!(d[(i1 * 4 + i2, j1 * 4 + j2)], a[(i1, j1)] * b[(i2, j2)]);
                    }
                }
            }
        }
    }

    #[test]
    fn dense_limit_is_enforced() {
        let k = KronFactored::scaled_identity(8, 8, 1.0);
        assert!(matches!(
            kron_dense(&k, 63),
            Err(Error::DenseLimitExceeded { size: 64, limit: 63 })
        ));
    }

    #[test]
    fn vectorisation_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(3, 3, &mut rng);
        let b = rand_mat(5, 5, &mut rng);
        let x = rand_mat(3, 5, &mut rng);
        let k = KronFactored::new(a, b).unwrap();
        let dense = kron_dense(&k, 4096).unwrap();
        let expect = &dense * DVector::from_vec(vec_rows(&x));
        let got = k.apply_vec(&vec_rows(&x));
        for (e, g) in expect.iter().zip(&got) {
            assert!((e - g).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_input_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = rand_sym(4, &mut rng);
        l /= l.norm();
        let r = rand_sym(3, &mut rng);
        let s = KronSum::single(KronFactored::new(l.clone(), r.clone()).unwrap());
        let out = power_method_sum_kron(&s, &PowerConfig::with_seed(9));
        let sign = if (&out.factors.left - &l).norm() < 1e-8 { 1.0 } else { -1.0 };
        assert!((&out.factors.left - &l * sign).norm() < 1e-10);
        assert!((&out.factors.right - &r * sign).norm() < 1e-10);
        assert!(s.relative_residual(&out.factors) < 1e-12);
        assert!((out.factors.left.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_method_matches_oracle_on_symmetric_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let terms = (0..3)
            .map(|_| KronFactored::new(rand_sym(4, &mut rng), rand_sym(3, &mut rng)).unwrap())
            .collect();
        let s = KronSum::new(terms).unwrap();
        let oracle = svd_rank_one_oracle(&s, 4096).unwrap();
        let out = power_method_sum_kron(&s, &PowerConfig::with_seed(1));
        let res = s.residual_norm(&out.factors);
        assert!(
            (res - oracle.optimal_residual).abs() <= 1e-8 * oracle.optimal_residual,
            "{res} vs {}",
            oracle.optimal_residual
        );
    }

    #[test]
    fn oracle_recovers_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = rand_spd(3, &mut rng);
        let r = rand_spd(2, &mut rng);
        let s = KronSum::single(KronFactored::new(l.clone(), r.clone()).unwrap());
        let o = svd_rank_one_oracle(&s, 4096).unwrap();
        assert!(o.optimal_residual < 1e-10 * s.frobenius_norm());
        let dense = kron_dense(&o.factors, 4096).unwrap();
        let truth = s.to_dense(4096).unwrap();
        assert!((dense - truth).norm() < 1e-10 * s.frobenius_norm());
    }

    #[test]
    fn oracle_flags_equal_singular_values() {
        // I ⊗ A + B ⊗ I with vec(I) ⟂ vec(B), vec(I) ⟂ vec(A) and matching norms.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = a.clone();
        let s = KronSum::new(vec![
            KronFactored::new(DMatrix::identity(2, 2), a).unwrap(),
            KronFactored::new(b, DMatrix::identity(2, 2)).unwrap(),
        ])
        .unwrap();
        let o = svd_rank_one_oracle(&s, 4096).unwrap();
        assert!(o.non_unique);
        let out = power_method_sum_kron(&s, &PowerConfig::with_seed(2));
        let res = s.residual_norm(&out.factors);
        assert!((res - o.optimal_residual).abs() < 1e-8 * o.optimal_residual);
    }

    #[test]
    fn factor_sum_fails_on_damped_identity() {
        let s = KronSum::new(vec![
            KronFactored::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap(),
            KronFactored::scaled_identity(2, 2, 1.0),
        ])
        .unwrap();
        let base = factor_sum_baseline(&s);
        assert!((kron_dense(&base, 16).unwrap() - DMatrix::identity(4, 4) * 4.0).norm() < 1e-14);
        assert!((s.relative_residual(&base) - 1.0).abs() < 1e-12);
        let pm = power_method_sum_kron(&s, &PowerConfig::default());
        assert!(s.relative_residual(&pm.factors) < 1e-10);
    }

    #[test]
    fn factor_sum_exact_for_single_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = KronSum::single(
            KronFactored::new(rand_spd(3, &mut rng), rand_spd(4, &mut rng)).unwrap(),
        );
        assert_eq!(s.relative_residual(&factor_sum_baseline(&s)), 0.0);
    }

    #[test]
    fn zero_sum_is_degenerate() {
        let s = KronSum::single(KronFactored::zeros(3, 2));
        let out = power_method_sum_kron(&s, &PowerConfig::default());
        assert!(out.degenerate);
        assert_eq!(out.factors.frobenius_norm(), 0.0);
    }

    #[test]
    fn orthogonal_start_is_reseeded() {
        let s = KronSum::single(KronFactored::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap());
        let start = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let out = power_method_from(&s, &start, &PowerConfig::default());
        assert!(out.reseeded);
        assert!(!out.degenerate);
        assert!(s.relative_residual(&out.factors) < 1e-10);
    }

    #[test]
    fn eigen_identity_and_diagonal() {
        let e = symmetric_eigen(&DMatrix::identity(4, 4)).unwrap();
        assert!(e.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let e = symmetric_eigen(&d).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert!((e.vectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((e.vectors[(0, 1)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eigen_residuals_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_spd(6, &mut rng);
        let e = symmetric_eigen(&a).unwrap();
        for (i, &lam) in e.values.iter().enumerate() {
            let v = e.vectors.column(i);
            assert!((&a * v - v * lam).norm() < 1e-8 * lam.abs().max(1.0));
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        assert!((e.reconstruct() - &a).norm() <= 1e-8 * a.norm());
    }

    #[test]
    fn eigen_rejects_non_symmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(symmetric_eigen(&a), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn spd_projection_clamps_negative_eigenvalues() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0]));
        let (p, altered) = spd_project(&a);
        assert!(altered);
        let e = symmetric_eigen(&p).unwrap();
        assert!((e.min_value() - 2e-10).abs() < 1e-20);
    }
}
