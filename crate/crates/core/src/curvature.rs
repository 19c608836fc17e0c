//! Fisher information for blocks whose per-example gradients are `Ds āᵀ`.
//!
//! All estimates use the model's own predictive distribution: for every
//! input the outer products of the class-`c` gradients are weighted by
//! `p(c|x)`, so the ground-truth labels never enter. Blocks are stored as
//! dataset averages; [`FisherEstimate::total_blocks`] rescales them to the
//! Fisher of the summed log-likelihood.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussdist::Precision;
use crate::kronalg::{
    compress, power_method_from, psd_project, KronFactored, KronSum, PowerConfig,
    DEFAULT_DENSE_LIMIT,
};
use crate::net::{BlockCapture, Capture, Model, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FisherMethod {
    Dense,
    Kfac,
    #[default]
    Kfoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherBlock {
    Kron(KronFactored),
    Dense(#[serde(with = "crate::matrix_io")] DMatrix<f64>),
}

impl FisherBlock {
    pub fn to_dense(&self, limit: usize) -> Result<DMatrix<f64>> {
        match self {
            FisherBlock::Kron(k) => k.to_dense(limit),
            FisherBlock::Dense(d) => Ok(d.clone()),
        }
    }

    pub fn scaled(&self, s: f64) -> FisherBlock {
        match self {
            FisherBlock::Kron(k) => FisherBlock::Kron(k.scaled(s)),
            FisherBlock::Dense(d) => FisherBlock::Dense(d * s),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FisherBlock::Kron(k) => k.dim(),
            FisherBlock::Dense(d) => d.nrows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherEstimate {
    /// Per-block Fisher averaged over the dataset.
    pub blocks: Vec<FisherBlock>,
    pub method: FisherMethod,
    pub sample_count: usize,
    /// `−Σ_i ln p(y_i | x_i)` at the same parameters.
    pub data_nll: f64,
    /// Some factor needed a PSD correction beyond roundoff.
    pub projected: bool,
}

impl FisherEstimate {
    /// Blocks of the summed-log-likelihood Fisher (`sample_count × average`).
    pub fn total_blocks(&self) -> Vec<FisherBlock> {
        let n = self.sample_count as f64;
        self.blocks.iter().map(|b| b.scaled(n)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherConfig {
    pub method: FisherMethod,
    /// Examples per KFOC batch.
    pub batch_size: usize,
    pub power: PowerConfig,
    pub dense_limit: usize,
}

impl Default for FisherConfig {
    fn default() -> Self {
        FisherConfig {
            method: FisherMethod::Kfoc,
            batch_size: 256,
            power: PowerConfig::default(),
            dense_limit: DEFAULT_DENSE_LIMIT,
        }
    }
}

fn capture_all(model: &dyn Model, params: &Params, data: &Dataset) -> Result<(Capture, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("Fisher estimate needs at least one example".into()));
    }
    let cap = model.capture(params, &data.inputs)?;
    let nll = -data
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| cap.log_probs[(i, y)])
        .sum::<f64>();
    Ok((cap, nll))
}

/// `Σ_c p(c|x_i) Ds_c Ds_cᵀ` for example `i`.
fn example_left(block: &BlockCapture, probs: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
    let m = block.class_grads[0].ncols();
    let mut acc = DMatrix::zeros(m, m);
    for (c, g) in block.class_grads.iter().enumerate() {
        let p = probs[(i, c)];
        if p == 0.0 {
            continue;
        }
        let d = g.row(i).transpose();
        acc.ger(p, &d, &d, 1.0);
    }
    acc
}

fn example_right(block: &BlockCapture, i: usize) -> DMatrix<f64> {
    let a = block.acts.row(i).transpose();
    &a * a.transpose()
}

/// Exact block-diagonal Fisher with dense blocks.
pub fn fisher_dense(
    model: &dyn Model,
    params: &Params,
    data: &Dataset,
    limit: usize,
) -> Result<FisherEstimate> {
    let (cap, data_nll) = capture_all(model, params, data)?;
    let probs = cap.log_probs.map(f64::exp);
    let n = data.len();
    let mut blocks = Vec::with_capacity(cap.blocks.len());
    for b in &cap.blocks {
        let (m, k) = (b.class_grads[0].ncols(), b.acts.ncols());
        let dim = m * k;
        if dim > limit {
            return Err(Error::DenseLimitExceeded { size: dim, limit });
        }
        let mut f = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let a = b.acts.row(i);
            for (c, g) in b.class_grads.iter().enumerate() {
                let p = probs[(i, c)];
                if p == 0.0 {
                    continue;
                }
                let ds = g.row(i);
                let v = DVector::from_iterator(
                    dim,
                    (0..m).flat_map(|r| (0..k).map(move |s| ds[r] * a[s])),
                );
                f.ger(p / n as f64, &v, &v, 1.0);
            }
        }
        blocks.push(FisherBlock::Dense(f));
    }
    Ok(FisherEstimate {
        blocks,
        method: FisherMethod::Dense,
        sample_count: n,
        data_nll,
        projected: false,
    })
}

/// `E[Σ_c p Ds Dsᵀ] ⊗ E[ā āᵀ]` per block.
pub fn fisher_kfac(model: &dyn Model, params: &Params, data: &Dataset) -> Result<FisherEstimate> {
    let (cap, data_nll) = capture_all(model, params, data)?;
    let probs = cap.log_probs.map(f64::exp);
    let n = data.len() as f64;
    let blocks = cap
        .blocks
        .iter()
        .map(|b| {
            let (l, r) = kfac_factors(b, &probs, 0..data.len());
            FisherBlock::Kron(KronFactored {
                left: l / n,
                right: r / n,
            })
        })
        .collect();
    Ok(FisherEstimate {
        blocks,
        method: FisherMethod::Kfac,
        sample_count: data.len(),
        data_nll,
        projected: false,
    })
}

/// Unnormalised factor sums over a range of examples.
fn kfac_factors(
    b: &BlockCapture,
    probs: &DMatrix<f64>,
    range: std::ops::Range<usize>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = b.class_grads[0].ncols();
    let k = b.acts.ncols();
    let mut l = DMatrix::zeros(m, m);
    let mut r = DMatrix::zeros(k, k);
    for i in range {
        l += example_left(b, probs, i);
        r += example_right(b, i);
    }
    (l, r)
}

/// Optimal single Kronecker product for the exact Fisher sum of each batch,
/// then a second compression across batches weighted by batch size.
///
/// Each power iteration is started from the KFAC left factor of the same
/// sum, so the result is never further from the sum than KFAC.
pub fn fisher_kfoc(
    model: &dyn Model,
    params: &Params,
    data: &Dataset,
    batch_size: usize,
    power: &PowerConfig,
) -> Result<FisherEstimate> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let (cap, data_nll) = capture_all(model, params, data)?;
    let probs = cap.log_probs.map(f64::exp);
    let n = data.len();
    let mut projected = false;
    let mut blocks = Vec::with_capacity(cap.blocks.len());
    for b in &cap.blocks {
        let mut batch_terms = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let w = 1.0 / (end - start) as f64;
            let terms: Vec<KronFactored> = (start..end)
                .map(|i| KronFactored {
                    left: example_left(b, &probs, i) * w,
                    right: example_right(b, i),
                })
                .collect();
            let (factors, p) = compress_warm(KronSum::new(terms)?, power);
            projected |= p;
            batch_terms.push(factors.scaled((end - start) as f64 / n as f64));
            start = end;
        }
        let (factors, p) = compress_warm(KronSum::new(batch_terms)?, power);
        projected |= p;
        blocks.push(FisherBlock::Kron(factors));
    }
    Ok(FisherEstimate {
        blocks,
        method: FisherMethod::Kfoc,
        sample_count: n,
        data_nll,
        projected,
    })
}

fn compress_warm(s: KronSum, power: &PowerConfig) -> (KronFactored, bool) {
    if s.len() == 1 {
        return (s.terms()[0].clone(), false);
    }
    let init = s
        .terms()
        .iter()
        .skip(1)
        .fold(s.terms()[0].left.clone(), |acc, t| acc + &t.left);
    let out = power_method_from(&s, &init, power);
    let (left, pl) = psd_project(&out.factors.left);
    let (right, pr) = psd_project(&out.factors.right);
    (KronFactored { left, right }, pl || pr)
}

pub fn fisher(
    model: &dyn Model,
    params: &Params,
    data: &Dataset,
    cfg: &FisherConfig,
) -> Result<FisherEstimate> {
    match cfg.method {
        FisherMethod::Dense => fisher_dense(model, params, data, cfg.dense_limit),
        FisherMethod::Kfac => fisher_kfac(model, params, data),
        FisherMethod::Kfoc => fisher_kfoc(model, params, data, cfg.batch_size, &cfg.power),
    }
}

/// Dense Fisher from sampled labels `y ~ p(·|x)`, with entrywise standard
/// errors of the estimate.
pub fn fisher_dense_mc(
    model: &dyn Model,
    params: &Params,
    data: &Dataset,
    labels_per_input: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let (cap, _) = capture_all(model, params, data)?;
    let probs = cap.log_probs.map(f64::exp);
    let n = data.len();
    let s = labels_per_input.max(2);
    let sampled: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..s)
                .map(|_| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let c_max = probs.ncols() - 1;
                    for c in 0..=c_max {
                        acc += probs[(i, c)];
                        if u < acc {
                            return c;
                        }
                    }
                    c_max
                })
                .collect()
        })
        .collect();
    let mut means = Vec::new();
    let mut errs = Vec::new();
    for b in &cap.blocks {
        let (m, k) = (b.class_grads[0].ncols(), b.acts.ncols());
        let dim = m * k;
        let mut mean = DMatrix::zeros(dim, dim);
        let mut var = DMatrix::zeros(dim, dim);
        for (i, ys) in sampled.iter().enumerate() {
            let a = b.acts.row(i);
            let mut sum = DMatrix::zeros(dim, dim);
            let mut sq = DMatrix::zeros(dim, dim);
            for &y in ys {
                let ds = b.class_grads[y].row(i);
                let v = DVector::from_iterator(
                    dim,
                    (0..m).flat_map(|r| (0..k).map(move |t| ds[r] * a[t])),
                );
                let outer = &v * v.transpose();
                sq += outer.component_mul(&outer);
                sum += outer;
            }
            let mu = &sum / s as f64;
            let var_i = (&sq / s as f64 - mu.component_mul(&mu)) * (s as f64 / (s - 1) as f64);
            mean += mu / n as f64;
            var += var_i / (s as f64 * (n * n) as f64);
        }
        means.push(mean);
        errs.push(var.map(|v| v.max(0.0).sqrt()));
    }
    Ok((means, errs))
}

/// A damped precision block and how it was obtained.
#[derive(Debug, Clone)]
pub struct DampedBlock {
    pub precision: Precision,
    /// Relative Frobenius residual of the Kronecker compression (0 if exact).
    pub relative_residual: f64,
    pub projected: bool,
}

/// `F_l + γ I` per block. Dense blocks are exact; Kronecker blocks compress
/// `{L ⊗ R, √γ I ⊗ √γ I}` with the power method and SPD-project.
pub fn damp(blocks: &[FisherBlock], gamma: f64, power: &PowerConfig) -> Result<Vec<DampedBlock>> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("damping must be >= 0, got {gamma}")));
    }
    blocks
        .iter()
        .map(|b| match b {
            FisherBlock::Dense(d) => {
                let n = d.nrows();
                Ok(DampedBlock {
                    precision: Precision::Dense(d + DMatrix::identity(n, n) * gamma),
                    relative_residual: 0.0,
                    projected: false,
                })
            }
            FisherBlock::Kron(k) => {
                if gamma == 0.0 {
                    return Ok(DampedBlock {
                        precision: Precision::Kron(k.clone()),
                        relative_residual: 0.0,
                        projected: false,
                    });
                }
                let (m, n) = k.dims();
                let s = KronSum::new(vec![k.clone(), KronFactored::scaled_identity(m, n, gamma)])?;
                let c = compress(&s, power);
                Ok(DampedBlock {
                    precision: Precision::Kron(c.factors),
                    relative_residual: c.relative_residual,
                    projected: c.projected,
                })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kronalg::{kron_dense, symmetric_eigen};
    use crate::net::{Activation, MlpArchitecture};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy(n: usize, seed: u64) -> (MlpArchitecture, Params, Dataset) {
        let arch = MlpArchitecture::new(vec![3, 4, 3], Activation::Tanh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = arch.init(&mut rng);
        let x = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let y = (0..n).map(|i| i % 3).collect();
        (arch, p, Dataset::new(x, y, 3).unwrap())
    }

    #[test]
    fn zero_weight_linear_model_has_softmax_fisher() {
        let arch = MlpArchitecture::new(vec![2, 3], Activation::Relu).unwrap();
        let p = Params::zeros(&arch.block_shapes());
        let x = DMatrix::from_row_slice(1, 2, &[0.7, -1.2]);
        let d = Dataset::new(x, vec![0], 3).unwrap();
        let f = fisher_dense(&arch, &p, &d, 4096).unwrap();
        let pr = DVector::from_element(3, 1.0 / 3.0);
        let left = DMatrix::from_diagonal(&pr) - &pr * pr.transpose();
        let abar = DVector::from_vec(vec![0.7, -1.2, 1.0]);
        let right = &abar * abar.transpose();
        let expect = kron_dense(&KronFactored { left, right }, 4096).unwrap();
        let got = f.blocks[0].to_dense(4096).unwrap();
        assert!((got - expect).norm() < 1e-14);
    }

    #[test]
    fn duplicating_data_leaves_fisher_unchanged() {
        let (arch, p, d) = toy(4, 0);
        let dd = d.concat(&d).unwrap();
        let a = fisher_dense(&arch, &p, &d, 4096).unwrap();
        let b = fisher_dense(&arch, &p, &dd, 4096).unwrap();
        for (x, y) in a.blocks.iter().zip(&b.blocks) {
            let (x, y) = (x.to_dense(4096).unwrap(), y.to_dense(4096).unwrap());
            assert!((&x - &y).norm() <= 1e-12 * x.norm());
        }
    }

    #[test]
    fn dense_fisher_is_psd() {
        let (arch, p, d) = toy(6, 1);
        let f = fisher_dense(&arch, &p, &d, 4096).unwrap();
        for b in &f.blocks {
            let e = symmetric_eigen(&b.to_dense(4096).unwrap()).unwrap();
            assert!(e.min_value() >= -1e-10 * e.max_value());
        }
    }

    #[test]
    fn single_example_kfac_and_kfoc_are_exact() {
        let (arch, p, d) = toy(1, 2);
        let dense = fisher_dense(&arch, &p, &d, 4096).unwrap();
        let kfac = fisher_kfac(&arch, &p, &d).unwrap();
        let kfoc = fisher_kfoc(&arch, &p, &d, 4, &PowerConfig::default()).unwrap();
        for l in 0..2 {
            let exact = dense.blocks[l].to_dense(4096).unwrap();
            for est in [&kfac, &kfoc] {
                let got = est.blocks[l].to_dense(4096).unwrap();
                assert!((&got - &exact).norm() <= 1e-10 * exact.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn kfoc_never_worse_than_kfac_on_one_batch() {
        for seed in 0..5 {
            let (arch, p, d) = toy(7, 10 + seed);
            let dense = fisher_dense(&arch, &p, &d, 4096).unwrap();
            let kfac = fisher_kfac(&arch, &p, &d).unwrap();
            let kfoc = fisher_kfoc(&arch, &p, &d, 7, &PowerConfig::default()).unwrap();
            for l in 0..2 {
                let exact = dense.blocks[l].to_dense(4096).unwrap();
                let ea = (kfac.blocks[l].to_dense(4096).unwrap() - &exact).norm();
                let eo = (kfoc.blocks[l].to_dense(4096).unwrap() - &exact).norm();
                assert!(eo <= ea * (1.0 + 1e-12), "{eo} vs {ea}");
            }
        }
    }

    #[test]
    fn data_nll_matches_forward() {
        let (arch, p, d) = toy(5, 3);
        let f = fisher_kfac(&arch, &p, &d).unwrap();
        let direct = crate::net::nll(&arch.logits(&p, &d.inputs).unwrap(), &d.labels).unwrap();
        assert!((f.data_nll - direct).abs() < 1e-10);
    }

    #[test]
    fn damping_cases() {
        let (arch, p, d) = toy(5, 4);
        let f = fisher_dense(&arch, &p, &d, 4096).unwrap();
        let same = damp(&f.blocks, 0.0, &PowerConfig::default()).unwrap();
        assert_eq!(
            same[0].precision.to_dense(4096).unwrap(),
            f.blocks[0].to_dense(4096).unwrap()
        );
        let damped = damp(&f.blocks, 0.3, &PowerConfig::default()).unwrap();
        for b in &damped {
            let e = symmetric_eigen(&b.precision.to_dense(4096).unwrap()).unwrap();
            assert!(e.min_value() >= 0.3 - 1e-10);
        }
        let zero = [FisherBlock::Kron(KronFactored::zeros(2, 3))];
        let iso = damp(&zero, 0.5, &PowerConfig::default()).unwrap();
        let dense = iso[0].precision.to_dense(4096).unwrap();
        assert!((dense - DMatrix::identity(6, 6) * 0.5).norm() < 1e-12);
    }
}
