//! Fully-connected softmax classifiers with hand-written backpropagation.
//!
//! Layer `l` holds a weight matrix `W_l` of shape `d_l × (d_{l-1} + 1)`; the
//! last column multiplies the constant 1 appended to every input
//! activation. Hidden layers apply the architecture's activation, the output
//! layer is a softmax over `d_L` classes.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn apply(self, s: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Relu => s.map(|v| v.max(0.0)),
            Activation::Tanh => s.map(f64::tanh),
        }
    }

    pub(crate) fn derivative(self, s: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Relu => s.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Tanh => s.map(|v| {
                let t = v.tanh();
                1.0 - t * t
            }),
        }
    }
}

/// Weight matrices of a network, one per Kronecker block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    #[serde(with = "crate::matrix_io::vec")]
    pub blocks: Vec<DMatrix<f64>>,
}

impl Params {
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        Params {
            blocks: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
        }
    }

    /// Gaussian init with variance `gain / fan_in` and zero bias column.
    pub fn init(shapes: &[(usize, usize)], gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let blocks = shapes
            .iter()
            .map(|&(r, c)| {
                let fan_in = (c - 1).max(1) as f64;
                let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
                DMatrix::from_fn(r, c, |_, j| if j + 1 == c { 0.0 } else { normal.sample(rng) })
            })
            .collect();
        Params { blocks }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| b.shape()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// Blocks concatenated, each block row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in &self.blocks {
            out.extend(crate::kronalg::vec_rows(b));
        }
        out
    }

    pub fn unflatten(shapes: &[(usize, usize)], flat: &[f64]) -> Result<Self> {
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if total != flat.len() {
            return Err(Error::DimensionMismatch(format!(
                "flat vector has {} entries, layout needs {total}",
                flat.len()
            )));
        }
        let mut off = 0;
        let blocks = shapes
            .iter()
            .map(|&(r, c)| {
                let b = DMatrix::from_row_slice(r, c, &flat[off..off + r * c]);
                off += r * c;
                b
            })
            .collect();
        Ok(Params { blocks })
    }

    pub fn check_shapes(&self, shapes: &[(usize, usize)]) -> Result<()> {
        if self.shapes() != shapes {
            return Err(Error::DimensionMismatch(format!(
                "parameter layout {:?} does not match {:?}",
                self.shapes(),
                shapes
            )));
        }
        Ok(())
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Params) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            *a += b * s;
        }
    }

    pub fn sub(&self, other: &Params) -> Params {
        Params {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            *b *= s;
        }
    }

    pub fn dot(&self, other: &Params) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Layer sizes `d_0, …, d_L` and the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpArchitecture {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "an architecture needs an input and an output size".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        if *layer_dims.last().unwrap() < 2 {
            return Err(Error::InvalidArgument("at least two classes required".into()));
        }
        Ok(MlpArchitecture {
            layer_dims,
            activation,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// `(d_l, d_{l-1} + 1)` for every layer.
    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        self.layer_dims
            .windows(2)
            .map(|w| (w[1], w[0] + 1))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.block_shapes().iter().map(|(r, c)| r * c).sum()
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Params {
        let gain = match self.activation {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        };
        Params::init(&self.block_shapes(), gain, rng)
    }
}

/// Appends a column of ones.
pub fn homogeneous(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = a.shape();
    let mut out = DMatrix::from_element(n, d + 1, 1.0);
    out.columns_mut(0, d).copy_from(a);
    out
}

/// Per-layer inputs `ā_l` and pre-activations `s_l` of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub acts: Vec<DMatrix<f64>>,
    pub pre: Vec<DMatrix<f64>>,
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Forward pass over a batch of row-per-example inputs.
pub fn forward(
    arch: &MlpArchitecture,
    params: &Params,
    inputs: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Tape)> {
    params.check_shapes(&arch.block_shapes())?;
    if inputs.ncols() != arch.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} features, network expects {}",
            inputs.ncols(),
            arch.input_dim()
        )));
    }
    let l_count = arch.num_layers();
    let mut acts = Vec::with_capacity(l_count);
    let mut pre = Vec::with_capacity(l_count);
    let mut a = inputs.clone();
    for (l, w) in params.blocks.iter().enumerate() {
        let abar = homogeneous(&a);
        let s = &abar * w.transpose();
        check_finite(&s, "pre-activation")?;
        if l + 1 < l_count {
            a = arch.activation.apply(&s);
        }
        acts.push(abar);
        pre.push(s);
    }
    let logits = pre.last().unwrap().clone();
    Ok((logits, Tape { acts, pre }))
}

/// Reverse pass for an arbitrary upstream gradient on the logits.
///
/// Returns the parameter gradient and the per-layer gradients with respect
/// to the pre-activations (`Ds_l`, one row per example).
pub fn backward(
    arch: &MlpArchitecture,
    params: &Params,
    tape: &Tape,
    dlogits: &DMatrix<f64>,
) -> (Params, Vec<DMatrix<f64>>) {
    let l_count = arch.num_layers();
    let mut ds = vec![DMatrix::zeros(0, 0); l_count];
    let mut grads = vec![DMatrix::zeros(0, 0); l_count];
    let mut delta = dlogits.clone();
    for l in (0..l_count).rev() {
        grads[l] = delta.transpose() * &tape.acts[l];
        if l > 0 {
            let w = &params.blocks[l];
            let inner = w.columns(0, w.ncols() - 1);
            let back = &delta * inner;
            let next = back.component_mul(&arch.activation.derivative(&tape.pre[l - 1]));
            ds[l] = delta;
            delta = next;
        } else {
            ds[l] = std::mem::replace(&mut delta, DMatrix::zeros(0, 0));
        }
    }
    (Params { blocks: grads }, ds)
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.add_scalar_mut(-lse);
    }
    out
}

pub fn softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    log_softmax(logits).map(f64::exp)
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_targets(n: usize, targets: &[usize]) -> Result<()> {
    if n == 0 {
        return Err(Error::Empty("batch".into()));
    }
    if n != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{n} rows but {} targets",
            targets.len()
        )));
    }
    Ok(())
}

/// Summed negative log-likelihood `−Σ_i ln p(y_i | x_i)`.
pub fn nll(logits: &DMatrix<f64>, targets: &[usize]) -> Result<f64> {
    check_targets(logits.nrows(), targets)?;
    let lp = log_softmax(logits);
    Ok(-targets
        .iter()
        .enumerate()
        .map(|(i, &y)| lp[(i, y)])
        .sum::<f64>())
}

/// Fraction of rows whose argmax differs from the target.
pub fn error_rate(logits: &DMatrix<f64>, targets: &[usize]) -> Result<f64> {
    check_targets(logits.nrows(), targets)?;
    let wrong = targets
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i).transpose().as_slice()) != y)
        .count();
    Ok(wrong as f64 / targets.len() as f64)
}

/// `−ln p / ln 2`, an upper bound on the 0-1 error of a prediction that
/// assigns probability `p` to the target.
pub fn error_upper_bound(p: f64) -> f64 {
    -p.ln() / std::f64::consts::LN_2
}

/// Per-block quantities needed to build a Fisher estimate.
#[derive(Debug, Clone)]
pub struct BlockCapture {
    /// Block inputs `ā`, one row per example.
    pub acts: DMatrix<f64>,
    /// For every class `c`, the gradient of `−ln p(c|x)` with respect to the
    /// block's pre-activation contribution, one row per example.
    pub class_grads: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct Capture {
    pub log_probs: DMatrix<f64>,
    pub blocks: Vec<BlockCapture>,
}

/// A classifier whose parameters split into blocks `W` with per-example
/// gradients of the form `Ds āᵀ`.
pub trait Model {
    fn block_shapes(&self) -> Vec<(usize, usize)>;
    fn num_classes(&self) -> usize;
    /// Deterministic logits.
    fn logits(&self, params: &Params, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>>;
    /// Summed NLL of the batch and its gradient. Models with stochastic
    /// frozen parts draw them from `rng`.
    fn nll_grad(
        &self,
        params: &Params,
        inputs: &DMatrix<f64>,
        labels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Params)>;
    fn capture(&self, params: &Params, inputs: &DMatrix<f64>) -> Result<Capture>;
}

/// `softmax − onehot(c)` for every row, i.e. the logit gradient of `−ln p(c|x)`.
pub(crate) fn class_dlogits(probs: &DMatrix<f64>, c: usize) -> DMatrix<f64> {
    let mut d = probs.clone();
    for i in 0..d.nrows() {
        d[(i, c)] -= 1.0;
    }
    d
}

pub(crate) fn label_dlogits(probs: &DMatrix<f64>, labels: &[usize]) -> DMatrix<f64> {
    let mut d = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        d[(i, y)] -= 1.0;
    }
    d
}

impl Model for MlpArchitecture {
    fn block_shapes(&self) -> Vec<(usize, usize)> {
        MlpArchitecture::block_shapes(self)
    }

    fn num_classes(&self) -> usize {
        MlpArchitecture::num_classes(self)
    }

    fn logits(&self, params: &Params, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(forward(self, params, inputs)?.0)
    }

    fn nll_grad(
        &self,
        params: &Params,
        inputs: &DMatrix<f64>,
        labels: &[usize],
        _rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Params)> {
        let (logits, tape) = forward(self, params, inputs)?;
        let loss = nll(&logits, labels)?;
        let probs = softmax(&logits);
        let (grad, _) = backward(self, params, &tape, &label_dlogits(&probs, labels));
        Ok((loss, grad))
    }

    fn capture(&self, params: &Params, inputs: &DMatrix<f64>) -> Result<Capture> {
        let (logits, tape) = forward(self, params, inputs)?;
        let log_probs = log_softmax(&logits);
        let probs = log_probs.map(f64::exp);
        let mut blocks: Vec<BlockCapture> = tape
            .acts
            .iter()
            .map(|a| BlockCapture {
                acts: a.clone(),
                class_grads: Vec::with_capacity(self.num_classes()),
            })
            .collect();
        for c in 0..self.num_classes() {
            let (_, ds) = backward(self, params, &tape, &class_dlogits(&probs, c));
            for (b, d) in blocks.iter_mut().zip(ds) {
                b.class_grads.push(d);
            }
        }
        Ok(Capture { log_probs, blocks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn rand_inputs(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng))
    }

    fn loop_forward(arch: &MlpArchitecture, p: &Params, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let l_count = arch.num_layers();
        for (l, w) in p.blocks.iter().enumerate() {
            let mut s = vec![0.0; w.nrows()];
            for (i, si) in s.iter_mut().enumerate() {
                let mut acc = w[(i, w.ncols() - 1)];
                for (j, aj) in a.iter().enumerate() {
                    acc += w[(i, j)] * aj;
                }
                *si = acc;
            }
            a = if l + 1 < l_count {
                s.iter()
                    .map(|&v| match arch.activation {
                        Activation::Relu => {
                            if v > 0.0 {
                                v
                            } else {
                                0.0
                            }
                        }
                        Activation::Tanh => v.tanh(),
                    })
                    .collect()
            } else {
                s
            };
        }
        a
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let arch = MlpArchitecture::new(vec![3, 4, 5], Activation::Relu).unwrap();
        let p = Params::zeros(&arch.block_shapes());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, _) = forward(&arch, &p, &rand_inputs(2, 3, &mut rng)).unwrap();
        for v in softmax(&logits).iter() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_linear_layer_passes_inputs() {
        let arch = MlpArchitecture::new(vec![2, 2], Activation::Relu).unwrap();
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let p = Params { blocks: vec![w] };
        let x = DMatrix::from_row_slice(1, 2, &[0.3, -1.7]);
        let (logits, _) = forward(&arch, &p, &x).unwrap();
        assert_eq!(logits, x);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        for act in [Activation::Relu, Activation::Tanh] {
            let arch = MlpArchitecture::new(vec![4, 6, 5, 3], act).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let p = arch.init(&mut rng);
            let x = rand_inputs(7, 4, &mut rng);
            let (logits, _) = forward(&arch, &p, &x).unwrap();
            for i in 0..7 {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                let expect = loop_forward(&arch, &p, &row);
                for (c, e) in expect.iter().enumerate() {
                    assert!((logits[(i, c)] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn confident_correct_prediction_has_zero_gradient() {
        let arch = MlpArchitecture::new(vec![1, 2], Activation::Relu).unwrap();
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 800.0, 0.0, -800.0]);
        let p = Params { blocks: vec![w] };
        let x = DMatrix::from_row_slice(1, 1, &[1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, g) = arch.nll_grad(&p, &x, &[0], &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let arch = MlpArchitecture::new(vec![3, 4, 3], act).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let p = arch.init(&mut rng);
            let x = rand_inputs(5, 3, &mut rng);
            let y = vec![0, 1, 2, 1, 0];
            let (_, g) = arch.nll_grad(&p, &x, &y, &mut rng).unwrap();
            let flat = p.flatten();
            let gflat = g.flatten();
            let h = 1e-5;
            let shapes = arch.block_shapes();
            for k in 0..flat.len() {
                let mut plus = flat.clone();
                plus[k] += h;
                let mut minus = flat.clone();
                minus[k] -= h;
                let fp = nll(&arch.logits(&Params::unflatten(&shapes, &plus).unwrap(), &x).unwrap(), &y).unwrap();
                let fm = nll(&arch.logits(&Params::unflatten(&shapes, &minus).unwrap(), &x).unwrap(), &y).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - gflat[k]).abs() <= 1e-6 * gflat[k].abs().max(1e-3),
                    "coordinate {k}: fd {fd} vs {}",
                    gflat[k]
                );
            }
        }
    }

    #[test]
    fn gradient_blocks_are_outer_products() {
        let arch = MlpArchitecture::new(vec![3, 4, 3], Activation::Tanh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = arch.init(&mut rng);
        let x = rand_inputs(6, 3, &mut rng);
        let y = vec![0, 1, 2, 2, 1, 0];
        let (logits, tape) = forward(&arch, &p, &x).unwrap();
        let d = label_dlogits(&softmax(&logits), &y);
        let (g, ds) = backward(&arch, &p, &tape, &d);
        for l in 0..2 {
            let mut acc = DMatrix::zeros(g.blocks[l].nrows(), g.blocks[l].ncols());
            for i in 0..6 {
                acc += ds[l].row(i).transpose() * tape.acts[l].row(i);
            }
            assert!((acc - &g.blocks[l]).norm() < 1e-12);
        }
    }

    #[test]
    fn nll_and_error_edge_cases() {
        let uniform = DMatrix::zeros(1, 2);
        assert!((nll(&uniform, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((error_upper_bound(0.5) - 1.0).abs() < 1e-15);
        // Tie goes to class 0.
        assert_eq!(error_rate(&uniform, &[0]).unwrap(), 0.0);
        assert_eq!(error_rate(&uniform, &[1]).unwrap(), 1.0);
        let sure = DMatrix::from_row_slice(1, 2, &[0.0, 1000.0]);
        assert_eq!(nll(&sure, &[1]).unwrap(), 0.0);
        assert_eq!(error_rate(&sure, &[1]).unwrap(), 0.0);
        assert!((error_upper_bound(0.25) - 2.0).abs() < 1e-15);
        assert!(nll(&DMatrix::zeros(0, 2), &[]).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let arch = MlpArchitecture::new(vec![2, 3, 2], Activation::Relu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = arch.init(&mut rng);
        let back = Params::unflatten(&arch.block_shapes(), &p.flatten()).unwrap();
        assert_eq!(back, p);
    }
}
