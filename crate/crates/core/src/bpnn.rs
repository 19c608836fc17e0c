//! Bayesian progressive networks: one MLP column per task, lateral
//! connections from earlier columns, and Laplace posteriors per column.
//!
//! Column `k` (0-based) computes, at a lateral layer `l`,
//! `s_l = (W^(k,k)_l ā^(k)_{l−1} + Σ_{k'<k} W^(k',k)_l ā^(k')_{l−1}) / (k+1)`
//! and the ordinary `s_l = W^(k,k)_l ā^(k)_{l−1}` elsewhere. Earlier columns
//! are frozen once trained; while a new column trains their weights are drawn
//! from their posteriors once per mini-batch.
//!
//! Parameter blocks of column `k` are ordered as the `L` main layers followed
//! by its incoming laterals, grouped by layer and then by source column.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curvature::{fisher, FisherConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussdist::{LayerGaussian, NetworkGaussian, NetworkSampler};
use crate::kronalg::KronFactored;
use crate::laplace::{map_train, TrainConfig};
use crate::net::{
    class_dlogits, homogeneous, label_dlogits, log_softmax, nll, softmax, Activation, BlockCapture,
    Capture, Model, Params,
};
use crate::pacbayes::{
    evaluate, optimize_scales, whiten, BoundReport, CurvatureScales, Objective, ScaleOptConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpnnArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// 1-based layer indices that receive lateral connections. The output
    /// layer never does.
    pub lateral_layers: Vec<usize>,
}

impl BpnnArchitecture {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        activation: Activation,
        mut lateral_layers: Vec<usize>,
    ) -> Result<Self> {
        if input_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        lateral_layers.sort_unstable();
        lateral_layers.dedup();
        let l_count = hidden.len() + 1;
        if let Some(&bad) = lateral_layers.iter().find(|&&l| l < 2 || l >= l_count) {
            return Err(Error::InvalidArgument(format!(
                "lateral layer {bad} outside 2..={}",
                l_count - 1
            )));
        }
        Ok(BpnnArchitecture {
            input_dim,
            hidden,
            activation,
            lateral_layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn is_lateral(&self, li: usize) -> bool {
        self.lateral_layers.contains(&(li + 1))
    }

    fn main_shapes(&self, classes: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims.windows(2).map(|w| (w[1], w[0] + 1)).collect()
    }

    /// `(source column, 0-based layer)` of each lateral block of column `k`.
    pub fn laterals(&self, k: usize) -> Vec<(usize, usize)> {
        self.lateral_layers
            .iter()
            .flat_map(|&l| (0..k).map(move |src| (src, l - 1)))
            .collect()
    }

    /// Block shapes of column `k` with a `classes`-way head.
    pub fn column_shapes(&self, k: usize, classes: usize) -> Vec<(usize, usize)> {
        let main = self.main_shapes(classes);
        let mut shapes = main.clone();
        shapes.extend(self.laterals(k).into_iter().map(|(_, li)| main[li]));
        shapes
    }

    fn scale(&self, k: usize, li: usize) -> f64 {
        if self.is_lateral(li) {
            1.0 / (k + 1) as f64
        } else {
            1.0
        }
    }
}

/// Per-column inputs `ā^(k)_l` (homogeneous) and pre-activations `s^(k)_l`.
struct Pass {
    acts: Vec<Vec<DMatrix<f64>>>,
    pre: Vec<Vec<DMatrix<f64>>>,
}

/// Forward pass through columns `0..cols.len()`.
fn forward_columns(arch: &BpnnArchitecture, cols: &[&Params], inputs: &DMatrix<f64>) -> Result<Pass> {
    if inputs.ncols() != arch.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} features, network expects {}",
            inputs.ncols(),
            arch.input_dim
        )));
    }
    let l_count = arch.num_layers();
    let mut pass = Pass {
        acts: Vec::with_capacity(cols.len()),
        pre: Vec::with_capacity(cols.len()),
    };
    for (k, p) in cols.iter().enumerate() {
        let lat = arch.laterals(k);
        if p.blocks.len() != l_count + lat.len() {
            return Err(Error::DimensionMismatch(format!(
                "column {k} has {} blocks, expected {}",
                p.blocks.len(),
                l_count + lat.len()
            )));
        }
        let mut acts = Vec::with_capacity(l_count);
        let mut pre = Vec::with_capacity(l_count);
        let mut a = inputs.clone();
        for li in 0..l_count {
            let abar = homogeneous(&a);
            let mut s = &abar * p.blocks[li].transpose();
            if arch.is_lateral(li) && k > 0 {
                for (j, &(src, lj)) in lat.iter().enumerate() {
                    if lj == li {
                        s += &pass.acts[src][li] * p.blocks[l_count + j].transpose();
                    }
                }
                s /= (k + 1) as f64;
            }
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("pre-activation".into()));
            }
            if li + 1 < l_count {
                a = arch.activation.apply(&s);
            }
            acts.push(abar);
            pre.push(s);
        }
        pass.acts.push(acts);
        pass.pre.push(pre);
    }
    Ok(pass)
}

/// Reverse pass from the head of the last column. Returns, for every
/// column, the block gradients and the per-block `Ds` (already multiplied
/// by the lateral averaging factor).
fn backward_columns(
    arch: &BpnnArchitecture,
    cols: &[&Params],
    pass: &Pass,
    dlogits: &DMatrix<f64>,
) -> (Vec<Params>, Vec<Vec<DMatrix<f64>>>) {
    let l_count = arch.num_layers();
    let t = cols.len() - 1;
    let rows = dlogits.nrows();
    let mut delta: Vec<Vec<DMatrix<f64>>> = (0..=t)
        .map(|k| (0..l_count).map(|li| DMatrix::zeros(rows, pass.pre[k][li].ncols())).collect())
        .collect();
    delta[t][l_count - 1] = dlogits.clone();
    let mut grads: Vec<Vec<DMatrix<f64>>> = cols
        .iter()
        .map(|p| p.blocks.iter().map(|b| DMatrix::zeros(b.nrows(), b.ncols())).collect())
        .collect();
    let mut ds: Vec<Vec<DMatrix<f64>>> = grads.iter().map(|g| vec![DMatrix::zeros(0, 0); g.len()]).collect();
    for li in (0..l_count).rev() {
        for k in (0..=t).rev() {
            let c = if k > 0 { arch.scale(k, li) } else { 1.0 };
            let d = &delta[k][li] * c;
            grads[k][li] = d.transpose() * &pass.acts[k][li];
            let mut routes = vec![(k, li)];
            if arch.is_lateral(li) && k > 0 {
                for (j, &(src, lj)) in arch.laterals(k).iter().enumerate() {
                    if lj == li {
                        grads[k][l_count + j] = d.transpose() * &pass.acts[src][li];
                        ds[k][l_count + j] = d.clone();
                        routes.push((src, l_count + j));
                    }
                }
            }
            if li > 0 {
                for (dst, block) in routes {
                    let w = &cols[k].blocks[block];
                    let back = &d * w.columns(0, w.ncols() - 1);
                    let next = back.component_mul(&arch.activation.derivative(&pass.pre[dst][li - 1]));
                    delta[dst][li - 1] += next;
                }
            }
            ds[k][li] = d;
        }
    }
    (grads.into_iter().map(|blocks| Params { blocks }).collect(), ds)
}

/// One trained column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub num_classes: usize,
    pub posterior: NetworkGaussian,
    pub prior: NetworkGaussian,
    pub scales: CurvatureScales,
    pub report: BoundReport,
}

/// Trained columns plus the source-task prior checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpnnModel {
    pub arch: BpnnArchitecture,
    /// Prior for main-column layers, learned on a source task.
    pub prior: NetworkGaussian,
    /// Precision of the isotropic fallback prior for heads that do not
    /// match the checkpoint.
    pub gamma: f64,
    pub columns: Vec<Column>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpnnTrainConfig {
    pub train: TrainConfig,
    pub fisher: FisherConfig,
    pub objective: Objective,
    pub epsilon: f64,
    pub scale_opt: ScaleOptConfig,
}

impl Default for BpnnTrainConfig {
    fn default() -> Self {
        BpnnTrainConfig {
            train: TrainConfig::default(),
            fisher: FisherConfig::default(),
            objective: Objective::Catoni,
            epsilon: crate::pacbayes::DEFAULT_EPSILON,
            scale_opt: ScaleOptConfig::default(),
        }
    }
}

/// The network seen by column `t` during training: its own blocks are the
/// parameters, earlier columns are frozen.
pub struct ColumnView<'a> {
    model: &'a BpnnModel,
    t: usize,
    classes: usize,
    means: Vec<Params>,
    samplers: Vec<NetworkSampler>,
}

impl<'a> ColumnView<'a> {
    pub fn new(model: &'a BpnnModel, t: usize, classes: usize) -> Result<Self> {
        if t > model.columns.len() {
            return Err(Error::UntrainedColumn(t));
        }
        let prev = &model.columns[..t];
        Ok(ColumnView {
            model,
            t,
            classes,
            means: prev.iter().map(|c| c.posterior.mean()).collect(),
            samplers: prev.iter().map(|c| c.posterior.sampler()).collect::<Result<_>>()?,
        })
    }

    fn run(&self, frozen: &[Params], params: &Params, inputs: &DMatrix<f64>) -> Result<Pass> {
        params.check_shapes(&self.block_shapes())?;
        let mut cols: Vec<&Params> = frozen.iter().collect();
        cols.push(params);
        forward_columns(&self.model.arch, &cols, inputs)
    }
}

impl Model for ColumnView<'_> {
    fn block_shapes(&self) -> Vec<(usize, usize)> {
        self.model.arch.column_shapes(self.t, self.classes)
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, params: &Params, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let pass = self.run(&self.means, params, inputs)?;
        Ok(pass.pre[self.t].last().unwrap().clone())
    }

    fn nll_grad(
        &self,
        params: &Params,
        inputs: &DMatrix<f64>,
        labels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Params)> {
        // Without laterals the frozen columns cannot affect the output, so
        // skip the draws and leave the shared generator untouched.
        let frozen: Vec<Params> = if self.model.arch.lateral_layers.is_empty() {
            self.means.clone()
        } else {
            self.samplers.iter().map(|s| s.sample(rng)).collect()
        };
        let pass = self.run(&frozen, params, inputs)?;
        let logits = pass.pre[self.t].last().unwrap();
        let loss = nll(logits, labels)?;
        let mut cols: Vec<&Params> = frozen.iter().collect();
        cols.push(params);
        let (mut grads, _) = backward_columns(&self.model.arch, &cols, &pass, &label_dlogits(&softmax(logits), labels));
        Ok((loss, grads.pop().unwrap()))
    }

    fn capture(&self, params: &Params, inputs: &DMatrix<f64>) -> Result<Capture> {
        let pass = self.run(&self.means, params, inputs)?;
        let log_probs = log_softmax(pass.pre[self.t].last().unwrap());
        let probs = log_probs.map(f64::exp);
        let l_count = self.model.arch.num_layers();
        let lat = self.model.arch.laterals(self.t);
        let mut blocks: Vec<BlockCapture> = (0..l_count)
            .map(|li| pass.acts[self.t][li].clone())
            .chain(lat.iter().map(|&(src, li)| pass.acts[src][li].clone()))
            .map(|acts| BlockCapture {
                acts,
                class_grads: Vec::with_capacity(self.classes),
            })
            .collect();
        let mut cols: Vec<&Params> = self.means.iter().collect();
        cols.push(params);
        for c in 0..self.classes {
            let (_, mut ds) = backward_columns(&self.model.arch, &cols, &pass, &class_dlogits(&probs, c));
            for (b, d) in blocks.iter_mut().zip(ds.pop().unwrap()) {
                b.class_grads.push(d);
            }
        }
        Ok(Capture { log_probs, blocks })
    }
}

impl BpnnModel {
    pub fn new(arch: BpnnArchitecture, prior: NetworkGaussian, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        let l_count = arch.num_layers();
        if prior.layers.len() != l_count {
            return Err(Error::DimensionMismatch(format!(
                "prior has {} layers, columns have {l_count}",
                prior.layers.len()
            )));
        }
        let main = arch.main_shapes(prior.layers[l_count - 1].shape().0);
        if prior.shapes()[..l_count - 1] != main[..l_count - 1] {
            return Err(Error::DimensionMismatch("prior hidden layers do not match columns".into()));
        }
        Ok(BpnnModel {
            arch,
            prior,
            gamma,
            columns: Vec::new(),
        })
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    /// Prior for a new column `t` with a `classes`-way head: the learned
    /// prior on main layers (isotropic on a mismatched head) and the
    /// originating column's main-layer posterior on each lateral.
    pub fn column_prior(&self, t: usize, classes: usize) -> Result<NetworkGaussian> {
        if t > self.columns.len() {
            return Err(Error::UntrainedColumn(t));
        }
        let shapes = self.arch.column_shapes(t, classes);
        let l_count = self.arch.num_layers();
        let mut layers: Vec<LayerGaussian> = Vec::with_capacity(shapes.len());
        for (li, &shape) in shapes.iter().take(l_count).enumerate() {
            let p = &self.prior.layers[li];
            layers.push(if p.shape() == shape {
                p.clone()
            } else {
                LayerGaussian::isotropic(shape, self.gamma)?
            });
        }
        for (src, li) in self.arch.laterals(t) {
            layers.push(self.columns[src].posterior.layers[li].clone());
        }
        Ok(NetworkGaussian::new(layers))
    }

    /// `½ Σ τ trace(F Σ)` over the frozen columns' blocks, with `F` the
    /// KFAC Fisher of task `t`'s likelihood at the frozen means.
    pub fn frozen_trace_constant(&self, view: &ColumnView, params: &Params, data: &Dataset) -> Result<f64> {
        let t = view.t;
        if t == 0 || self.arch.lateral_layers.is_empty() || data.is_empty() {
            return Ok(0.0);
        }
        let pass = view.run(&view.means, params, &data.inputs)?;
        let probs = softmax(pass.pre[t].last().unwrap());
        let mut cols: Vec<&Params> = view.means.iter().collect();
        cols.push(params);
        let mut left: Vec<Vec<DMatrix<f64>>> = (0..t)
            .map(|k| cols[k].blocks.iter().map(|b| DMatrix::zeros(b.nrows(), b.nrows())).collect())
            .collect();
        for c in 0..view.classes {
            let (_, ds) = backward_columns(&self.arch, &cols, &pass, &class_dlogits(&probs, c));
            for k in 0..t {
                for (b, d) in ds[k].iter().enumerate() {
                    let w = DMatrix::from_fn(d.nrows(), 1, |i, _| probs[(i, c)].sqrt());
                    let dw = DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| d[(i, j)] * w[(i, 0)]);
                    left[k][b] += dw.transpose() * dw;
                }
            }
        }
        let l_count = self.arch.num_layers();
        let mut total = 0.0;
        for k in 0..t {
            let lat = self.arch.laterals(k);
            for b in 0..cols[k].blocks.len() {
                let acts = if b < l_count { &pass.acts[k][b] } else { &pass.acts[lat[b - l_count].0][lat[b - l_count].1] };
                let right = acts.transpose() * acts;
                // KFAC, normalised so that L ⊗ R approximates the summed Fisher.
                let f = KronFactored::new(left[k][b].clone(), right / data.len() as f64)?;
                total += 0.5 * self.columns[k].posterior.layers[b].trace_covariance(&f)?;
            }
        }
        Ok(total)
    }

    /// Trains column `t = num_columns()` on `data` and freezes it.
    pub fn train_task(&mut self, data: &Dataset, cfg: &BpnnTrainConfig) -> Result<&Column> {
        let t = self.columns.len();
        let classes = data.num_classes;
        let prior = self.column_prior(t, classes)?;
        let mut init = prior.mean();
        let shapes = self.arch.column_shapes(t, classes);
        if self.prior.layers[self.arch.num_layers() - 1].shape() != shapes[self.arch.num_layers() - 1] {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ (t as u64).wrapping_mul(0x9e37));
            let head = Params::init(&shapes[self.arch.num_layers() - 1..self.arch.num_layers()], 1.0, &mut rng);
            init.blocks[self.arch.num_layers() - 1] = head.blocks[0].clone();
        }
        let column = {
            let view = ColumnView::new(self, t, classes)?;
            let fit = map_train(&view, &init, data, None, &prior, &cfg.train)?;
            let theta = fit.params;
            let est = fisher(&view, &theta, data, &cfg.fisher)?;
            let constant = self.frozen_trace_constant(&view, &theta, data)?;
            let spectrum = whiten(&est.total_blocks(), &prior, &theta)?;
            let data_nll = est.data_nll + constant;
            let n = data.len();
            let fitted = optimize_scales(&spectrum, data_nll, n, cfg.epsilon, cfg.objective, &cfg.scale_opt)?;
            let posterior = spectrum.posterior(&fitted.scales)?;
            let report = evaluate(&spectrum, &fitted.scales, data_nll, n, cfg.epsilon)?;
            Column {
                num_classes: classes,
                posterior,
                prior: spectrum.prior(),
                scales: fitted.scales,
                report,
            }
        };
        self.columns.push(column);
        Ok(self.columns.last().unwrap())
    }

    /// Logits of task `t` for explicit parameters of columns `0..=t`.
    pub fn forward(&self, t: usize, cols: &[Params], inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if cols.len() != t + 1 {
            return Err(Error::DimensionMismatch(format!("{} columns given for task {t}", cols.len())));
        }
        let refs: Vec<&Params> = cols.iter().collect();
        let pass = forward_columns(&self.arch, &refs, inputs)?;
        Ok(pass.pre[t].last().unwrap().clone())
    }

    /// Mean softmax of task `t` over joint posterior draws of columns `0..=t`.
    pub fn predict(&self, t: usize, inputs: &DMatrix<f64>, n_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
        if t >= self.columns.len() {
            return Err(Error::UntrainedColumn(t));
        }
        if n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        let samplers: Vec<NetworkSampler> = self.columns[..=t]
            .iter()
            .map(|c| c.posterior.sampler())
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = DMatrix::zeros(inputs.nrows(), self.columns[t].num_classes);
        for _ in 0..n_samples {
            let draw: Vec<Params> = samplers.iter().map(|s| s.sample(&mut rng)).collect();
            acc += softmax(&self.forward(t, &draw, inputs)?);
        }
        Ok(acc / n_samples as f64)
    }

    /// KL of column `t`'s posterior to its prior; frozen columns contribute nothing.
    pub fn column_kl(&self, t: usize) -> Result<f64> {
        let c = self.columns.get(t).ok_or(Error::UntrainedColumn(t))?;
        c.posterior.kl_divergence(&c.prior)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
