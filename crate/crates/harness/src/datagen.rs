//! Synthetic classification tasks.
//!
//! Every generator is a pure function of its spec and seed. Transfer pairs
//! draw source, target and test examples from separate random streams, so
//! they never share examples.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use kronprior::data::Dataset;

use crate::config::{DatasetSpec, Generator};
use crate::error::{HarnessError, Result};
use crate::idx::load_mnist_idx;

/// Stream offsets so source, target and test never share random draws.
const STREAM_META: u64 = 0;
const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_TEST: u64 = 3;

fn stream(seed: u64, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which);
    rng
}

/// How the target task relates to the source task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMeta {
    pub generator: Generator,
    pub angle_deg: f64,
    /// Class means of the source task, one row per class.
    pub source_means: Vec<Vec<f64>>,
    pub target_means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TransferPair {
    pub source: Dataset,
    pub target: Dataset,
    pub test: Dataset,
    pub meta: TransferMeta,
}

/// Rotation by `angle` in the coordinate planes (0,1), (2,3), ….
pub fn plane_rotation(dim: usize, angle: f64) -> DMatrix<f64> {
    let mut r = DMatrix::identity(dim, dim);
    let (s, c) = angle.sin_cos();
    let mut i = 0;
    while i + 1 < dim {
        r[(i, i)] = c;
        r[(i, i + 1)] = -s;
        r[(i + 1, i)] = s;
        r[(i + 1, i + 1)] = c;
        i += 2;
    }
    r
}

fn class_means(classes: usize, dim: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    (0..classes)
        .map(|_| {
            let v: DVector<f64> = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
            let n = v.norm().max(1e-12);
            v * (spread / n)
        })
        .collect()
}

/// Class-conditional Gaussians, interleaved by class.
pub fn gaussian_mixture(means: &[DVector<f64>], per_class: usize, noise: f64, rng: &mut ChaCha8Rng) -> Dataset {
    let classes = means.len();
    let dim = means.first().map_or(0, |m| m.len());
    let n = classes * per_class;
    let mut x = DMatrix::zeros(n, dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            x[(i, j)] = means[c][j] + noise * z;
        }
        y.push(c);
    }
    Dataset::new(x, y, classes).expect("generated labels are in range")
}

/// Two interleaved half circles in the first two coordinates, padded with
/// noise dimensions up to `dim`.
pub fn moons(per_class: usize, dim: usize, noise: f64, rotation: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Dataset {
    let n = 2 * per_class;
    let mut x = DMatrix::zeros(n, dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (px, py) = if c == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let mut v = DVector::zeros(dim);
        v[0] = px;
        if dim > 1 {
            v[1] = py;
        }
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            v[j] += noise * z;
        }
        let v = rotation * v;
        x.row_mut(i).copy_from(&v.transpose());
        y.push(c);
    }
    Dataset::new(x, y, 2).expect("generated labels are in range")
}

fn validate(spec: &DatasetSpec) -> Result<()> {
    let bad = |m: String| Err(HarnessError::Config(m));
    if spec.generator != Generator::MnistIdx {
        if spec.dim == 0 {
            return bad("dataset.dim must be positive".into());
        }
        if spec.classes < 2 {
            return bad("dataset.classes must be at least 2".into());
        }
        if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
            return bad(format!("dataset.noise must be finite and >= 0, got {}", spec.noise));
        }
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
        return bad(format!("dataset.train_fraction must lie in (0, 1], got {}", spec.train_fraction));
    }
    Ok(())
}

/// Source task, target training data and target test data.
pub fn generate_transfer_pair(spec: &DatasetSpec, seed: u64) -> Result<TransferPair> {
    validate(spec)?;
    let angle = spec.angle_deg.to_radians();
    match spec.generator {
        Generator::GaussianBlobs | Generator::RotatedTransferPair => {
            let mut meta_rng = stream(seed, STREAM_META);
            let base = class_means(spec.classes, spec.dim, spec.spread, &mut meta_rng);
            let rot = if spec.generator == Generator::RotatedTransferPair {
                plane_rotation(spec.dim, angle)
            } else {
                DMatrix::identity(spec.dim, spec.dim)
            };
            let target_means: Vec<DVector<f64>> = base.iter().map(|m| &rot * m).collect();
            let source = gaussian_mixture(&base, spec.source_per_class, spec.noise, &mut stream(seed, STREAM_SOURCE));
            let target = gaussian_mixture(&target_means, spec.target_per_class, spec.noise, &mut stream(seed, STREAM_TARGET));
            let test = gaussian_mixture(&target_means, spec.test_per_class, spec.noise, &mut stream(seed, STREAM_TEST));
            let to_rows = |ms: &[DVector<f64>]| ms.iter().map(|m| m.iter().cloned().collect()).collect();
            Ok(TransferPair {
                source,
                target,
                test,
                meta: TransferMeta {
                    generator: spec.generator,
                    angle_deg: if spec.generator == Generator::RotatedTransferPair { spec.angle_deg } else { 0.0 },
                    source_means: to_rows(&base),
                    target_means: to_rows(&target_means),
                },
            })
        }
        Generator::MoonsLike => {
            let id = DMatrix::identity(spec.dim, spec.dim);
            let rot = plane_rotation(spec.dim, angle);
            Ok(TransferPair {
                source: moons(spec.source_per_class, spec.dim, spec.noise, &id, &mut stream(seed, STREAM_SOURCE)),
                target: moons(spec.target_per_class, spec.dim, spec.noise, &rot, &mut stream(seed, STREAM_TARGET)),
                test: moons(spec.test_per_class, spec.dim, spec.noise, &rot, &mut stream(seed, STREAM_TEST)),
                meta: TransferMeta {
                    generator: spec.generator,
                    angle_deg: spec.angle_deg,
                    source_means: Vec::new(),
                    target_means: Vec::new(),
                },
            })
        }
        Generator::MnistIdx => {
            let (images, labels) = match (&spec.images, &spec.labels) {
                (Some(i), Some(l)) => (i, l),
                _ => {
                    return Err(HarnessError::Config(
                        "mnist-idx needs dataset.images and dataset.labels".into(),
                    ))
                }
            };
            let all = load_mnist_idx(images, labels)?;
            let mut rng = stream(seed, STREAM_META);
            // Disjoint halves of the training file serve as source and target.
            let (source, rest) = all.split(0.5, &mut rng);
            let (target, test) = match (&spec.test_images, &spec.test_labels) {
                (Some(i), Some(l)) => (rest, load_mnist_idx(i, l)?),
                _ => {
                    let (t, s) = rest.split(0.8, &mut rng);
                    (t, s)
                }
            };
            let target = match spec.subset_per_class {
                Some(n) => target.per_class(n),
                None => target,
            };
            Ok(TransferPair {
                source,
                target,
                test,
                meta: TransferMeta {
                    generator: spec.generator,
                    angle_deg: 0.0,
                    source_means: Vec::new(),
                    target_means: Vec::new(),
                },
            })
        }
    }
}

/// Rotated copies of one task for sequential learning; task `t` uses
/// `t · angle_deg` and its own sample stream.
pub fn task_sequence(spec: &DatasetSpec, tasks: usize, seed: u64) -> Result<(Dataset, Vec<(Dataset, Dataset)>)> {
    validate(spec)?;
    let mut meta_rng = stream(seed, STREAM_META);
    let base = class_means(spec.classes, spec.dim, spec.spread, &mut meta_rng);
    let source = gaussian_mixture(&base, spec.source_per_class, spec.noise, &mut stream(seed, STREAM_SOURCE));
    let seq = (0..tasks)
        .map(|t| {
            let rot = plane_rotation(spec.dim, (spec.angle_deg * (t + 1) as f64).to_radians());
            let means: Vec<DVector<f64>> = base.iter().map(|m| &rot * m).collect();
            let train = gaussian_mixture(&means, spec.target_per_class, spec.noise, &mut stream(seed, 16 + 2 * t as u64));
            let test = gaussian_mixture(&means, spec.test_per_class, spec.noise, &mut stream(seed, 17 + 2 * t as u64));
            (train, test)
        })
        .collect();
    Ok((source, seq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            source_per_class: 20,
            target_per_class: 10,
            test_per_class: 5,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_transfer_pair(&spec(), 3).unwrap();
        let b = generate_transfer_pair(&spec(), 3).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert_eq!(a.test, b.test);
        let c = generate_transfer_pair(&spec(), 4).unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn zero_angle_gives_identical_distributions_and_disjoint_samples() {
        let s = DatasetSpec { angle_deg: 0.0, ..spec() };
        let p = generate_transfer_pair(&s, 0).unwrap();
        assert_eq!(p.meta.source_means, p.meta.target_means);
        for i in 0..p.target.len() {
            for j in 0..p.source.len() {
                assert_ne!(p.target.inputs.row(i), p.source.inputs.row(j));
            }
        }
    }

    #[test]
    fn rotation_is_orthogonal() {
        let r = plane_rotation(5, 0.7);
        assert!((&r * r.transpose() - DMatrix::identity(5, 5)).norm() < 1e-14);
    }

    #[test]
    fn per_class_subset_sizes() {
        let p = generate_transfer_pair(&spec(), 1).unwrap();
        for n in [2, 4, 8] {
            let sub = p.target.per_class(n);
            assert_eq!(sub.len(), n * 4);
        }
    }

    #[test]
    fn moons_and_blobs_are_generated() {
        let m = generate_transfer_pair(&DatasetSpec { generator: Generator::MoonsLike, classes: 2, ..spec() }, 0).unwrap();
        assert_eq!(m.target.num_classes, 2);
        let b = generate_transfer_pair(&DatasetSpec { generator: Generator::GaussianBlobs, ..spec() }, 0).unwrap();
        assert_eq!(b.meta.angle_deg, 0.0);
    }
}
