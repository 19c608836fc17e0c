//! In-memory classification datasets.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-per-example inputs with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(with = "crate::matrix_io")]
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Dataset {
            inputs: DMatrix::zeros(0, dim),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut inputs = DMatrix::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            inputs.row_mut(r).copy_from(&self.inputs.row(i));
        }
        Dataset {
            inputs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() || self.num_classes != other.num_classes {
            return Err(Error::DimensionMismatch("datasets differ in shape".into()));
        }
        let n = self.len() + other.len();
        let mut inputs = DMatrix::zeros(n, self.dim());
        inputs.rows_mut(0, self.len()).copy_from(&self.inputs);
        inputs.rows_mut(self.len(), other.len()).copy_from(&other.inputs);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Shuffled split; the first part holds `round(frac · len)` examples.
    pub fn split(&self, frac: f64, rng: &mut ChaCha8Rng) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let cut = ((self.len() as f64) * frac).round() as usize;
        let cut = cut.min(self.len());
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    /// The first `n` examples of every class, in dataset order.
    pub fn per_class(&self, n: usize) -> Dataset {
        let mut counts = vec![0usize; self.num_classes];
        let mut idx = Vec::new();
        for (i, &y) in self.labels.iter().enumerate() {
            if counts[y] < n {
                counts[y] += 1;
                idx.push(i);
            }
        }
        self.subset(&idx)
    }

    /// Index batches of at most `batch` examples, shuffled when `rng` is given.
    pub fn batch_indices(&self, batch: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            idx.shuffle(rng);
        }
        idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy() -> Dataset {
        let x = DMatrix::from_fn(10, 2, |i, j| (i * 2 + j) as f64);
        Dataset::new(x, (0..10).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(Dataset::new(DMatrix::zeros(1, 1), vec![3], 3).is_err());
        assert!(Dataset::new(DMatrix::zeros(2, 1), vec![0], 3).is_err());
    }

    #[test]
    fn split_partitions_rows() {
        let d = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = d.split(0.9, &mut rng);
        assert_eq!(a.len() + b.len(), 10);
        assert_eq!(a.len(), 9);
        let mut seen: Vec<f64> = a
            .inputs
            .column(0)
            .iter()
            .chain(b.inputs.column(0).iter())
            .copied()
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(|i| (2 * i) as f64).collect::<Vec<_>>());
    }

    #[test]
    fn per_class_caps_counts() {
        let d = toy().per_class(2);
        assert_eq!(d.len(), 6);
        for c in 0..3 {
            assert_eq!(d.labels.iter().filter(|&&y| y == c).count(), 2);
        }
    }
}
