//! Row-major (de)serialisation of dense matrices.
//!
//! Matrices are written as `{"rows": r, "cols": c, "data": [...]}` with
//! `data[i * cols + j] = A[(i, j)]`, independent of nalgebra's internal
//! column-major storage.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct RowMajor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&DMatrix<f64>> for RowMajor {
    fn from(m: &DMatrix<f64>) -> Self {
        RowMajor {
            rows: m.nrows(),
            cols: m.ncols(),
            data: crate::kronalg::vec_rows(m),
        }
    }
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    RowMajor::from(m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    let rm = RowMajor::deserialize(d)?;
    if rm.data.len() != rm.rows * rm.cols {
        return Err(serde::de::Error::custom(format!(
            "matrix data has {} entries, expected {}x{}",
            rm.data.len(),
            rm.rows,
            rm.cols
        )));
    }
    Ok(DMatrix::from_row_slice(rm.rows, rm.cols, &rm.data))
}

/// Serde adapter for `Vec<DMatrix<f64>>`.
pub mod vec {
    use super::RowMajor;
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<RowMajor> = ms.iter().map(RowMajor::from).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let rows = Vec::<RowMajor>::deserialize(d)?;
        rows.into_iter()
            .map(|rm| {
                if rm.data.len() != rm.rows * rm.cols {
                    Err(serde::de::Error::custom("matrix data length mismatch"))
                } else {
                    Ok(DMatrix::from_row_slice(rm.rows, rm.cols, &rm.data))
                }
            })
            .collect()
    }
}
