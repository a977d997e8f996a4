//! Serde adapters: matrices are written as
//! `{"rows": r, "cols": c, "data": [row-major entries]}`.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<MatrixJson> for DMatrix<f64> {
    type Error = String;

    fn try_from(m: MatrixJson) -> Result<Self, String> {
        if m.rows * m.cols != m.data.len() {
            return Err(format!(
                "matrix declares {}x{} but has {} entries",
                m.rows,
                m.cols,
                m.data.len()
            ));
        }
        Ok(DMatrix::from_row_slice(m.rows, m.cols, &m.data))
    }
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        MatrixJson::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        DMatrix::try_from(MatrixJson::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

pub mod opt_matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(MatrixJson::from).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Option::<MatrixJson>::deserialize(d)?
            .map(DMatrix::try_from)
            .transpose()
            .map_err(serde::de::Error::custom)
    }
}
