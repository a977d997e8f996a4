//! Small descriptive-statistics helpers.

use nalgebra::{DMatrix, DVector};

/// Sample mean and standard error of the mean (`s/√n`, `n−1` divisor).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn mean_vector(rows: &[DVector<f64>]) -> DVector<f64> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut out = DVector::zeros(dim);
    for r in rows {
        out += r;
    }
    out / rows.len() as f64
}

/// Sample covariance with `n−1` divisor.
pub fn covariance(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mean = mean_vector(rows);
    let mut out = DMatrix::zeros(dim, dim);
    for r in rows {
        let c = r - &mean;
        out += &c * c.transpose();
    }
    out / (rows.len() as f64 - 1.0)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_se_and_covariance() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0_f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        let rows = vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![3.0, 0.0]),
        ];
        let c = covariance(&rows);
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]));
    }
}
