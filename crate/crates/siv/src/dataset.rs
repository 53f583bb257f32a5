//! Observed data container.

use crate::error::{Result, SivError};
use nalgebra::{DMatrix, DVector};

/// Observed exposure matrix X (n×p) together with the outcome vector Y.
///
/// Columns of X and Y are centered on construction; the removed means are
/// kept for reporting. `true_beta` is only populated by the simulation
/// generators.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub centered: bool,
    pub x_means: DVector<f64>,
    pub y_mean: f64,
    pub true_beta: Option<DVector<f64>>,
}

impl Dataset {
    /// Build a dataset from raw (uncentered) observations, centering X
    /// column-wise and Y.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let (n, p) = (x.nrows(), x.ncols());
        if n < 2 || p < 2 {
            return Err(SivError::Dimension(format!(
                "need n >= 2 and p >= 2, got n={n}, p={p}"
            )));
        }
        if y.len() != n {
            return Err(SivError::Dimension(format!(
                "X has {n} rows but Y has {} entries",
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(SivError::InvalidInput(
                "NaN or infinite entry in input data".to_string(),
            ));
        }
        let mut xc = x;
        let mut x_means = DVector::zeros(p);
        for j in 0..p {
            let m = xc.column(j).mean();
            x_means[j] = m;
            for i in 0..n {
                xc[(i, j)] -= m;
            }
        }
        let y_mean = y.mean();
        let yc = y.map(|v| v - y_mean);
        Ok(Self {
            x: xc,
            y: yc,
            centered: true,
            x_means,
            y_mean,
            true_beta: None,
        })
    }

    pub fn with_true_beta(mut self, beta: DVector<f64>) -> Self {
        self.true_beta = Some(beta);
        self
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centering_within_tolerance() {
        let x = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 8.0, 0.0]);
        let y = DVector::from_column_slice(&[1.0, 5.0, 3.0]);
        let d = Dataset::new(x, y).unwrap();
        for j in 0..2 {
            assert!(d.x.column(j).mean().abs() < 1e-10);
        }
        assert!(d.y.mean().abs() < 1e-10);
        assert_eq!(d.x_means[0], 2.0);
        assert_eq!(d.y_mean, 3.0);
    }

    #[test]
    fn rejects_nan_and_mismatch() {
        let x = DMatrix::from_element(3, 2, f64::NAN);
        let y = DVector::zeros(3);
        assert!(Dataset::new(x, y).is_err());
        let x = DMatrix::zeros(3, 2);
        let y = DVector::zeros(4);
        assert!(Dataset::new(x, y).is_err());
        let x = DMatrix::zeros(1, 2);
        let y = DVector::zeros(1);
        assert!(Dataset::new(x, y).is_err());
    }
}
