//! Forecast, reconstruction and combined objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::Matrix;

/// Mean over horizon steps of the squared Euclidean norm of the per-step
/// difference: `(1/h) * sum_i ||a_i - b_i||^2`.
pub fn mean_step_sq_norm(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("{}x{}", b.nrows(), b.ncols()),
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    if a.nrows() == 0 {
        return Err(Error::invalid("empty horizon"));
    }
    let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sq / a.nrows() as f64)
}

/// Forecast loss between prediction `y_hat` and ground truth `y`.
pub fn loss_forecast(y_hat: &Matrix, y: &Matrix) -> Result<f64> {
    mean_step_sq_norm(y_hat, y)
}

/// Reconstruction loss between the reconstruction `y_tilde` and the
/// forecast `y_hat` it reconstructs.
pub fn loss_recon(y_tilde: &Matrix, y_hat: &Matrix) -> Result<f64> {
    mean_step_sq_norm(y_tilde, y_hat)
}

/// The two loss terms and their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub forecast: f64,
    pub recon: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(forecast: f64, recon: f64) -> Self {
        Self {
            forecast,
            recon,
            total: forecast + recon,
        }
    }
}

/// `L_total = L_forecast + L_recon`.
pub fn loss_total(forecast: f64, recon: f64) -> LossBreakdown {
    LossBreakdown::new(forecast, recon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn forecast_examples() {
        let y = array![[1.0, 2.0]];
        assert_eq!(loss_forecast(&y, &y).unwrap(), 0.0);
        assert_eq!(
            loss_forecast(&array![[3.0, 4.0]], &array![[0.0, 0.0]]).unwrap(),
            25.0
        );
        // per-step squared norms 4 and 16
        let a = array![[2.0, 0.0], [0.0, 4.0]];
        assert_eq!(loss_forecast(&a, &Array2::zeros((2, 2))).unwrap(), 10.0);
    }

    #[test]
    fn recon_examples() {
        let y = array![[0.5], [1.5]];
        assert_eq!(loss_recon(&y, &y).unwrap(), 0.0);
        assert_eq!(loss_recon(&array![[2.0]], &array![[0.0]]).unwrap(), 4.0);
        let a = array![[1.0], [-1.0], [2.0]];
        assert_eq!(loss_recon(&a, &Array2::zeros((3, 1))).unwrap(), 2.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(loss_forecast(&array![[1.0, 2.0]], &array![[1.0]]).is_err());
    }

    #[test]
    fn total_is_sum() {
        assert_eq!(loss_total(0.0, 0.0).total, 0.0);
        let l = loss_total(0.3, 0.2);
        assert_eq!(l.total, 0.3 + 0.2);
        assert!((l.total - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn losses_nonnegative_zero_iff_equal(v in proptest::collection::vec(-5.0f64..5.0, 12), w in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let a = Array2::from_shape_vec((4, 3), v).unwrap();
            let b = Array2::from_shape_vec((4, 3), w).unwrap();
            let l = loss_forecast(&a, &b).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, a == b);
            prop_assert_eq!(loss_recon(&a, &a).unwrap(), 0.0);
        }
    }
}
