//! Straight-line field calibration against magnet current.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    /// mT per A.
    pub slope: f64,
    /// mT.
    pub intercept: f64,
    /// Currents (A) that entered the fit.
    pub fit_range: Vec<f64>,
}

impl CalibrationModel {
    pub fn predict(&self, current_a: f64) -> f64 {
        self.slope * current_a + self.intercept
    }

    pub fn current_for(&self, b_mt: f64) -> f64 {
        (b_mt - self.intercept) / self.slope
    }
}

/// Ordinary least squares `B = slope * I + intercept`.
pub fn calibrate_field(points: &[(f64, f64)]) -> Result<CalibrationModel> {
    if points.len() < 2 {
        return Err(Error::invalid("calibration needs at least two points"));
    }
    if points.iter().any(|(i, b)| !i.is_finite() || !b.is_finite()) {
        return Err(Error::invalid("calibration points must be finite"));
    }
    let n = points.len() as f64;
    let mi = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mi).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mi) * (p.1 - mb)).sum();
    let spread = points.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
    if sxx <= 1e-24 * spread.max(1.0).powi(2) * n {
        return Err(Error::invalid("calibration currents are all equal"));
    }
    let slope = sxy / sxx;
    Ok(CalibrationModel {
        slope,
        intercept: mb - slope * mi,
        fit_range: points.iter().map(|p| p.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn exact_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|k| (k as f64 * 4.0, 2.9 * k as f64 * 4.0)).collect();
        let m = calibrate_field(&pts).unwrap();
        assert_abs_diff_eq!(m.slope, 2.9, epsilon = 1e-12);
        assert_abs_diff_eq!(m.intercept, 0.0, epsilon = 1e-10);
        for (i, b) in pts {
            assert_abs_diff_eq!(m.predict(m.current_for(b)), b, epsilon = 1e-12);
            assert_abs_diff_eq!(m.predict(i), b, epsilon = 1e-10);
        }
    }

    #[test]
    fn two_points_interpolate() {
        let m = calibrate_field(&[(30.0, 90.0), (36.0, 105.0)]).unwrap();
        assert_abs_diff_eq!(m.predict(30.0), 90.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.predict(36.0), 105.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(calibrate_field(&[(1.0, 2.0)]).is_err());
        assert!(calibrate_field(&[(1.0, 2.0), (1.0, 3.0)]).is_err());
        assert!(calibrate_field(&[(1.0, f64::NAN), (2.0, 3.0)]).is_err());
    }

    #[test]
    fn noisy_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.005).unwrap();
        let pts: Vec<(f64, f64)> = (0..20)
            .map(|k| {
                let i = 31.0 + 0.2 * k as f64;
                (i, 2.9 * i + noise.sample(&mut rng))
            })
            .collect();
        let m = calibrate_field(&pts).unwrap();
        assert!((m.slope / 2.9 - 1.0).abs() < 0.01, "{}", m.slope);
    }
}
