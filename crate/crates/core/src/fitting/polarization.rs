//! 14N orientation and alignment from fitted `m_S = 0` populations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::FitResult;

/// Default half width (mT) of the low-confidence window around the crossing.
pub const DEFAULT_EXCLUSION_MT: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarizationReport {
    pub orientation: f64,
    pub alignment: f64,
    /// `(n_{0,+1}, n_{0,0}, n_{0,-1})` divided by their sum.
    pub populations: [f64; 3],
}

fn total(n: &[f64; 3]) -> Result<f64> {
    if n.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(format!("populations must be finite and nonnegative: {n:?}")));
    }
    let s: f64 = n.iter().sum();
    if s > 0.0 {
        Ok(s)
    } else {
        Err(Error::invalid("total population is zero"))
    }
}

/// `sqrt(3/2) (n₊ − n₋) / (n₊ + n₀ + n₋)`, populations ordered `(+1, 0, −1)`.
pub fn orientation(n: [f64; 3]) -> Result<f64> {
    Ok(1.5f64.sqrt() * (n[0] - n[2]) / total(&n)?)
}

/// `sqrt(1/2) (n₊ + n₋ − 2 n₀) / (n₊ + n₀ + n₋)`.
pub fn alignment(n: [f64; 3]) -> Result<f64> {
    Ok(0.5f64.sqrt() * (n[0] + n[2] - 2.0 * n[1]) / total(&n)?)
}

pub fn report(n: [f64; 3]) -> Result<PolarizationReport> {
    let s = total(&n)?;
    Ok(PolarizationReport {
        orientation: orientation(n)?,
        alignment: alignment(n)?,
        populations: n.map(|v| v / s),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarizationPoint {
    pub b_mt: f64,
    pub report: Option<PolarizationReport>,
    pub low_confidence: bool,
    /// `m_I` values whose `m_S = 0` component was absent from the fit.
    pub missing: Vec<i8>,
}

/// Orientation and alignment per fit, from area / strength of the three
/// `|0,m_I>` lower-state components.
pub fn polarization_sweep(fits: &[FitResult], b_gslac: f64, exclusion_mt: f64) -> Vec<PolarizationPoint> {
    fits.iter()
        .map(|fit| {
            let mut n = [0.0; 3];
            let mut missing = Vec::new();
            for (k, mi) in [1i8, 0, -1].into_iter().enumerate() {
                match fit.peak_areas.iter().find(|a| a.label.matches_nv(0, mi) && a.strength > 0.0) {
                    Some(a) => n[k] = a.population,
                    None => missing.push(mi),
                }
            }
            let b = fit.params.b_mt;
            PolarizationPoint {
                b_mt: b,
                report: report(n).ok(),
                low_confidence: (b - b_gslac).abs() <= exclusion_mt || !missing.is_empty(),
                missing,
            }
        })
        .collect()
}
