//! Least-squares slope fitting for scaling studies, plus the slope-report
//! structure emitted as CSV.

use serde::{Deserialize, Serialize};

/// Ordinary least squares on (ln x, ln y).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in ln y.
    pub residual: f64,
}

pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> LogLogFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two levels to fit a slope");
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (lx
        .iter()
        .zip(&ly)
        .map(|(a, b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum::<f64>()
        / n)
        .sqrt();
    LogLogFit {
        slope,
        intercept,
        residual,
    }
}

/// One measured scaling quantity: raw per-level values plus the fit and the
/// expected exponent it is checked against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeReport {
    pub quantity: String,
    pub levels: Vec<f64>,
    pub values: Vec<f64>,
    pub fit: LogLogFit,
    pub expected_slope: f64,
    pub tolerance: f64,
}

impl SlopeReport {
    pub fn new(
        quantity: &str,
        levels: Vec<f64>,
        values: Vec<f64>,
        expected_slope: f64,
        tolerance: f64,
    ) -> SlopeReport {
        let fit = log_log_fit(&levels, &values);
        SlopeReport {
            quantity: quantity.to_string(),
            levels,
            values,
            fit,
            expected_slope,
            tolerance,
        }
    }

    pub fn within_band(&self) -> bool {
        (self.fit.slope - self.expected_slope).abs() <= self.tolerance
    }

    /// CSV rows: quantity, level, measured-value, fitted-slope, expected-slope, tolerance.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (l, v) in self.levels.iter().zip(&self.values) {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.6},{:.3},{:.3}\n",
                self.quantity, l, v, self.fit.slope, self.expected_slope, self.tolerance
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_power_law_recovered() {
        let xs: [f64; 3] = [0.1, 0.05, 0.025];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(1.5)).collect();
        let f = log_log_fit(&xs, &ys);
        assert_relative_eq!(f.slope, 1.5, epsilon = 1e-12);
        assert_relative_eq!(f.intercept.exp(), 3.0, epsilon = 1e-12);
        assert!(f.residual < 1e-12);
    }
}
