// SPDX-License-Identifier: Apache-2.0

//! Power-law exponent of the latent penalty against the step count.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionFit {
    /// Slope of `log L_lp` against `log step`.
    pub exponent: f64,
    pub intercept: f64,
    pub step_lo: usize,
    pub step_hi: usize,
    /// RMS residual of the fit in log space.
    pub residual: f64,
    pub points: usize,
}

/// Default intermediate window: 10% to 50% of the run.
pub fn default_window(total_steps: usize) -> (usize, usize) {
    ((total_steps / 10).max(1), (total_steps / 2).max(1))
}

/// Late window: 50% to 100% of the run.
pub fn late_window(total_steps: usize) -> (usize, usize) {
    ((total_steps / 2).max(1), total_steps.max(1))
}

/// Least-squares slope of `log y` on `log step` over `step_lo..=step_hi`.
/// `series` holds `(step, value)`; non-positive values cannot be logged and
/// are skipped.
pub fn diffusion_fit(series: &[(usize, f64)], window: (usize, usize)) -> Result<DiffusionFit> {
    let (lo, hi) = window;
    if lo == 0 || hi <= lo {
        return Err(Error::Config(format!("invalid fit window [{lo}, {hi}]")));
    }
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(s, v)| (lo..=hi).contains(s) && *v > 0.0 && v.is_finite())
        .map(|&(s, v)| ((s as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Contract(format!(
            "diffusion fit needs two positive points in [{lo}, {hi}], found {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    Ok(DiffusionFit {
        exponent: slope,
        intercept,
        step_lo: lo,
        step_hi: hi,
        residual: (rss / n).sqrt(),
        points: pts.len(),
    })
}

/// `log step, log value` rows for plotting.
pub fn log_log_dat(series: &[(usize, f64)]) -> String {
    let mut out = String::from("# log_step log_lp\n");
    for &(s, v) in series {
        if s > 0 && v > 0.0 {
            out.push_str(&format!("{} {}\n", (s as f64).ln(), v.ln()));
        }
    }
    out
}
