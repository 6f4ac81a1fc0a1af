//! Power-law fits on log-log scale and plateau constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqkit::RealSeq;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("window [{lo}, {hi}] is invalid for a sequence of length {len}")]
    BadWindow { lo: usize, hi: usize, len: usize },
    #[error("window holds {0} usable points, need at least 8")]
    TooFewPoints(usize),
    #[error("{excluded} of {total} values in the window are not positive")]
    TooManyExcluded { excluded: usize, total: usize },
    #[error("sequence changes sign inside the window at n = {0}")]
    SignChange(usize),
    #[error("stderr sequence length {0} does not match values length {1}")]
    StderrLength(usize, usize),
}

/// Declared decay template `c n^{-p} (log n)^s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FitModel {
    PurePower,
    PowerTimesLog { s: u32 },
}

impl FitModel {
    pub fn log_power(&self) -> u32 {
        match *self {
            FitModel::PurePower => 0,
            FitModel::PowerTimesLog { s } => s,
        }
    }
}

/// Fitted `y_n ~ c n^{-p} (log n)^s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub p: f64,
    pub s: u32,
    pub c: f64,
    pub stderr_p: f64,
    pub stderr_c: f64,
    pub window: (usize, usize),
    pub weighted: bool,
    pub n_points: usize,
    pub excluded: usize,
    /// Root mean square of the log-scale residuals.
    pub residual_rms: f64,
}

impl DecayFit {
    /// Log-log slope `-p`.
    pub fn slope(&self) -> f64 {
        -self.p
    }
}

fn check_window(len: usize, window: (usize, usize)) -> Result<(), FitError> {
    let (lo, hi) = window;
    if lo < 2 || hi < lo || hi >= len {
        return Err(FitError::BadWindow { lo, hi, len });
    }
    if hi - lo + 1 < 8 {
        return Err(FitError::TooFewPoints(hi - lo + 1));
    }
    Ok(())
}

/// Least squares of `log y - s log log n = log c - p log n` over the window,
/// weighted by `(y/stderr)^2` when standard errors are given.
pub fn loglog_fit(
    y: &RealSeq,
    stderr: Option<&RealSeq>,
    window: (usize, usize),
    model: FitModel,
) -> Result<DecayFit, FitError> {
    check_window(y.len(), window)?;
    if let Some(e) = stderr {
        if e.len() != y.len() {
            return Err(FitError::StderrLength(e.len(), y.len()));
        }
    }
    let s = model.log_power();
    let total = window.1 - window.0 + 1;
    let mut pts = Vec::with_capacity(total);
    for n in window.0..=window.1 {
        let v = y.values()[n];
        if !(v > 0.0 && v.is_finite()) {
            continue;
        }
        let x = (n as f64).ln();
        let t = v.ln() - s as f64 * x.ln();
        let w = match stderr {
            Some(e) if e.values()[n] > 0.0 => (v / e.values()[n]).powi(2),
            _ => 1.0,
        };
        pts.push((x, t, w));
    }
    let excluded = total - pts.len();
    if excluded * 5 > total {
        return Err(FitError::TooManyExcluded { excluded, total });
    }
    if pts.len() < 8 {
        return Err(FitError::TooFewPoints(pts.len()));
    }
    let weighted = stderr.is_some();
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let mt = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxt: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - mt)).sum();
    let slope = sxt / sxx;
    let intercept = mt - slope * mx;
    let rss: f64 = pts.iter().map(|p| p.2 * (p.1 - intercept - slope * p.0).powi(2)).sum();
    let plain_rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let k = pts.len() as f64;
    // known variances when weighted; residual variance otherwise
    let scale = if weighted { 1.0 } else { rss / (k - 2.0) };
    let var_slope = scale / sxx;
    let var_intercept = scale * (1.0 / sw + mx * mx / sxx);
    let c = intercept.exp();
    Ok(DecayFit {
        p: -slope,
        s,
        c,
        stderr_p: var_slope.sqrt(),
        stderr_c: c * var_intercept.sqrt(),
        window,
        weighted,
        n_points: pts.len(),
        excluded,
        residual_rms: (plain_rss / k).sqrt(),
    })
}

/// Window mean of `y_n n^p / (log n)^s` and its relative spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub c: f64,
    /// `(max - min) / |mean|` over the window.
    pub variation: f64,
}

pub fn plateau_constant(y: &RealSeq, p: f64, log_power: u32, window: (usize, usize)) -> Result<Plateau, FitError> {
    check_window(y.len(), window)?;
    let comp: Vec<f64> = (window.0..=window.1)
        .map(|n| {
            let x = n as f64;
            y.values()[n] * x.powf(p) / x.ln().powi(log_power as i32)
        })
        .collect();
    let sign = comp[0].signum();
    if let Some(i) = comp.iter().position(|v| v.signum() != sign || *v == 0.0) {
        return Err(FitError::SignChange(window.0 + i));
    }
    let mean = comp.iter().sum::<f64>() / comp.len() as f64;
    let (lo, hi) = comp.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Ok(Plateau { c: mean, variation: (hi - lo) / mean.abs() })
}

/// One JSON-lines record of the `fit` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub experiment: String,
    pub p: f64,
    pub s: u32,
    pub c: f64,
    pub stderr_p: f64,
    pub stderr_c: f64,
    pub window: (usize, usize),
    pub variation: Option<f64>,
}

impl FitRecord {
    pub fn new(experiment: impl Into<String>, fit: &DecayFit, plateau: Option<Plateau>) -> Self {
        Self {
            experiment: experiment.into(),
            p: fit.p,
            s: fit.s,
            c: fit.c,
            stderr_p: fit.stderr_p,
            stderr_c: fit.stderr_c,
            window: fit.window,
            variation: plateau.map(|pl| pl.variation),
        }
    }
}
