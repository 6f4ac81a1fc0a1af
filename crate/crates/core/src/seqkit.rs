//! Finite real sequences indexed from zero, their convolution algebra, and the
//! rate templates used to state decay asymptotics.
//!
//! Templates that are undefined at `n = 0` (such as `n^-2 log n`) store `1`
//! there, so that convolutions with them stay well defined.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SeqError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("sequence must have at least {0} entries")]
    TooShort(usize),
    #[error("exponent beta must exceed 1, got {0}")]
    BetaTooSmall(f64),
    #[error("exponent must be positive, got {0}")]
    NonPositiveExponent(f64),
    #[error("negative entry {value} at index {index}")]
    Negative { index: usize, value: f64 },
    #[error("tail sequence increases at index {0}")]
    NotMonotone(usize),
    #[error("tail sequence starts above 1: {0}")]
    TailAboveOne(f64),
    #[error("mean must be positive, got {0}")]
    NonPositiveMean(f64),
}

/// A finite sequence `a_0, ..., a_N` of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSeq(Vec<f64>);

impl RealSeq {
    pub fn new(values: Vec<f64>) -> Result<Self, SeqError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SeqError::NonFinite(i));
        }
        Ok(Self(values))
    }

    /// Builds `a_n = f(n)` for `n = 0..=n_max`.
    pub fn from_fn(n_max: usize, f: impl FnMut(usize) -> f64) -> Result<Self, SeqError> {
        Self::new((0..=n_max).map(f).collect())
    }

    /// The unit `e = (1, 0, 0, ...)` of convolution.
    pub fn delta(n_max: usize) -> Self {
        let mut v = vec![0.0; n_max + 1];
        v[0] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest index `N`.
    pub fn n_max(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    pub fn get(&self, n: usize) -> Option<f64> {
        self.0.get(n).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().copied()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.iter().map(|v| v * k).collect())
    }

    fn check_nonnegative(&self) -> Result<(), SeqError> {
        match self.0.iter().position(|&v| v < 0.0) {
            Some(index) => Err(SeqError::Negative { index, value: self.0[index] }),
            None => Ok(()),
        }
    }

    /// Writes the `n,value` CSV form, preceded by a `#` comment line.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: &str) -> std::io::Result<()> {
        writeln!(out, "# {comment}")?;
        writeln!(out, "n,value")?;
        for (n, v) in self.0.iter().enumerate() {
            writeln!(out, "{n},{v:e}")?;
        }
        Ok(())
    }

    /// Parses the CSV form written by [`RealSeq::write_csv`]; comment lines are skipped.
    pub fn read_csv(text: &str) -> Result<Self, String> {
        let mut values = Vec::new();
        for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
            let mut parts = line.split(',');
            let n: usize = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| format!("bad index in line `{line}`"))?;
            let v: f64 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| format!("bad value in line `{line}`"))?;
            if n != values.len() {
                return Err(format!("indices must be consecutive from 0, found {n}"));
            }
            values.push(v);
        }
        Self::new(values).map_err(|e| e.to_string())
    }
}

/// `(a*b)_n = sum_{j=0}^{n} a_j b_{n-j}`.
pub fn convolve(a: &RealSeq, b: &RealSeq) -> Result<RealSeq, SeqError> {
    if a.len() != b.len() {
        return Err(SeqError::LengthMismatch(a.len(), b.len()));
    }
    let (a, b) = (a.values(), b.values());
    let out = (0..a.len())
        .map(|n| (0..=n).map(|j| a[j] * b[n - j]).sum())
        .collect();
    RealSeq::new(out)
}

/// Correction rate: `n^-beta` for beta > 2, `n^-2 ln n` at beta = 2,
/// `n^{-2(beta-1)}` for 1 < beta < 2.
pub fn zeta_seq(beta: f64, n_max: usize) -> Result<RealSeq, SeqError> {
    if !(beta > 1.0) {
        return Err(SeqError::BetaTooSmall(beta));
    }
    if n_max < 1 {
        return Err(SeqError::TooShort(2));
    }
    RealSeq::from_fn(n_max, |n| {
        if n == 0 {
            return 1.0;
        }
        let x = n as f64;
        if beta > 2.0 {
            x.powf(-beta)
        } else if beta == 2.0 {
            x.powi(-2) * x.ln()
        } else {
            x.powf(-2.0 * (beta - 1.0))
        }
    })
}

/// Template `n^-p (ln n)^s`, with entry 0 set to 1.
pub fn rate_seq(p: f64, log_power: u32, n_max: usize) -> Result<RealSeq, SeqError> {
    if !(p > 0.0) {
        return Err(SeqError::NonPositiveExponent(p));
    }
    RealSeq::from_fn(n_max, |n| {
        if n == 0 {
            return 1.0;
        }
        let x = n as f64;
        x.powf(-p) * x.ln().powi(log_power as i32)
    })
}

/// Truncated tail sums `sum_{j=n+1}^{N} a_j`, with the truncation index kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TailSum {
    pub sums: RealSeq,
    pub truncated_at: usize,
    /// Bound on `sum_{j>N} a_j` when a majorant is known.
    pub remainder_bound: Option<f64>,
}

impl TailSum {
    /// Attaches the remainder bound implied by `a_j <= c j^-p` beyond the
    /// truncation index (`p > 1`).
    pub fn with_power_majorant(mut self, c: f64, p: f64) -> Self {
        let n = self.truncated_at.max(1) as f64;
        self.remainder_bound = Some(c * n.powf(1.0 - p) / (p - 1.0));
        self
    }
}

pub fn tail_sum_seq(a: &RealSeq) -> Result<TailSum, SeqError> {
    a.check_nonnegative()?;
    let v = a.values();
    let mut out = vec![0.0; v.len()];
    let mut acc = 0.0;
    for n in (0..v.len()).rev() {
        out[n] = acc;
        acc += v[n];
    }
    Ok(TailSum { sums: RealSeq::new(out)?, truncated_at: a.n_max(), remainder_bound: None })
}

/// `b(n) = 1 + mean^-1 sum_{j>n} tail_j`, the leading coefficient of the
/// renewal sequence, from a survival sequence `tail_j = P(Phi > j)`.
pub fn b_seq(tail: &RealSeq, mean: f64) -> Result<RealSeq, SeqError> {
    b_seq_with_remainder(tail, mean, 0.0)
}

/// As [`b_seq`], with `remainder = sum_{j>N} tail_j` supplied separately.
pub fn b_seq_with_remainder(tail: &RealSeq, mean: f64, remainder: f64) -> Result<RealSeq, SeqError> {
    if !(mean > 0.0) {
        return Err(SeqError::NonPositiveMean(mean));
    }
    let v = tail.values();
    if let Some(&t0) = v.first() {
        if t0 > 1.0 {
            return Err(SeqError::TailAboveOne(t0));
        }
    }
    if let Some(i) = v.windows(2).position(|w| w[1] > w[0]) {
        return Err(SeqError::NotMonotone(i + 1));
    }
    let sums = tail_sum_seq(tail)?.sums;
    RealSeq::new(sums.iter().map(|s| 1.0 + (s + remainder) / mean).collect())
}

/// `gamma_n = (n^-beta' * sigma)_n`.
pub fn gamma_seq(beta_prime: f64, sigma_tail: &RealSeq) -> Result<RealSeq, SeqError> {
    if !(beta_prime > 1.0) {
        return Err(SeqError::BetaTooSmall(beta_prime));
    }
    sigma_tail.check_nonnegative()?;
    convolve(&rate_seq(beta_prime, 0, sigma_tail.n_max())?, sigma_tail)
}

/// `max_{n in [n_lo, N]} num_n / den_n`: the bounded-ratio form of `num = O(den)`.
pub fn sup_ratio(num: &RealSeq, den: &RealSeq, n_lo: usize) -> Result<f64, SeqError> {
    if num.len() != den.len() {
        return Err(SeqError::LengthMismatch(num.len(), den.len()));
    }
    Ok(num.values()[n_lo..]
        .iter()
        .zip(&den.values()[n_lo..])
        .map(|(a, b)| a / b)
        .fold(f64::NEG_INFINITY, f64::max))
}
