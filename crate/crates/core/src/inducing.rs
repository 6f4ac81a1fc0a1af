//! First returns to a set `X`, return-time tails, induced return times and
//! normalized Birkhoff sums of the return time.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::billiards::{BilliardError, Collision, CollisionMap, LiouvilleSampler, Piece};
use crate::dynmaps::DynMap;
use crate::rng;
use crate::seqkit::{RealSeq, SeqError};

#[derive(Debug, Error, PartialEq)]
pub enum InducingError {
    #[error("starting point is not in the return set")]
    NotInX,
    #[error("censoring cap must be at least 1")]
    ZeroCap,
    #[error("all {0} samples were censored")]
    AllCensored(usize),
    #[error("tail requested up to n = {n_max} beyond the censoring cap {cap}")]
    BeyondCap { n_max: usize, cap: usize },
    #[error("return-time sequence has {len} entries, sigma = {sigma}")]
    SequenceTooShort { len: usize, sigma: usize },
    #[error("Birkhoff sums need n >= 2, got {0}")]
    TooFewReturns(usize),
    #[error("no usable samples (all {0} dropped)")]
    AllDropped(usize),
    #[error("orbit made fewer visits to X than requested within {0} steps; raise the cap")]
    EmptyX(usize),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Billiard(#[from] BilliardError),
}

/// Outcome of a first-return search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FirstReturn<P> {
    Returned { h: usize, point: P },
    /// No return within the cap.
    Censored,
    /// The map left the point unchanged after `at` steps (machine fixed point
    /// or a billiard corner); the sample should be redrawn.
    Stuck { at: usize },
}

/// How `mu_X` samples are drawn.
pub enum XSampling<'a, P> {
    /// Jittered Lebesgue start, `burn_in` steps, the first visit to `X`, then
    /// `returns` further first returns. The first visit alone is biased
    /// towards ends of long excursions; the return map preserves `mu_X` and
    /// forgets that bias.
    Thinned { burn_in: usize, returns: usize },
    /// An exact sampler of `mu_X`.
    Direct(Box<dyn Fn(&mut ChaCha8Rng) -> P + Send + Sync + 'a>),
}

/// A map with a return set `X`.
pub struct InducedSystem<'a, M: DynMap, F> {
    pub map: &'a M,
    pub in_x: F,
    pub cap: usize,
    pub sampling: XSampling<'a, M::Point>,
}

impl<'a, M, F> InducedSystem<'a, M, F>
where
    M: DynMap,
    F: Fn(&M::Point) -> bool + Sync,
{
    pub fn new(map: &'a M, in_x: F, cap: usize, sampling: XSampling<'a, M::Point>) -> Result<Self, InducingError> {
        if cap == 0 {
            return Err(InducingError::ZeroCap);
        }
        Ok(Self { map, in_x, cap, sampling })
    }

    pub fn contains(&self, p: &M::Point) -> bool {
        (self.in_x)(p)
    }

    /// First return by the pure map.
    pub fn first_return(&self, x: M::Point) -> Result<FirstReturn<M::Point>, InducingError> {
        self.search(x, |p| self.map.step(p))
    }

    /// First return along the orbit of a real point (see [`DynMap::step_lazy`]).
    pub fn first_return_lazy(&self, x: M::Point, rng: &mut ChaCha8Rng) -> Result<FirstReturn<M::Point>, InducingError> {
        self.search(x, |p| self.map.step_lazy(p, rng))
    }

    fn search(
        &self,
        x: M::Point,
        mut step: impl FnMut(M::Point) -> M::Point,
    ) -> Result<FirstReturn<M::Point>, InducingError> {
        if !self.contains(&x) {
            return Err(InducingError::NotInX);
        }
        let mut p = x;
        for h in 1..=self.cap {
            let next = step(p);
            if next == p {
                return Ok(FirstReturn::Stuck { at: h });
            }
            if self.contains(&next) {
                return Ok(FirstReturn::Returned { h, point: next });
            }
            p = next;
        }
        Ok(FirstReturn::Censored)
    }

    /// One `mu_X` sample.
    pub fn sample_x(&self, rng: &mut ChaCha8Rng) -> Result<M::Point, InducingError> {
        match &self.sampling {
            XSampling::Direct(f) => Ok(f(rng)),
            XSampling::Thinned { burn_in, returns } => {
                let mut p = self.map.random_point(rng);
                for _ in 0..*burn_in {
                    p = self.map.step_lazy(p, rng);
                }
                let mut visits = 0;
                for _ in 0..self.cap.saturating_mul(returns + 1) {
                    if self.contains(&p) {
                        if visits == *returns {
                            return Ok(p);
                        }
                        visits += 1;
                    }
                    let next = self.map.step_lazy(p, rng);
                    p = if next == p { self.map.random_point(rng) } else { next };
                }
                Err(InducingError::EmptyX(self.cap.saturating_mul(returns + 1)))
            }
        }
    }
}

/// Rejection sampler: draw from `proposal` until `accept` holds.
pub fn rejection_sampler<'a, P: 'a>(
    proposal: impl Fn(&mut ChaCha8Rng) -> Option<P> + Send + Sync + 'a,
    accept: impl Fn(&P) -> bool + Send + Sync + 'a,
) -> XSampling<'a, P> {
    XSampling::Direct(Box::new(move |rng| loop {
        if let Some(p) = proposal(rng) {
            if accept(&p) {
                return p;
            }
        }
    }))
}

/// Empirical return-time tail.
#[derive(Debug, Clone, PartialEq)]
pub struct TailEstimate {
    /// `mu_X(h > n)` for `n = 0..=n_max`.
    pub survival: RealSeq,
    /// Number of samples with `h > n`.
    pub counts: Vec<u64>,
    /// Wilson 95% interval half-widths.
    pub ci_halfwidth: Vec<f64>,
    pub n_samples: usize,
    pub censored_fraction: f64,
    /// Samples redrawn after a stuck orbit.
    pub redrawn: usize,
    /// Mean return time over uncensored samples.
    pub mean_h: f64,
}

impl TailEstimate {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "survival", "ci_halfwidth", "count"])?;
        for (n, ((s, c), k)) in self.survival.iter().zip(&self.ci_halfwidth).zip(&self.counts).enumerate() {
            w.write_record([n.to_string(), format!("{s:.17e}"), format!("{c:.17e}"), k.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Wilson score interval half-width for `k` successes in `n` trials.
pub fn wilson_halfwidth(k: u64, n: u64, z: f64) -> f64 {
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = z * z;
    z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt()
}

/// Samples per parallel chunk; fixed so results do not depend on workers.
const CHUNK: usize = 4096;

/// Stadium return set: arc collisions coming from another piece, sampled
/// exactly by Liouville measure on the arcs and rejection.
pub fn stadium_system(
    map: &CollisionMap,
    cap: usize,
) -> Result<InducedSystem<'_, CollisionMap, impl Fn(&Collision) -> bool + Sync + '_>, InducingError> {
    arc_system(map, cap, true, move |c| map.stadium_x(c))
}

/// Semidispersing return set: scatterer collisions, sampled exactly.
pub fn scatterer_system(
    map: &CollisionMap,
    cap: usize,
) -> Result<InducedSystem<'_, CollisionMap, impl Fn(&Collision) -> bool + Sync + '_>, InducingError> {
    arc_system(map, cap, false, move |c| map.scatterer_x(c))
}

fn arc_system<'a, F>(
    map: &'a CollisionMap,
    cap: usize,
    focusing: bool,
    in_x: F,
) -> Result<InducedSystem<'a, CollisionMap, F>, InducingError>
where
    F: Fn(&Collision) -> bool + Sync + Send + Clone + 'a,
{
    let arcs: Vec<usize> = (0..map.table().pieces().len())
        .filter(|&k| matches!(map.table().pieces()[k], Piece::Arc { focusing: f, .. } if f == focusing))
        .collect();
    let sampler = LiouvilleSampler::new(map.table(), Some(&arcs))?;
    let accept = in_x.clone();
    let sampling = rejection_sampler(move |r| map.with_history(sampler.sample(r)), move |c| accept(c));
    InducedSystem::new(map, in_x, cap, sampling)
}

struct TailChunk {
    hist: Vec<u64>,
    censored: u64,
    redrawn: usize,
    sum_h: f64,
    returned: u64,
}

/// `mu_X(h > n)` from `n_samples` independent `mu_X` samples.
pub fn return_tail<M, F>(
    sys: &InducedSystem<'_, M, F>,
    n_samples: usize,
    n_max: usize,
    seed: u64,
) -> Result<TailEstimate, InducingError>
where
    M: DynMap,
    F: Fn(&M::Point) -> bool + Sync,
{
    if n_max > sys.cap {
        return Err(InducingError::BeyondCap { n_max, cap: sys.cap });
    }
    let chunks: Vec<Result<TailChunk, InducingError>> = (0..n_samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            // hist[k] = samples with h = k+1 for k < n_max, hist[n_max] = h > n_max
            let mut out = TailChunk { hist: vec![0; n_max + 1], censored: 0, redrawn: 0, sum_h: 0.0, returned: 0 };
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
                let mut r = rng::stream(seed, i as u64);
                let outcome = loop {
                    let x = sys.sample_x(&mut r)?;
                    match sys.first_return_lazy(x, &mut r)? {
                        FirstReturn::Stuck { .. } => out.redrawn += 1,
                        other => break other,
                    }
                };
                match outcome {
                    FirstReturn::Returned { h, .. } => {
                        out.hist[(h - 1).min(n_max)] += 1;
                        out.sum_h += h as f64;
                        out.returned += 1;
                    }
                    _ => {
                        out.hist[n_max] += 1;
                        out.censored += 1;
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut hist = vec![0u64; n_max + 1];
    let (mut censored, mut redrawn, mut sum_h, mut returned) = (0u64, 0usize, 0.0, 0u64);
    for ch in chunks {
        let ch = ch?;
        hist.iter_mut().zip(&ch.hist).for_each(|(a, b)| *a += b);
        censored += ch.censored;
        redrawn += ch.redrawn;
        sum_h += ch.sum_h;
        returned += ch.returned;
    }
    if returned == 0 {
        return Err(InducingError::AllCensored(n_samples));
    }
    let total = n_samples as u64;
    // counts[n] = #{h > n}: everything minus h in 1..=n
    let mut counts = Vec::with_capacity(n_max + 1);
    let mut gt = total;
    counts.push(gt);
    for k in hist.iter().take(n_max) {
        gt -= k;
        counts.push(gt);
    }
    let survival = RealSeq::new(counts.iter().map(|&k| k as f64 / total as f64).collect())?;
    let ci_halfwidth = counts.iter().map(|&k| wilson_halfwidth(k, total, 1.959_963_984_540_054)).collect();
    Ok(TailEstimate {
        survival,
        counts,
        ci_halfwidth,
        n_samples,
        censored_fraction: censored as f64 / total as f64,
        redrawn,
        mean_h: sum_h / returned as f64,
    })
}

/// `phi = sum_{l < sigma} h_l` along the return-map orbit.
pub fn induced_phi(h_sequence: &[usize], sigma: usize) -> Result<usize, InducingError> {
    if h_sequence.len() < sigma {
        return Err(InducingError::SequenceTooShort { len: h_sequence.len(), sigma });
    }
    Ok(h_sequence[..sigma].iter().sum())
}

/// Normalization `b_n` of Birkhoff sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scaling {
    SqrtN,
    NLogNSqrt,
    NPowOneOverBeta { beta: f64 },
}

impl Scaling {
    pub fn b(&self, n: usize) -> f64 {
        let x = n as f64;
        match *self {
            Scaling::SqrtN => x.sqrt(),
            Scaling::NLogNSqrt => (x * x.ln()).sqrt(),
            Scaling::NPowOneOverBeta { beta } => x.powf(1.0 / beta),
        }
    }
}

/// Mean, variance and standardized third and fourth moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for &x in xs {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
        Self { mean, variance: m2, skewness: m3 / m2.powf(1.5), excess_kurtosis: m4 / (m2 * m2) - 3.0 }
    }
}

/// Normalized Birkhoff sums `(S_n h - n hbar)/b_n` over the return map.
#[derive(Debug, Clone, PartialEq)]
pub struct BirkhoffSample {
    pub values: Vec<f64>,
    pub moments: Moments,
    /// Empirical mean return time.
    pub h_bar: f64,
    /// Samples dropped because a return inside the sum was censored.
    pub dropped: usize,
    pub redrawn: usize,
}

pub fn normalized_birkhoff<M, F>(
    sys: &InducedSystem<'_, M, F>,
    n: usize,
    n_samples: usize,
    scaling: Scaling,
    seed: u64,
) -> Result<BirkhoffSample, InducingError>
where
    M: DynMap,
    F: Fn(&M::Point) -> bool + Sync,
{
    if n < 2 {
        return Err(InducingError::TooFewReturns(n));
    }
    // per sample: Some(S_n) or None if censored; redraw count
    let sums: Vec<Result<(Option<u64>, usize), InducingError>> = (0..n_samples)
        .into_par_iter()
        .with_min_len(16)
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let mut redrawn = 0;
            'restart: loop {
                let mut x = sys.sample_x(&mut r)?;
                let mut s = 0u64;
                for _ in 0..n {
                    match sys.first_return_lazy(x, &mut r)? {
                        FirstReturn::Returned { h, point } => {
                            s += h as u64;
                            x = point;
                        }
                        FirstReturn::Censored => return Ok((None, redrawn)),
                        FirstReturn::Stuck { .. } => {
                            redrawn += 1;
                            continue 'restart;
                        }
                    }
                }
                return Ok((Some(s), redrawn));
            }
        })
        .collect();
    let mut kept = Vec::with_capacity(n_samples);
    let mut redrawn = 0;
    for s in sums {
        let (s, r) = s?;
        redrawn += r;
        if let Some(s) = s {
            kept.push(s);
        }
    }
    let dropped = n_samples - kept.len();
    if kept.is_empty() {
        return Err(InducingError::AllDropped(n_samples));
    }
    let h_bar = kept.iter().map(|&s| s as f64).sum::<f64>() / (kept.len() as f64 * n as f64);
    let b = scaling.b(n);
    let values: Vec<f64> = kept.iter().map(|&s| (s as f64 - n as f64 * h_bar) / b).collect();
    let moments = Moments::of(&values);
    Ok(BirkhoffSample { values, moments, h_bar, dropped, redrawn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::billiards::{build_stadium, CollisionMap};
    use crate::dynmaps::{Doubling, Lsv};
    use crate::renewal::branch_intervals;

    fn doubling_system(map: &Doubling) -> InducedSystem<'_, Doubling, impl Fn(&f64) -> bool + Sync> {
        InducedSystem::new(map, |x: &f64| *x >= 0.5, 10_000, XSampling::Thinned { burn_in: 0, returns: 0 }).unwrap()
    }

    #[test]
    fn trivial_first_returns() {
        let d = Doubling;
        let sys = doubling_system(&d);
        assert_eq!(sys.first_return(0.75).unwrap(), FirstReturn::Returned { h: 1, point: 0.5 });
        assert_eq!(sys.first_return(0.25), Err(InducingError::NotInX));
        let lsv = Lsv::new(0.5).unwrap();
        let sys = InducedSystem::new(&lsv, |y: &f64| *y >= 0.5, 1000, XSampling::Thinned { burn_in: 10, returns: 4 }).unwrap();
        assert_eq!(sys.first_return(0.875).unwrap(), FirstReturn::Returned { h: 1, point: 0.75 });
        assert!(InducedSystem::new(&lsv, |_: &f64| true, 0, XSampling::Thinned { burn_in: 0, returns: 0 }).is_err());
    }

    #[test]
    fn lsv_return_time_is_branch_index() {
        for gamma in [0.5, 0.999] {
            let lsv = Lsv::new(gamma).unwrap();
            let dec = branch_intervals(gamma, 200).unwrap();
            let sys = InducedSystem::new(&lsv, |y: &f64| *y >= 0.5, 1_000_000, XSampling::Thinned { burn_in: 0, returns: 0 }).unwrap();
            for n in [1, 2, 3, 10, 57, 200] {
                let (lo, hi) = dec.branch(n);
                let y = 0.5 * (lo + hi);
                match sys.first_return(y).unwrap() {
                    FirstReturn::Returned { h, .. } => assert_eq!(h, n, "gamma={gamma}"),
                    other => panic!("{other:?}"),
                }
            }
        }
    }

    #[test]
    fn doubling_tail_is_geometric() {
        let d = Doubling;
        let sys = doubling_system(&d);
        let t = return_tail(&sys, 100_000, 12, 1);
        let t = t.unwrap();
        for n in 0..=12 {
            let exact = 0.5f64.powi(n as i32);
            let s = t.survival.values()[n];
            assert!((s - exact).abs() <= 3.0 * t.ci_halfwidth[n] + 1e-12, "n={n}: {s} vs {exact}");
        }
        assert_eq!(t.censored_fraction, 0.0);
        assert!(t.survival.values().windows(2).all(|w| w[1] <= w[0]));
        // Kac: mu(X) = 1/2
        assert!((t.mean_h - 2.0).abs() < 0.02);
    }

    #[test]
    fn tail_is_reproducible() {
        let d = Doubling;
        let sys = doubling_system(&d);
        let a = return_tail(&sys, 10_000, 8, 9).unwrap();
        let b = return_tail(&sys, 10_000, 8, 9).unwrap();
        assert_eq!(a, b);
        assert!(return_tail(&sys, 10, 20_000, 9).is_err());
    }

    #[test]
    fn phi_sums() {
        assert_eq!(induced_phi(&[5], 1).unwrap(), 5);
        assert_eq!(induced_phi(&[3, 4], 2).unwrap(), 7);
        assert!(induced_phi(&[3], 2).is_err());
    }

    #[test]
    fn stadium_visit_count_identity() {
        let map = CollisionMap::new(build_stadium(2.0, 1.0).unwrap());
        let sys = stadium_system(&map, 1_000_000).unwrap();
        let mut r = rng::stream(4, 0);
        for _ in 0..200 {
            let y = sys.sample_x(&mut r).unwrap();
            let mut hs = Vec::new();
            let mut x = y;
            for _ in 0..3 {
                match sys.first_return(x).unwrap() {
                    FirstReturn::Returned { h, point } => {
                        hs.push(h);
                        x = point;
                    }
                    other => panic!("{other:?}"),
                }
            }
            let phi = induced_phi(&hs, 3).unwrap();
            assert!(phi >= 3);
            let mut p = y;
            let mut visits = 0;
            for _ in 0..phi {
                if sys.contains(&p) {
                    visits += 1;
                }
                p = map.step(p);
            }
            assert_eq!(visits, 3);
        }
    }

    #[test]
    fn doubling_clt() {
        let d = Doubling;
        let sys = doubling_system(&d);
        let b = normalized_birkhoff(&sys, 10_000, 4000, Scaling::SqrtN, 2).unwrap();
        assert!(b.moments.excess_kurtosis.abs() < 0.2, "{:?}", b.moments);
        assert!((b.h_bar - 2.0).abs() < 0.01);
        assert_eq!(b.dropped, 0);
        assert!(normalized_birkhoff(&sys, 1, 10, Scaling::SqrtN, 2).is_err());
    }

    #[test]
    fn moments_of_known_set() {
        let m = Moments::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert_eq!(m.variance, 1.25);
        assert!(m.skewness.abs() < 1e-15);
        assert!((m.excess_kurtosis - (-1.36)).abs() < 1e-12);
    }
}
