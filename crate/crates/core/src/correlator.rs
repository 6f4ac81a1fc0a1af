//! Monte Carlo estimates of `rho_{v,w}(n) = int v w∘f^n dmu - int v dmu int w dmu`.
//!
//! Two schemes. `Ensemble` draws independent mu-distributed starts, one RNG
//! stream per sample. `LongOrbit` follows a few long orbits and averages lag
//! products along each, with batch-means standard errors. Both are
//! bit-for-bit reproducible from the seed, whatever the thread count.

use std::f64::consts::TAU;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::billiards::{Collision, CollisionMap};
use crate::dynmaps::{ramp, AcimOrbit, DynMap, Observable};
use crate::seqkit::{RealSeq, SeqError};

#[derive(Debug, Error, PartialEq)]
pub enum CorrelatorError {
    #[error("observable {observable} is not finite at {point}")]
    NonFinite { observable: String, point: String },
    #[error("need at least {needed} samples for {batches} batches, got {got}")]
    TooFewSamples { needed: u64, batches: usize, got: u64 },
    #[error("scheme parameters must be positive")]
    BadParameters,
    #[error(transparent)]
    Seq(#[from] SeqError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    LongOrbit,
    Ensemble,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::LongOrbit => "long_orbit",
            Scheme::Ensemble => "ensemble",
        })
    }
}

/// Sampling plan for [`estimate_rho`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub n_max: usize,
    /// Source points: orbit points for `LongOrbit`, starts for `Ensemble`.
    pub n_samples: u64,
    pub scheme: Scheme,
    pub seed: u64,
    /// Steps discarded from each start; zero when starts are already
    /// mu-distributed (billiards).
    #[serde(default)]
    pub burn_in: usize,
    /// Independent orbits of the long-orbit scheme.
    #[serde(default = "default_orbits")]
    pub orbits: usize,
    /// Batches per orbit (long orbit) or in total (ensemble).
    #[serde(default = "default_batches")]
    pub batches: usize,
}

fn default_orbits() -> usize {
    8
}

fn default_batches() -> usize {
    32
}

impl Plan {
    pub fn new(n_max: usize, n_samples: u64, scheme: Scheme, seed: u64) -> Self {
        Self { n_max, n_samples, scheme, seed, burn_in: 0, orbits: default_orbits(), batches: default_batches() }
    }

    pub fn burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn orbits(mut self, orbits: usize) -> Self {
        self.orbits = orbits;
        self
    }

    pub fn batches(mut self, batches: usize) -> Self {
        self.batches = batches;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationEstimate {
    pub rho: RealSeq,
    pub stderr: RealSeq,
    pub n_max: usize,
    pub scheme: Scheme,
    pub sample_count: u64,
    pub seed: u64,
    /// Estimated `int v dmu` and `int w dmu`.
    pub mean_v: f64,
    pub mean_w: f64,
    /// Orbit restarts at numerically fixed points or billiard corners.
    pub restarts: usize,
}

impl CorrelationEstimate {
    /// CSV `n,rho,stderr`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record(["n", "rho", "stderr"])?;
        for (n, (r, e)) in self.rho.iter().zip(self.stderr.iter()).enumerate() {
            wr.write_record([n.to_string(), format!("{r:e}"), format!("{e:e}")])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Sums collected over one batch.
#[derive(Debug, Clone)]
struct Batch {
    count: u64,
    sum_v: f64,
    /// `sum_i w(x_{i+n})` for the ensemble, `sum_i w(x_i)` (one entry) for orbits.
    sum_w: Vec<f64>,
    sum_vw: Vec<f64>,
}

impl Batch {
    fn new(n_max: usize, lagged_w: bool) -> Self {
        Self { count: 0, sum_v: 0.0, sum_w: vec![0.0; if lagged_w { n_max + 1 } else { 1 }], sum_vw: vec![0.0; n_max + 1] }
    }

    fn mean_w(&self, n: usize) -> f64 {
        self.sum_w[n.min(self.sum_w.len() - 1)] / self.count as f64
    }

    fn rho(&self, n: usize) -> f64 {
        let c = self.count as f64;
        self.sum_vw[n] / c - (self.sum_v / c) * self.mean_w(n)
    }
}

fn checked<P: fmt::Debug + 'static>(obs: &Observable<P>, p: &P) -> Result<f64, CorrelatorError> {
    let x = obs.eval(p);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(CorrelatorError::NonFinite { observable: obs.name().to_string(), point: format!("{p:?}") })
    }
}

/// Estimate of `rho_{v,w}(n)` for `n = 0..=plan.n_max`.
pub fn estimate_rho<M>(
    map: &M,
    v: &Observable<M::Point>,
    w: &Observable<M::Point>,
    plan: &Plan,
) -> Result<CorrelationEstimate, CorrelatorError>
where
    M: DynMap,
    M::Point: 'static,
{
    if plan.batches == 0 || plan.orbits == 0 {
        return Err(CorrelatorError::BadParameters);
    }
    let (batches, restarts) = match plan.scheme {
        Scheme::Ensemble => ensemble(map, v, w, plan)?,
        Scheme::LongOrbit => long_orbit(map, v, w, plan)?,
    };
    let n_max = plan.n_max;
    let lagged = plan.scheme == Scheme::Ensemble;
    let mut total = Batch::new(n_max, lagged);
    for b in &batches {
        total.count += b.count;
        total.sum_v += b.sum_v;
        for (t, x) in total.sum_w.iter_mut().zip(&b.sum_w) {
            *t += x;
        }
        for (t, x) in total.sum_vw.iter_mut().zip(&b.sum_vw) {
            *t += x;
        }
    }
    let k = batches.len() as f64;
    let rho: Vec<f64> = (0..=n_max).map(|n| total.rho(n)).collect();
    let stderr: Vec<f64> = (0..=n_max)
        .map(|n| {
            let mean = batches.iter().map(|b| b.rho(n)).sum::<f64>() / k;
            let var = batches.iter().map(|b| (b.rho(n) - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        })
        .collect();
    Ok(CorrelationEstimate {
        rho: RealSeq::new(rho)?,
        stderr: RealSeq::new(stderr)?,
        n_max,
        scheme: plan.scheme,
        sample_count: total.count,
        seed: plan.seed,
        mean_v: total.sum_v / total.count as f64,
        mean_w: total.mean_w(0),
        restarts,
    })
}

fn ensemble<M>(
    map: &M,
    v: &Observable<M::Point>,
    w: &Observable<M::Point>,
    plan: &Plan,
) -> Result<(Vec<Batch>, usize), CorrelatorError>
where
    M: DynMap,
    M::Point: 'static,
{
    let groups = plan.batches;
    if plan.n_samples < 2 * groups as u64 {
        return Err(CorrelatorError::TooFewSamples { needed: 2 * groups as u64, batches: groups, got: plan.n_samples });
    }
    let n_max = plan.n_max;
    let results: Result<Vec<(Batch, usize)>, CorrelatorError> = (0..groups)
        .into_par_iter()
        .map(|g| {
            let lo = plan.n_samples * g as u64 / groups as u64;
            let hi = plan.n_samples * (g as u64 + 1) / groups as u64;
            let mut b = Batch::new(n_max, true);
            let mut restarts = 0;
            for i in lo..hi {
                let mut orbit = AcimOrbit::new(map, None, plan.burn_in, n_max + 1, plan.seed, i);
                let x0 = orbit.current();
                let v0 = checked(v, &x0)?;
                b.sum_v += v0;
                for (n, p) in orbit.by_ref().enumerate() {
                    let wn = checked(w, &p)?;
                    b.sum_w[n] += wn;
                    b.sum_vw[n] += v0 * wn;
                }
                b.count += 1;
                restarts += orbit.restarts();
            }
            Ok((b, restarts))
        })
        .collect();
    let results = results?;
    let restarts = results.iter().map(|r| r.1).sum();
    Ok((results.into_iter().map(|r| r.0).collect(), restarts))
}

fn long_orbit<M>(
    map: &M,
    v: &Observable<M::Point>,
    w: &Observable<M::Point>,
    plan: &Plan,
) -> Result<(Vec<Batch>, usize), CorrelatorError>
where
    M: DynMap,
    M::Point: 'static,
{
    let (k, per) = (plan.orbits as u64, plan.batches as u64);
    let needed = 2 * k * per;
    if plan.n_samples < needed {
        return Err(CorrelatorError::TooFewSamples { needed, batches: (k * per) as usize, got: plan.n_samples });
    }
    let n_max = plan.n_max;
    let results: Result<Vec<(Vec<Batch>, usize)>, CorrelatorError> = (0..k)
        .into_par_iter()
        .map(|o| {
            let len = plan.n_samples * (o + 1) / k - plan.n_samples * o / k;
            let mut orbit = AcimOrbit::new(map, None, plan.burn_in, len as usize + n_max, plan.seed, o);
            // values at the current window of orbit points
            let mut vs: Vec<f64> = Vec::new();
            let mut ws: Vec<f64> = Vec::new();
            let mut fill = |vs: &mut Vec<f64>, ws: &mut Vec<f64>, upto: usize| -> Result<(), CorrelatorError> {
                while ws.len() < upto {
                    let p = orbit.next().expect("orbit length covers the lookahead");
                    vs.push(checked(v, &p)?);
                    ws.push(checked(w, &p)?);
                }
                Ok(())
            };
            let mut out = Vec::with_capacity(per as usize);
            for bi in 0..per {
                let blen = (len * (bi + 1) / per - len * bi / per) as usize;
                fill(&mut vs, &mut ws, blen + n_max)?;
                let mut b = Batch::new(n_max, false);
                b.count = blen as u64;
                for i in 0..blen {
                    let a = vs[i];
                    b.sum_v += a;
                    b.sum_w[0] += ws[i];
                    if a != 0.0 {
                        for (acc, x) in b.sum_vw.iter_mut().zip(&ws[i..=i + n_max]) {
                            *acc += a * x;
                        }
                    }
                }
                vs.drain(..blen);
                ws.drain(..blen);
                out.push(b);
            }
            drop(fill);
            Ok((out, orbit.restarts()))
        })
        .collect();
    let results = results?;
    let restarts = results.iter().map(|r| r.1).sum();
    Ok((results.into_iter().flat_map(|r| r.0).collect(), restarts))
}

/// `v` minus its Monte Carlo mean over `n_samples` mu-samples; the mean and
/// its standard error are kept in `mean_hint` of the result, as is the sample
/// count in the name.
pub fn center<M>(
    map: &M,
    v: &Observable<M::Point>,
    n_samples: u64,
    burn_in: usize,
    seed: u64,
) -> Result<Observable<M::Point>, CorrelatorError>
where
    M: DynMap,
    M::Point: 'static,
{
    let one = Observable::constant(1.0);
    let plan = Plan::new(0, n_samples, Scheme::Ensemble, seed).burn_in(burn_in);
    let est = estimate_rho(map, v, &one, &plan)?;
    // rho(0) against the constant is zero; the spread of v is needed instead
    let sq = Observable::new("sq", v.bound * v.bound, {
        let v = v.clone();
        move |p| v.eval(p).powi(2)
    });
    let second = estimate_rho(map, &sq, &one, &plan)?.mean_v;
    let mean = est.mean_v;
    let se = ((second - mean * mean).max(0.0) / est.sample_count as f64).sqrt();
    let mut out = v.shifted(mean);
    out.mean_hint = Some((0.0, se));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Built-in observables.

/// Mollified indicator of the LSV base `[1/2, 1]`: zero below `1/2`, one from
/// `1/2 + width`.
pub fn lsv_base_mollified(width: f64) -> Observable<f64> {
    Observable::new(format!("indicator_X_mollified({width})"), 1.0, move |&x| ramp(x, 0.5 + width / 2.0, width))
        .with_support(|&x| x >= 0.5)
}

/// Mollified indicator of `{|x| >= hole}` on the torus.
pub fn torus_outside_mollified(hole: f64, width: f64) -> Observable<[f64; 2]> {
    Observable::new(format!("indicator_X_mollified({width})"), 1.0, move |p: &[f64; 2]| {
        ramp(p[0].hypot(p[1]), hole + width / 2.0, width)
    })
    .with_support(move |p: &[f64; 2]| p[0].hypot(p[1]) >= hole)
}

/// Lipschitz version of the stadium return set; see
/// [`CollisionMap::stadium_x_mollified`].
pub fn stadium_x_mollified(map: &CollisionMap, width: f64) -> Observable<Collision> {
    let m = map.clone();
    let s = map.clone();
    Observable::new(format!("indicator_X_mollified({width})"), 1.0, move |c| m.stadium_x_mollified(c, width))
        .with_support(move |c| s.stadium_x(c))
}

/// Indicator of scatterer collisions. It is locally constant on the
/// collision space, so no mollification is needed.
pub fn scatterer_indicator(map: &CollisionMap) -> Observable<Collision> {
    let m = map.clone();
    let s = map.clone();
    Observable::new("indicator_X", 1.0, move |c| f64::from(u8::from(m.scatterer_x(c))))
        .with_support(move |c| s.scatterer_x(c))
}

pub fn coord() -> Observable<f64> {
    Observable::new("coord", 1.0, |&x| x)
}

pub fn cos_coord() -> Observable<f64> {
    Observable::new("cos_coord", 1.0, |&x: &f64| (TAU * x).cos())
}
