//! Nonuniformly expanding maps with a neutral fixed point, plus a uniformly
//! expanding fixture.
//!
//! * [`Lsv`]: the intermittent interval map `x(1 + 2^g x^g)` on `[0, 1/2)`,
//!   `2x - 1` on `[1/2, 1]`. Tail exponent `beta = 1/g`.
//! * [`RadialHv`]: a two-branch radial map of the closed unit disk with the
//!   neutral local form `x(1 + |x|^g)` on the inner disk and an affine radial
//!   branch with angle doubling outside.
//! * [`TorusHv`]: the same neutral local form on a small disk of the flat
//!   torus, and the linear doubling map `x -> 2x mod 1` elsewhere. The
//!   preimages of the neutral point are interior points of the expanding
//!   branch, which gives the two-dimensional tail `beta = 2/g`.
//! * [`Doubling`]: `2x mod 1`.
//!
//! Orbits that are meant to follow a Lebesgue-typical real point use
//! [`DynMap::step_lazy`]: whenever an affine expanding branch shifts binary
//! digits out of the floating-point mantissa, the vacated low digits are
//! refilled from the random stream. This is exactly the orbit of a real point
//! whose unread digits are drawn lazily, and it keeps doubling-type branches
//! from collapsing onto dyadic rationals after ~50 steps.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("LSV exponent must lie in (0, 1), got {0}")]
    LsvGamma(f64),
    #[error("Hu-Vaienti exponent must lie in (0, 2), got {0}")]
    HvGamma(f64),
    #[error("point {0} outside the phase space")]
    OutOfDomain(String),
    #[error("torus neutral disk radius {0} must lie in (0, 1/2) with image radius below 1/2")]
    TorusRadius(f64),
}

/// A map together with the two ways of iterating it.
pub trait DynMap: Send + Sync {
    type Point: Copy + PartialEq + fmt::Debug + Send + Sync;

    /// The map itself; pure and deterministic. Inputs are assumed in range.
    fn step(&self, p: Self::Point) -> Self::Point;

    /// One step of the orbit of a real point, refilling digits lost to
    /// floating-point shifts from `rng`. Defaults to [`DynMap::step`].
    fn step_lazy(&self, p: Self::Point, _rng: &mut ChaCha8Rng) -> Self::Point {
        self.step(p)
    }

    /// A Lebesgue-uniform point, used as a jittered start.
    fn random_point(&self, rng: &mut ChaCha8Rng) -> Self::Point;

    /// Exponent of the first-return tail for the natural return set.
    fn beta(&self) -> Option<f64>;
}

/// Unit in the last place of a positive finite `x`.
fn ulp(x: f64) -> f64 {
    let bits = x.abs().to_bits();
    f64::from_bits(bits + 1) - f64::from_bits(bits)
}

/// `v + u * width` clamped below `upper`, with `u` uniform in `[0, 1)`.
fn refill(v: f64, width: f64, upper: f64, rng: &mut ChaCha8Rng) -> f64 {
    let w = v + rng.gen::<f64>() * width;
    if w < upper {
        w
    } else {
        v
    }
}

// ---------------------------------------------------------------------------

/// Liverani-Saussol-Vaienti map with exponent `gamma` in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lsv {
    gamma: f64,
    coef: f64,
}

impl Lsv {
    pub fn new(gamma: f64) -> Result<Self, MapError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(MapError::LsvGamma(gamma));
        }
        Ok(Self { gamma, coef: 2f64.powf(gamma) })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Left branch `x + 2^g x^{1+g}`.
    #[inline]
    pub fn left(&self, x: f64) -> f64 {
        x + self.coef * x * x.powf(self.gamma)
    }

    /// Inverse of the left branch on `[0, 1]`, to absolute tolerance 1e-14
    /// or better. Newton from the right on a convex increasing function
    /// decreases monotonically onto the root; a bisection guard keeps the
    /// bracket in case rounding stalls it.
    pub fn left_inverse(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0f64, y);
        let mut x = y;
        for _ in 0..200 {
            let fx = self.left(x) - y;
            if fx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let d = 1.0 + self.coef * (1.0 + self.gamma) * x.powf(self.gamma);
            let mut next = x - fx / d;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 2e-16 * x {
                return next;
            }
            x = next;
        }
        x
    }
}

impl DynMap for Lsv {
    type Point = f64;

    #[inline]
    fn step(&self, x: f64) -> f64 {
        if x < 0.5 {
            self.left(x)
        } else {
            2.0 * x - 1.0
        }
    }

    #[inline]
    fn step_lazy(&self, x: f64, rng: &mut ChaCha8Rng) -> f64 {
        if x < 0.5 {
            self.left(x)
        } else {
            refill(2.0 * x - 1.0, 2.0 * ulp(x), 1.0, rng)
        }
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng::open01(rng)
    }

    fn beta(&self) -> Option<f64> {
        Some(1.0 / self.gamma)
    }
}

/// Checked LSV step on `[0, 1]`.
pub fn lsv_step(spec: &Lsv, x: f64) -> Result<f64, MapError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(MapError::OutOfDomain(x.to_string()));
    }
    Ok(spec.step(x))
}

// ---------------------------------------------------------------------------

/// Point of the closed unit disk in polar form; the angle is in turns, `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Polar {
    pub r: f64,
    pub turn: f64,
}

impl Polar {
    pub fn from_cartesian(x: f64, y: f64) -> Self {
        let turn = y.atan2(x) / std::f64::consts::TAU;
        Self { r: x.hypot(y), turn: if turn < 0.0 { turn + 1.0 } else { turn } }
    }

    pub fn to_cartesian(self) -> (f64, f64) {
        let a = self.turn * std::f64::consts::TAU;
        (self.r * a.cos(), self.r * a.sin())
    }
}

/// Radial two-branch map of the unit disk: `r -> r + r^{1+g}` (angle kept) for
/// `r <= r*`, and `r -> (r - r*)/(1 - r*)` with angle doubling for `r > r*`,
/// where `r*(1 + r*^g) = 1`.
///
/// The outer branch sends the whole circle `r = r*` to the origin, so the set
/// of points entering a small disk of radius `e` is a thin annulus of area
/// `~e`, not a disk of area `~e^2`. Its return tail is therefore `n^{-1/g}`;
/// [`TorusHv`] is the representative with the two-dimensional tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialHv {
    gamma: f64,
    r_star: f64,
}

impl RadialHv {
    pub fn new(gamma: f64) -> Result<Self, MapError> {
        if !(gamma > 0.0 && gamma < 2.0) {
            return Err(MapError::HvGamma(gamma));
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * (1.0 + mid.powf(gamma)) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-16 {
                break;
            }
        }
        Ok(Self { gamma, r_star: 0.5 * (lo + hi) })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_star(&self) -> f64 {
        self.r_star
    }

    #[inline]
    fn radial(&self, r: f64) -> f64 {
        if r <= self.r_star {
            (r + r * r.powf(self.gamma)).min(1.0)
        } else {
            ((r - self.r_star) / (1.0 - self.r_star)).min(1.0)
        }
    }
}

impl DynMap for RadialHv {
    type Point = Polar;

    #[inline]
    fn step(&self, p: Polar) -> Polar {
        let r = self.radial(p.r);
        if p.r <= self.r_star {
            Polar { r, turn: p.turn }
        } else {
            let t = 2.0 * p.turn;
            Polar { r, turn: if t >= 1.0 { t - 1.0 } else { t } }
        }
    }

    #[inline]
    fn step_lazy(&self, p: Polar, rng: &mut ChaCha8Rng) -> Polar {
        if p.r <= self.r_star {
            return self.step(p);
        }
        let r = self.radial(p.r);
        let t = 2.0 * p.turn;
        let turn = if t >= 1.0 { refill(t - 1.0, 2.0 * ulp(p.turn), 1.0, rng) } else { t };
        Polar { r, turn }
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> Polar {
        Polar { r: rng::open01(rng).sqrt(), turn: rng.gen() }
    }

    fn beta(&self) -> Option<f64> {
        Some(1.0 / self.gamma)
    }
}

/// Checked radial step on the closed unit disk.
pub fn radial_hv_step(spec: &RadialHv, p: Polar) -> Result<Polar, MapError> {
    if !(p.r >= 0.0 && p.r <= 1.0) || !(0.0..1.0).contains(&p.turn) {
        return Err(MapError::OutOfDomain(format!("{p:?}")));
    }
    Ok(spec.step(p))
}

// ---------------------------------------------------------------------------

/// Map of the flat torus `[-1/2, 1/2)^2`: `x -> x(1 + |x|^g)` on the disk
/// `|x| < inner_radius`, `x -> 2x mod 1` elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusHv {
    gamma: f64,
    inner_radius: f64,
}

impl TorusHv {
    pub const DEFAULT_INNER_RADIUS: f64 = 0.34;
    /// Radius of the hole `{|x| < hole}` whose complement is the return set.
    pub const DEFAULT_HOLE: f64 = 0.25;

    pub fn new(gamma: f64, inner_radius: f64) -> Result<Self, MapError> {
        if !(gamma > 0.0 && gamma < 2.0) {
            return Err(MapError::HvGamma(gamma));
        }
        let image = inner_radius * (1.0 + inner_radius.powf(gamma));
        if !(inner_radius > 0.0 && image < 0.5) {
            return Err(MapError::TorusRadius(inner_radius));
        }
        Ok(Self { gamma, inner_radius })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn inner_radius(&self) -> f64 {
        self.inner_radius
    }

    /// Largest radius `r` with `r(1 + r^g) <= inner_radius`: a hole of this
    /// radius around the neutral point is mapped into the neutral disk.
    pub fn max_hole_radius(&self) -> f64 {
        let (mut lo, mut hi) = (0.0f64, self.inner_radius);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * (1.0 + mid.powf(self.gamma)) <= self.inner_radius {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[inline]
    fn wrap_double(x: f64) -> (f64, bool) {
        let y = 2.0 * x;
        if y >= 0.5 {
            (y - 1.0, true)
        } else if y < -0.5 {
            (y + 1.0, true)
        } else {
            (y, false)
        }
    }
}

impl DynMap for TorusHv {
    type Point = [f64; 2];

    #[inline]
    fn step(&self, p: [f64; 2]) -> [f64; 2] {
        let r = p[0].hypot(p[1]);
        if r < self.inner_radius {
            let k = r.powf(self.gamma);
            [p[0] + p[0] * k, p[1] + p[1] * k]
        } else {
            [Self::wrap_double(p[0]).0, Self::wrap_double(p[1]).0]
        }
    }

    #[inline]
    fn step_lazy(&self, p: [f64; 2], rng: &mut ChaCha8Rng) -> [f64; 2] {
        let r = p[0].hypot(p[1]);
        if r < self.inner_radius {
            return self.step(p);
        }
        let mut out = [0.0; 2];
        for i in 0..2 {
            let (y, wrapped) = Self::wrap_double(p[i]);
            out[i] = if wrapped { refill(y, 2.0 * ulp(p[i]), 0.5, rng) } else { y };
        }
        out
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5]
    }

    fn beta(&self) -> Option<f64> {
        Some(2.0 / self.gamma)
    }
}

// ---------------------------------------------------------------------------

/// The doubling map `x -> 2x mod 1`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Doubling;

impl DynMap for Doubling {
    type Point = f64;

    #[inline]
    fn step(&self, x: f64) -> f64 {
        let y = 2.0 * x;
        if y >= 1.0 {
            y - 1.0
        } else {
            y
        }
    }

    #[inline]
    fn step_lazy(&self, x: f64, rng: &mut ChaCha8Rng) -> f64 {
        let y = 2.0 * x;
        if y >= 1.0 {
            refill(y - 1.0, 2.0 * ulp(x), 1.0, rng)
        } else {
            y
        }
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.gen()
    }

    fn beta(&self) -> Option<f64> {
        None
    }
}

pub fn doubling_step(x: f64) -> f64 {
    Doubling.step(x)
}

// ---------------------------------------------------------------------------

/// Orbit of a map under its absolutely continuous invariant measure.
///
/// Deterministic given `(map, start, seed, stream)`. When the orbit lands on
/// a point fixed at machine precision it restarts from a fresh jittered point
/// and counts the restart.
pub struct AcimOrbit<'a, M: DynMap> {
    map: &'a M,
    rng: ChaCha8Rng,
    x: M::Point,
    remaining: usize,
    restarts: usize,
}

impl<'a, M: DynMap> AcimOrbit<'a, M> {
    pub fn new(map: &'a M, start: Option<M::Point>, burn_in: usize, n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = rng::stream(seed, stream);
        let x = start.unwrap_or_else(|| map.random_point(&mut rng));
        let mut orbit = Self { map, rng, x, remaining: n, restarts: 0 };
        for _ in 0..burn_in {
            orbit.advance();
        }
        orbit
    }

    #[inline]
    fn advance(&mut self) {
        let next = self.map.step_lazy(self.x, &mut self.rng);
        if next == self.x {
            self.restarts += 1;
            self.x = self.map.random_point(&mut self.rng);
        } else {
            self.x = next;
        }
    }

    pub fn current(&self) -> M::Point {
        self.x
    }

    pub fn restarts(&self) -> usize {
        self.restarts
    }
}

impl<M: DynMap> Iterator for AcimOrbit<'_, M> {
    type Item = M::Point;

    #[inline]
    fn next(&mut self) -> Option<M::Point> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let out = self.x;
        self.advance();
        Some(out)
    }
}

pub fn acim_orbit<M: DynMap>(map: &M, start: Option<M::Point>, burn_in: usize, n: usize, seed: u64) -> AcimOrbit<'_, M> {
    AcimOrbit::new(map, start, burn_in, n, seed, 0)
}

// ---------------------------------------------------------------------------

/// A bounded real function of phase points.
pub struct Observable<P> {
    name: String,
    eval: Arc<dyn Fn(&P) -> f64 + Send + Sync>,
    /// Bound on `|v|` over the phase space.
    pub bound: f64,
    /// Membership test of the support, when the observable is supported in a
    /// return set.
    pub support: Option<Arc<dyn Fn(&P) -> bool + Send + Sync>>,
    /// Known or estimated mean, with its standard error.
    pub mean_hint: Option<(f64, f64)>,
}

impl<P> Clone for Observable<P> {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            eval: Arc::clone(&self.eval),
            bound: self.bound,
            support: self.support.clone(),
            mean_hint: self.mean_hint,
        }
    }
}

impl<P> fmt::Debug for Observable<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observable").field("name", &self.name).field("bound", &self.bound).finish()
    }
}

impl<P: 'static> Observable<P> {
    pub fn new(name: impl Into<String>, bound: f64, f: impl Fn(&P) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), eval: Arc::new(f), bound, support: None, mean_hint: None }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("const({c})"), c.abs(), move |_| c)
    }

    pub fn with_support(mut self, inside: impl Fn(&P) -> bool + Send + Sync + 'static) -> Self {
        self.support = Some(Arc::new(inside));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn eval(&self, p: &P) -> f64 {
        (self.eval)(p)
    }

    /// `a*self + other`, pointwise.
    pub fn affine(&self, a: f64, other: &Self) -> Self {
        let (f, g) = (Arc::clone(&self.eval), Arc::clone(&other.eval));
        Self::new(
            format!("{a}*{}+{}", self.name, other.name),
            a.abs() * self.bound + other.bound,
            move |p| a * f(p) + g(p),
        )
    }

    /// `self - c`.
    pub fn shifted(&self, c: f64) -> Self {
        let f = Arc::clone(&self.eval);
        let mut out = Self::new(format!("{}-{c}", self.name), self.bound + c.abs(), move |p| f(p) - c);
        out.support = None;
        out
    }
}

/// Lipschitz ramp: 0 below `a - width/2`, 1 above `a + width/2`.
#[inline]
pub fn ramp(x: f64, a: f64, width: f64) -> f64 {
    if width <= 0.0 {
        return if x >= a { 1.0 } else { 0.0 };
    }
    ((x - a) / width + 0.5).clamp(0.0, 1.0)
}

/// Configuration-file form of a map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    Lsv { gamma: f64 },
    RadialHv { gamma: f64 },
    TorusHv {
        gamma: f64,
        #[serde(default = "default_inner_radius")]
        inner_radius: f64,
    },
    Doubling,
}

fn default_inner_radius() -> f64 {
    TorusHv::DEFAULT_INNER_RADIUS
}
