//! Planar billiard tables built from segments and circular arcs, and their
//! collision maps.
//!
//! A phase point is a boundary position (piece, arclength) and an outgoing
//! angle `phi in [-pi/2, pi/2]` measured from the inward normal, positive
//! towards the direction of increasing arclength. Outer boundaries run
//! counterclockwise; scatterers are full circles with the domain outside.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynmaps::DynMap;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BilliardError {
    #[error("radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("straight side length must be nonnegative, got {0}")]
    NegativeLength(f64),
    #[error("rectangle sides must be positive, got {0} x {1}")]
    NonPositiveRectangle(f64, f64),
    #[error("scatterers {0} and {1} overlap or touch")]
    Overlap(usize, usize),
    #[error("scatterer {0} is not strictly inside the rectangle")]
    NotInterior(usize),
    #[error("trajectory from piece {from} hits a corner of piece {piece}")]
    CornerGrazing { from: usize, piece: usize },
    #[error("no boundary intersection leaving piece {piece} at {at:?} in direction {dir:?}")]
    NoIntersection { piece: usize, at: [f64; 2], dir: [f64; 2] },
    #[error("piece filter selects no boundary")]
    EmptyFilter,
    #[error("unknown piece {0}")]
    UnknownPiece(usize),
    #[error("stadium constant needs a positive straight side, got {0}")]
    NonPositiveSide(f64),
}

type Vec2 = [f64; 2];

#[inline]
fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}
#[inline]
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}
#[inline]
fn scale(a: Vec2, k: f64) -> Vec2 {
    [a[0] * k, a[1] * k]
}
#[inline]
fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}
#[inline]
fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}
#[inline]
fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

/// One smooth boundary component.
#[derive(Debug, Clone, PartialEq)]
pub enum Piece {
    /// From `a` to `b`; the domain lies to the left.
    Segment { a: Vec2, b: Vec2 },
    /// Counterclockwise from angle `theta0` through `sweep` radians.
    /// `focusing` arcs bound the domain from outside (normal towards the
    /// center); dispersing arcs bound a scatterer (normal away from it).
    Arc { center: Vec2, radius: f64, theta0: f64, sweep: f64, focusing: bool },
}

impl Piece {
    pub fn length(&self) -> f64 {
        match *self {
            Piece::Segment { a, b } => norm(sub(b, a)),
            Piece::Arc { radius, sweep, .. } => radius * sweep,
        }
    }

    pub fn is_arc(&self) -> bool {
        matches!(self, Piece::Arc { .. })
    }

    /// Position, unit tangent and inward unit normal at arclength `s`.
    pub fn frame(&self, s: f64) -> (Vec2, Vec2, Vec2) {
        match *self {
            Piece::Segment { a, b } => {
                let len = norm(sub(b, a));
                let t = scale(sub(b, a), 1.0 / len);
                (add(a, scale(t, s)), t, [-t[1], t[0]])
            }
            Piece::Arc { center, radius, theta0, focusing, .. } => {
                let th = theta0 + s / radius;
                let (sin, cos) = th.sin_cos();
                let radial = [cos, sin];
                let n = if focusing { scale(radial, -1.0) } else { radial };
                (add(center, scale(radial, radius)), [-sin, cos], n)
            }
        }
    }

    fn is_closed(&self) -> bool {
        matches!(*self, Piece::Arc { sweep, .. } if sweep >= TAU)
    }
}

/// A billiard table: pieces, with corner flags at piece ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pieces: Vec<Piece>,
    /// `(start, end)` is a corner (non-smooth junction) for each piece.
    corners: Vec<(bool, bool)>,
    /// Unit vectors from the center to the two ends of arcs with sweep at
    /// most `pi`, for half-plane membership tests.
    arc_ends: Vec<Option<(Vec2, Vec2)>>,
    cumulative: Vec<f64>,
    perimeter: f64,
    area: f64,
    diameter: f64,
}

/// Boundary position and outgoing angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub piece: usize,
    pub s: f64,
    pub phi: f64,
}

impl Table {
    /// `loops` are closed chains of pieces, each listed in traversal order.
    fn from_loops(loops: Vec<Vec<Piece>>, area: f64, diameter: f64) -> Self {
        let mut pieces = Vec::new();
        let mut corners = Vec::new();
        for lp in loops {
            let k = lp.len();
            for i in 0..k {
                let p = &lp[i];
                if p.is_closed() {
                    corners.push((false, false));
                    continue;
                }
                let prev = &lp[(i + k - 1) % k];
                let next = &lp[(i + 1) % k];
                let smooth = |x: &Piece, y: &Piece| {
                    let (_, t_end, _) = x.frame(x.length());
                    let (_, t_start, _) = y.frame(0.0);
                    dot(t_end, t_start) > 1.0 - 1e-12
                };
                corners.push((!smooth(prev, p), !smooth(p, next)));
            }
            pieces.extend(lp);
        }
        let mut cumulative = vec![0.0];
        for p in &pieces {
            cumulative.push(cumulative.last().unwrap() + p.length());
        }
        let perimeter = *cumulative.last().unwrap();
        let arc_ends = pieces
            .iter()
            .map(|p| match *p {
                Piece::Arc { theta0, sweep, .. } if sweep <= PI => {
                    let (s0, c0) = theta0.sin_cos();
                    let (s1, c1) = (theta0 + sweep).sin_cos();
                    Some(([c0, s0], [c1, s1]))
                }
                _ => None,
            })
            .collect();
        Self { pieces, corners, arc_ends, cumulative, perimeter, area, diameter }
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn perimeter(&self) -> f64 {
        self.perimeter
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Whether each end of `piece` is a corner.
    pub fn corners(&self, piece: usize) -> (bool, bool) {
        self.corners[piece]
    }

    pub fn position(&self, bp: &BoundaryPoint) -> Vec2 {
        self.pieces[bp.piece].frame(bp.s).0
    }

    /// Unit velocity leaving `bp`.
    pub fn direction(&self, bp: &BoundaryPoint) -> Vec2 {
        let (_, t, n) = self.pieces[bp.piece].frame(bp.s);
        let (sin, cos) = bp.phi.sin_cos();
        add(scale(n, cos), scale(t, sin))
    }

    /// The same boundary point with velocity reversed in time: its next
    /// collision is the previous collision of `bp`.
    pub fn reversed(&self, bp: &BoundaryPoint) -> BoundaryPoint {
        BoundaryPoint { phi: -bp.phi, ..*bp }
    }

    /// Arclength position of `bp` along the whole boundary.
    pub fn global_s(&self, bp: &BoundaryPoint) -> f64 {
        self.cumulative[bp.piece] + bp.s
    }
}

/// Stadium: two straight sides of length `ell` joined by semicircles of
/// radius `radius`. Pieces: bottom side, right arc, top side, left arc
/// (sides are omitted when `ell = 0`).
pub fn build_stadium(ell: f64, radius: f64) -> Result<Table, BilliardError> {
    if !(radius > 0.0) {
        return Err(BilliardError::NonPositiveRadius(radius));
    }
    if !(ell >= 0.0) {
        return Err(BilliardError::NegativeLength(ell));
    }
    let h = ell / 2.0;
    let mut lp = Vec::new();
    if ell > 0.0 {
        lp.push(Piece::Segment { a: [-h, -radius], b: [h, -radius] });
    }
    lp.push(Piece::Arc { center: [h, 0.0], radius, theta0: -PI / 2.0, sweep: PI, focusing: true });
    if ell > 0.0 {
        lp.push(Piece::Segment { a: [h, radius], b: [-h, radius] });
    }
    lp.push(Piece::Arc { center: [-h, 0.0], radius, theta0: PI / 2.0, sweep: PI, focusing: true });
    let area = 2.0 * radius * ell + PI * radius * radius;
    Ok(Table::from_loops(vec![lp], area, ell + 2.0 * radius))
}

/// Scatterer disk for [`build_semidispersing`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scatterer {
    pub center: Vec2,
    pub radius: f64,
}

/// Rectangle `[0, width] x [0, height]` with disjoint circular scatterers.
/// Pieces: bottom, right, top, left walls, then one closed arc per scatterer.
pub fn build_semidispersing(width: f64, height: f64, scatterers: &[Scatterer]) -> Result<Table, BilliardError> {
    if !(width > 0.0 && height > 0.0) {
        return Err(BilliardError::NonPositiveRectangle(width, height));
    }
    for (i, s) in scatterers.iter().enumerate() {
        if !(s.radius > 0.0) {
            return Err(BilliardError::NonPositiveRadius(s.radius));
        }
        let [x, y] = s.center;
        if !(x - s.radius > 0.0 && x + s.radius < width && y - s.radius > 0.0 && y + s.radius < height) {
            return Err(BilliardError::NotInterior(i));
        }
        for (j, t) in scatterers.iter().enumerate().take(i) {
            if norm(sub(s.center, t.center)) <= s.radius + t.radius {
                return Err(BilliardError::Overlap(j, i));
            }
        }
    }
    let (w, h) = (width, height);
    let mut loops = vec![vec![
        Piece::Segment { a: [0.0, 0.0], b: [w, 0.0] },
        Piece::Segment { a: [w, 0.0], b: [w, h] },
        Piece::Segment { a: [w, h], b: [0.0, h] },
        Piece::Segment { a: [0.0, h], b: [0.0, 0.0] },
    ]];
    for s in scatterers {
        loops.push(vec![Piece::Arc { center: s.center, radius: s.radius, theta0: 0.0, sweep: TAU, focusing: false }]);
    }
    let area = w * h - scatterers.iter().map(|s| PI * s.radius * s.radius).sum::<f64>();
    Ok(Table::from_loops(loops, area, w.hypot(h)))
}

/// Serialized table description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TableSpec {
    Stadium {
        ell: f64,
        #[serde(default = "unit_radius")]
        radius: f64,
    },
    Semidispersing {
        rect: [f64; 2],
        #[serde(default)]
        scatterers: Vec<Scatterer>,
    },
}

fn unit_radius() -> f64 {
    1.0
}

impl TableSpec {
    pub fn build(&self) -> Result<Table, BilliardError> {
        match self {
            TableSpec::Stadium { ell, radius } => build_stadium(*ell, *radius),
            TableSpec::Semidispersing { rect, scatterers } => build_semidispersing(rect[0], rect[1], scatterers),
        }
    }
}

/// Relative slack when deciding whether a hit lies on a piece.
const ON_PIECE: f64 = 1e-12;
/// Corner proximity, relative to the table diameter.
const CORNER_TOL: f64 = 1e-9;

/// A boundary hit: piece, position, unit tangent and inward normal there.
#[derive(Debug, Clone, Copy)]
struct Hit {
    piece: usize,
    q: Vec2,
    t: Vec2,
    n: Vec2,
    tau: f64,
}

/// Arclength of the boundary point `q` on piece `k`.
fn arclength(piece: &Piece, q: Vec2) -> f64 {
    match *piece {
        Piece::Segment { a, b } => {
            let e = sub(b, a);
            let len = norm(e);
            (dot(sub(q, a), e) / len).clamp(0.0, len)
        }
        Piece::Arc { center, radius, theta0, sweep, .. } => {
            let r = sub(q, center);
            let delta = (r[1].atan2(r[0]) - theta0).rem_euclid(TAU);
            let delta = if delta > sweep {
                if delta - sweep < TAU - delta {
                    sweep
                } else {
                    0.0
                }
            } else {
                delta
            };
            delta * radius
        }
    }
}

/// Straight flight from `p` (on piece `from`) in unit direction `d`.
fn fly(table: &Table, from: usize, p: Vec2, d: Vec2) -> Result<Hit, BilliardError> {
    let t_min = 1e-9 * table.diameter;
    let mut best: Option<(f64, usize)> = None;
    for (k, piece) in table.pieces.iter().enumerate() {
        let bound = best.map_or(f64::INFINITY, |b| b.0);
        match *piece {
            Piece::Segment { a, b } => {
                if k == from {
                    continue;
                }
                let e = sub(b, a);
                let den = cross(d, e);
                if den == 0.0 {
                    continue;
                }
                let ap = sub(a, p);
                let t = cross(ap, e) / den;
                let u = cross(ap, d) / den;
                if t > t_min && t < bound && (-ON_PIECE..=1.0 + ON_PIECE).contains(&u) {
                    best = Some((t, k));
                }
            }
            Piece::Arc { center, radius, theta0, sweep, focusing } => {
                let f = sub(p, center);
                let on_arc = |t: f64| -> bool {
                    if sweep >= TAU {
                        return true;
                    }
                    let q = add(f, scale(d, t));
                    match table.arc_ends[k] {
                        Some((u0, u1)) => {
                            let tol = -ON_PIECE * radius;
                            cross(u0, q) >= tol && cross(q, u1) >= tol
                        }
                        None => {
                            let delta = (q[1].atan2(q[0]) - theta0).rem_euclid(TAU);
                            delta <= sweep * (1.0 + ON_PIECE) || delta >= TAU * (1.0 - ON_PIECE)
                        }
                    }
                };
                if k == from {
                    // the departure point is one root; the chord is the other
                    if focusing {
                        let t = -2.0 * dot(f, d);
                        if t > 0.0 && t < bound && on_arc(t) {
                            best = Some((t, k));
                        }
                    }
                    continue;
                }
                let half_b = dot(f, d);
                let c = dot(f, f) - radius * radius;
                let disc = half_b * half_b - c;
                if disc < 0.0 {
                    continue;
                }
                let q = -half_b - half_b.signum() * disc.sqrt();
                let roots = if q == 0.0 { [0.0, 0.0] } else { [q, c / q] };
                let (lo, hi) = if roots[0] <= roots[1] { (roots[0], roots[1]) } else { (roots[1], roots[0]) };
                for t in [lo, hi] {
                    if t > t_min && t < bound && on_arc(t) {
                        best = Some((t, k));
                        break;
                    }
                }
            }
        }
    }
    let (tau, k) = best.ok_or(BilliardError::NoIntersection { piece: from, at: p, dir: d })?;
    let q = add(p, scale(d, tau));
    let piece = &table.pieces[k];
    let (start_corner, end_corner) = table.corners[k];
    if start_corner || end_corner {
        let s = arclength(piece, q);
        let tol = CORNER_TOL * table.diameter;
        if (start_corner && s < tol) || (end_corner && piece.length() - s < tol) {
            return Err(BilliardError::CornerGrazing { from, piece: k });
        }
    }
    let (t, n) = match *piece {
        Piece::Segment { a, b } => {
            let e = sub(b, a);
            let t = scale(e, 1.0 / norm(e));
            (t, [-t[1], t[0]])
        }
        Piece::Arc { center, focusing, .. } => {
            let r = sub(q, center);
            let radial = scale(r, 1.0 / norm(r));
            let n = if focusing { scale(radial, -1.0) } else { radial };
            ([-radial[1], radial[0]], n)
        }
    };
    Ok(Hit { piece: k, q, t, n, tau })
}

/// Specular reflection of `d` at normal `n`, renormalized.
#[inline]
fn reflect(d: Vec2, n: Vec2) -> Vec2 {
    let out = sub(d, scale(n, 2.0 * dot(d, n)));
    scale(out, 1.0 / norm(out))
}

/// Free flight from `bp` to the next boundary collision, with specular
/// reflection. Returns the new phase point and the flight length.
pub fn next_collision(table: &Table, bp: BoundaryPoint) -> Result<(BoundaryPoint, f64), BilliardError> {
    let p = table.position(&bp);
    let d = table.direction(&bp);
    let hit = fly(table, bp.piece, p, d)?;
    let out = reflect(d, hit.n);
    let s = arclength(&table.pieces[hit.piece], hit.q);
    let phi = dot(out, hit.t).atan2(dot(out, hit.n)).clamp(-PI / 2.0, PI / 2.0);
    Ok((BoundaryPoint { piece: hit.piece, s, phi }, hit.tau))
}

/// Liouville sampler `cos(phi) ds dphi`, optionally restricted to a set of
/// pieces. Deterministic in `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct LiouvilleSampler {
    /// `(piece, cumulative length)` over the selected pieces.
    bins: Vec<(usize, f64)>,
    total: f64,
    pieces: Vec<f64>,
}

impl LiouvilleSampler {
    pub fn new(table: &Table, filter: Option<&[usize]>) -> Result<Self, BilliardError> {
        let selected: Vec<usize> = match filter {
            Some(f) => {
                if let Some(&bad) = f.iter().find(|&&k| k >= table.pieces.len()) {
                    return Err(BilliardError::UnknownPiece(bad));
                }
                f.to_vec()
            }
            None => (0..table.pieces.len()).collect(),
        };
        let mut total = 0.0;
        let mut bins = Vec::new();
        for k in selected {
            let len = table.pieces[k].length();
            if len > 0.0 {
                total += len;
                bins.push((k, total));
            }
        }
        if bins.is_empty() {
            return Err(BilliardError::EmptyFilter);
        }
        let pieces = table.pieces.iter().map(Piece::length).collect();
        Ok(Self { bins, total, pieces })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> BoundaryPoint {
        let u = rng.gen::<f64>() * self.total;
        let i = self.bins.partition_point(|&(_, c)| c <= u).min(self.bins.len() - 1);
        let (piece, end) = self.bins[i];
        let len = self.pieces[piece];
        let s = (len - (end - u)).clamp(0.0, len);
        let phi = (2.0 * rng::open01(rng) - 1.0).asin();
        BoundaryPoint { piece, s, phi }
    }
}

/// `n` Liouville samples from stream `(seed, 0)`.
pub fn liouville_sample(
    table: &Table,
    filter: Option<&[usize]>,
    seed: u64,
    n: usize,
) -> Result<Vec<BoundaryPoint>, BilliardError> {
    let sampler = LiouvilleSampler::new(table, filter)?;
    let mut r = rng::stream(seed, 0);
    Ok((0..n).map(|_| sampler.sample(&mut r)).collect())
}

/// `c = (4 + 3 log 3)/(4 - 3 log 3) * ell^2 / (4 (pi + ell))` for unit
/// semicircles.
pub fn stadium_constant(ell: f64) -> Result<f64, BilliardError> {
    if !(ell > 0.0) {
        return Err(BilliardError::NonPositiveSide(ell));
    }
    let l3 = 3.0 * 3f64.ln();
    Ok((4.0 + l3) / (4.0 - l3) * ell * ell / (4.0 * (PI + ell)))
}

/// `pi * area / perimeter`.
pub fn mean_free_path(table: &Table) -> f64 {
    PI * table.area / table.perimeter
}

/// Writes a trajectory as CSV `piece_id,s,phi,tau` (tau is the flight that
/// leaves the row's point; empty on the last row).
pub fn write_trajectory<W: Write>(
    table: &Table,
    start: BoundaryPoint,
    n: usize,
    out: W,
) -> Result<(), Box<dyn std::error::Error>> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["piece_id", "s", "phi", "tau"])?;
    let mut bp = start;
    for _ in 0..n {
        let (next, tau) = next_collision(table, bp)?;
        w.write_record([bp.piece.to_string(), format!("{:.17e}", bp.s), format!("{:.17e}", bp.phi), format!("{tau:.17e}")])?;
        bp = next;
    }
    w.write_record([bp.piece.to_string(), format!("{:.17e}", bp.s), format!("{:.17e}", bp.phi), String::new()])?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------

/// State of the collision map: the current collision in Cartesian form,
/// and where the previous collision happened.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collision {
    pub piece: usize,
    pub pos: Vec2,
    /// Outgoing unit velocity.
    pub dir: Vec2,
    pub from_piece: usize,
    pub from_pos: Vec2,
}

/// The billiard map on a table as a [`DynMap`].
///
/// A step that ends in a corner leaves the point unchanged, so orbit drivers
/// treat it as stuck and resample from Liouville measure.
#[derive(Debug, Clone)]
pub struct CollisionMap {
    table: Table,
    sampler: LiouvilleSampler,
}

impl CollisionMap {
    pub fn new(table: Table) -> Self {
        let sampler = LiouvilleSampler::new(&table, None).expect("tables have positive perimeter");
        Self { table, sampler }
    }

    pub fn table(&self) -> &Table {
        &self.table
    }

    /// Collision state of a phase point, found by flying backwards to the
    /// previous collision; `None` if that flight hits a corner.
    pub fn with_history(&self, at: BoundaryPoint) -> Option<Collision> {
        let pos = self.table.position(&at);
        let dir = self.table.direction(&at);
        let back_dir = self.table.direction(&self.table.reversed(&at));
        let back = fly(&self.table, at.piece, pos, back_dir).ok()?;
        Some(Collision { piece: at.piece, pos, dir, from_piece: back.piece, from_pos: back.q })
    }

    /// Boundary coordinates of a collision.
    pub fn boundary_point(&self, c: &Collision) -> BoundaryPoint {
        let piece = &self.table.pieces[c.piece];
        let s = arclength(piece, c.pos);
        let (_, t, n) = piece.frame(s);
        let phi = dot(c.dir, t).atan2(dot(c.dir, n)).clamp(-PI / 2.0, PI / 2.0);
        BoundaryPoint { piece: c.piece, s, phi }
    }

    /// Stadium return set: arc collisions whose previous collision was on a
    /// different piece.
    pub fn stadium_x(&self, c: &Collision) -> bool {
        self.table.pieces[c.piece].is_arc() && c.from_piece != c.piece
    }

    /// Semidispersing return set: all scatterer collisions.
    pub fn scatterer_x(&self, c: &Collision) -> bool {
        matches!(self.table.pieces[c.piece], Piece::Arc { focusing: false, .. })
    }

    /// Lipschitz version of the stadium return-set indicator: zero off `X`,
    /// one when both the current collision and the previous one are at
    /// distance at least `width` from the ends of the current arc.
    pub fn stadium_x_mollified(&self, c: &Collision, width: f64) -> f64 {
        if !self.stadium_x(c) {
            return 0.0;
        }
        let Piece::Arc { center, radius, theta0, sweep, .. } = self.table.pieces[c.piece] else {
            return 0.0;
        };
        let (s0, c0) = theta0.sin_cos();
        let (s1, c1) = (theta0 + sweep).sin_cos();
        let ends = [add(center, scale([c0, s0], radius)), add(center, scale([c1, s1], radius))];
        let dist = |q: Vec2| norm(sub(q, ends[0])).min(norm(sub(q, ends[1])));
        let ramp = |x: f64| (x / width).min(1.0);
        ramp(dist(c.pos)) * ramp(dist(c.from_pos))
    }
}

impl DynMap for CollisionMap {
    type Point = Collision;

    fn step(&self, c: Collision) -> Collision {
        match fly(&self.table, c.piece, c.pos, c.dir) {
            Ok(hit) => Collision {
                piece: hit.piece,
                pos: hit.q,
                dir: reflect(c.dir, hit.n),
                from_piece: c.piece,
                from_pos: c.pos,
            },
            Err(BilliardError::CornerGrazing { .. }) => c,
            Err(e) => panic!("billiard geometry: {e}"),
        }
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> Collision {
        loop {
            if let Some(c) = self.with_history(self.sampler.sample(rng)) {
                return c;
            }
        }
    }

    fn beta(&self) -> Option<f64> {
        Some(2.0)
    }
}
