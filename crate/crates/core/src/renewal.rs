//! Operator renewal sequences for the first return of the LSV map to
//! `Y = [1/2, 1]`, discretized by Ulam's method.
//!
//! Internally `Y` is parametrized by `z = 2y - 1 in [0, 1]`, on which
//! normalized Lebesgue measure is plain Lebesgue measure. The return time is
//! `phi(y) = n` exactly when `z` lies in `[a_n, a_{n-1})`, where `a_0 = 1`,
//! `a_1 = 1/2` and `a_n` is the preimage of `a_{n-1}` under the left branch.
//!
//! The grid has `m` cells of width `1/m` in `z`. A cell is cut by the branch
//! endpoints into *atoms* (cell, branch); every atom is an interval on which
//! the return time is constant, and its image under `F` is an interval of
//! `Y`. Branches `n > N` (all inside the first cells) are kept as one lumped
//! "far" atom per cell, with exact return-time distribution and the image
//! profile of branch `N + 1`. This makes the discrete model a genuine
//! Markov renewal system with no lost mass, so tails, the mean return time
//! and the invariant density are exact for the discrete model.
//!
//! Operators act on cell densities (Lebesgue normalization). The residual of
//! `T(n) - b(n) P` is measured after conjugating by the invariant density,
//! i.e. as an operator on bounded functions, in the max-row-sum norm.

use rayon::prelude::*;
use thiserror::Error;

use crate::dynmaps::{Lsv, MapError};
use crate::seqkit::{self, RealSeq, SeqError};

#[derive(Debug, Error)]
pub enum RenewalError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error("grid size {0} below the minimum of 64")]
    GridTooSmall(usize),
    #[error("need at least one branch")]
    NoBranches,
    #[error("requested n = {requested} exceeds the {available} branches of the model")]
    BeyondBranches { requested: usize, available: usize },
    #[error("power iteration did not converge in {0} steps")]
    NoConvergence(usize),
    #[error("tower function has {0} cells, model has {1}")]
    GridMismatch(usize, usize),
    #[error("tower function has {levels} levels; at most {max} are representable")]
    TooManyLevels { levels: usize, max: usize },
    #[error("branch endpoints stopped decreasing at index {0}")]
    RootFinder(usize),
}

/// Number of endpoints tabulated for tail sums before switching to the
/// power-law asymptotics.
const TAIL_TABLE: usize = 1 << 17;

/// Branches `{phi = n}` of the LSV first return to `Y`.
#[derive(Debug, Clone)]
pub struct BranchDecomposition {
    lsv: Lsv,
    n_branches: usize,
    /// `a_p` for `p = 0..=TAIL_TABLE.max(N + 1)`, strictly decreasing.
    endpoints: Vec<f64>,
    /// `C` in `a_p ~ C p^{-1/gamma}`, matched at the end of the table.
    tail_constant: f64,
}

impl BranchDecomposition {
    pub fn gamma(&self) -> f64 {
        self.lsv.gamma()
    }

    pub fn lsv(&self) -> &Lsv {
        &self.lsv
    }

    pub fn n_branches(&self) -> usize {
        self.n_branches
    }

    /// `a_p`: Lebesgue measure of `{phi > p}` in the `z` parametrization.
    pub fn z_tail(&self, p: usize) -> f64 {
        match self.endpoints.get(p) {
            Some(&a) => a,
            None => self.tail_constant * (p as f64).powf(-1.0 / self.gamma()),
        }
    }

    /// `sum_{p > P} a_p` for `P` at or beyond the end of the table.
    fn z_tail_remainder(&self, from: usize) -> f64 {
        let s = 1.0 / self.gamma();
        let x = from as f64;
        // Euler-Maclaurin for sum_{p > x} p^{-s}
        let sum = x.powf(1.0 - s) / (s - 1.0) - 0.5 * x.powf(-s) + s / 12.0 * x.powf(-s - 1.0);
        self.tail_constant * sum
    }

    /// `Leb{y in Y : phi(y) > n}` in units of length on `[1/2, 1]`.
    pub fn leb_phi_gt(&self, n: usize) -> f64 {
        0.5 * self.z_tail(n)
    }

    /// Branch `n >= 1` as the interval `[lo, hi)` of `y` values.
    pub fn branch(&self, n: usize) -> (f64, f64) {
        (0.5 * (1.0 + self.z_tail(n)), 0.5 * (1.0 + self.z_tail(n - 1)))
    }

    /// Return time of `y in Y`.
    pub fn phi(&self, y: f64) -> usize {
        let z = 2.0 * y - 1.0;
        // endpoints decrease; count how many are > z
        let k = self.endpoints.partition_point(|&a| a > z);
        if k < self.endpoints.len() {
            k
        } else {
            // beyond the table: iterate forward
            let mut x = z;
            let mut n = 1;
            while x < 0.5 {
                x = self.lsv.left(x);
                n += 1;
            }
            n
        }
    }

    /// Inverse of `F = f^n` restricted to branch `n`, evaluated at `y' in Y`.
    pub fn inverse(&self, n: usize, y_image: f64) -> f64 {
        let mut z = 0.5 * (1.0 + (2.0 * y_image - 1.0));
        for _ in 1..n {
            z = self.lsv.left_inverse(z);
        }
        0.5 * (1.0 + z)
    }

    /// `F(y) = f^{phi(y)}(y)` by forward iteration.
    pub fn first_return(&self, y: f64) -> (usize, f64) {
        let mut x = 2.0 * y - 1.0;
        let mut n = 1;
        while x < 0.5 {
            x = self.lsv.left(x);
            n += 1;
        }
        (n, x)
    }
}

/// Tabulates the branch endpoints by backward iteration of the left branch.
pub fn branch_intervals(gamma: f64, n_branches: usize) -> Result<BranchDecomposition, RenewalError> {
    let lsv = Lsv::new(gamma)?;
    if n_branches == 0 {
        return Err(RenewalError::NoBranches);
    }
    let len = TAIL_TABLE.max(n_branches + 2);
    let mut endpoints = Vec::with_capacity(len);
    endpoints.push(1.0);
    endpoints.push(0.5);
    while endpoints.len() < len {
        let prev = *endpoints.last().unwrap();
        let next = lsv.left_inverse(prev);
        if !(next < prev && next > 0.0) {
            return Err(RenewalError::RootFinder(endpoints.len()));
        }
        endpoints.push(next);
    }
    let last = len - 1;
    let tail_constant = endpoints[last] * (last as f64).powf(1.0 / gamma);
    Ok(BranchDecomposition { lsv, n_branches, endpoints, tail_constant })
}

// ---------------------------------------------------------------------------

/// One nonzero of a branch transfer matrix: `R(n)[dst, src] += weight`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub src: u32,
    pub dst: u32,
    pub weight: f64,
}

/// Piece of one grid cell on which the return time is constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub cell: usize,
    /// Length in the `z` parametrization.
    pub len: f64,
}

/// Ulam discretization of the branch transfer operators `R(n)`.
#[derive(Debug, Clone)]
pub struct UlamModel {
    dec: BranchDecomposition,
    m: usize,
    /// Per branch `n = 1..=N` (index `n - 1`), sorted by `(src, dst)`.
    entries: Vec<Vec<Entry>>,
    /// Per branch, the atoms in increasing cell order.
    atoms: Vec<Vec<Atom>>,
    /// Length of `{phi > N}` in each cell (only the first cells are nonzero).
    far_len: Vec<f64>,
    /// Distribution over target cells of the image of the lumped far part.
    far_profile: Vec<f64>,
    /// Invariant density of `F` on the grid, mean 1.
    rho: Vec<f64>,
    mean_phi: f64,
    power_iterations: usize,
}

/// Tiles `[lo, hi)` by the grid cells of width `1/m`: `(cell, overlap)`.
fn cell_overlaps(lo: f64, hi: f64, m: usize) -> impl Iterator<Item = (usize, f64)> {
    let h = 1.0 / m as f64;
    let first = ((lo * m as f64).floor() as usize).min(m - 1);
    let last = (((hi * m as f64).ceil() as usize).max(first + 1)).min(m);
    (first..last).filter_map(move |c| {
        let a = lo.max(c as f64 * h);
        let b = hi.min((c + 1) as f64 * h);
        (b > a).then_some((c, b - a))
    })
}

/// Intersects a sorted partition `[cuts_src]` (cells) with a sorted partition
/// `[cuts_dst]` (preimages of target cells) of the same interval.
fn sweep(src: &[(usize, f64, f64)], dst_cuts: &[f64], h: f64) -> Vec<Entry> {
    let mut out = Vec::with_capacity(src.len() + dst_cuts.len());
    let mut i = 0usize;
    for &(cell, lo, hi) in src {
        while i + 1 < dst_cuts.len() && dst_cuts[i + 1] <= lo {
            i += 1;
        }
        let mut k = i;
        while k + 1 < dst_cuts.len() && dst_cuts[k] < hi {
            let a = lo.max(dst_cuts[k]);
            let b = hi.min(dst_cuts[k + 1]);
            if b > a {
                out.push(Entry { src: cell as u32, dst: k as u32, weight: (b - a) / h });
            }
            k += 1;
        }
    }
    out
}

impl UlamModel {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_branches(&self) -> usize {
        self.dec.n_branches
    }

    pub fn decomposition(&self) -> &BranchDecomposition {
        &self.dec
    }

    /// Invariant density of `F` per cell, normalized to mean 1.
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// Mean return time under `mu_Y`.
    pub fn mean_phi(&self) -> f64 {
        self.mean_phi
    }

    /// `mu(Y)` for the invariant probability of the LSV map (Kac).
    pub fn mu_y(&self) -> f64 {
        1.0 / self.mean_phi
    }

    pub fn power_iterations(&self) -> usize {
        self.power_iterations
    }

    /// `gcd` of the return times: 1 since branch 1 is nonempty.
    pub fn gcd(&self) -> usize {
        if self.atoms.first().is_some_and(|a| !a.is_empty()) {
            1
        } else {
            0
        }
    }

    pub fn entries(&self, n: usize) -> &[Entry] {
        &self.entries[n - 1]
    }

    pub fn atoms(&self, n: usize) -> &[Atom] {
        &self.atoms[n - 1]
    }

    pub fn far_len(&self) -> &[f64] {
        &self.far_len
    }

    pub fn far_profile(&self) -> &[f64] {
        &self.far_profile
    }

    fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    /// `Leb(cell c ∩ {phi > p})` in `z` units.
    pub fn cell_tail(&self, c: usize, p: usize) -> f64 {
        let h = self.h();
        (self.dec.z_tail(p) - c as f64 * h).clamp(0.0, h)
    }

    /// Cells that meet `{phi > p}`.
    fn cells_above(&self, p: usize) -> usize {
        ((self.dec.z_tail(p) * self.m as f64).ceil() as usize).clamp(1, self.m)
    }

    /// `mu_Y(phi > p)`.
    pub fn tail_mu(&self, p: usize) -> f64 {
        if p == 0 {
            // the cell sum can round above 1
            return 1.0;
        }
        (0..self.cells_above(p)).map(|c| self.rho[c] * self.cell_tail(c, p)).sum()
    }

    /// `mu_Y(phi = n)`.
    pub fn branch_mass(&self, n: usize) -> f64 {
        self.tail_mu(n - 1) - self.tail_mu(n)
    }

    /// `(mu_Y(phi > p))_{p=0..=n_max}` and `sum_{p > n_max} mu_Y(phi > p)`.
    fn tail_with_remainder(&self, n_max: usize) -> (Vec<f64>, f64) {
        let table = self.dec.endpoints.len() - 1;
        let n_max = n_max.min(table);
        let tail: Vec<f64> = (0..=table).map(|p| self.tail_mu(p)).collect();
        // beyond the table everything sits in cell 0
        let mut rest = self.rho[0] * self.dec.z_tail_remainder(table);
        for p in (n_max + 1..=table).rev() {
            rest += tail[p];
        }
        (tail[..=n_max].to_vec(), rest)
    }

    /// `b(n) = 1 + mean_phi^{-1} sum_{j>n} mu_Y(phi > j)` for `n = 0..=n_max`.
    pub fn b_sequence(&self, n_max: usize) -> Result<RealSeq, RenewalError> {
        let (tail, rest) = self.tail_with_remainder(TAIL_TABLE - 1);
        let b = seqkit::b_seq_with_remainder(&RealSeq::new(tail)?, self.mean_phi, rest)?;
        Ok(RealSeq::new(b.values()[..=n_max].to_vec())?)
    }

    /// `sum_{j>n} mu_Y(phi > j)` for `n = 0..=n_max`.
    pub fn tail_sums(&self, n_max: usize) -> Result<RealSeq, RenewalError> {
        let b = self.b_sequence(n_max)?;
        Ok(RealSeq::new(b.iter().map(|x| (x - 1.0) * self.mean_phi).collect())?)
    }

    /// Dense `R(n)` (row = target cell, column = source cell).
    pub fn r_matrix(&self, n: usize) -> DenseMatrix {
        let mut a = DenseMatrix::zeros(self.m, self.m);
        for e in self.entries(n) {
            a[(e.dst as usize, e.src as usize)] += e.weight;
        }
        a
    }

    /// `out += R(n) x`.
    pub fn apply_branch(&self, n: usize, x: &[f64], out: &mut [f64]) {
        for e in self.entries(n) {
            out[e.dst as usize] += e.weight * x[e.src as usize];
        }
    }

    /// Transfer operator of `F` including the lumped far part.
    pub fn apply_total(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for n in 1..=self.n_branches() {
            self.apply_branch(n, x, &mut out);
        }
        let far: f64 = self.far_len.iter().zip(x).map(|(l, v)| l * v).sum::<f64>() * self.m as f64;
        for (o, q) in out.iter_mut().zip(&self.far_profile) {
            *o += far * q;
        }
        out
    }
}

/// Assembles the Ulam matrices of every branch and the invariant density.
pub fn ulam_r(dec: &BranchDecomposition, m: usize) -> Result<UlamModel, RenewalError> {
    if m < 64 {
        return Err(RenewalError::GridTooSmall(m));
    }
    let n_branches = dec.n_branches;
    let h = 1.0 / m as f64;

    // preimage cuts of branch n are the left-inverse images of those of n - 1
    let mut cuts: Vec<f64> = (0..=m).map(|i| 0.5 * (1.0 + i as f64 / m as f64)).collect();
    let mut per_branch: Vec<(Vec<Entry>, Vec<Atom>)> = Vec::with_capacity(n_branches);
    for n in 1..=n_branches {
        if n > 1 {
            cuts.iter_mut().for_each(|z| *z = dec.lsv.left_inverse(*z));
        }
        let (lo, hi) = (dec.z_tail(n), dec.z_tail(n - 1));
        let pieces: Vec<(usize, f64, f64)> = cell_overlaps(lo, hi, m)
            .map(|(c, _)| (c, lo.max(c as f64 * h), hi.min((c + 1) as f64 * h)))
            .collect();
        let atoms = pieces.iter().map(|&(cell, a, b)| Atom { cell, len: b - a }).collect();
        per_branch.push((sweep(&pieces, &pinned(&cuts, lo, hi), h), atoms));
    }
    let (entries, atoms): (Vec<_>, Vec<_>) = per_branch.into_iter().unzip();

    let far_edge = dec.z_tail(n_branches);
    let mut far_len = vec![0.0; m];
    for (c, len) in cell_overlaps(0.0, far_edge, m) {
        far_len[c] = len;
    }
    cuts.iter_mut().for_each(|z| *z = dec.lsv.left_inverse(*z));
    let cuts = pinned(&cuts, dec.z_tail(n_branches + 1), far_edge);
    let width = cuts[m] - cuts[0];
    let far_profile: Vec<f64> = cuts.windows(2).map(|w| (w[1] - w[0]) / width).collect();

    let mut model = UlamModel {
        dec: dec.clone(),
        m,
        entries,
        atoms,
        far_len,
        far_profile,
        rho: vec![1.0; m],
        mean_phi: 0.0,
        power_iterations: 0,
    };

    const MAX_ITER: usize = 100_000;
    let mut rho = vec![1.0; m];
    let mut converged = false;
    for it in 1..=MAX_ITER {
        let mut next = model.apply_total(&rho);
        let mass: f64 = next.iter().sum::<f64>() * h;
        next.iter_mut().for_each(|v| *v /= mass);
        let diff = next.iter().zip(&rho).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rho = next;
        if diff < 1e-12 {
            model.power_iterations = it;
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RenewalError::NoConvergence(MAX_ITER));
    }
    model.rho = rho;
    let (tail, rest) = model.tail_with_remainder(TAIL_TABLE - 1);
    model.mean_phi = tail.iter().sum::<f64>() + rest;
    Ok(model)
}

/// Cuts with the ends pinned to the tabulated endpoints, so atoms tile the
/// branch exactly.
fn pinned(cuts: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut out = cuts.to_vec();
    out[0] = lo;
    *out.last_mut().unwrap() = hi;
    out
}

// ---------------------------------------------------------------------------

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = 1.0;
        }
        a
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, v) in s.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        s
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

// ---------------------------------------------------------------------------

/// `T(n)` for a scalar renewal sequence: `T(0) = 1`, `T(n) = sum R(j) T(n-j)`,
/// with `r[j - 1] = R(j)`.
pub fn scalar_renewal(r: &[f64], n_max: usize) -> Vec<f64> {
    let mut t = vec![1.0];
    for n in 1..=n_max {
        let v = (1..=n.min(r.len())).map(|j| r[j - 1] * t[n - j]).sum();
        t.push(v);
    }
    t
}

/// Renewal sequence of the discrete model.
#[derive(Debug, Clone)]
pub struct RenewalSequence {
    /// `T(n)` for `n = 0..keep`.
    pub kept: Vec<DenseMatrix>,
    pub b: RealSeq,
    /// `|| T(n) - b(n) P ||` on bounded functions, max-row-sum norm.
    pub residual: RealSeq,
    pub mean_phi: f64,
}

impl RenewalSequence {
    /// Matrix of `P`: `P u = mean_phi^{-1} (int u) rho` on cell densities.
    pub fn projection(model: &UlamModel) -> DenseMatrix {
        let m = model.m();
        let mut p = DenseMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                p[(i, j)] = model.rho[i] / (m as f64 * model.mean_phi);
            }
        }
        p
    }
}

/// Width of the column blocks in the `T(n)` recursion.
const BLOCK: usize = 32;

/// Runs `T(n) = sum_{j=1}^{n} R(j) T(n-j)` for `n <= n_max` and measures
/// `T(n) - b(n) P`. The first `keep` matrices are returned.
pub fn renewal_t(model: &UlamModel, n_max: usize, keep: usize) -> Result<RenewalSequence, RenewalError> {
    if n_max > model.n_branches() {
        return Err(RenewalError::BeyondBranches { requested: n_max, available: model.n_branches() });
    }
    let m = model.m();
    let b = model.b_sequence(n_max)?;
    let p_row: Vec<f64> = model.rho.iter().map(|r| r / (m as f64 * model.mean_phi)).collect();
    let keep = keep.min(n_max + 1);

    // per block: row sums of |T(n) - b(n)P| weighted by rho(col), and kept columns
    let blocks: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = (0..m.div_ceil(BLOCK))
        .into_par_iter()
        .map(|blk| {
            let c0 = blk * BLOCK;
            let w = BLOCK.min(m - c0);
            let mut hist: Vec<Vec<f64>> = Vec::with_capacity(n_max + 1);
            let mut t0 = vec![0.0; m * w];
            for k in 0..w {
                t0[(c0 + k) * w + k] = 1.0;
            }
            hist.push(t0);
            for n in 1..=n_max {
                let mut out = vec![0.0; m * w];
                for j in 1..=n {
                    let prev = &hist[n - j];
                    for e in model.entries(j) {
                        let (s, d) = (e.src as usize * w, e.dst as usize * w);
                        let src = &prev[s..s + w];
                        for (o, x) in out[d..d + w].iter_mut().zip(src) {
                            *o += e.weight * x;
                        }
                    }
                }
                hist.push(out);
            }
            let sums = hist
                .iter()
                .enumerate()
                .map(|(n, t)| {
                    let bn = b.values()[n];
                    (0..m)
                        .map(|i| {
                            let pi = bn * p_row[i];
                            (0..w).map(|k| (t[i * w + k] - pi).abs() * model.rho[c0 + k]).sum::<f64>()
                        })
                        .collect()
                })
                .collect();
            hist.truncate(keep);
            (sums, hist)
        })
        .collect();

    let mut residual = vec![0.0; n_max + 1];
    for (n, r) in residual.iter_mut().enumerate() {
        *r = (0..m)
            .map(|i| blocks.iter().map(|(s, _)| s[n][i]).sum::<f64>() / model.rho[i])
            .fold(0.0, f64::max);
    }
    let kept = (0..keep)
        .map(|n| {
            let mut t = DenseMatrix::zeros(m, m);
            for (blk, (_, hist)) in blocks.iter().enumerate() {
                let c0 = blk * BLOCK;
                let w = BLOCK.min(m - c0);
                for i in 0..m {
                    for k in 0..w {
                        t[(i, c0 + k)] = hist[n][i * w + k];
                    }
                }
            }
            t
        })
        .collect();
    Ok(RenewalSequence { kept, b, residual: RealSeq::new(residual)?, mean_phi: model.mean_phi })
}

/// Applies `T(0), ..., T(n_max)` to one density vector.
pub fn renewal_apply(model: &UlamModel, x: &[f64], n_max: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![x.to_vec()];
    for n in 1..=n_max {
        let mut t = vec![0.0; model.m()];
        for j in 1..=n {
            model.apply_branch(j, &out[n - j], &mut t);
        }
        out.push(t);
    }
    out
}

// ---------------------------------------------------------------------------

/// Function on the discrete tower: value per (level, cell), zero above the
/// last stored level.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerFunction {
    levels: Vec<Vec<f64>>,
}

impl TowerFunction {
    pub fn new(levels: Vec<Vec<f64>>) -> Self {
        Self { levels }
    }

    /// `f(cell)` on the base `Y` (level 0), zero elsewhere.
    pub fn on_base(m: usize, f: impl Fn(usize) -> f64) -> Self {
        Self { levels: vec![(0..m).map(f).collect()] }
    }

    /// The constant `c` on levels `0..=top`.
    pub fn constant(m: usize, top: usize, c: f64) -> Self {
        Self { levels: vec![vec![c; m]; top + 1] }
    }

    pub fn top_level(&self) -> usize {
        self.levels.len() - 1
    }

    #[inline]
    pub fn get(&self, level: usize, cell: usize) -> f64 {
        self.levels.get(level).map_or(0.0, |l| l[cell])
    }
}

/// Result of [`tower_correlation_pair`].
#[derive(Debug, Clone)]
pub struct TowerCorrelation {
    pub rho_direct: RealSeq,
    pub rho_renewal: RealSeq,
    /// `mu_Delta` of the levels above the top level of the functions.
    pub deficit: f64,
    pub warning: Option<String>,
    /// `int v dmu_Delta` and `int w dmu_Delta`.
    pub mean_v: f64,
    pub mean_w: f64,
}

/// `rho*(n) = int v w∘f^n dmu_Delta` two ways: by pushing `v mu_Delta` forward
/// on the discrete tower, and by the renewal convolution
/// `J0(n) + mean_phi^{-1} int ((T*RV)*W)(n) dmu_Y`.
pub fn tower_correlation_pair(
    model: &UlamModel,
    v: &TowerFunction,
    w: &TowerFunction,
    n_max: usize,
) -> Result<TowerCorrelation, RenewalError> {
    let m = model.m();
    for f in [v, w] {
        if let Some(l) = f.levels.iter().find(|l| l.len() != m) {
            return Err(RenewalError::GridMismatch(l.len(), m));
        }
        if f.top_level() > model.n_branches() {
            return Err(RenewalError::TooManyLevels { levels: f.top_level() + 1, max: model.n_branches() + 1 });
        }
    }
    if n_max > model.n_branches() {
        return Err(RenewalError::BeyondBranches { requested: n_max, available: model.n_branches() });
    }
    let top = v.top_level().max(w.top_level());
    let (_, rest) = model.tail_with_remainder(top);
    let deficit = rest / model.mean_phi;
    let warning = (deficit > 0.01).then(|| format!("tower truncation deficit {deficit:.3e} exceeds 1% of mass"));

    let mean_of = |f: &TowerFunction| -> f64 {
        (0..=f.top_level())
            .map(|l| (0..model.cells_above(l)).map(|c| model.rho[c] * f.get(l, c) * model.cell_tail(c, l)).sum::<f64>())
            .sum::<f64>()
            / model.mean_phi
    };

    let rho_direct = tower_push(model, v, w, n_max);
    let rho_renewal = tower_renewal(model, v, w, n_max);
    Ok(TowerCorrelation {
        rho_direct: RealSeq::new(rho_direct)?,
        rho_renewal: RealSeq::new(rho_renewal)?,
        deficit,
        warning,
        mean_v: mean_of(v),
        mean_w: mean_of(w),
    })
}

/// Direct evaluation: the measure `v mu_Delta` is moved up the tower; mass at
/// the top of an atom returns to level 0, spread over target cells by the
/// atom's image and then over the atoms of each target cell by length.
fn tower_push(model: &UlamModel, v: &TowerFunction, w: &TowerFunction, n_max: usize) -> Vec<f64> {
    let m = model.m();
    let nb = model.n_branches();
    let h = model.h();
    let phibar = model.mean_phi;

    // explicit atoms: (branch, cell, len, image entries, level masses)
    struct State {
        branch: usize,
        cell: usize,
        len: f64,
        image: Vec<(usize, f64)>,
        mass: Vec<f64>,
    }
    let mut states: Vec<State> = Vec::new();
    // atoms of each cell, as indices into `states`, for redistributing returns
    let mut by_cell: Vec<Vec<usize>> = vec![Vec::new(); m];
    for n in 1..=nb {
        let entries = model.entries(n);
        for atom in model.atoms(n) {
            let image: Vec<(usize, f64)> = entries
                .iter()
                .filter(|e| e.src as usize == atom.cell)
                .map(|e| (e.dst as usize, e.weight * h / atom.len))
                .collect();
            let mass = (0..n).map(|l| v.get(l, atom.cell) * model.rho[atom.cell] * atom.len / phibar).collect();
            by_cell[atom.cell].push(states.len());
            states.push(State { branch: n, cell: atom.cell, len: atom.len, image, mass });
        }
    }
    // far part: per cell, levels 0..=top+n_max
    let far_cells: Vec<usize> = (0..m).filter(|&c| model.far_len[c] > 0.0).collect();
    let far_top = v.top_level() + n_max + 1;
    let mut far: Vec<Vec<f64>> = far_cells
        .iter()
        .map(|&c| {
            (0..=far_top)
                .map(|l| v.get(l, c) * model.rho[c] * model.cell_tail(c, l.max(nb)) / phibar)
                .collect()
        })
        .collect();

    let pair = |states: &[State], far: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for st in states {
            for (l, &x) in st.mass.iter().enumerate() {
                if x != 0.0 {
                    s += x * w.get(l, st.cell);
                }
            }
        }
        for (k, &c) in far_cells.iter().enumerate() {
            for (l, &x) in far[k].iter().enumerate() {
                if x != 0.0 {
                    s += x * w.get(l, c);
                }
            }
        }
        s
    };

    let mut out = vec![pair(&states, &far)];
    let mut inflow = vec![0.0; m];
    for _ in 1..=n_max {
        inflow.iter_mut().for_each(|x| *x = 0.0);
        for st in states.iter_mut() {
            let top = st.mass[st.branch - 1];
            st.mass.rotate_right(1);
            st.mass[0] = 0.0;
            if top != 0.0 {
                for &(d, q) in &st.image {
                    inflow[d] += top * q;
                }
            }
        }
        for (k, &c) in far_cells.iter().enumerate() {
            let col = &mut far[k];
            let mut returned = 0.0;
            for l in (0..col.len()).rev() {
                let x = col[l];
                col[l] = 0.0;
                if x == 0.0 {
                    continue;
                }
                let (now, next) = (model.cell_tail(c, l.max(nb)), model.cell_tail(c, (l + 1).max(nb)));
                let back = if now > 0.0 { x * (now - next) / now } else { 0.0 };
                returned += back;
                if l + 1 < col.len() {
                    col[l + 1] += x - back;
                }
            }
            for (d, q) in model.far_profile.iter().enumerate() {
                inflow[d] += returned * q;
            }
        }
        for c in 0..m {
            let mass = inflow[c];
            if mass == 0.0 {
                continue;
            }
            for &s in &by_cell[c] {
                states[s].mass[0] += mass * states[s].len / h;
            }
            if let Some(k) = far_cells.iter().position(|&fc| fc == c) {
                far[k][0] += mass * model.far_len[c] / h;
            }
        }
        out.push(pair(&states, &far));
    }
    out
}

/// Renewal-side evaluation of `rho*`.
fn tower_renewal(model: &UlamModel, v: &TowerFunction, w: &TowerFunction, n_max: usize) -> Vec<f64> {
    let m = model.m();
    let nb = model.n_branches();
    let h = model.h();
    let phibar = model.mean_phi;
    let top_v = v.top_level();

    // J0(n) = mean_phi^{-1} sum_c rho_c sum_l v(l,c) w(l+n,c) Leb(c ∩ phi > l+n)
    let j0: Vec<f64> = (0..=n_max)
        .map(|n| {
            let mut s = 0.0;
            for l in 0..=top_v {
                let p = l + n;
                for c in 0..model.cells_above(p) {
                    s += model.rho[c] * v.get(l, c) * w.get(p, c) * model.cell_tail(c, p);
                }
            }
            s / phibar
        })
        .collect();

    // RV(k) as cell densities, k = 1..=n_max: atoms with phi >= k carry v(phi-k)
    let rv: Vec<Vec<f64>> = (0..=n_max)
        .map(|k| {
            let mut out = vec![0.0; m];
            if k == 0 {
                return out;
            }
            for n in k..=nb.min(k + top_v) {
                let level = n - k;
                for e in model.entries(n) {
                    let c = e.src as usize;
                    let val = v.get(level, c);
                    if val != 0.0 {
                        out[e.dst as usize] += e.weight * model.rho[c] * val;
                    }
                }
            }
            // far branches n > N with n - k <= top_v
            let mut far = 0.0;
            for c in (0..m).filter(|&c| model.far_len[c] > 0.0) {
                for n in (nb + 1).max(k)..=k + top_v {
                    let val = v.get(n - k, c);
                    if val != 0.0 {
                        let len = model.cell_tail(c, n - 1) - model.cell_tail(c, n);
                        far += len / h * model.rho[c] * val;
                    }
                }
            }
            if far != 0.0 {
                for (o, q) in out.iter_mut().zip(&model.far_profile) {
                    *o += far * q;
                }
            }
            out
        })
        .collect();

    // G(i) = sum_{k=1}^{i} T(i-k) RV(k)
    let mut g = vec![vec![0.0; m]; n_max + 1];
    for (k, rvk) in rv.iter().enumerate().skip(1) {
        if rvk.iter().all(|&x| x == 0.0) {
            continue;
        }
        let seq = renewal_apply(model, rvk, n_max - k);
        for (j, t) in seq.into_iter().enumerate() {
            for (a, b) in g[k + j].iter_mut().zip(t) {
                *a += b;
            }
        }
    }

    // int G(i) W(l) dLeb with W(l) = 1{phi > l} w(l, .)
    (0..=n_max)
        .map(|n| {
            let mut s = 0.0;
            for (i, gi) in g.iter().enumerate().take(n + 1) {
                let l = n - i;
                for c in 0..model.cells_above(l) {
                    s += gi[c] * w.get(l, c) * model.cell_tail(c, l);
                }
            }
            j0[n] + s / phibar
        })
        .collect()
}
