//! Closed-form checks run by the `selftest` subcommand.

use std::f64::consts::PI;

use serde::Serialize;

use crate::billiards::{
    build_semidispersing, build_stadium, liouville_sample, mean_free_path, next_collision, stadium_constant,
    BoundaryPoint, Scatterer,
};
use crate::correlator::{center, cos_coord, coord, estimate_rho, Plan, Scheme};
use crate::dynmaps::{radial_hv_step, AcimOrbit, Doubling, DynMap, Lsv, Observable, Polar, RadialHv};
use crate::fitkit::{loglog_fit, plateau_constant, FitModel};
use crate::inducing::{induced_phi, normalized_birkhoff, FirstReturn, InducedSystem, Scaling, XSampling};
use crate::renewal::{branch_intervals, renewal_t, tower_correlation_pair, ulam_r, TowerFunction};
use crate::seqkit::{b_seq, convolve, gamma_seq, rate_seq, tail_sum_seq, zeta_seq, RealSeq};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b}"))
}

fn seq(v: &[f64]) -> RealSeq {
    RealSeq::new(v.to_vec()).expect("non-empty")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const CHECKS: &[(&str, Check)] = &[
    ("convolution_unit", || {
        let a = seq(&[0.3, -1.0, 2.5, 4.0]);
        let out = convolve(&seq(&[1.0, 0.0, 0.0, 0.0]), &a).map_err(err)?;
        ensure(out == a, || format!("{out:?}"))
    }),
    ("convolution_ones", || {
        let out = convolve(&seq(&[1.0; 3]), &seq(&[1.0; 3])).map_err(err)?;
        ensure(out.values() == [1.0, 2.0, 3.0], || format!("{out:?}"))
    }),
    ("zeta_cases", || {
        close(zeta_seq(3.0, 10).map_err(err)?.values()[10], 1e-3, 1e-15, "beta 3")?;
        close(zeta_seq(2.0, 10).map_err(err)?.values()[10], 0.01 * 10f64.ln(), 1e-15, "beta 2")?;
        close(zeta_seq(1.5, 4).map_err(err)?.values()[4], 0.25, 1e-15, "beta 1.5")
    }),
    ("rate_cases", || {
        close(rate_seq(2.0, 0, 4).map_err(err)?.values()[4], 0.0625, 1e-15, "p 2")?;
        close(rate_seq(1.0, 1, 4).map_err(err)?.values()[1], 0.0, 0.0, "log 1")
    }),
    ("tail_sums", || {
        let t = tail_sum_seq(&seq(&[0.0, 1.0, 1.0, 0.0])).map_err(err)?;
        ensure(t.sums.values()[..3] == [2.0, 1.0, 0.0], || format!("{:?}", t.sums))?;
        let n = 20;
        let g = RealSeq::from_fn(n, |j| 0.5f64.powi(j as i32)).map_err(err)?;
        let t = tail_sum_seq(&g).map_err(err)?;
        for k in 0..=n {
            close(t.sums.values()[k], 0.5f64.powi(k as i32) - 0.5f64.powi(n as i32), 1e-15, "geometric")?;
        }
        Ok(())
    }),
    ("b_sequence", || {
        let b = b_seq(&seq(&[1.0, 0.0, 0.0]), 1.0).map_err(err)?;
        ensure(b.iter().all(|x| x == 1.0), || format!("{b:?}"))?;
        let b = b_seq(&seq(&[1.0, 0.5, 0.0]), 1.5).map_err(err)?;
        close(b.values()[0], 4.0 / 3.0, 1e-15, "b(0)")?;
        close(b.values()[1], 1.0, 1e-15, "b(1)")
    }),
    ("gamma_of_delta", || {
        let g = gamma_seq(2.5, &RealSeq::delta(30)).map_err(err)?;
        ensure(g == rate_seq(2.5, 0, 30).map_err(err)?, || "gamma differs from the rate".into())
    }),
    ("lsv_values", || {
        let m = Lsv::new(0.5).map_err(err)?;
        close(m.step(0.5), 0.0, 0.0, "right branch")?;
        close(m.step(0.0), 0.0, 0.0, "fixed point")?;
        // gamma = 1 through the left-branch formula
        close(0.25 * (1.0 + 2.0 * 0.25), 0.375, 0.0, "gamma 1")?;
        let g = Lsv::new(0.9).map_err(err)?;
        close(g.step(0.5), 0.0, 0.0, "right branch, gamma 0.9")
    }),
    ("radial_values", || {
        let m = RadialHv::new(1.0).map_err(err)?;
        let o = radial_hv_step(&m, Polar { r: 0.0, turn: 0.0 }).map_err(err)?;
        ensure(o.r == 0.0, || format!("{o:?}"))?;
        close(radial_hv_step(&m, Polar { r: 0.1, turn: 0.0 }).map_err(err)?.r, 0.11, 1e-15, "inner")?;
        close(m.step(Polar { r: m.r_star(), turn: 0.3 }).r, 1.0, 1e-12, "r_star")
    }),
    ("doubling_values", || {
        close(Doubling.step(0.3), 0.6, 0.0, "0.3")?;
        close(Doubling.step(0.6), 0.2, 1e-15, "0.6")?;
        close(Doubling.step(0.0), 0.0, 0.0, "0")
    }),
    ("doubling_orbit_mean", || {
        let n = 1_000_000;
        let mean = AcimOrbit::new(&Doubling, None, 0, n, 1, 0).sum::<f64>() / n as f64;
        let se = (1.0 / 12.0 / n as f64).sqrt();
        close(mean, 0.5, 3.0 * se, "orbit mean")
    }),
    ("stadium_mensuration", || {
        let t = build_stadium(2.0, 1.0).map_err(err)?;
        close(t.perimeter(), 4.0 + 2.0 * PI, 1e-12, "perimeter")?;
        close(t.area(), 4.0 + PI, 1e-12, "area")?;
        ensure(t.pieces().len() == 4, || "piece count".into())?;
        let c = build_stadium(0.0, 1.0).map_err(err)?;
        close(c.perimeter(), 2.0 * PI, 1e-12, "circle")
    }),
    ("semidispersing_tables", || {
        let d = [Scatterer { center: [0.5, 0.5], radius: 0.2 }];
        let t = build_semidispersing(1.0, 1.0, &d).map_err(err)?;
        close(t.area(), 1.0 - 0.04 * PI, 1e-12, "area")?;
        let r = build_semidispersing(1.0, 1.0, &[]).map_err(err)?;
        close(r.area(), 1.0, 1e-12, "rectangle")?;
        let touching = [Scatterer { center: [0.3, 0.5], radius: 0.2 }, Scatterer { center: [0.7, 0.5], radius: 0.2 }];
        ensure(build_semidispersing(1.0, 1.0, &touching).is_err(), || "touching disks accepted".into())
    }),
    ("billiard_flights", || {
        let t = build_stadium(2.0, 1.0).map_err(err)?;
        let (bp, tau) = next_collision(&t, BoundaryPoint { piece: 0, s: 1.0, phi: 0.0 }).map_err(err)?;
        ensure(bp.piece == 2, || "vertical shot piece".into())?;
        close(bp.s, 1.0, 1e-12, "vertical shot s")?;
        close(tau, 2.0, 1e-12, "vertical shot tau")?;
        let c = build_stadium(0.0, 1.0).map_err(err)?;
        let (bp, tau) = next_collision(&c, BoundaryPoint { piece: 0, s: 1.0, phi: 0.7 }).map_err(err)?;
        close(bp.phi, 0.7, 1e-12, "circle angle")?;
        close(tau, 2.0 * 0.7f64.cos(), 1e-12, "chord")?;
        let d = build_semidispersing(1.0, 1.0, &[Scatterer { center: [0.5, 0.5], radius: 0.2 }]).map_err(err)?;
        let (bp, tau) = next_collision(&d, BoundaryPoint { piece: 3, s: 0.5, phi: 0.0 }).map_err(err)?;
        close(tau, 0.3, 1e-12, "head-on tau")?;
        let (back, _) = next_collision(&d, bp).map_err(err)?;
        ensure(back.piece == 3 && (back.s - 0.5).abs() < 1e-12, || format!("{back:?}"))
    }),
    ("liouville_marginals", || {
        let t = build_stadium(2.0, 1.0).map_err(err)?;
        let n = 100_000;
        let pts = liouville_sample(&t, None, 3, n).map_err(err)?;
        let mean_sin = pts.iter().map(|p| p.phi.sin()).sum::<f64>() / n as f64;
        close(mean_sin, 0.0, 3.0 * (0.5 / n as f64).sqrt(), "mean sin phi")?;
        for k in 0..4 {
            let frac = pts.iter().filter(|p| p.piece == k).count() as f64 / n as f64;
            let p = t.pieces()[k].length() / t.perimeter();
            close(frac, p, 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "piece fraction")?;
        }
        let mut phis: Vec<f64> = pts.iter().map(|p| p.phi).collect();
        phis.sort_by(f64::total_cmp);
        let ks = phis
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (1.0 + x.sin()) / 2.0;
                (f - i as f64 / n as f64).abs().max((f - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        // 3-sigma level of the Kolmogorov distribution
        ensure(ks * (n as f64).sqrt() < 1.95, || format!("KS {ks}"))
    }),
    ("stadium_constant_limit", || {
        let c = stadium_constant(1e-6).map_err(err)?;
        ensure(c > 0.0 && c < 1e-11, || format!("{c}"))
    }),
    ("circle_free_path", || {
        close(mean_free_path(&build_stadium(0.0, 1.0).map_err(err)?), PI / 2.0, 1e-12, "free path")
    }),
    ("first_returns", || {
        let half = |x: &f64| *x >= 0.5;
        let sys = InducedSystem::new(&Doubling, half, 10, XSampling::Thinned { burn_in: 0, returns: 0 }).map_err(err)?;
        ensure(matches!(sys.first_return(0.75).map_err(err)?, FirstReturn::Returned { h: 1, .. }), || "doubling".into())?;
        let m = Lsv::new(0.3).map_err(err)?;
        let sys = InducedSystem::new(&m, half, 10, XSampling::Thinned { burn_in: 0, returns: 0 }).map_err(err)?;
        ensure(matches!(sys.first_return(0.875).map_err(err)?, FirstReturn::Returned { h: 1, .. }), || "lsv".into())?;
        ensure(induced_phi(&[5], 1).map_err(err)? == 5, || "sigma 1".into())?;
        ensure(induced_phi(&[3, 4], 2).map_err(err)? == 7, || "sigma 2".into())
    }),
    ("doubling_clt", || {
        let half = |x: &f64| *x >= 0.5;
        let sys = InducedSystem::new(&Doubling, half, 200, XSampling::Thinned { burn_in: 20, returns: 8 }).map_err(err)?;
        let b = normalized_birkhoff(&sys, 10_000, 4000, Scaling::SqrtN, 7).map_err(err)?;
        close(b.moments.excess_kurtosis, 0.0, 0.2, "excess kurtosis")
    }),
    ("lsv_branches", || {
        let dec = branch_intervals(0.5, 256).map_err(err)?;
        let (lo, hi) = dec.branch(1);
        close(lo, 0.75, 1e-15, "branch 1 start")?;
        close(hi, 1.0, 1e-15, "branch 1 end")?;
        for n in [1, 2, 7, 100, 256] {
            let (lo, hi) = dec.branch(n);
            let (k, img) = dec.first_return(lo + 1e-9 * (hi - lo));
            ensure(k == n && (img - 0.5).abs() < 1e-6, || format!("branch {n}: {k} {img}"))?;
        }
        Ok(())
    }),
    ("ulam_duality_and_base_case", || {
        let dec = branch_intervals(0.5, 256).map_err(err)?;
        let model = ulam_r(&dec, 64).map_err(err)?;
        let v: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let out = model.apply_total(&v);
        let (a, b) = (v.iter().sum::<f64>() / 64.0, out.iter().sum::<f64>() / 64.0);
        close(a, b, 1e-10, "mass")?;
        let seq = renewal_t(&model, 8, 1).map_err(err)?;
        let t0 = &seq.kept[0];
        for i in 0..64 {
            for j in 0..64 {
                let want = if i == j { 1.0 } else { 0.0 };
                close(t0[(i, j)], want, 0.0, "T(0)")?;
            }
        }
        Ok(())
    }),
    ("tower_identities", || {
        let dec = branch_intervals(0.5, 128).map_err(err)?;
        let model = ulam_r(&dec, 64).map_err(err)?;
        let one = TowerFunction::constant(64, 128, 1.0);
        let tc = tower_correlation_pair(&model, &one, &one, 10).map_err(err)?;
        for n in 0..=10 {
            // levels above the top carry the truncation deficit
            let (a, b) = (tc.rho_direct.values()[n], tc.rho_renewal.values()[n]);
            close(a, b, 1e-12, "two sides")?;
            close(a, 1.0, 2.0 * tc.deficit + 1e-12, "invariance")?;
        }
        let v = TowerFunction::on_base(64, |c| (c % 3) as f64);
        let w = TowerFunction::new(vec![(0..64).map(|c| c as f64 / 64.0).collect(); 4]);
        let tc = tower_correlation_pair(&model, &v, &w, 0).map_err(err)?;
        let direct: f64 =
            (0..64).map(|c| v.get(0, c) * w.get(0, c) * model.rho()[c] / (64.0 * model.mean_phi())).sum();
        close(tc.rho_direct.values()[0], direct, 1e-12, "zero step direct")?;
        close(tc.rho_renewal.values()[0], direct, 1e-12, "zero step renewal")
    }),
    ("correlation_examples", || {
        let one = Observable::constant(1.0);
        let plan = Plan::new(5, 4096, Scheme::Ensemble, 1);
        let est = estimate_rho(&Doubling, &one, &one, &plan).map_err(err)?;
        ensure(est.rho.iter().all(|r| r == 0.0), || "constants correlate".into())?;
        let c = cos_coord();
        let plan = Plan::new(6, 100_000, Scheme::LongOrbit, 2);
        let est = estimate_rho(&Doubling, &c, &c, &plan).map_err(err)?;
        for n in 0..=6 {
            let want = if n == 0 { 0.5 } else { 0.0 };
            close(est.rho.values()[n], want, 3.0 * est.stderr.values()[n], "cosine")?;
        }
        Ok(())
    }),
    ("centering_examples", || {
        let k = center(&Doubling, &Observable::constant(2.0), 1000, 0, 3).map_err(err)?;
        close(k.eval(&0.1), 0.0, 1e-15, "constant")?;
        let x = center(&Doubling, &coord(), 100_000, 0, 4).map_err(err)?;
        let (_, se) = x.mean_hint.unwrap_or((0.0, 0.0));
        close(0.3 - x.eval(&0.3), 0.5, 3.0 * se, "mean of x")
    }),
    ("fit_examples", || {
        let y = RealSeq::from_fn(1000, |n| if n == 0 { 1.0 } else { 3.5 * (n as f64).powf(-1.7) }).map_err(err)?;
        let f = loglog_fit(&y, None, (10, 1000), FitModel::PurePower).map_err(err)?;
        close(f.p, 1.7, 1e-10, "p")?;
        close(f.c, 3.5, 1e-10, "c")?;
        let y = RealSeq::from_fn(1000, |n| if n == 0 { 1.0 } else { (n as f64).powi(-2) * (n as f64).ln() })
            .map_err(err)?;
        let f = loglog_fit(&y, None, (4, 1000), FitModel::PowerTimesLog { s: 1 }).map_err(err)?;
        close(f.p, 2.0, 1e-10, "p log")?;
        close(f.c, 1.0, 1e-10, "c log")
    }),
    ("plateau_examples", || {
        let y = RealSeq::from_fn(500, |n| if n == 0 { 1.0 } else { 3.0 / n as f64 }).map_err(err)?;
        let p = plateau_constant(&y, 1.0, 0, (10, 500)).map_err(err)?;
        close(p.c, 3.0, 1e-12, "c")?;
        close(p.variation, 0.0, 1e-12, "variation")?;
        let y = RealSeq::from_fn(500, |n| if n == 0 { 1.0 } else { 1.0 / n as f64 + 1.0 / (n * n) as f64 })
            .map_err(err)?;
        let p = plateau_constant(&y, 1.0, 0, (100, 400)).map_err(err)?;
        ensure(p.c >= 1.0025 && p.c <= 1.01 && p.variation < 0.01, || format!("{p:?}"))
    }),
];

/// Runs every check, in order.
pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| match check() {
            Ok(()) => CheckResult { name, passed: true, detail: String::new() },
            Err(detail) => CheckResult { name, passed: false, detail },
        })
        .collect()
}
