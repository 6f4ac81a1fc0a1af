//! Checks where one module serves as the oracle for another.

use decaylab::billiards::{build_semidispersing, build_stadium, CollisionMap, LiouvilleSampler, Scatterer};
use decaylab::correlator::{estimate_rho, lsv_base_mollified, Plan, Scheme};
use decaylab::dynmaps::{AcimOrbit, Doubling, DynMap, Lsv, TorusHv};
use decaylab::inducing::{return_tail, scatterer_system, stadium_system, FirstReturn, InducedSystem, XSampling};
use decaylab::renewal::{branch_intervals, renewal_t, tower_correlation_pair, ulam_r, TowerFunction};
use decaylab::rng;

const HALF: fn(&f64) -> bool = |x| *x >= 0.5;

#[test]
fn lsv_monte_carlo_matches_ulam() {
    let m = 1024;
    let model = ulam_r(&branch_intervals(0.5, 1024).unwrap(), m).unwrap();
    let one = TowerFunction::on_base(m, |_| 1.0);
    let tc = tower_correlation_pair(&model, &one, &one, 30).unwrap();
    let lsv = Lsv::new(0.5).unwrap();
    let y = lsv_base_mollified(0.0);
    let plan = Plan::new(30, 20_000_000, Scheme::LongOrbit, 2).burn_in(1000);
    let est = estimate_rho(&lsv, &y, &y, &plan).unwrap();
    for n in 0..=30 {
        let exact = tc.rho_direct.values()[n] - tc.mean_v * tc.mean_w;
        let (r, se) = (est.rho.values()[n], est.stderr.values()[n]);
        assert!((r - exact).abs() <= 3.0 * se, "n={n}: {r} vs {exact} (se {se})");
    }
}

#[test]
fn branch_masses_match_first_returns() {
    let model = ulam_r(&branch_intervals(0.5, 1024).unwrap(), 1024).unwrap();
    let lsv = Lsv::new(0.5).unwrap();
    let sys = InducedSystem::new(&lsv, HALF, 10_000_000, XSampling::Thinned { burn_in: 100, returns: 16 }).unwrap();
    let n = 1_000_000;
    let t = return_tail(&sys, n, 12, 5).unwrap();
    for k in 1..=12 {
        let p = (t.counts[k - 1] - t.counts[k]) as f64 / n as f64;
        let exact = model.branch_mass(k);
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((p - exact).abs() <= 3.0 * se, "phi = {k}: {p} vs {exact}");
    }
}

fn orbit_fraction<M: DynMap>(map: &M, inside: impl Fn(&M::Point) -> bool, n: usize) -> f64 {
    AcimOrbit::new(map, None, 1000, n, 17, 0).filter(|p| inside(p)).count() as f64 / n as f64
}

#[test]
fn kac_for_the_lsv_tower() {
    let model = ulam_r(&branch_intervals(0.5, 512).unwrap(), 512).unwrap();
    let mu_y = orbit_fraction(&Lsv::new(0.5).unwrap(), HALF, 10_000_000);
    let kac = model.mean_phi() * mu_y;
    assert!((kac - 1.0).abs() < 0.02, "{kac}");
}

#[test]
fn kac_on_maps() {
    let lsv = Lsv::new(0.5).unwrap();
    let doubling = Doubling;
    let torus = TorusHv::new(0.8, TorusHv::DEFAULT_INNER_RADIUS).unwrap();
    let hole = TorusHv::DEFAULT_HOLE;
    let out = move |p: &[f64; 2]| p[0].hypot(p[1]) >= hole;

    let sys = InducedSystem::new(&lsv, HALF, 10_000_000, XSampling::Thinned { burn_in: 100, returns: 16 }).unwrap();
    let h = return_tail(&sys, 200_000, 10, 1).unwrap().mean_h;
    let mu = orbit_fraction(&lsv, HALF, 10_000_000);
    assert!((h * mu - 1.0).abs() < 0.02, "lsv {h} {mu}");

    let sys = InducedSystem::new(&doubling, HALF, 10_000, XSampling::Thinned { burn_in: 100, returns: 16 }).unwrap();
    let h = return_tail(&sys, 200_000, 10, 1).unwrap().mean_h;
    assert!((h - 2.0).abs() < 0.04, "doubling {h}");

    let sys = InducedSystem::new(&torus, out, 10_000_000, XSampling::Thinned { burn_in: 100, returns: 16 }).unwrap();
    let h = return_tail(&sys, 200_000, 10, 1).unwrap().mean_h;
    let mu = orbit_fraction(&torus, out, 10_000_000);
    assert!((h * mu - 1.0).abs() < 0.02, "torus {h} {mu}");
}

#[test]
fn kac_on_billiards() {
    // mu(X) from Liouville samples of the whole boundary
    let map = CollisionMap::new(build_stadium(2.0, 1.0).unwrap());
    let all = LiouvilleSampler::new(map.table(), None).unwrap();
    let mut r = rng::stream(3, 0);
    let n = 1_000_000;
    let (mut hits, mut total) = (0usize, 0usize);
    while total < n {
        if let Some(c) = map.with_history(all.sample(&mut r)) {
            total += 1;
            hits += map.stadium_x(&c) as usize;
        }
    }
    let mu_x = hits as f64 / n as f64;
    let h = return_tail(&stadium_system(&map, 1_000_000).unwrap(), 1_000_000, 10, 4).unwrap().mean_h;
    assert!((h * mu_x - 1.0).abs() < 0.02, "stadium {h} {mu_x}");

    let map = CollisionMap::new(build_semidispersing(1.0, 1.0, &[Scatterer { center: [0.5, 0.5], radius: 0.2 }]).unwrap());
    let h = return_tail(&scatterer_system(&map, 1_000_000).unwrap(), 1_000_000, 10, 4).unwrap().mean_h;
    let mu_x = 0.4 * std::f64::consts::PI / map.table().perimeter();
    assert!((h * mu_x - 1.0).abs() < 0.02, "semidispersing {h} {mu_x}");
}

#[test]
fn return_map_preserves_mu_x() {
    let map = CollisionMap::new(build_stadium(2.0, 1.0).unwrap());
    let sys = stadium_system(&map, 1_000_000).unwrap();
    let n = 400_000;
    // statistics: fraction on the first arc, mean sin(phi), mean of s / length
    let stats = |push: bool| -> [f64; 3] {
        let mut r = rng::stream(21, push as u64);
        let mut acc = [0.0; 3];
        let mut k = 0;
        while k < n {
            let mut c = sys.sample_x(&mut r).unwrap();
            if push {
                match sys.first_return(c).unwrap() {
                    FirstReturn::Returned { point, .. } => c = point,
                    _ => continue,
                }
            }
            let bp = map.boundary_point(&c);
            acc[0] += (bp.piece == 1) as u8 as f64;
            acc[1] += bp.phi.sin();
            acc[2] += bp.s / map.table().pieces()[bp.piece].length();
            k += 1;
        }
        acc.map(|a| a / n as f64)
    };
    let before = stats(false);
    let after = stats(true);
    // both samples independent: se of a difference of means
    let sd = [0.5, (0.5f64).sqrt(), (1.0f64 / 12.0).sqrt()];
    for i in 0..3 {
        let se = sd[i] * (2.0 / n as f64).sqrt();
        assert!((before[i] - after[i]).abs() <= 4.0 * se, "statistic {i}: {} vs {}", before[i], after[i]);
    }
}

#[test]
fn renewal_residual_decays() {
    let model = ulam_r(&branch_intervals(0.5, 512).unwrap(), 512).unwrap();
    let r = renewal_t(&model, 256, 0).unwrap().residual;
    assert!(r.values()[256] < r.values()[16] / 10.0, "{} vs {}", r.values()[256], r.values()[16]);
}
