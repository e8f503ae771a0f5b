//! Acceptance suite. Runs every criterion and prints one line per criterion.
//!
//! Pass criterion ids (`C1` .. `C12`) as arguments to run a subset:
//! `cargo test --test acceptance -- C5 C11`.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinflow::evi::{displacement_convexity_check, run_evi_experiment, EviExperiment};
use spinflow::fpk::{FpkModel, FpkTrajectory, Scheme};
use spinflow::geometry::{ManifoldKind, Point, Potential, WeightedManifold};
use spinflow::interaction::{convexity_constants, BoxSpec, CouplingKernel, Psi};
use spinflow::jko::{run_scheme, JkoConfig, JkoTrajectory};
use spinflow::langevin::{
    build_gamma, coupled_cauchy_gap, least_squares, lipschitz_check, run, synchronous_contraction, total_variation,
    CauchySetup, Ensemble, InitialLaw, LangevinModel, SpinSystem,
};
use spinflow::measures::{
    semicircle_laws, stationarize, stationarize_product, stationarized_entropy_check, GridDensity, LocalLaw,
    ProductLaw,
};
use spinflow::transport::{specific_wasserstein_curve, wasserstein2, Method, Rebin};
use spinflow::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

// Shared model: torus of three circle sites, cosine interaction, nearest neighbours.
const SITES: usize = 3;
const RESOLUTION: usize = 16;
const BETA: f64 = 0.5;
const COUPLING: f64 = 0.5;
const TILT: f64 = 1.5;
const FPK_DT: f64 = 1e-4;
const JKO_H: f64 = 5e-3;
const JKO_T: f64 = 0.5;

fn base_model() -> &'static FpkModel {
    static MODEL: OnceLock<FpkModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let man = Arc::new(WeightedManifold::build(ManifoldKind::Circle, RESOLUTION, Potential::Zero).unwrap());
        FpkModel::new(
            BoxSpec::torus(1, SITES).unwrap(),
            man,
            BETA,
            CouplingKernel::nearest_neighbor(1, COUPLING),
            Psi::CosDiff,
        )
        .unwrap()
    })
}

/// Product of `e^{1.5 cos θ}` over the sites.
fn initial_density(model: &FpkModel) -> GridDensity {
    let man = model.manifold.clone();
    GridDensity::from_fn(model.boxspec.clone(), man.clone(), |x| {
        x.iter().map(|&n| (TILT * man.grid.nodes[n].angle().cos()).exp()).product()
    })
    .unwrap()
}

fn fpk_reference() -> &'static FpkTrajectory {
    static TRAJ: OnceLock<FpkTrajectory> = OnceLock::new();
    TRAJ.get_or_init(|| {
        let model = base_model();
        // Snapshots every 1e-2.
        model.run(&initial_density(model), FPK_DT, 1.0, Scheme::CrankNicolson, 100).unwrap()
    })
}

fn jko_run(h: f64) -> JkoTrajectory {
    let model = base_model();
    run_scheme(model, &initial_density(model), &JkoConfig::new(h), JKO_T).unwrap()
}

fn jko_runs() -> &'static (JkoTrajectory, JkoTrajectory) {
    static RUNS: OnceLock<(JkoTrajectory, JkoTrajectory)> = OnceLock::new();
    RUNS.get_or_init(|| (jko_run(JKO_H), jko_run(JKO_H / 2.0)))
}

fn one_site_gap(a: &GridDensity, b: &GridDensity) -> f64 {
    let ma = a.marginal_masses(&[0]);
    let mb = b.marginal_masses(&[0]);
    ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum()
}

fn c1_jko_matches_fpk() -> Result<Outcome> {
    let fpk = fpk_reference();
    let (coarse, fine) = jko_runs();
    let mut pass = true;
    let mut detail = Vec::new();
    for t in [0.1, 0.25, 0.5] {
        let reference = fpk.at(t)?;
        let g = one_site_gap(coarse.at(t), reference);
        let g2 = one_site_gap(fine.at(t), reference);
        let ratio = g / g2;
        pass &= g <= 0.05 && (1.6..=2.4).contains(&ratio);
        detail.push(format!("t={t}: L1 {g:.2e}, h/2 {g2:.2e}, ratio {ratio:.2}"));
    }
    outcome(pass, detail.join("; "))
}

fn c2_free_energy_monotone() -> Result<Outcome> {
    let model = base_model();
    let fpk = fpk_reference();
    let v = SITES as f64;
    let fpk_rise = fpk.records.windows(2).map(|w| (w[1].free_energy - w[0].free_energy) / v).fold(0.0, f64::max);
    let (jko, _) = jko_runs();
    let f = jko.free_energies();
    let jko_rise = f.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let cumulative = f.iter().all(|x| *x <= f[0] + 2.0 * JKO_T);
    let _ = model;
    outcome(
        fpk_rise < 1e-6 && jko_rise < 2.0 * JKO_H && cumulative && jko.a_priori_bound_holds(),
        format!("FPK max ΔF {fpk_rise:.2e}; JKO max ΔF {jko_rise:.2e} (< {:.0e}), sup F ≤ F(P⁰)+2T: {cumulative}", 2.0 * JKO_H),
    )
}

fn c3_langevin_matches_fpk() -> Result<Outcome> {
    let model = base_model();
    let reference = fpk_reference().at(1.0)?;
    let system = SpinSystem {
        kind: ManifoldKind::Circle,
        potential: Potential::Zero,
        coupling: CouplingKernel::nearest_neighbor(1, COUPLING),
        psi: Psi::CosDiff,
        beta: BETA,
    };
    let lm = LangevinModel::new(system, model.boxspec.clone())?;
    let mut ens = Ensemble::sample(ManifoldKind::Circle, SITES, 1_000_000, &InitialLaw::Tilted { k: TILT }, 2024)?;
    run(&lm, &mut ens, 1e-3, 1.0, 1000, &[])?;
    let grid = &model.manifold.grid;
    let tv1 = total_variation(&ens.histogram(grid, &[0]), &reference.marginal_masses(&[0]));
    let tv2 = total_variation(&ens.histogram(grid, &[0, 1]), &reference.marginal_masses(&[0, 1]));
    outcome(tv1 <= 0.02 && tv2 <= 0.02, format!("1-site TV {tv1:.4}, 2-site TV {tv2:.4}"))
}

fn c4_cauchy_gaps() -> Result<Outcome> {
    let j = CouplingKernel::power_law(1, 1.0, 3.0, 32)?;
    let system = SpinSystem { kind: ManifoldKind::Circle, potential: Potential::Zero, coupling: j.clone(), psi: Psi::CosDiff, beta: 0.5 };
    let gm = build_gamma(&j, Psi::CosDiff, 0.5, &BoxSpec::cube(1, 40))?;
    let setup = CauchySetup {
        radii: vec![2, 4, 8],
        outer_radius: 16,
        t_end: 1.0,
        dt: 1e-3,
        particles: 10_000,
        seed: 99,
        init: InitialLaw::Uniform,
    };
    let gaps = coupled_cauchy_gap(&system, &setup, &gm)?;
    // Shared drivers make the per-particle values paired across radii.
    let paired = |f: &dyn Fn(usize) -> f64| {
        let n = setup.particles as f64;
        let vals: Vec<f64> = (0..setup.particles).map(f).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let mut pass = true;
    let mut detail: Vec<String> = gaps.iter().map(|g| format!("n={}: {:.3e}±{:.1e}", g.n, g.mean, g.stderr)).collect();
    for q in 0..2 {
        let (m, se) = paired(&|p| gaps[q].samples[p] - gaps[q + 1].samples[p]);
        pass &= m > 3.0 * se;
        detail.push(format!("drop {}→{}: {m:.2e} ({:.1}σ)", gaps[q].n, gaps[q + 1].n, m / se));
    }
    let (m, se) = paired(&|p| 0.1 * gaps[0].samples[p] - gaps[2].samples[p]);
    pass &= m > 3.0 * se;
    detail.push(format!("final/initial {:.3} ({:.1}σ below 0.1)", gaps[2].mean / gaps[0].mean, m / se));
    outcome(pass, detail.join("; "))
}

fn c5_gamma_metric() -> Result<Outcome> {
    let j = CouplingKernel::power_law(1, 1.0, 3.0, 32)?;
    let gm = build_gamma(&j, Psi::CosDiff, 0.5, &BoxSpec::cube(1, 64))?;
    let defect = gm.schur_defect();
    let lip = lipschitz_check(&gm, ManifoldKind::Circle, &j, Psi::CosDiff, 10_000, 5)?;
    outcome(
        defect <= 1e-9 && lip.max_ratio <= lip.bound,
        format!("Schur defect {defect:.2e}, c {:.3}; Lipschitz ratio {:.3} ≤ bound {:.3}", gm.c, lip.max_ratio, lip.bound),
    )
}

fn c6_evi() -> Result<Outcome> {
    let cfg = EviExperiment::default();
    let rep = run_evi_experiment(&cfg)?;
    let model = base_model();
    let kappa = model.manifold.kappa;
    let k = convexity_constants(kappa, BETA, model.coupling.l1_norm(), model.psi.sup(), model.psi.sup_d2()).k_beta;
    let worst = rep
        .triples
        .iter()
        .map(|t| t.fine.slack + t.budget)
        .fold(f64::INFINITY, f64::min);
    let min_slack = rep.triples.iter().map(|t| t.fine.slack).fold(f64::INFINITY, f64::min);
    let max_quad = rep.triples.iter().map(|t| t.fine.quadrature_error).fold(0.0, f64::max);
    let max_grid = rep.triples.iter().map(|t| t.grid_budget).fold(0.0, f64::max);
    outcome(
        rep.pass && rep.triples.len() == 20 && (rep.k - k).abs() < 1e-12,
        format!(
            "K = {:.3}, {} triples, min slack {min_slack:.2e}, min(slack + budget) {worst:.2e}, max quadrature {max_quad:.1e}, max grid {max_grid:.2e}",
            rep.k,
            rep.triples.len()
        ),
    )
}

fn c7_high_temperature_convergence() -> Result<Outcome> {
    let j = CouplingKernel::nearest_neighbor(1, 0.5);
    let system = SpinSystem { kind: ManifoldKind::Sphere, potential: Potential::Zero, coupling: j.clone(), psi: Psi::Dot, beta: 0.1 };
    let man = WeightedManifold::build(ManifoldKind::Sphere, 8, Potential::Zero)?;
    let k = convexity_constants(man.kappa, 0.1, j.l1_norm(), Psi::Dot.sup(), Psi::Dot.sup_d2());
    let torus = BoxSpec::torus(1, 8)?;
    let gm = build_gamma(&j, Psi::Dot, 0.5, &torus)?;
    let model = LangevinModel::new(system, torus.clone())?;
    let mut a = Ensemble::sample(ManifoldKind::Sphere, 8, 2000, &InitialLaw::Tilted { k: 3.0 }, 31)?;
    let mut b = Ensemble::sample(ManifoldKind::Sphere, 8, 2000, &InitialLaw::Tilted { k: -3.0 }, 32)?;
    let fit = synchronous_contraction(&model, &mut a, &mut b, 1e-3, 10.0, 100, &gm.weights_on(&torus))?;
    let tv = total_variation(&a.histogram(&man.grid, &[0]), &b.histogram(&man.grid, &[0]));
    let target = 2.0 * k.k_beta * 0.7;
    outcome(
        (k.k_beta - 0.8).abs() < 1e-12 && fit.rate >= target && tv < 0.01,
        format!("K = {:.2}, rate {:.3} ≥ {target:.2}, terminal 1-site TV {tv:.2e}", k.k_beta, fit.rate),
    )
}

fn random_sphere_density(man: &Arc<WeightedManifold>, rng: &mut ChaCha8Rng) -> GridDensity {
    let k = 1.0 + 2.0 * rng.random::<f64>();
    let axis = Point::from_spherical((2.0 * rng.random::<f64>() - 1.0).acos(), 2.0 * PI * rng.random::<f64>()).embed();
    let vals = man.sample(|p| {
        let x = p.embed();
        (k * (x[0] * axis[0] + x[1] * axis[1] + x[2] * axis[2])).exp()
    });
    GridDensity::normalized(BoxSpec::segment(0, 1), man.clone(), vals).unwrap()
}

fn c8_displacement_convexity() -> Result<Outcome> {
    let mut detail = Vec::new();
    let mut pass = false;
    for bands in [12, 24] {
        let man = Arc::new(WeightedManifold::build(ManifoldKind::Sphere, bands, Potential::Zero)?);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_sphere_density(&man, &mut rng);
        let q = random_sphere_density(&man, &mut rng);
        let c = displacement_convexity_check(&p, &q, 0.0, &CouplingKernel::zero(1), Psi::Dot, Rebin::Linear)?;
        let ratio = c.gap / c.predicted;
        detail.push(format!("{bands} bands: gap {:.4} vs ⅛κW² {:.4} (ratio {ratio:.3})", c.gap, c.predicted));
        pass = ratio >= 0.8;
    }
    outcome(pass, detail.join("; "))
}

fn c9_stationarization() -> Result<Outcome> {
    let man = Arc::new(WeightedManifold::build(ManifoldKind::Circle, 16, Potential::Zero)?);
    let nodes = man.grid.nodes.clone();
    let f = |x: &[usize]| (nodes[x[0]].angle() - nodes[x[1]].angle()).cos();
    let window = BoxSpec::segment(0, 2);
    let ell = 2.0;
    let mut pts = Vec::new();
    for n in [4usize, 8, 16] {
        let block: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                let tilt = 2.0 * k as f64 / (n - 1) as f64 - 1.0;
                man.sample(|p| (2.0 * tilt * p.angle().cos()).exp())
            })
            .collect();
        let s = stationarize_product(man.clone(), &block, 0)?;
        pts.push((ell / n as f64, s.interior_shift_gap(&window, f)?));
    }
    let (slope, icpt) = least_squares(&pts);
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;

    let coarse = Arc::new(WeightedManifold::build(ManifoldKind::Circle, 8, Potential::Zero)?);
    let corr = GridDensity::from_fn(BoxSpec::segment(0, 2), coarse.clone(), |x| {
        (2.0 * (coarse.grid.nodes[x[0]].angle() - coarse.grid.nodes[x[1]].angle()).cos()).exp()
    })?;
    let check = stationarized_entropy_check(&stationarize(&corr)?, 4, 100_000, 9, 0.05)?;
    outcome(
        slope > 0.0 && r2 >= 0.9 && check.pass,
        format!(
            "local error slope {slope:.3} (R² {r2:.4}); entropy {:.4} ≤ {:.4} + 3·{:.1e}",
            check.lhs, check.rhs, check.std_error
        ),
    )
}

fn c10_semicircle() -> Result<Outcome> {
    let man = Arc::new(WeightedManifold::build(ManifoldKind::Circle, 8, Potential::Zero)?);
    let windows: Vec<BoxSpec> = (1..=4).map(|w| BoxSpec::segment(0, w)).collect();
    let one = BoxSpec::segment(0, 1);
    let mut pass = true;
    let mut detail = Vec::new();
    for n in [2usize, 4, 8] {
        let laws = semicircle_laws(man.clone(), n)?;
        let targets: [(&str, &dyn LocalLaw); 3] = [("P+", &laws.upper), ("P-", &laws.lower), ("P±", &laws.mixture)];
        let mut w = Vec::new();
        for (name, law) in targets {
            let est = specific_wasserstein_curve(&laws.stationary, law, &windows, 0.01)?.estimate();
            pass &= est > 0.1;
            w.push(format!("{name} {est:.3}"));
        }
        let tv = total_variation(
            &laws.stationary.window_density(&one)?.masses(),
            &laws.mixture.window_density(&one)?.masses(),
        );
        pass &= tv < 0.05;
        detail.push(format!("n={n}: W² {} / TV {tv:.1e}", w.join(", ")));
    }
    outcome(pass, detail.join("; "))
}

fn c11_transport_oracles() -> Result<Outcome> {
    let man = Arc::new(WeightedManifold::build(ManifoldKind::Circle, 64, Potential::Zero)?);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut closest = f64::INFINITY;
    for _ in 0..200 {
        // Random von Mises laws: concentration in [0, 3), uniform mean direction.
        let mut draw = || {
            let (k, phase) = (3.0 * rng.random::<f64>(), 2.0 * PI * rng.random::<f64>());
            let vals = man.sample(|p| (k * (p.angle() - phase).cos()).exp());
            GridDensity::normalized(BoxSpec::segment(0, 1), man.clone(), vals).unwrap()
        };
        let (p, q) = (draw(), draw());
        let exact = wasserstein2(&p, &q, Method::Lp)?.cost;
        let approx = wasserstein2(&p, &q, Method::Sinkhorn { eps: 0.01 })?.cost;
        worst = worst.max((approx - exact).abs() / exact);
        closest = closest.min(exact);
    }
    let small = Arc::new(WeightedManifold::build(ManifoldKind::Circle, 16, Potential::Zero)?);
    let windows: Vec<BoxSpec> = (1..=3).map(|w| BoxSpec::segment(0, w)).collect();
    let mut tensor_err: f64 = 0.0;
    let mut superadditive = true;
    let mut monotone = true;
    for _ in 0..5 {
        let mut marginal = || (0..16).map(|_| 0.05 + rng.random::<f64>()).collect::<Vec<f64>>();
        let (a, b) = (ProductLaw::new(small.clone(), marginal()), ProductLaw::new(small.clone(), marginal()));
        let curve = specific_wasserstein_curve(&a, &b, &windows, 0.01)?;
        let w = &curve.w2;
        monotone &= curve.monotone && w.windows(2).all(|x| x[1] >= x[0] - 1e-9);
        superadditive &= w[1] >= 2.0 * w[0] - 1e-9 && w[2] >= w[1] + w[0] - 1e-9;
        tensor_err = tensor_err.max(curve.per_volume.iter().map(|v| (v - w[0]).abs()).fold(0.0, f64::max));
    }
    outcome(
        worst < 0.02 && superadditive && monotone && tensor_err < 1e-9,
        format!("max Sinkhorn relative error {worst:.2e} (smallest exact W² {closest:.1e}); superadditive {superadditive}, monotone {monotone}, tensorization error {tensor_err:.1e}"),
    )
}

fn c12_heat_kernel_bound() -> Result<Outcome> {
    let man = WeightedManifold::build(ManifoldKind::Circle, 64, Potential::Zero)?;
    let fit = man.heat_kernel_bound_fit(&[0.01, 0.05, 0.1, 0.5])?;
    let per_time: Vec<String> = fit.times.iter().zip(&fit.per_time).map(|(t, c)| format!("t={t}: {c:.3e}")).collect();
    let worst = fit
        .worst
        .as_ref()
        .map(|w| format!("worst pair d={:.3} at t={} with g={:.2e}", w.distance, w.t, w.density))
        .unwrap_or_default();
    outcome(fit.constant <= 10.0, format!("C = {:.3e} ({}); {worst}", fit.constant, per_time.join(", ")))
}

type Criterion = (&'static str, &'static str, fn() -> Result<Outcome>);

const CRITERIA: [Criterion; 12] = [
    ("C1", "JKO iterates track the FPK solution", c1_jko_matches_fpk),
    ("C2", "free energy is non-increasing along FPK and JKO", c2_free_energy_monotone),
    ("C3", "Langevin law matches the FPK solution", c3_langevin_matches_fpk),
    ("C4", "finite-volume processes are Cauchy", c4_cauchy_gaps),
    ("C5", "gamma metric: Schur inequality and Lipschitz gradient", c5_gamma_metric),
    ("C6", "integral EVI inequality", c6_evi),
    ("C7", "exponential convergence at high temperature", c7_high_temperature_convergence),
    ("C8", "displacement convexity on the sphere", c8_displacement_convexity),
    ("C9", "stationarization error and entropy inequality", c9_stationarization),
    ("C10", "half-circle laws stay apart in specific W", c10_semicircle),
    ("C11", "Sinkhorn against exact transport, tensorization", c11_transport_oracles),
    ("C12", "Gaussian heat-kernel bound on the circle", c12_heat_kernel_bound),
];

fn main() -> ExitCode {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (id, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.iter().any(|s| s.eq_ignore_ascii_case(id)) {
            continue;
        }
        let start = Instant::now();
        let (status, detail) = match check() {
            Ok(o) => (if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("{id:<4} {status} {name} [{:.1} s]: {detail}", start.elapsed().as_secs_f64());
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
