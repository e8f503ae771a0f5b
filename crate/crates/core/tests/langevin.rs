use std::sync::Arc;

use spinflow::fpk::{FpkModel, Scheme};
use spinflow::geometry::{ManifoldKind, Potential, WeightedManifold};
use spinflow::interaction::{BoxSpec, CouplingKernel, Psi};
use spinflow::langevin::*;
use spinflow::measures::GridDensity;

fn circle(potential: Potential, beta: f64) -> SpinSystem {
    SpinSystem {
        kind: ManifoldKind::Circle,
        potential,
        coupling: CouplingKernel::nearest_neighbor(1, 0.5),
        psi: Psi::CosDiff,
        beta,
    }
}

#[test]
fn single_site_long_run_matches_reference_measure() {
    let potential = Potential::OneMinusCos { a: 1.0 };
    let man = WeightedManifold::build(ManifoldKind::Circle, 16, potential).unwrap();
    let model = LangevinModel::new(circle(potential, 0.0), BoxSpec::torus(1, 1).unwrap()).unwrap();
    let mut ens = Ensemble::sample(ManifoldKind::Circle, 1, 50_000, &InitialLaw::Uniform, 21).unwrap();
    run(&model, &mut ens, 5e-3, 10.0, 1000, &[]).unwrap();
    let tv = total_variation(&ens.histogram(&man.grid, &[0]), &man.omega);
    assert!(tv < 0.02, "TV to omega {tv}");
}

#[test]
fn two_site_marginal_matches_fokker_planck() {
    let b = BoxSpec::torus(1, 2).unwrap();
    let man = Arc::new(WeightedManifold::build(ManifoldKind::Circle, 16, Potential::Zero).unwrap());
    let fpk = FpkModel::new(b.clone(), man.clone(), 0.5, CouplingKernel::nearest_neighbor(1, 0.5), Psi::CosDiff).unwrap();
    let tilt: Vec<f64> = man.grid.nodes.iter().map(|x| (1.5 * x.angle().cos()).exp()).collect();
    let p0 = GridDensity::from_fn(b.clone(), man.clone(), |s| s.iter().map(|&a| tilt[a]).product()).unwrap();
    let traj = fpk.run(&p0, 1e-3, 1.0, Scheme::CrankNicolson, 100).unwrap();
    let reference = traj.at(1.0).unwrap().marginal(&[0]).unwrap().masses();

    let model = LangevinModel::new(circle(Potential::Zero, 0.5), b).unwrap();
    let mut ens = Ensemble::sample(ManifoldKind::Circle, 2, 50_000, &InitialLaw::Tilted { k: 1.5 }, 5).unwrap();
    run(&model, &mut ens, 1e-3, 1.0, 1000, &[]).unwrap();
    let tv = total_variation(&ens.histogram(&man.grid, &[0]), &reference);
    assert!(tv < 0.02, "TV to FPK {tv}");
}

#[test]
fn gibbs_measure_is_invariant_within_statistical_error() {
    let system = circle(Potential::OneMinusCos { a: 0.5 }, 0.5);
    let model = LangevinModel::new(system, BoxSpec::torus(1, 3).unwrap()).unwrap();
    let mut ens = gibbs_ensemble(&model, 4000, 200, 13).unwrap();
    let obs = [Observable::Cos, Observable::Energy];
    let series = run(&model, &mut ens, 2e-3, 10.0, 5000, &obs).unwrap();
    let last = series.times.len() - 1;
    for k in 0..obs.len() {
        let drift = series.means[last][k] - series.means[0][k];
        let se = series.stderrs[last][k].hypot(series.stderrs[0][k]);
        assert!(drift.abs() < 3.0 * se, "{}: drift {drift} vs se {se}", series.names[k]);
    }
}

#[test]
fn free_sphere_contracts_at_rate_two() {
    let system = SpinSystem {
        kind: ManifoldKind::Sphere,
        potential: Potential::Zero,
        coupling: CouplingKernel::zero(1),
        psi: Psi::Dot,
        beta: 0.0,
    };
    let model = LangevinModel::new(system, BoxSpec::torus(1, 1).unwrap()).unwrap();
    let mut a = Ensemble::sample(ManifoldKind::Sphere, 1, 2000, &InitialLaw::Tilted { k: 3.0 }, 1).unwrap();
    let mut b = Ensemble::sample(ManifoldKind::Sphere, 1, 2000, &InitialLaw::Tilted { k: -3.0 }, 2).unwrap();
    let fit = synchronous_contraction(&model, &mut a, &mut b, 1e-3, 6.0, 100, &[1.0]).unwrap();
    assert!((fit.rate - 2.0).abs() < 0.3, "rate {}", fit.rate);
}

#[test]
fn nearest_neighbor_cauchy_gaps_decrease() {
    let j = CouplingKernel::nearest_neighbor(1, 0.5);
    let gm = build_gamma(&j, Psi::CosDiff, 0.5, &BoxSpec::cube(1, 40)).unwrap();
    let setup = CauchySetup {
        radii: vec![2, 4, 8],
        outer_radius: 16,
        t_end: 1.0,
        dt: 1e-3,
        particles: 1000,
        seed: 17,
        init: InitialLaw::Uniform,
    };
    let gaps = coupled_cauchy_gap(&circle(Potential::Zero, 0.5), &setup, &gm).unwrap();
    assert!(gaps[0].mean > gaps[1].mean && gaps[1].mean > gaps[2].mean, "{gaps:?}");
    assert!(gaps[2].mean < gaps[0].mean / 10.0);
}

#[test]
fn free_cosine_decays_like_the_heat_semigroup() {
    let model = LangevinModel::new(circle(Potential::Zero, 0.0), BoxSpec::torus(1, 1).unwrap()).unwrap();
    let ens = Ensemble::sample(ManifoldKind::Circle, 1, 20_000, &InitialLaw::Uniform, 3).unwrap();
    let lag = 0.5;
    let r = martingale_residual(&model, &ens, &LocalFn::Cos { site: 0 }, lag, 1e-3, 6).unwrap();
    // Slope standard error: residual variance (1 − e^{−2lag})/2 over N·Var(cos θ) = N/2.
    let se = ((1.0 - (-2.0 * lag).exp()) / 2.0 / (20_000.0 / 2.0)).sqrt();
    assert!((r.slope - (-lag).exp()).abs() < 3.0 * se, "slope {} vs {}", r.slope, (-lag).exp());
    assert!(r.mean.abs() < 3.0 * r.stderr);
}

#[test]
fn interacting_martingale_increment_is_centred() {
    let model = LangevinModel::new(circle(Potential::OneMinusCos { a: 0.5 }, 0.5), BoxSpec::torus(1, 3).unwrap()).unwrap();
    let ens = Ensemble::sample(ManifoldKind::Circle, 3, 20_000, &InitialLaw::Tilted { k: 1.0 }, 4).unwrap();
    let r = martingale_residual(&model, &ens, &LocalFn::Cos { site: 1 }, 0.3, 1e-3, 4).unwrap();
    assert!(r.mean.abs() < 3.0 * r.stderr, "{r:?}");
    assert!(r.max_z < 3.0, "{r:?}");
}
