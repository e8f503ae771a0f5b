//! Squared Wasserstein distance between two laws of a two-site circle system, exactly and entropically.

use std::sync::Arc;

use spinflow::geometry::{ManifoldKind, Potential, WeightedManifold};
use spinflow::interaction::BoxSpec;
use spinflow::measures::GridDensity;
use spinflow::transport::{wasserstein2, Method};

fn main() -> spinflow::Result<()> {
    let man = Arc::new(WeightedManifold::build(ManifoldKind::Circle, 16, Potential::Zero)?);
    let b = BoxSpec::segment(0, 2);
    let tilt = |k: f64, phase: f64| man.normalize_density(&man.sample(|x| (k * (x.angle() - phase).cos()).exp()));
    let p = GridDensity::product(b.clone(), man.clone(), &[tilt(2.0, 0.0), tilt(1.0, 1.0)])?;
    let q = GridDensity::product(b, man.clone(), &[tilt(2.0, 2.0), tilt(0.5, -1.0)])?;

    let exact = wasserstein2(&p, &q, Method::Lp)?;
    println!("network simplex: W² = {:.6} (marginal error {:.1e})", exact.cost, exact.marginal_err);
    for eps in [0.5, 0.1, 0.02] {
        let r = wasserstein2(&p, &q, Method::Sinkhorn { eps })?;
        println!("sinkhorn eps = {eps:<5} W² ≈ {:.6} after {} iterations", r.cost, r.iters);
    }
    Ok(())
}
