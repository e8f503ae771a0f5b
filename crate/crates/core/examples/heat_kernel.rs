//! Heat semigroup of the discretized circle: spectrum, mass conservation and the Gaussian bound.

use spinflow::geometry::{ManifoldKind, Potential, WeightedManifold};

fn main() -> spinflow::Result<()> {
    let man = WeightedManifold::build(ManifoldKind::Circle, 64, Potential::Zero)?;
    let spec = man.spectrum();
    println!("generator eigenvalues nearest zero: {:.6?}", &spec[..5]);

    let p = man.normalize_density(&man.sample(|x| (2.0 * x.angle().cos()).exp()));
    let q = man.heat_step_vector(0.5, &p)?;
    println!("mass before {:.12}, after {:.12}", man.inner(&p, &vec![1.0; p.len()]), man.inner(&q, &vec![1.0; q.len()]));

    let fit = man.heat_kernel_bound_fit(&[0.1, 0.5, 1.0])?;
    for (t, c) in fit.times.iter().zip(&fit.per_time) {
        println!("t = {t:<4} smallest C with p_t ≤ C t^(-1/2) e^(-d²/4t): {c:.3}");
    }
    Ok(())
}
