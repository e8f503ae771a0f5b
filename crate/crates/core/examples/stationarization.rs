//! Stationarized block laws: specific functionals and the two half-circle product laws.

use std::sync::Arc;

use spinflow::geometry::{ManifoldKind, Potential, WeightedManifold};
use spinflow::interaction::{BoxSpec, CouplingKernel, Psi};
use spinflow::measures::{semicircle_laws, specific_functionals, stationarize_product, LocalLaw};
use spinflow::transport::{wasserstein2, Method};

fn main() -> spinflow::Result<()> {
    let man = Arc::new(WeightedManifold::build(ManifoldKind::Circle, 8, Potential::Zero)?);
    let block: Vec<Vec<f64>> = (0..4).map(|k| man.sample(|x| (0.5 * k as f64 * x.angle().cos()).exp())).collect();
    let s = stationarize_product(man.clone(), &block, 0)?;
    let j = CouplingKernel::nearest_neighbor(1, 0.5);
    let rep = specific_functionals(&s, &[1, 2, 3], 0.5, &j, Psi::CosDiff)?;
    println!("specific entropy {:.5}, energy {:.5}, free energy {:.5}", rep.entropy_per_vol, rep.energy_per_vol, rep.free_energy_per_vol);

    let laws = semicircle_laws(man, 2)?;
    let window = BoxSpec::segment(0, 2);
    let (up, down) = (laws.upper.window_density(&window)?, laws.lower.window_density(&window)?);
    let w2 = wasserstein2(&up, &down, Method::Lp)?.cost / 2.0;
    println!("per-site W² between the upper and lower half-circle laws: {w2:.4}");
    Ok(())
}

