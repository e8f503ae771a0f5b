//! Langevin ensemble of a Heisenberg ring, started aligned and relaxing towards equilibrium.

use spinflow::geometry::{ManifoldKind, Potential};
use spinflow::interaction::{BoxSpec, CouplingKernel, Psi};
use spinflow::langevin::{run, Ensemble, InitialLaw, LangevinModel, Observable, SpinSystem};

fn main() -> spinflow::Result<()> {
    spinflow::parallel::ensure_pool();
    let system = SpinSystem {
        kind: ManifoldKind::Sphere,
        potential: Potential::Zero,
        coupling: CouplingKernel::nearest_neighbor(1, 1.0),
        psi: Psi::Dot,
        beta: 1.0,
    };
    let model = LangevinModel::new(system, BoxSpec::torus(1, 8)?)?;
    let init = InitialLaw::Aligned { colatitude: 0.0, longitude: 0.0 };
    let mut ens = Ensemble::sample(ManifoldKind::Sphere, 8, 2000, &init, 11)?;
    let obs = [Observable::Cos, Observable::Magnetization, Observable::Energy];
    let series = run(&model, &mut ens, 1e-3, 2.0, 250, &obs)?;
    println!("{:>6} {:>10} {:>14} {:>10}", "t", "<z>", "magnetization", "energy");
    for (t, m) in series.times.iter().zip(&series.means) {
        println!("{t:>6.2} {:>10.4} {:>14.4} {:>10.4}", m[0], m[1], m[2]);
    }
    println!("largest deviation from the unit sphere: {:.1e}", ens.max_norm_defect());
    Ok(())
}
