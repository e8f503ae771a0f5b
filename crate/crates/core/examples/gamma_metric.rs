//! Weighted metric for a long-range coupling and the checks that make the drift contract in it.

use spinflow::geometry::ManifoldKind;
use spinflow::interaction::{BoxSpec, CouplingKernel, Psi};
use spinflow::langevin::{build_gamma, lipschitz_check};

fn main() -> spinflow::Result<()> {
    let j = CouplingKernel::power_law(1, 1.0, 3.0, 32)?;
    let gm = build_gamma(&j, Psi::CosDiff, 0.5, &BoxSpec::cube(1, 48))?;
    println!("c = {:.4}, Neumann terms = {}, operator-norm bound {:.4}", gm.c, gm.terms, gm.op_norm_bound());
    println!("Schur defect: {:.2e}", gm.schur_defect());
    let centre = gm.origin;
    println!("γ near the origin: {:.4?}", &gm.gamma[centre - 3..=centre + 3]);
    let lip = lipschitz_check(&gm, ManifoldKind::Circle, &j, Psi::CosDiff, 500, 1)?;
    println!("largest gradient ratio {:.4} against the bound {:.4}", lip.max_ratio, lip.bound);
    Ok(())
}
