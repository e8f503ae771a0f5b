//! Integral evolution variational inequality along a Fokker–Planck run.

use spinflow::evi::{run_evi_experiment, EviExperiment};

fn main() -> spinflow::Result<()> {
    let cfg = EviExperiment { sites: 2, t_end: 0.2, triples: 5, snapshot_every: 20, ..EviExperiment::default() };
    let rep = run_evi_experiment(&cfg)?;
    println!("K_β = {:.3}", rep.k);
    for t in &rep.triples {
        println!(
            "s = {:.3} t = {:.3} slack {:+.4e} budget {:.2e} {}",
            t.fine.s,
            t.fine.t,
            t.fine.slack,
            t.budget,
            if t.pass { "ok" } else { "violated" }
        );
    }
    println!("free energy monotone: {}", rep.monotonicity.pass);
    Ok(())
}
