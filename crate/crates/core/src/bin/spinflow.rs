use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spinflow::experiment::{self, Check, Dynamics, Engine, ExperimentConfig, Metric, ModelSpec, OutputSpec};
use spinflow::fpk::Scheme;
use spinflow::geometry::{ManifoldKind, ManifoldSpec, Potential};
use spinflow::interaction::{CouplingSpec, CouplingType, Psi};
use spinflow::jko::InnerSolver;
use spinflow::langevin::InitialLaw;
use spinflow::{plot, Error};

#[derive(Parser)]
#[command(name = "spinflow", version, about = "Gradient flows of lattice spin systems on the circle and the sphere")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    SimulateLangevin {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 1.0)]
        t_end: f64,
        #[arg(long, default_value_t = 10_000)]
        particles: usize,
        #[arg(long, default_value_t = 100)]
        every: usize,
        #[arg(long, value_delimiter = ',', default_value = "cos,energy,magnetization")]
        observables: Vec<String>,
    },
    SolveFpk {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 1.0)]
        t_end: f64,
        #[arg(long, value_enum, default_value_t = SchemeArg::CrankNicolson)]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 100)]
        every: usize,
    },
    RunJko {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-2)]
        h: f64,
        #[arg(long, default_value_t = 1.0)]
        t_end: f64,
        #[arg(long, value_enum, default_value_t = SolverArg::Newton)]
        solver: SolverArg,
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
    /// Check the integral EVI inequality on random reference laws (circle, nearest neighbour).
    EviCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        coarse_resolution: usize,
        #[arg(long, default_value_t = 1.5)]
        initial_tilt: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 0.5)]
        t_end: f64,
        #[arg(long, default_value_t = 50)]
        snapshot_every: usize,
        #[arg(long, default_value_t = 20)]
        triples: usize,
    },
    /// Run two copies from opposite tilts and fit their contraction rate.
    Converge {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = EngineArg::Fpk)]
        engine: EngineArg,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 2.0)]
        t_end: f64,
        /// The two runs start from the tilts `±spread`.
        #[arg(long, default_value_t = 1.5)]
        spread: f64,
        #[arg(long, default_value_t = 100)]
        every: usize,
        #[arg(long, default_value_t = 2000)]
        particles: usize,
    },
    /// Build the γ weights and check the Schur and Lipschitz bounds.
    GammaMetric {
        #[command(flatten)]
        common: Common,
        /// Half-width of the window; η must have mass below 1e-10 outside it.
        #[arg(long, default_value_t = 40)]
        radius: usize,
        #[arg(long, default_value_t = 0.5)]
        eta_ratio: f64,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
    },
    /// Local stationarization error and the entropy inequality.
    StationarizeTest {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "4,6,8,12")]
        block_sizes: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        correlation: f64,
        #[arg(long, default_value_t = 6)]
        window: usize,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
    },
    /// Compare the snapshots of two run directories.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "l1")]
        metric: String,
    },
    /// Chart columns of a CSV file as SVG.
    Plot {
        csv: PathBuf,
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log_y: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum, default_value_t = KindArg::Circle)]
    manifold: KindArg,
    #[arg(long, default_value_t = 16)]
    resolution: usize,
    /// Amplitude of the confining potential `a(1 − cos)`.
    #[arg(long, default_value_t = 0.0)]
    potential: f64,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Torus period.
    #[arg(long, default_value_t = 3)]
    sites: usize,
    #[arg(long, value_enum, default_value_t = CouplingArg::Nn)]
    coupling: CouplingArg,
    #[arg(long = "J", default_value_t = 0.5)]
    j: f64,
    #[arg(long)]
    exponent: Option<f64>,
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// Initial tilt `k` of `e^{k cos θ}`; uniform when zero.
    #[arg(long, default_value_t = 0.0)]
    tilt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Fail if the per-site free energy rises by more than this in one step.
    #[arg(long)]
    monotone_budget: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Circle,
    Sphere,
}

#[derive(Clone, Copy, ValueEnum)]
enum CouplingArg {
    Nn,
    Power,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Explicit,
    Implicit,
    CrankNicolson,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Newton,
    MirrorDescent,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Fpk,
    Langevin,
}

impl Common {
    fn config(&self, name: &str, dynamics: Dynamics) -> ExperimentConfig {
        let kind = match self.manifold {
            KindArg::Circle => ManifoldKind::Circle,
            KindArg::Sphere => ManifoldKind::Sphere,
        };
        let potential = if self.potential == 0.0 { Potential::Zero } else { Potential::OneMinusCos { a: self.potential } };
        let coupling = CouplingSpec {
            kind: match self.coupling {
                CouplingArg::Nn => CouplingType::Nn,
                CouplingArg::Power => CouplingType::Power,
            },
            j: self.j,
            exponent: self.exponent,
            cutoff: self.cutoff,
        };
        ExperimentConfig {
            name: name.to_string(),
            model: ModelSpec {
                manifold: ManifoldSpec { kind, resolution: self.resolution, potential },
                dim: self.dim,
                sites: self.sites,
                coupling,
                psi: if kind == ManifoldKind::Circle { Psi::CosDiff } else { Psi::Dot },
                beta: self.beta,
            },
            dynamics,
            initial: if self.tilt == 0.0 { InitialLaw::Uniform } else { InitialLaw::Tilted { k: self.tilt } },
            checks: self.monotone_budget.map(|budget| Check::FreeEnergyMonotone { budget }).into_iter().collect(),
            outputs: OutputSpec { dir: self.out.clone(), formats: experiment::all_formats() },
            seed: self.seed,
        }
    }
}

fn run_config(cfg: ExperimentConfig) -> Result<i32, Error> {
    let m = experiment::run(&cfg)?;
    for c in &m.checks {
        println!("{:<28} {} {}", c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
    }
    println!("status: {:?}, artifacts in {}", m.status, cfg.outputs.dir.display());
    Ok(m.status.exit_code())
}

fn execute(cmd: Command) -> Result<i32, Error> {
    match cmd {
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                cfg.outputs.dir = out;
            }
            run_config(cfg)
        }
        Command::SimulateLangevin { common, dt, t_end, particles, every, observables } => {
            run_config(common.config("simulate-langevin", Dynamics::Langevin { dt, t_end, particles, every, observables }))
        }
        Command::SolveFpk { common, dt, t_end, scheme, every } => {
            let scheme = match scheme {
                SchemeArg::Explicit => Scheme::Explicit,
                SchemeArg::Implicit => Scheme::Implicit,
                SchemeArg::CrankNicolson => Scheme::CrankNicolson,
            };
            run_config(common.config("solve-fpk", Dynamics::Fpk { dt, t_end, scheme, every }))
        }
        Command::RunJko { common, h, t_end, solver, every } => {
            let solver = match solver {
                SolverArg::Newton => InnerSolver::Newton,
                SolverArg::MirrorDescent => InnerSolver::MirrorDescent,
            };
            run_config(common.config("run-jko", Dynamics::Jko { h, t_end, solver, every }))
        }
        Command::EviCheck { common, coarse_resolution, initial_tilt, dt, t_end, snapshot_every, triples } => {
            let d = Dynamics::Evi {
                coarse_resolution,
                initial_tilt,
                dt,
                t_end,
                snapshot_every,
                triples,
                ot_tolerance: 2e-3,
                quadrature_tolerance: 1e-3,
            };
            run_config(common.config("evi-check", d))
        }
        Command::Converge { common, engine, dt, t_end, spread, every, particles } => {
            let engine = match engine {
                EngineArg::Fpk => Engine::Fpk,
                EngineArg::Langevin => Engine::Langevin,
            };
            run_config(common.config("converge", Dynamics::Converge { engine, dt, t_end, tilt: spread, every, particles }))
        }
        Command::GammaMetric { common, radius, eta_ratio, pairs } => {
            run_config(common.config("gamma-metric", Dynamics::GammaMetric { radius, eta_ratio, pairs }))
        }
        Command::StationarizeTest { common, block_sizes, correlation, window, samples } => {
            run_config(common.config("stationarize-test", Dynamics::Stationarize { block_sizes, correlation, window, samples }))
        }
        Command::Compare { a, b, metric } => {
            let metric: Metric = metric.parse()?;
            let c = experiment::compare(&a, &b, metric)?;
            println!("t,gap");
            for (t, g) in c.times.iter().zip(&c.gaps) {
                println!("{t},{g:.6e}");
            }
            println!("max gap {:.6e}", c.max_gap);
            Ok(0)
        }
        Command::Plot { csv, columns, out, log_y } => {
            plot::plot_csv(&csv, &columns, &out, log_y)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    spinflow::parallel::ensure_pool();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(experiment::exit_code_for(&e) as u8)
        }
    }
}
