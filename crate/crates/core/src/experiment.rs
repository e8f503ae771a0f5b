//! Experiment configuration, orchestration and run artifacts.
//!
//! A run directory contains `config.json`, `manifest.json`, `report.json` and,
//! depending on the dynamics, CSV tables, density snapshots under `snapshots/`
//! (indexed by `snapshots.csv`) and SVG charts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::evi::{self, EviExperiment};
use crate::fpk::{FpkModel, FpkTrajectory, Scheme};
use crate::geometry::{ManifoldKind, ManifoldSpec, Point, WeightedManifold, DENSE_CAP};
use crate::interaction::{convexity_constants, BoxSpec, CouplingKernel, CouplingSpec, CouplingType, Psi};
use crate::jko::{run_scheme, InnerSolver, JkoConfig};
use crate::langevin::{self, Ensemble, InitialLaw, LangevinModel, Observable, SpinSystem};
use crate::measures::{self, hex_digest, GridDensity, StateSpace};
use crate::plot::{self, Series};
use crate::transport::{self, auto_method};

/// Version recorded in every manifest.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub dynamics: Dynamics,
    #[serde(default = "uniform_law")]
    pub initial: InitialLaw,
    #[serde(default)]
    pub checks: Vec<Check>,
    pub outputs: OutputSpec,
    #[serde(default)]
    pub seed: u64,
}

fn uniform_law() -> InitialLaw {
    InitialLaw::Uniform
}

/// Spins on a periodic lattice box `(ℤ/Nℤ)^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub manifold: ManifoldSpec,
    #[serde(default = "one")]
    pub dim: usize,
    /// Torus period in every direction.
    pub sites: usize,
    pub coupling: CouplingSpec,
    pub psi: Psi,
    pub beta: f64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dynamics {
    Fpk {
        dt: f64,
        t_end: f64,
        #[serde(default)]
        scheme: Scheme,
        /// Snapshot stride in steps.
        #[serde(default = "one")]
        every: usize,
    },
    Jko {
        h: f64,
        t_end: f64,
        #[serde(default)]
        solver: InnerSolver,
        #[serde(default = "one")]
        every: usize,
    },
    Langevin {
        dt: f64,
        t_end: f64,
        particles: usize,
        #[serde(default = "one")]
        every: usize,
        #[serde(default)]
        observables: Vec<String>,
    },
    /// JKO and FPK from the same initial law, compared by 1-site marginal L¹ gaps.
    JkoVsFpk {
        h: f64,
        dt: f64,
        t_end: f64,
        times: Vec<f64>,
    },
    Evi {
        #[serde(default = "coarse_default")]
        coarse_resolution: usize,
        #[serde(default = "tilt_default")]
        initial_tilt: f64,
        dt: f64,
        t_end: f64,
        snapshot_every: usize,
        triples: usize,
        #[serde(default = "ot_tol_default")]
        ot_tolerance: f64,
        #[serde(default = "quad_tol_default")]
        quadrature_tolerance: f64,
    },
    /// Two runs from the tilted laws `±tilt`; pass iff they contract at rate `≥ 1.4 K_β`.
    Converge {
        engine: Engine,
        dt: f64,
        t_end: f64,
        tilt: f64,
        #[serde(default = "one")]
        every: usize,
        #[serde(default)]
        particles: usize,
    },
    GammaMetric {
        radius: usize,
        #[serde(default = "eta_default")]
        eta_ratio: f64,
        pairs: usize,
    },
    /// Local stationarization error over block sizes and the entropy inequality on a correlated pair block.
    Stationarize {
        block_sizes: Vec<usize>,
        correlation: f64,
        window: usize,
        samples: usize,
    },
}

fn coarse_default() -> usize {
    8
}
fn tilt_default() -> f64 {
    1.5
}
fn ot_tol_default() -> f64 {
    2e-3
}
fn quad_tol_default() -> f64 {
    1e-3
}
fn eta_default() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Fpk,
    Langevin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    /// Per-site free energy never rises by more than `1e-8 + budget` in one step.
    FreeEnergyMonotone {
        #[serde(default)]
        budget: f64,
    },
    /// Every comparison gap is at most `tol`.
    MaxGap { tol: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Snapshots,
    Svg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    #[serde(default = "all_formats")]
    pub formats: Vec<Format>,
}

pub fn all_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json, Format::Snapshots, Format::Svg]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON form with the output directory blanked.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.outputs.dir = PathBuf::new();
        Ok(hex_digest(serde_json::to_string(&c)?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |m: &str| Err(Error::Schema(m.to_string()));
        let m = &self.model;
        if m.sites == 0 || m.dim == 0 {
            return schema("model.sites and model.dim must be positive");
        }
        if !(m.beta >= 0.0 && m.beta.is_finite()) {
            return schema("model.beta must be a finite non-negative number");
        }
        match (m.manifold.kind, m.psi) {
            (ManifoldKind::Circle, Psi::CosDiff) | (ManifoldKind::Sphere, Psi::Dot) => {}
            _ => return schema("psi must be cos_diff on the circle and dot on the sphere"),
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let ok = match &self.dynamics {
            Dynamics::Fpk { dt, t_end, every, .. } => positive(*dt) && *t_end >= 0.0 && *every > 0,
            Dynamics::Jko { h, t_end, every, .. } => positive(*h) && *t_end >= 0.0 && *every > 0,
            Dynamics::Langevin { dt, t_end, particles, every, observables } => {
                for o in observables {
                    Observable::parse(o).map_err(|e| Error::Schema(e.to_string()))?;
                }
                positive(*dt) && *t_end >= 0.0 && *particles > 0 && *every > 0
            }
            Dynamics::JkoVsFpk { h, dt, t_end, times } => {
                positive(*h) && positive(*dt) && times.iter().all(|t| *t >= 0.0 && t <= t_end)
            }
            Dynamics::Evi { dt, t_end, snapshot_every, triples, .. } => {
                if m.manifold.kind != ManifoldKind::Circle || m.coupling.kind != CouplingType::Nn || m.dim != 1 {
                    return schema("evi runs on a one-dimensional circle torus with nearest-neighbour coupling");
                }
                positive(*dt) && positive(*t_end) && *snapshot_every > 0 && *triples > 0
            }
            Dynamics::Converge { engine, dt, t_end, particles, every, .. } => {
                positive(*dt) && positive(*t_end) && *every > 0 && (*engine == Engine::Fpk || *particles > 0)
            }
            Dynamics::GammaMetric { radius, eta_ratio, .. } => *radius > 0 && *eta_ratio > 0.0 && *eta_ratio < 1.0,
            Dynamics::Stationarize { block_sizes, window, samples, .. } => {
                if m.manifold.kind != ManifoldKind::Circle || m.dim != 1 {
                    return schema("stationarize runs on the circle in one dimension");
                }
                block_sizes.len() >= 2 && block_sizes.iter().all(|n| *n >= 2) && *window >= 2 && *samples > 0
            }
        };
        if !ok {
            return schema("dynamics parameters out of range");
        }
        if self.outputs.dir.as_os_str().is_empty() {
            return schema("outputs.dir must not be empty");
        }
        Ok(())
    }

    fn wants(&self, f: Format) -> bool {
        self.outputs.formats.contains(&f)
    }
}

/// Result of one check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pass,
    ChecksFailed,
    NumericFailure,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Pass => 0,
            RunStatus::ChecksFailed => 1,
            RunStatus::NumericFailure => 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_sha256: String,
    pub code_version: String,
    pub seed: u64,
    pub dynamics: String,
    pub status: RunStatus,
    pub checks: Vec<CheckOutcome>,
    pub artifacts: Vec<String>,
}

/// Exit code for a library error: 2 for schema and argument errors, 3 for numeric failures.
pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Schema(_) | Error::InvalidArgument(_) | Error::Json(_) | Error::GridTooCoarse(_) | Error::StateSpaceTooLarge { .. } => 2,
        Error::NoConvergence(_) | Error::NonFinite(_) | Error::Stability(_) | Error::MissingCollar(_) => 3,
        Error::Io(_) => 4,
    }
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    artifacts: Vec<String>,
    checks: Vec<CheckOutcome>,
    report: BTreeMap<String, Value>,
}

impl RunContext<'_> {
    fn path(&mut self, rel: &str) -> PathBuf {
        self.artifacts.push(rel.to_string());
        self.dir.join(rel)
    }

    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(CheckOutcome { name: name.into(), pass, detail: detail.into() });
    }

    fn write_json(&mut self, rel: &str, v: &impl Serialize) -> Result<()> {
        let p = self.path(rel);
        std::fs::write(p, serde_json::to_string_pretty(v)?)?;
        Ok(())
    }

    fn write_snapshots(&mut self, times: &[f64], densities: &[&GridDensity]) -> Result<()> {
        if !self.cfg.wants(Format::Snapshots) {
            return Ok(());
        }
        std::fs::create_dir_all(self.dir.join("snapshots"))?;
        let mut index = String::from("index,t,stem,sha256\n");
        for (k, (t, d)) in times.iter().zip(densities).enumerate() {
            let stem = format!("snapshots/p{k:05}");
            d.write(&self.dir.join(&stem))?;
            self.artifacts.push(format!("{stem}.bin"));
            self.artifacts.push(format!("{stem}.json"));
            index.push_str(&format!("{k},{t},{stem},{}\n", d.checksum()));
        }
        let p = self.path("snapshots.csv");
        std::fs::write(p, index)?;
        Ok(())
    }

    fn write_chart(&mut self, rel: &str, title: &str, x_label: &str, series: &[Series], log_y: bool) -> Result<()> {
        if !self.cfg.wants(Format::Svg) {
            return Ok(());
        }
        let svg = plot::line_chart(title, x_label, series, log_y)?;
        let p = self.path(rel);
        std::fs::write(p, svg)?;
        Ok(())
    }
}

pub(crate) fn manifold_of(spec: &ModelSpec) -> Result<Arc<WeightedManifold>> {
    Ok(Arc::new(WeightedManifold::from_spec(&spec.manifold)?))
}

fn boxspec_of(spec: &ModelSpec) -> Result<BoxSpec> {
    BoxSpec::torus(spec.dim, spec.sites)
}

fn fpk_model(spec: &ModelSpec) -> Result<FpkModel> {
    let j = CouplingKernel::from_spec(spec.dim, &spec.coupling)?;
    FpkModel::new(boxspec_of(spec)?, manifold_of(spec)?, spec.beta, j, spec.psi)
}

fn spin_system(spec: &ModelSpec) -> Result<SpinSystem> {
    Ok(SpinSystem {
        kind: spec.manifold.kind,
        potential: spec.manifold.potential,
        coupling: CouplingKernel::from_spec(spec.dim, &spec.coupling)?,
        psi: spec.psi,
        beta: spec.beta,
    })
}

/// Grid version of an i.i.d. initial law.
pub fn initial_density(b: &BoxSpec, man: &Arc<WeightedManifold>, law: &InitialLaw) -> Result<GridDensity> {
    let single: Vec<f64> = match *law {
        InitialLaw::Uniform => vec![1.0; man.len()],
        InitialLaw::Tilted { k } => man.sample(|p| match p {
            Point::Angle(t) => (k * t.cos()).exp(),
            Point::Unit(v) => (k * v[2]).exp(),
        }),
        InitialLaw::Aligned { colatitude, longitude } => {
            let target = match man.kind() {
                ManifoldKind::Circle => Point::Angle(longitude),
                ManifoldKind::Sphere => Point::from_spherical(colatitude, longitude),
            };
            let node = man.grid.nearest_node(&target);
            (0..man.len()).map(|a| if a == node { 1.0 } else { 0.0 }).collect()
        }
    };
    let single = man.normalize_density(&single);
    GridDensity::product(b.clone(), man.clone(), &vec![single; b.len()])
}

fn fpk_trajectory_charts(ctx: &mut RunContext, traj: &FpkTrajectory, sites: f64) -> Result<()> {
    let t: Vec<f64> = traj.records.iter().map(|r| r.t).collect();
    let f: Vec<f64> = traj.records.iter().map(|r| r.free_energy / sites).collect();
    ctx.write_chart("free_energy.svg", "free energy per site", "t", &[Series::new("F", t, f)], false)
}

fn monotone_checks(ctx: &mut RunContext, free_energy: &[f64]) {
    for c in ctx.cfg.checks.clone() {
        if let Check::FreeEnergyMonotone { budget } = c {
            let rise = free_energy.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
            ctx.check("free_energy_monotone", rise < 1e-8 + budget, format!("max rise {rise:.3e}"));
        }
    }
}

fn gap_checks(ctx: &mut RunContext, gaps: &[f64]) {
    for c in ctx.cfg.checks.clone() {
        if let Check::MaxGap { tol } = c {
            let worst = gaps.iter().copied().fold(0.0, f64::max);
            ctx.check("max_gap", worst <= tol, format!("largest gap {worst:.3e} vs {tol:.1e}"));
        }
    }
}

fn run_fpk(ctx: &mut RunContext, dt: f64, t_end: f64, scheme: Scheme, every: usize) -> Result<()> {
    let model = fpk_model(&ctx.cfg.model)?;
    let p0 = initial_density(&model.boxspec, &model.manifold, &ctx.cfg.initial)?;
    let traj = model.run(&p0, dt, t_end, scheme, every)?;
    let v = model.boxspec.len() as f64;
    if ctx.cfg.wants(Format::Csv) {
        let p = ctx.path("trajectory.csv");
        traj.write_csv(&p)?;
    }
    let snaps: Vec<&GridDensity> = traj.snapshots.iter().collect();
    ctx.write_snapshots(&traj.times, &snaps)?;
    fpk_trajectory_charts(ctx, &traj, v)?;
    let f: Vec<f64> = traj.records.iter().map(|r| r.free_energy / v).collect();
    monotone_checks(ctx, &f);
    let rep = evi::monotonicity_report(&model, &traj, 0.0);
    ctx.report.insert("max_free_energy_increase".into(), json!(rep.max_increase));
    ctx.report.insert("final_free_energy_per_site".into(), json!(f.last()));
    ctx.report.insert("clipped_mass".into(), json!(traj.clipped_mass()));
    Ok(())
}

fn run_jko(ctx: &mut RunContext, h: f64, t_end: f64, solver: InnerSolver, every: usize) -> Result<()> {
    let model = fpk_model(&ctx.cfg.model)?;
    let p0 = initial_density(&model.boxspec, &model.manifold, &ctx.cfg.initial)?;
    let cfg = JkoConfig { solver, ..JkoConfig::new(h) };
    let traj = run_scheme(&model, &p0, &cfg, t_end)?;
    if ctx.cfg.wants(Format::Csv) {
        let p = ctx.path("trajectory.csv");
        traj.write_csv(&model, &p)?;
    }
    let mut times = vec![0.0];
    let mut snaps = vec![&traj.initial];
    for (k, it) in traj.iterates.iter().enumerate() {
        if (k + 1) % every == 0 {
            times.push(it.t);
            snaps.push(&it.stationary);
        }
    }
    ctx.write_snapshots(&times, &snaps)?;
    let f = traj.free_energies();
    let t: Vec<f64> = (0..f.len()).map(|k| k as f64 * h).collect();
    ctx.write_chart("free_energy.svg", "free energy per site", "t", &[Series::new("F", t, f.clone())], false)?;
    monotone_checks(ctx, &f);
    ctx.check("a_priori_bounds", traj.a_priori_bound_holds(), format!("summed W²/h per site {:.4e}", traj.summed_w2()));
    ctx.report.insert("max_free_energy_increase".into(), json!(traj.max_free_energy_increase()));
    ctx.report.insert("summed_w2".into(), json!(traj.summed_w2()));
    Ok(())
}

fn run_langevin(ctx: &mut RunContext, dt: f64, t_end: f64, particles: usize, every: usize, observables: &[String]) -> Result<()> {
    let spec = &ctx.cfg.model;
    let b = boxspec_of(spec)?;
    let model = LangevinModel::new(spin_system(spec)?, b.clone())?;
    let obs: Vec<Observable> = observables.iter().map(|o| Observable::parse(o)).collect::<Result<_>>()?;
    let mut ens = Ensemble::sample(spec.manifold.kind, b.len(), particles, &ctx.cfg.initial, ctx.cfg.seed)?;
    let steps = langevin::step_count(t_end, dt)?;
    let man = manifold_of(spec)?;
    let joint = StateSpace::new(man.len(), b.len()).map(|s| s.len() <= DENSE_CAP).unwrap_or(false);
    let positions: Vec<usize> = (0..b.len()).collect();
    let mut times = Vec::new();
    let mut hists = Vec::new();
    let record = |ens: &Ensemble, times: &mut Vec<f64>, hists: &mut Vec<GridDensity>| -> Result<()> {
        if joint {
            times.push(ens.time);
            hists.push(GridDensity::from_masses(b.clone(), man.clone(), &ens.histogram(&man.grid, &positions))?);
        }
        Ok(())
    };
    record(&ens, &mut times, &mut hists)?;
    let mut series = langevin::ObservableSeries { names: obs.iter().map(|o| o.name().to_string()).collect(), ..Default::default() };
    series.record(&model, &ens, &obs);
    for k in 1..=steps {
        langevin::langevin_step(&model, &mut ens, dt)?;
        if k % every as u64 == 0 || k == steps {
            series.record(&model, &ens, &obs);
            record(&ens, &mut times, &mut hists)?;
        }
    }
    if ctx.cfg.wants(Format::Csv) && !obs.is_empty() {
        let p = ctx.path("observables.csv");
        series.write_csv(&p)?;
    }
    let refs: Vec<&GridDensity> = hists.iter().collect();
    ctx.write_snapshots(&times, &refs)?;
    if ctx.cfg.wants(Format::Snapshots) {
        let p = ctx.path("ensemble.bin");
        ens.write_snapshot(&p)?;
    }
    let charts: Vec<Series> = obs
        .iter()
        .enumerate()
        .map(|(k, o)| Series::new(o.name(), series.times.clone(), series.means.iter().map(|m| m[k]).collect()))
        .collect();
    if !charts.is_empty() {
        ctx.write_chart("observables.svg", "ensemble means", "t", &charts, false)?;
    }
    ctx.report.insert("max_norm_defect".into(), json!(ens.max_norm_defect()));
    ctx.report.insert("final_time".into(), json!(ens.time));
    Ok(())
}

fn marginal_l1(a: &GridDensity, b: &GridDensity) -> f64 {
    let (ma, mb) = (a.marginal_masses(&[0]), b.marginal_masses(&[0]));
    ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum()
}

fn run_jko_vs_fpk(ctx: &mut RunContext, h: f64, dt: f64, t_end: f64, times: &[f64]) -> Result<()> {
    let model = fpk_model(&ctx.cfg.model)?;
    let p0 = initial_density(&model.boxspec, &model.manifold, &ctx.cfg.initial)?;
    let every = ((h / dt).round() as usize).max(1);
    let fpk = model.run(&p0, dt, t_end, Scheme::CrankNicolson, every)?;
    let jko = run_scheme(&model, &p0, &JkoConfig::new(h), t_end)?;
    let mut gaps = Vec::new();
    let mut table = String::from("t,l1_gap\n");
    for &t in times {
        let g = marginal_l1(jko.at(t), fpk.at(t)?);
        table.push_str(&format!("{t},{g}\n"));
        gaps.push(g);
    }
    if ctx.cfg.wants(Format::Csv) {
        let p = ctx.path("comparison.csv");
        std::fs::write(p, table)?;
    }
    ctx.write_chart("comparison.svg", "1-site marginal L1 gap", "t", &[Series::new("JKO vs FPK", times.to_vec(), gaps.clone())], false)?;
    gap_checks(ctx, &gaps);
    ctx.report.insert("times".into(), json!(times));
    ctx.report.insert("l1_gaps".into(), json!(gaps));
    Ok(())
}

fn run_evi(ctx: &mut RunContext, exp: EviExperiment) -> Result<()> {
    let rep = evi::run_evi_experiment(&exp)?;
    let slack: Vec<f64> = rep.triples.iter().map(|t| t.fine.slack).collect();
    let budget: Vec<f64> = rep.triples.iter().map(|t| -t.budget).collect();
    let idx: Vec<f64> = (0..slack.len()).map(|k| k as f64).collect();
    ctx.write_chart(
        "evi_slack.svg",
        "EVI slack per triple",
        "triple",
        &[Series::new("slack", idx.clone(), slack), Series::new("-budget", idx, budget)],
        false,
    )?;
    if ctx.cfg.wants(Format::Csv) {
        let mut table = String::from("s,t,slack,budget,quadrature_error,grid_budget,w2_s,w2_t,free_energy_r\n");
        for t in &rep.triples {
            table.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                t.fine.s, t.fine.t, t.fine.slack, t.budget, t.fine.quadrature_error, t.grid_budget, t.fine.w2_s, t.fine.w2_t, t.fine.free_energy_r
            ));
        }
        let p = ctx.path("evi.csv");
        std::fs::write(p, table)?;
    }
    ctx.check("evi_integral_inequality", rep.pass, format!("K = {:.4}, {} triples", rep.k, rep.triples.len()));
    ctx.check("free_energy_monotone", rep.monotonicity.pass, format!("max rise {:.3e}", rep.monotonicity.max_increase));
    ctx.report.insert("evi".into(), serde_json::to_value(&rep)?);
    Ok(())
}

fn run_converge(ctx: &mut RunContext, engine: Engine, dt: f64, t_end: f64, tilt: f64, every: usize, particles: usize) -> Result<()> {
    let spec = ctx.cfg.model.clone();
    let man = manifold_of(&spec)?;
    let j = CouplingKernel::from_spec(spec.dim, &spec.coupling)?;
    let k = convexity_constants(man.kappa, spec.beta, j.l1_norm(), spec.psi.sup(), spec.psi.sup_d2()).k_beta;
    let rep = match engine {
        Engine::Fpk => {
            let model = fpk_model(&spec)?;
            let a = initial_density(&model.boxspec, &man, &InitialLaw::Tilted { k: tilt })?;
            let b = initial_density(&model.boxspec, &man, &InitialLaw::Tilted { k: -tilt })?;
            let ta = model.run(&a, dt, t_end, Scheme::CrankNicolson, every)?;
            let tb = model.run(&b, dt, t_end, Scheme::CrankNicolson, every)?;
            evi::convergence_fpk(&model, &ta, &tb, auto_method(model.len(), 0.01))?
        }
        Engine::Langevin => {
            let b = boxspec_of(&spec)?;
            let model = LangevinModel::new(spin_system(&spec)?, b.clone())?;
            let weights = if spec.dim == 1 {
                langevin::build_gamma(&j, spec.psi, eta_default(), &b)?.weights_on(&b)
            } else {
                vec![1.0 / b.len() as f64; b.len()]
            };
            let mut ea = Ensemble::sample(spec.manifold.kind, b.len(), particles, &InitialLaw::Tilted { k: tilt }, ctx.cfg.seed)?;
            let mut eb = Ensemble::sample(spec.manifold.kind, b.len(), particles, &InitialLaw::Tilted { k: -tilt }, ctx.cfg.seed + 1)?;
            evi::convergence_langevin(&model, &mut ea, &mut eb, dt, t_end, every as u64, &weights, &man.grid, k)?
        }
    };
    ctx.write_chart("gap.svg", "gap between the two runs", "t", &[Series::new("gap", rep.times.clone(), rep.gaps.clone())], true)?;
    if ctx.cfg.wants(Format::Csv) {
        let mut table = String::from("t,gap\n");
        for (t, g) in rep.times.iter().zip(&rep.gaps) {
            table.push_str(&format!("{t},{g}\n"));
        }
        let p = ctx.path("gap.csv");
        std::fs::write(p, table)?;
    }
    let detail = if k > 0.0 {
        format!("K = {k:.3}, rate {:.3}, terminal gap {:.3e}, terminal TV {:.3e}", rep.rate, rep.terminal_gap, rep.terminal_tv)
    } else {
        format!("K = {k:.3} ≤ 0: convergence is not asserted")
    };
    ctx.check("exponential_convergence", rep.pass, detail);
    ctx.report.insert("convergence".into(), serde_json::to_value(&rep)?);
    Ok(())
}

fn run_gamma(ctx: &mut RunContext, radius: usize, eta_ratio: f64, pairs: usize) -> Result<()> {
    let spec = &ctx.cfg.model;
    let j = CouplingKernel::from_spec(spec.dim, &spec.coupling)?;
    let window = BoxSpec::cube(spec.dim, radius);
    let gm = langevin::build_gamma(&j, spec.psi, eta_ratio, &window)?;
    let defect = gm.schur_defect();
    let lip = langevin::lipschitz_check(&gm, spec.manifold.kind, &j, spec.psi, pairs, ctx.cfg.seed)?;
    ctx.check("schur_inequality", defect <= 1e-9, format!("defect {defect:.3e}, c = {:.4}", gm.c));
    ctx.check("lipschitz_gradient", lip.max_ratio <= lip.bound, format!("ratio {:.4} vs bound {:.4}", lip.max_ratio, lip.bound));
    if ctx.cfg.wants(Format::Csv) {
        let mut table = String::from("site,gamma\n");
        for (s, g) in gm.window.sites.iter().zip(&gm.gamma) {
            let label: Vec<String> = s.iter().map(|c| c.to_string()).collect();
            table.push_str(&format!("{},{g}\n", label.join(" ")));
        }
        let p = ctx.path("gamma.csv");
        std::fs::write(p, table)?;
    }
    ctx.report.insert("c".into(), json!(gm.c));
    ctx.report.insert("schur_defect".into(), json!(defect));
    ctx.report.insert("op_norm_bound".into(), json!(gm.op_norm_bound()));
    ctx.report.insert("lipschitz".into(), serde_json::to_value(&lip)?);
    Ok(())
}

fn run_stationarize(ctx: &mut RunContext, block_sizes: &[usize], correlation: f64, window: usize, samples: usize) -> Result<()> {
    let man = manifold_of(&ctx.cfg.model)?;
    let nodes = man.grid.nodes.clone();
    let f = |x: &[usize]| (nodes[x[0]].angle() - nodes[x[1]].angle()).cos();
    let pair = BoxSpec::segment(0, 2);
    let mut pts = Vec::new();
    for &n in block_sizes {
        let block: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                let tilt = 2.0 * k as f64 / (n - 1) as f64 - 1.0;
                man.sample(|p| (2.0 * tilt * p.angle().cos()).exp())
            })
            .collect();
        let s = measures::stationarize_product(man.clone(), &block, 0)?;
        pts.push((2.0 / n as f64, s.interior_shift_gap(&pair, f)?));
    }
    let (slope, icpt) = langevin::least_squares(&pts);
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    ctx.check("local_error_scaling", slope > 0.0 && r2 >= 0.9, format!("slope {slope:.4}, R² {r2:.4}"));
    let corr = GridDensity::from_fn(BoxSpec::segment(0, 2), man.clone(), |x| {
        (correlation * (man.grid.nodes[x[0]].angle() - man.grid.nodes[x[1]].angle()).cos()).exp()
    })?;
    let check = measures::stationarized_entropy_check(&measures::stationarize(&corr)?, window, samples, ctx.cfg.seed, 0.05)?;
    ctx.check(
        "entropy_inequality",
        check.pass,
        format!("{:.5} ≤ {:.5} + 3·{:.2e}", check.lhs, check.rhs, check.std_error),
    );
    ctx.report.insert("local_errors".into(), json!(pts));
    ctx.report.insert("entropy_check".into(), serde_json::to_value(check)?);
    Ok(())
}

fn dynamics_name(d: &Dynamics) -> &'static str {
    match d {
        Dynamics::Fpk { .. } => "fpk",
        Dynamics::Jko { .. } => "jko",
        Dynamics::Langevin { .. } => "langevin",
        Dynamics::JkoVsFpk { .. } => "jko_vs_fpk",
        Dynamics::Evi { .. } => "evi",
        Dynamics::Converge { .. } => "converge",
        Dynamics::GammaMetric { .. } => "gamma_metric",
        Dynamics::Stationarize { .. } => "stationarize",
    }
}

fn dispatch(ctx: &mut RunContext) -> Result<()> {
    let spec = ctx.cfg.model.clone();
    match ctx.cfg.dynamics.clone() {
        Dynamics::Fpk { dt, t_end, scheme, every } => run_fpk(ctx, dt, t_end, scheme, every),
        Dynamics::Jko { h, t_end, solver, every } => run_jko(ctx, h, t_end, solver, every),
        Dynamics::Langevin { dt, t_end, particles, every, observables } => {
            run_langevin(ctx, dt, t_end, particles, every, &observables)
        }
        Dynamics::JkoVsFpk { h, dt, t_end, times } => run_jko_vs_fpk(ctx, h, dt, t_end, &times),
        Dynamics::Evi { coarse_resolution, initial_tilt, dt, t_end, snapshot_every, triples, ot_tolerance, quadrature_tolerance } => {
            let exp = EviExperiment {
                sites: spec.sites,
                resolution: spec.manifold.resolution,
                coarse_resolution,
                beta: spec.beta,
                coupling: spec.coupling.j,
                initial_tilt,
                dt,
                t_end,
                snapshot_every,
                triples,
                seed: ctx.cfg.seed,
                ot_tolerance,
                quadrature_tolerance,
            };
            run_evi(ctx, exp)
        }
        Dynamics::Converge { engine, dt, t_end, tilt, every, particles } => {
            run_converge(ctx, engine, dt, t_end, tilt, every, particles)
        }
        Dynamics::GammaMetric { radius, eta_ratio, pairs } => run_gamma(ctx, radius, eta_ratio, pairs),
        Dynamics::Stationarize { block_sizes, correlation, window, samples } => {
            run_stationarize(ctx, &block_sizes, correlation, window, samples)
        }
    }
}

/// Run an experiment and write its artifacts; numeric failures still produce a report.
pub fn run(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = cfg.outputs.dir.clone();
    std::fs::create_dir_all(&dir)?;
    let mut ctx = RunContext { cfg, dir, artifacts: Vec::new(), checks: Vec::new(), report: BTreeMap::new() };
    ctx.write_json("config.json", cfg)?;
    let status = match dispatch(&mut ctx) {
        Ok(()) if ctx.checks.iter().all(|c| c.pass) => RunStatus::Pass,
        Ok(()) => RunStatus::ChecksFailed,
        Err(e) if exit_code_for(&e) == 3 => {
            ctx.report.insert("error".into(), json!(e.to_string()));
            RunStatus::NumericFailure
        }
        Err(e) => return Err(e),
    };
    ctx.report.insert("checks".into(), serde_json::to_value(&ctx.checks)?);
    let report = std::mem::take(&mut ctx.report);
    if cfg.wants(Format::Json) || status == RunStatus::NumericFailure {
        ctx.write_json("report.json", &report)?;
    }
    ctx.artifacts.push("manifest.json".into());
    ctx.artifacts.sort();
    let manifest = Manifest {
        name: cfg.name.clone(),
        config_sha256: cfg.hash()?,
        code_version: CODE_VERSION.into(),
        seed: cfg.seed,
        dynamics: dynamics_name(&cfg.dynamics).into(),
        status,
        checks: ctx.checks.clone(),
        artifacts: ctx.artifacts.clone(),
    };
    std::fs::write(ctx.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L1,
    Tv,
    W2,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Metric::L1),
            "tv" => Ok(Metric::Tv),
            "w2" => Ok(Metric::W2),
            other => Err(Error::Schema(format!("unknown metric {other}; expected l1, tv or w2"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: Metric,
    pub times: Vec<f64>,
    pub gaps: Vec<f64>,
    pub max_gap: f64,
}

/// `(t, stem)` rows of a run's snapshot index.
pub fn snapshot_index(dir: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let mut rdr = csv::Reader::from_path(dir.join("snapshots.csv")).map_err(|e| Error::Schema(e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Schema(e.to_string()))?;
        let t: f64 = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Schema("bad time column".into()))?;
        let stem = rec.get(2).ok_or_else(|| Error::Schema("missing stem column".into()))?;
        out.push((t, dir.join(stem)));
    }
    Ok(out)
}

/// Snapshot-by-snapshot distances between two runs on a common time grid.
pub fn compare(a: &Path, b: &Path, metric: Metric) -> Result<Comparison> {
    let (ia, ib) = (snapshot_index(a)?, snapshot_index(b)?);
    if ia.len() != ib.len() || ia.iter().zip(&ib).any(|(x, y)| (x.0 - y.0).abs() > 1e-9 * (1.0 + x.0.abs())) {
        return Err(Error::Schema("runs have misaligned time grids".into()));
    }
    let mut cmp = Comparison { metric, times: Vec::new(), gaps: Vec::new(), max_gap: 0.0 };
    for ((t, sa), (_, sb)) in ia.iter().zip(&ib) {
        let (pa, pb) = (GridDensity::read(sa)?, GridDensity::read(sb)?);
        if pa.boxspec != pb.boxspec || pa.manifold.spec() != pb.manifold.spec() {
            return Err(Error::Schema(format!("snapshots at t = {t} live on different grids")));
        }
        let g = match metric {
            Metric::L1 => pa.l1_distance(&pb),
            Metric::Tv => 0.5 * pa.l1_distance(&pb),
            Metric::W2 => {
                if pa.values == pb.values {
                    0.0
                } else {
                    transport::wasserstein2(&pa, &pb, auto_method(pa.len(), 0.01))?.cost / pa.boxspec.len() as f64
                }
            }
        };
        cmp.times.push(*t);
        cmp.gaps.push(g);
        cmp.max_gap = cmp.max_gap.max(g);
    }
    Ok(cmp)
}
