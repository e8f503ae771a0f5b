//! Evolution variational inequality checks, free-energy monotonicity,
//! contraction experiments and midpoint convexity of the free energy.
//!
//! All quantities are per volume: box free energies and squared transport
//! costs are divided by the number of sites.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fpk::{FpkModel, FpkTrajectory, Scheme};
use crate::geometry::{ManifoldGrid, ManifoldKind, Potential, WeightedManifold};
use crate::interaction::{convexity_constants, BoxSpec, CouplingKernel, Psi};
use crate::langevin::{self, Ensemble, LangevinModel};
use crate::measures::GridDensity;
use crate::transport::{displacement_interpolate, wasserstein2, Method, Rebin, TransportResult};

/// `K_β = κ − 2β‖J‖₁‖Ψ‖∞` for the model's manifold and interaction.
pub fn k_beta(model: &FpkModel) -> f64 {
    convexity_constants(model.manifold.kappa, model.beta, model.coupling.l1_norm(), model.psi.sup(), model.psi.sup_d2()).k_beta
}

/// One evaluation of the integral inequality on `[s, t]` against a reference law `R`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EviSlack {
    pub s: f64,
    pub t: f64,
    pub k: f64,
    /// `∫ e^{Ku} F(P(u)) du + ½e^{Kt}W²(P(t),R) − ½e^{Ks}W²(P(s),R)`.
    pub lhs: f64,
    /// `(∫ e^{Ku} du) F(R)`.
    pub rhs: f64,
    pub slack: f64,
    pub w2_s: f64,
    pub w2_t: f64,
    pub free_energy_r: f64,
    /// Richardson estimate of the time-quadrature error.
    pub quadrature_error: f64,
    /// Bound on the error of the two transport costs as they enter the slack.
    pub ot_error: f64,
}

/// Per-volume free energy `(E + β⟨H⟩)/|Λ|` of a box density under the model's interaction.
pub fn free_energy_per_site(model: &FpkModel, p: &GridDensity) -> f64 {
    model.functionals(p).0 / model.boxspec.len() as f64
}

/// Per-volume `W²` between two box densities.
pub fn w2_per_site(p: &GridDensity, q: &GridDensity, method: Method) -> Result<TransportResult> {
    let mut r = wasserstein2(p, q, method)?;
    let v = p.boxspec.len() as f64;
    r.cost /= v;
    r.lower /= v;
    r.upper /= v;
    Ok(r)
}

fn transport_error(r: &TransportResult) -> f64 {
    match r.method {
        Method::Lp => 0.0,
        Method::Sinkhorn { .. } => (r.upper - r.lower).max(0.0),
    }
}

fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times.windows(2).zip(values.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

/// Slack (RHS − LHS) of the integral EVI along an FPK trajectory.
///
/// `s` and `t` must be snapshot times of `traj`; `F(P(u))` is integrated from the per-step records.
pub fn evi_integral_residual(
    model: &FpkModel,
    traj: &FpkTrajectory,
    r: &GridDensity,
    k: f64,
    s: f64,
    t: f64,
    method: Method,
) -> Result<EviSlack> {
    if !(s <= t) {
        return invalid("EVI needs s ≤ t");
    }
    let v = model.boxspec.len() as f64;
    let f_r = free_energy_per_site(model, r);
    if !f_r.is_finite() {
        return invalid("reference law has infinite free energy");
    }
    let ws = w2_per_site(traj.at(s)?, r, method)?;
    let wt = w2_per_site(traj.at(t)?, r, method)?;
    let rec: Vec<_> = traj.records.iter().filter(|x| x.t >= s - 0.5 * traj.dt && x.t <= t + 0.5 * traj.dt).collect();
    let times: Vec<f64> = rec.iter().map(|x| x.t).collect();
    let weighted: Vec<f64> = rec.iter().map(|x| (k * x.t).exp() * x.free_energy / v).collect();
    let integral = trapezoid(&times, &weighted);
    let quadrature_error = if rec.len() >= 5 && (rec.len() - 1) % 2 == 0 {
        let ct: Vec<f64> = times.iter().step_by(2).copied().collect();
        let cv: Vec<f64> = weighted.iter().step_by(2).copied().collect();
        (trapezoid(&ct, &cv) - integral).abs() / 3.0
    } else if rec.len() >= 3 {
        let n = rec.len() - 1;
        let ct: Vec<f64> = times[..n].iter().step_by(2).copied().collect();
        let cv: Vec<f64> = weighted[..n].iter().step_by(2).copied().collect();
        (trapezoid(&ct, &cv) - trapezoid(&times[..n], &weighted[..n])).abs() / 3.0
    } else {
        0.0
    };
    let exp_integral = if k == 0.0 { t - s } else { ((k * t).exp() - (k * s).exp()) / k };
    let lhs = integral + 0.5 * (k * t).exp() * wt.cost - 0.5 * (k * s).exp() * ws.cost;
    let rhs = exp_integral * f_r;
    let ot_error = 0.5 * (k * t).exp() * transport_error(&wt) + 0.5 * (k * s).exp() * transport_error(&ws);
    Ok(EviSlack {
        s,
        t,
        k,
        lhs,
        rhs,
        slack: rhs - lhs,
        w2_s: ws.cost,
        w2_t: wt.cost,
        free_energy_r: f_r,
        quadrature_error,
        ot_error,
    })
}

/// Random `(s, t, R)` triples along an FPK run of a nearest-neighbour circle torus, each
/// checked at two grid resolutions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EviExperiment {
    pub sites: usize,
    pub resolution: usize,
    /// Coarser resolution used to measure the grid bias.
    pub coarse_resolution: usize,
    pub beta: f64,
    pub coupling: f64,
    pub initial_tilt: f64,
    pub dt: f64,
    pub t_end: f64,
    pub snapshot_every: usize,
    pub triples: usize,
    pub seed: u64,
    pub ot_tolerance: f64,
    /// Allowed time-quadrature error; a triple whose Richardson estimate exceeds it fails.
    pub quadrature_tolerance: f64,
}

impl Default for EviExperiment {
    fn default() -> Self {
        EviExperiment {
            sites: 3,
            resolution: 16,
            coarse_resolution: 8,
            beta: 0.5,
            coupling: 0.5,
            initial_tilt: 1.5,
            dt: 1e-3,
            t_end: 0.5,
            snapshot_every: 50,
            triples: 20,
            seed: 7,
            ot_tolerance: 2e-3,
            quadrature_tolerance: 1e-3,
        }
    }
}

/// Reference law `R ∝ Π_i e^{a_i cos(θ_i − φ_i)} · Π_i e^{c cos(θ_i − θ_{i+1})}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceLaw {
    pub tilts: Vec<(f64, f64)>,
    pub pair: f64,
}

impl ReferenceLaw {
    pub fn random(sites: usize, rng: &mut impl Rng) -> Self {
        let tilts = (0..sites).map(|_| (2.0 * rng.random::<f64>(), 2.0 * PI * rng.random::<f64>())).collect();
        ReferenceLaw { tilts, pair: 2.0 * rng.random::<f64>() - 1.0 }
    }

    pub fn density(&self, model: &FpkModel) -> Result<GridDensity> {
        let man = model.manifold.clone();
        let s = self.tilts.len();
        GridDensity::from_fn(model.boxspec.clone(), man.clone(), |x| {
            let th: Vec<f64> = x.iter().map(|&n| man.grid.nodes[n].angle()).collect();
            let single: f64 = self.tilts.iter().zip(&th).map(|((a, phi), t)| a * (t - phi).cos()).sum();
            let pair: f64 = if s > 1 { (0..s).map(|i| (th[i] - th[(i + 1) % s]).cos()).sum() } else { 0.0 };
            (single + self.pair * pair).exp()
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EviTriple {
    pub reference: ReferenceLaw,
    pub fine: EviSlack,
    pub coarse: EviSlack,
    /// `|slack_fine − slack_coarse|`.
    pub grid_budget: f64,
    /// OT and quadrature tolerances plus the grid budget.
    pub budget: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EviReport {
    pub k: f64,
    pub triples: Vec<EviTriple>,
    pub monotonicity: MonotonicityReport,
    pub pass: bool,
}

fn circle_torus_model(cfg: &EviExperiment, m: usize) -> Result<(FpkModel, FpkTrajectory)> {
    let man = Arc::new(WeightedManifold::build(ManifoldKind::Circle, m, Potential::Zero)?);
    let b = BoxSpec::torus(1, cfg.sites)?;
    let model = FpkModel::new(b.clone(), man.clone(), cfg.beta, CouplingKernel::nearest_neighbor(1, cfg.coupling), Psi::CosDiff)?;
    let p0 = GridDensity::from_fn(b, man.clone(), |x| {
        x.iter().map(|&n| (cfg.initial_tilt * man.grid.nodes[n].angle().cos()).exp()).product()
    })?;
    let traj = model.run(&p0, cfg.dt, cfg.t_end, Scheme::CrankNicolson, cfg.snapshot_every)?;
    Ok((model, traj))
}

pub fn run_evi_experiment(cfg: &EviExperiment) -> Result<EviReport> {
    let (fine, fine_traj) = circle_torus_model(cfg, cfg.resolution)?;
    let (coarse, coarse_traj) = circle_torus_model(cfg, cfg.coarse_resolution)?;
    let k = k_beta(&fine);
    let n = fine_traj.times.len();
    if n < 2 {
        return invalid("run needs at least two snapshots");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut triples = Vec::with_capacity(cfg.triples);
    for _ in 0..cfg.triples {
        let i = rng.random_range(0..n - 1);
        let j = rng.random_range(i + 1..n);
        let (s, t) = (fine_traj.times[i], fine_traj.times[j]);
        let reference = ReferenceLaw::random(cfg.sites, &mut rng);
        let f = evi_integral_residual(&fine, &fine_traj, &reference.density(&fine)?, k, s, t, Method::Lp)?;
        let c = evi_integral_residual(&coarse, &coarse_traj, &reference.density(&coarse)?, k, s, t, Method::Lp)?;
        let grid_budget = (f.slack - c.slack).abs();
        let budget = cfg.ot_tolerance + cfg.quadrature_tolerance + grid_budget;
        let pass = f.slack >= -budget && f.ot_error <= cfg.ot_tolerance && f.quadrature_error <= cfg.quadrature_tolerance;
        triples.push(EviTriple { reference, pass, fine: f, coarse: c, grid_budget, budget });
    }
    let monotonicity = monotonicity_report(&fine, &fine_traj, 0.0);
    let pass = triples.iter().all(|t| t.pass);
    Ok(EviReport { k, triples, monotonicity, pass })
}

/// Per-step changes of the per-volume free energy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub times: Vec<f64>,
    pub free_energy: Vec<f64>,
    pub max_increase: f64,
    pub budget: f64,
    pub pass: bool,
}

/// Passes iff no step raises `F` by more than `1e-8 + scheme_budget`.
pub fn monotonicity_report(model: &FpkModel, traj: &FpkTrajectory, scheme_budget: f64) -> MonotonicityReport {
    let v = model.boxspec.len() as f64;
    let times: Vec<f64> = traj.records.iter().map(|r| r.t).collect();
    let free_energy: Vec<f64> = traj.records.iter().map(|r| r.free_energy / v).collect();
    let max_increase = free_energy.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let budget = 1e-8 + scheme_budget;
    MonotonicityReport { times, free_energy, max_increase, budget, pass: max_increase < budget }
}

/// Decay of the gap between two flows started from distinct laws.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub k_beta: f64,
    pub times: Vec<f64>,
    /// Per-volume `W²` (FPK) or `E[d_γ²]` (coupled Langevin) between the two flows.
    pub gaps: Vec<f64>,
    /// Fitted exponential decay rate of `gaps` over the second half of the run.
    pub rate: f64,
    pub fit_residual: f64,
    pub terminal_gap: f64,
    /// Total variation between the two single-site marginals at the final time.
    pub terminal_tv: f64,
    /// False whenever `K_β ≤ 0`: no convergence is asserted then.
    pub pass: bool,
}

fn fit_rate(times: &[f64], gaps: &[f64]) -> (f64, f64) {
    let t_end = times.last().copied().unwrap_or(0.0);
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(gaps)
        .filter(|(t, g)| **t >= 0.5 * t_end - 1e-12 && **g > 0.0)
        .map(|(t, g)| (*t, g.ln()))
        .collect();
    if pts.len() < 2 {
        return (f64::INFINITY, 0.0);
    }
    let (slope, icpt) = langevin::least_squares(&pts);
    let res = (pts.iter().map(|(t, y)| (y - icpt - slope * t).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    (-slope, res)
}

fn pooled_site_marginal(p: &GridDensity) -> Vec<f64> {
    let marg = p.site_marginals();
    let m = marg[0].len();
    let s = marg.len() as f64;
    (0..m).map(|a| marg.iter().map(|row| row[a]).sum::<f64>() / s).collect()
}

/// Two FPK flows on the same box; gaps are per-volume `W²` at every snapshot.
pub fn convergence_fpk(
    model: &FpkModel,
    traj_a: &FpkTrajectory,
    traj_b: &FpkTrajectory,
    method: Method,
) -> Result<ConvergenceReport> {
    if traj_a.times.len() != traj_b.times.len()
        || traj_a.times.iter().zip(&traj_b.times).any(|(x, y)| (x - y).abs() > 1e-12)
    {
        return invalid("trajectories are not aligned in time");
    }
    let k = k_beta(model);
    let mut gaps = Vec::with_capacity(traj_a.times.len());
    for (a, b) in traj_a.snapshots.iter().zip(&traj_b.snapshots) {
        gaps.push(if a.values == b.values { 0.0 } else { w2_per_site(a, b, method)?.cost.max(0.0) });
    }
    let (rate, fit_residual) = fit_rate(&traj_a.times, &gaps);
    let terminal_gap = *gaps.last().unwrap_or(&0.0);
    let terminal_tv = langevin::total_variation(
        &pooled_site_marginal(traj_a.snapshots.last().expect("snapshot")),
        &pooled_site_marginal(traj_b.snapshots.last().expect("snapshot")),
    );
    let pass = k > 0.0 && rate >= 2.0 * k * 0.7 && terminal_gap < 1e-3;
    Ok(ConvergenceReport { k_beta: k, times: traj_a.times.clone(), gaps, rate, fit_residual, terminal_gap, terminal_tv, pass })
}

/// Two synchronously coupled Langevin ensembles; gaps are `E[d_γ²]`, the marginal gap is
/// the TV between site-pooled histograms on `grid`.
#[allow(clippy::too_many_arguments)]
pub fn convergence_langevin(
    model: &LangevinModel,
    a: &mut Ensemble,
    b: &mut Ensemble,
    dt: f64,
    t_end: f64,
    every: u64,
    weights: &[f64],
    grid: &ManifoldGrid,
    k_beta: f64,
) -> Result<ConvergenceReport> {
    let fit = langevin::synchronous_contraction(model, a, b, dt, t_end, every, weights)?;
    let sites: Vec<usize> = (0..model.sites()).collect();
    let pooled = |e: &Ensemble| -> Vec<f64> {
        let m = grid.len();
        let mut acc = vec![0.0; m];
        for &k in &sites {
            for (x, h) in acc.iter_mut().zip(e.histogram(grid, &[k])) {
                *x += h / sites.len() as f64;
            }
        }
        acc
    };
    let terminal_tv = langevin::total_variation(&pooled(a), &pooled(b));
    let terminal_gap = *fit.mean_d2.last().unwrap_or(&0.0);
    let pass = k_beta > 0.0 && fit.rate >= 2.0 * k_beta * 0.7 && terminal_tv < 0.01;
    Ok(ConvergenceReport {
        k_beta,
        times: fit.times,
        gaps: fit.mean_d2,
        rate: fit.rate,
        fit_residual: fit.residual,
        terminal_gap,
        terminal_tv,
        pass,
    })
}

/// Midpoint convexity of the free energy along the grid displacement interpolation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvexityCheck {
    pub f_p: f64,
    pub f_q: f64,
    pub f_mid: f64,
    pub w2: f64,
    /// `κ − 2β‖∇²Ψ‖∞‖J‖₁`.
    pub modulus: f64,
    /// `½(F(p) + F(q)) − F(mid)`.
    pub gap: f64,
    /// `⅛ · modulus · W²`.
    pub predicted: f64,
    /// `gap − predicted`; non-negative when the inequality holds without budget.
    pub slack: f64,
}

pub fn displacement_convexity_check(
    p: &GridDensity,
    q: &GridDensity,
    beta: f64,
    coupling: &CouplingKernel,
    psi: Psi,
    rebin: Rebin,
) -> Result<ConvexityCheck> {
    let v = p.boxspec.len() as f64;
    let f = |d: &GridDensity| d.free_energy(beta, coupling, psi) / v;
    let mid = displacement_interpolate(p, q, 0.5, rebin)?;
    let w2 = w2_per_site(p, q, Method::Lp)?.cost;
    let modulus = p.manifold.kappa - 2.0 * beta * psi.sup_d2() * coupling.l1_norm();
    let (f_p, f_q, f_mid) = (f(p), f(q), f(&mid));
    let gap = 0.5 * (f_p + f_q) - f_mid;
    let predicted = modulus * w2 / 8.0;
    Ok(ConvexityCheck { f_p, f_q, f_mid, w2, modulus, gap, predicted, slack: gap - predicted })
}
