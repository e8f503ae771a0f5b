//! Minimizing-movement scheme for the free energy on a finite (torus) box.
//!
//! Each step solves
//!
//! `argmin_q ½ ‖q − p‖²_{θ,−1} + h F(q)`,   `F(q) = Σ m log(m/ω) + β Σ m H`,
//!
//! where `‖·‖_{θ,−1}` is the dual norm of the graph Laplacian `A_θ` whose edge mobility
//! is the logarithmic mean of `ρ = p/e^{−βH}` along single-site moves, frozen at the
//! previous iterate. This is the transport metric of the reversible discretized
//! diffusion linearized at `p`; its Euler–Lagrange equation is a flux-form implicit
//! step, and it carries the grid transport cost to second order in the displacement.
//! Iterates are stationarized by averaging over torus translations.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fpk::FpkModel;
use crate::interaction::Topology;
use crate::measures::{torus_symmetrize, GridDensity};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    /// Damped Newton on the dual potential, CG linear solves.
    #[default]
    Newton,
    /// Entropic mirror descent on the primal objective.
    MirrorDescent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JkoConfig {
    pub h: f64,
    #[serde(default)]
    pub solver: InnerSolver,
    /// Target for the first-order optimality residual.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Average each iterate over lattice translations.
    #[serde(default = "default_true")]
    pub stationarize: bool,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    200
}

fn default_true() -> bool {
    true
}

impl JkoConfig {
    pub fn new(h: f64) -> Self {
        JkoConfig { h, solver: InnerSolver::Newton, tol: default_tol(), max_iter: default_max_iter(), stationarize: true }
    }

    pub fn box_radius(&self) -> usize {
        n_of_h(self.h)
    }
}

/// Box radius coupled to the step size, `⌈h^{−5/4}⌉`, so that `n·h → ∞` as `h → 0`.
pub fn n_of_h(h: f64) -> usize {
    h.powf(-1.25).ceil() as usize
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub density: GridDensity,
    /// Squared transport cost of the move, `⟨Δm, A_θ^+ Δm⟩`.
    pub w2: f64,
    /// Norm of the optimality residual.
    pub residual: f64,
    /// Objective at the minimizer and at the competitor `q = p`.
    pub objective: f64,
    pub objective_prev: f64,
    pub iterations: usize,
}

fn log_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    let r = b / a - 1.0;
    if r.abs() < 1e-4 {
        // series in r = b/a − 1
        a * (1.0 + r / 2.0 - r * r / 12.0 + r * r * r / 24.0)
    } else {
        (b - a) / (b.ln() - a.ln())
    }
}

/// Weighted graph Laplacian with frozen mobilities.
struct Mobility<'a> {
    edges: Vec<(u32, u32, f64)>,
    degree: Vec<f64>,
    model: &'a FpkModel,
}

impl<'a> Mobility<'a> {
    fn new(model: &'a FpkModel, prev: &GridDensity) -> Self {
        let g = model.gibbs_factor();
        let rho: Vec<f64> = prev.values.iter().zip(g).map(|(p, g)| p / g).collect();
        let mut degree = vec![0.0; rho.len()];
        let edges: Vec<(u32, u32, f64)> = model
            .edges()
            .iter()
            .map(|&(a, b, s)| {
                let theta = s * log_mean(rho[a as usize], rho[b as usize]);
                degree[a as usize] += theta;
                degree[b as usize] += theta;
                (a, b, theta)
            })
            .collect();
        Mobility { edges, degree, model }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(a, b, t) in &self.edges {
            let (a, b) = (a as usize, b as usize);
            let f = t * (u[a] - u[b]);
            out[a] += f;
            out[b] -= f;
        }
    }

    fn quad(&self, u: &[f64]) -> f64 {
        self.edges.iter().map(|&(a, b, t)| t * (u[a as usize] - u[b as usize]).powi(2)).sum()
    }

    /// PCG for `(diag(d) + c A) x = rhs`; with `d = 0` the right side must be mass-free.
    fn solve(&self, d: &[f64], c: f64, rhs: &[f64], x: &mut [f64], rel_tol: f64) -> Result<usize> {
        let n = rhs.len();
        let mut tmp = vec![0.0; n];
        let apply = |v: &[f64], out: &mut [f64], tmp: &mut [f64]| {
            self.apply(v, tmp);
            for a in 0..n {
                out[a] = d[a] * v[a] + c * tmp[a];
            }
        };
        let pre: Vec<f64> = (0..n)
            .map(|a| {
                let diag = d[a] + c * self.degree[a];
                if diag > 0.0 { 1.0 / diag } else { 0.0 }
            })
            .collect();
        let mut r = vec![0.0; n];
        apply(x, &mut r, &mut tmp);
        for a in 0..n {
            r[a] = rhs[a] - r[a];
        }
        let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let mut z: Vec<f64> = (0..n).map(|a| pre[a] * r[a]).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut q = vec![0.0; n];
        for it in 0..5 * n + 100 {
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn <= rel_tol * bnorm || rz == 0.0 {
                return Ok(it);
            }
            apply(&p, &mut q, &mut tmp);
            let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
            if pq <= 0.0 {
                break;
            }
            let alpha = rz / pq;
            for a in 0..n {
                x[a] += alpha * p[a];
                r[a] -= alpha * q[a];
                z[a] = pre[a] * r[a];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for a in 0..n {
                p[a] = z[a] + beta * p[a];
            }
        }
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn <= 1e3 * rel_tol * bnorm {
            Ok(5 * n + 100)
        } else {
            Err(Error::NoConvergence(format!("inner CG residual {rn:.3e}")))
        }
    }

    /// Free energy `Σ m log(m / (ω g))` up to the additive constant `β H_min`.
    fn relative_free_energy(&self, m: &[f64]) -> f64 {
        let w = self.model.weights();
        let g = self.model.gibbs_factor();
        m.iter().zip(w).zip(g).map(|((m, w), g)| if *m > 0.0 { m * (m / (w * g)).ln() } else { 0.0 }).sum()
    }
}

/// One proximal step from `prev`.
pub fn jko_step(model: &FpkModel, prev: &GridDensity, h: f64, solver: InnerSolver, tol: f64, max_iter: usize) -> Result<StepReport> {
    if !(h > 0.0) {
        return invalid("JKO step size must be positive");
    }
    if prev.values.len() != model.len() {
        return invalid("density does not live on the model's box");
    }
    let mob = Mobility::new(model, prev);
    let mp = prev.masses();
    let d: Vec<f64> = model.weights().iter().zip(model.gibbs_factor()).map(|(w, g)| w * g).collect();
    let objective_prev = h * mob.relative_free_energy(&mp);
    let (m, w2, residual, iterations) = match solver {
        InnerSolver::Newton => newton(&mob, &mp, &d, h, tol, max_iter)?,
        InnerSolver::MirrorDescent => mirror_descent(&mob, &mp, &d, h, tol, max_iter)?,
    };
    let objective = 0.5 * w2 + h * mob.relative_free_energy(&m);
    let density = GridDensity::from_masses(prev.boxspec.clone(), prev.manifold.clone(), &m)?;
    Ok(StepReport { density, w2, residual, objective, objective_prev, iterations })
}

/// Solve `ω g e^u − m_p + h A u = 0`, the stationarity condition of
/// `ψ(u) = Σ ω g e^u − ⟨m_p, u⟩ + (h/2)⟨u, A u⟩`; the minimizer is `m = ω g e^u`.
fn newton(mob: &Mobility, mp: &[f64], d: &[f64], h: f64, tol: f64, max_iter: usize) -> Result<(Vec<f64>, f64, f64, usize)> {
    let n = mp.len();
    let mut u: Vec<f64> = (0..n).map(|a| (mp[a] / d[a]).max(1e-300).ln()).collect();
    let psi = |u: &[f64]| -> f64 {
        (0..n).map(|a| d[a] * u[a].exp() - mp[a] * u[a]).sum::<f64>() + 0.5 * h * mob.quad(u)
    };
    let mut au = vec![0.0; n];
    let grad = |u: &[f64], au: &mut Vec<f64>| -> Vec<f64> {
        mob.apply(u, au);
        (0..n).map(|a| d[a] * u[a].exp() - mp[a] + h * au[a]).collect()
    };
    let mut g = grad(&u, &mut au);
    let mut res = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut it = 0;
    while res > tol {
        if it == max_iter {
            return Err(Error::NoConvergence(format!("Newton residual {res:.3e} after {it} iterations")));
        }
        it += 1;
        let hess: Vec<f64> = (0..n).map(|a| d[a] * u[a].exp()).collect();
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut delta = vec![0.0; n];
        mob.solve(&hess, h, &rhs, &mut delta, 1e-12)?;
        let slope: f64 = g.iter().zip(&delta).map(|(a, b)| a * b).sum();
        let f0 = psi(&u);
        let mut t = 1.0;
        let mut trial: Vec<f64>;
        loop {
            trial = u.iter().zip(&delta).map(|(a, b)| a + t * b).collect();
            let f1 = psi(&trial);
            if f1 <= f0 + 1e-4 * t * slope || t < 1e-10 || (f0 - f1).abs() <= 1e-15 * f0.abs().max(1.0) {
                break;
            }
            t *= 0.5;
        }
        u = trial;
        g = grad(&u, &mut au);
        res = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let mut m: Vec<f64> = (0..n).map(|a| d[a] * u[a].exp()).collect();
    // remove the residual mass defect so the iterate is a probability
    let total: f64 = m.iter().sum();
    let target: f64 = mp.iter().sum();
    m.iter_mut().for_each(|v| *v *= target / total);
    let w2 = h * h * mob.quad(&u);
    Ok((m, w2, res, it))
}

/// Entropic mirror descent on `½⟨Δm, A^+ Δm⟩ + h Σ m log(m/(ωg))` with backtracking.
fn mirror_descent(
    mob: &Mobility,
    mp: &[f64],
    d: &[f64],
    h: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, f64, f64, usize)> {
    let n = mp.len();
    let zeros = vec![0.0; n];
    let mut x = vec![0.0; n];
    // A^+ Δm, warm-started across iterations
    let potential = |dm: &[f64], x: &mut Vec<f64>| -> Result<Vec<f64>> {
        mob.solve(&zeros, 1.0, dm, x, 1e-13)?;
        let mean = x.iter().sum::<f64>() / n as f64;
        Ok(x.iter().map(|v| v - mean).collect())
    };
    let mut m = mp.to_vec();
    let mut pot = vec![0.0; n];
    let mut eta = 1.0;
    let mut res = f64::INFINITY;
    let iter_cap = max_iter.max(1) * 100;
    for it in 0..iter_cap {
        let grad: Vec<f64> = (0..n).map(|a| pot[a] + h * ((m[a] / d[a]).ln() + 1.0)).collect();
        let mean: f64 = grad.iter().zip(&m).map(|(g, m)| g * m).sum::<f64>() / m.iter().sum::<f64>();
        res = grad.iter().zip(&m).map(|(g, m)| m * (g - mean).powi(2)).sum::<f64>().sqrt();
        if res <= tol {
            let w2 = m.iter().zip(mp).zip(&pot).map(|((a, b), p)| (a - b) * p).sum();
            return Ok((m, w2, res, it));
        }
        loop {
            // log-ratios ln(trial/m) computed from the exponents to keep differences exact
            let expo: Vec<f64> = (0..n).map(|a| -eta * (grad[a] - mean)).collect();
            let s_minus_1: f64 = (0..n).map(|a| m[a] * expo[a].exp_m1()).sum::<f64>() / m.iter().sum::<f64>();
            let log_s = s_minus_1.ln_1p();
            let log_ratio: Vec<f64> = expo.iter().map(|e| e - log_s).collect();
            let trial: Vec<f64> = (0..n).map(|a| m[a] * log_ratio[a].exp()).collect();
            let dm: Vec<f64> = trial.iter().zip(mp).map(|(a, b)| a - b).collect();
            let tpot = potential(&dm, &mut x)?;
            let step: Vec<f64> = (0..n).map(|a| m[a] * log_ratio[a].exp_m1()).collect();
            let diff: f64 = (0..n)
                .map(|a| {
                    0.5 * step[a] * (tpot[a] + pot[a])
                        + h * (step[a] * (trial[a] / d[a]).ln() + m[a] * log_ratio[a])
                })
                .sum();
            let lin: f64 = (0..n).map(|a| grad[a] * step[a]).sum();
            let kl: f64 = (0..n).map(|a| trial[a] * log_ratio[a] - step[a]).sum();
            if diff <= lin + kl / eta || eta < 1e-12 {
                m = trial;
                pot = tpot;
                eta *= 1.5;
                break;
            }
            eta *= 0.5;
        }
    }
    Err(Error::NoConvergence(format!("mirror descent residual {res:.3e} after {iter_cap} iterations")))
}

#[derive(Clone, Debug)]
pub struct JkoIterate {
    pub t: f64,
    /// Minimizer before stationarization.
    pub raw: GridDensity,
    pub stationary: GridDensity,
    pub w2: f64,
    /// Per-site free energy of the stationarized iterate.
    pub free_energy: f64,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct JkoTrajectory {
    pub h: f64,
    pub sites: usize,
    pub initial: GridDensity,
    pub initial_free_energy: f64,
    pub iterates: Vec<JkoIterate>,
}

impl JkoTrajectory {
    /// Piecewise-constant interpolation: the iterate `k` with `kh ≤ t < (k+1)h`.
    pub fn at(&self, t: f64) -> &GridDensity {
        let k = ((t / self.h) + 1e-9).floor() as usize;
        if k == 0 {
            &self.initial
        } else {
            &self.iterates[(k - 1).min(self.iterates.len() - 1)].stationary
        }
    }

    pub fn free_energies(&self) -> Vec<f64> {
        std::iter::once(self.initial_free_energy).chain(self.iterates.iter().map(|it| it.free_energy)).collect()
    }

    /// Largest one-step increase of the per-site free energy.
    pub fn max_free_energy_increase(&self) -> f64 {
        self.free_energies().windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// `sup_k F(P^k) ≤ F(P⁰) + 2kh` and one-step slack `2h`.
    pub fn a_priori_bound_holds(&self) -> bool {
        let f = self.free_energies();
        f.windows(2).all(|w| w[1] <= w[0] + 2.0 * self.h)
            && f.iter().enumerate().all(|(k, v)| *v <= f[0] + 2.0 * k as f64 * self.h + 1e-12)
    }

    /// `(1/h) Σ_k W²_k / |Λ|`.
    pub fn summed_w2(&self) -> f64 {
        self.iterates.iter().map(|it| it.w2).sum::<f64>() / (self.h * self.sites as f64)
    }

    /// CSV with columns `k,t,F,E,H,W2_step,residual`.
    pub fn write_csv(&self, model: &FpkModel, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "k,t,F,E,H,W2_step,residual")?;
        let s = self.sites as f64;
        let (f, e, hh) = model.functionals(&self.initial);
        writeln!(out, "0,0,{},{},{},0,0", f / s, e / s, hh / s)?;
        for (k, it) in self.iterates.iter().enumerate() {
            let (f, e, hh) = model.functionals(&it.stationary);
            writeln!(out, "{},{},{},{},{},{},{}", k + 1, it.t, f / s, e / s, hh / s, it.w2 / s, it.residual)?;
        }
        Ok(())
    }
}

/// Iterate proximal steps and stationarization up to time `t_end`.
pub fn run_scheme(model: &FpkModel, p0: &GridDensity, cfg: &JkoConfig, t_end: f64) -> Result<JkoTrajectory> {
    let steps = (t_end / cfg.h).round() as usize;
    let sites = model.boxspec.len();
    let per_site = |p: &GridDensity| model.functionals(p).0 / sites as f64;
    let f0 = per_site(p0);
    if !f0.is_finite() {
        return invalid("initial free energy is not finite");
    }
    let torus = matches!(model.boxspec.topology, Topology::Torus { .. });
    let mut traj = JkoTrajectory { h: cfg.h, sites, initial: p0.clone(), initial_free_energy: f0, iterates: Vec::new() };
    let mut cur = p0.clone();
    for k in 1..=steps {
        let step = jko_step(model, &cur, cfg.h, cfg.solver, cfg.tol, cfg.max_iter)?;
        let stationary = if cfg.stationarize && torus { torus_symmetrize(&step.density)? } else { step.density.clone() };
        traj.iterates.push(JkoIterate {
            t: k as f64 * cfg.h,
            free_energy: per_site(&stationary),
            raw: step.density,
            stationary: stationary.clone(),
            w2: step.w2,
            residual: step.residual,
        });
        cur = stationary;
    }
    Ok(traj)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KolmogorovReport {
    /// `|ΔE[φ]/h − E_{P^k}[Aφ]|` per step.
    pub residuals: Vec<f64>,
    /// `W²_k / (h|Λ|)` per step.
    pub w2_terms: Vec<f64>,
    /// Boundary term `L/(n h)`; zero on a torus.
    pub window_term: f64,
    /// Smallest `C` with `residual ≤ C (w2_term + window_term)` at every step.
    pub fitted_constant: f64,
}

impl KolmogorovReport {
    pub fn within(&self, c: f64) -> bool {
        self.residuals.iter().zip(&self.w2_terms).all(|(r, w)| *r <= c * (w + self.window_term) + 1e-14)
    }
}

/// Residual of the discrete Kolmogorov equation for a local observable `φ` of the sites `ell`.
///
/// `outer` is the size of the box on which the energy gradient is resolved.
pub fn discrete_kolmogorov_residual(
    model: &FpkModel,
    traj: &JkoTrajectory,
    phi: &dyn Fn(&[usize]) -> f64,
    ell: &[usize],
    outer: usize,
) -> Result<KolmogorovReport> {
    if ell.len() > outer || outer > model.boxspec.len() {
        return invalid("need |ℓ| ≤ L ≤ |Λ_n|");
    }
    let f = model.lift(ell, phi);
    let af = model.apply_backward(&f);
    let expect = |p: &GridDensity, v: &[f64]| -> f64 { p.masses().iter().zip(v).map(|(m, v)| m * v).sum() };
    let mut prev = expect(&traj.initial, &f);
    let mut residuals = Vec::new();
    let mut w2_terms = Vec::new();
    for it in &traj.iterates {
        let cur = expect(&it.stationary, &f);
        residuals.push(((cur - prev) / traj.h - expect(&it.stationary, &af)).abs());
        w2_terms.push(it.w2 / (traj.h * traj.sites as f64));
        prev = cur;
    }
    let window_term = match model.boxspec.topology {
        Topology::Torus { .. } => 0.0,
        Topology::Free => {
            let radius = model.boxspec.sites.iter().flat_map(|s| s.iter()).map(|c| c.unsigned_abs()).max().unwrap_or(0);
            outer as f64 / ((radius.max(1)) as f64 * traj.h)
        }
    };
    let fitted_constant = residuals
        .iter()
        .zip(&w2_terms)
        .map(|(r, w)| if w + window_term > 0.0 { r / (w + window_term) } else if *r > 0.0 { f64::INFINITY } else { 0.0 })
        .fold(0.0, f64::max);
    Ok(KolmogorovReport { residuals, w2_terms, window_term, fitted_constant })
}
