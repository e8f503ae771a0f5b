//! Fokker–Planck evolution of the full box density and of its window marginals.
//!
//! The state is the density on a (torus) box; every local density is a marginal of it.
//! The generator is discretized in Gibbs-symmetric flux form
//!
//! `dm_a/dt = Σ_b S_ab (ρ_b − ρ_a)`,  `ρ = p/g`,  `g = e^{−β(H−H_min)}`,
//!
//! with `S_ab = W_ab √(g_a g_b)` and `W` the product-grid conductance for single-site moves.
//! The discrete Gibbs density is stationary exactly and the free energy is a Lyapunov function.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{log_map, Tangent, WeightedManifold};
use crate::interaction::{BoxSpec, CouplingKernel, InteractionPotential, Psi};
use crate::measures::{state_energies, GridDensity, StateSpace};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Forward Euler; requires `dt` below [`FpkModel::stability_bound`].
    Explicit,
    /// Backward Euler; unconditionally positive and free-energy decreasing.
    Implicit,
    /// Trapezoidal rule; positive for `dt` up to twice the explicit bound.
    #[default]
    CrankNicolson,
}

/// Discretized Fokker–Planck operator on all states of a box.
#[derive(Clone, Debug)]
pub struct FpkModel {
    pub boxspec: BoxSpec,
    pub manifold: Arc<WeightedManifold>,
    pub beta: f64,
    pub coupling: CouplingKernel,
    pub psi: Psi,
    space: StateSpace,
    energies: Vec<f64>,
    gibbs: Vec<f64>,
    weights: Vec<f64>,
    /// `(a, b, S_ab)`, each unordered pair once.
    edges: Vec<(u32, u32, f64)>,
    /// `Σ_b S_ab`.
    degree: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FpkState {
    pub density: GridDensity,
    pub time: f64,
}

impl FpkState {
    pub fn new(density: GridDensity) -> Self {
        FpkState { density, time: 0.0 }
    }

    /// Marginal on the given box positions.
    pub fn marginal(&self, positions: &[usize]) -> Result<GridDensity> {
        self.density.marginal(positions)
    }
}

/// Component `k` of the drift at window state `x` is `values[x·|Λ| + k]`.
#[derive(Clone, Debug)]
pub struct DriftField {
    pub window: Vec<usize>,
    pub values: Vec<Tangent>,
}

impl DriftField {
    pub fn at(&self, state: usize, k: usize) -> &Tangent {
        &self.values[state * self.window.len() + k]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub free_energy: f64,
    pub entropy: f64,
    pub energy: f64,
    pub fisher: f64,
    pub clipped_mass: f64,
}

#[derive(Clone, Debug)]
pub struct FpkTrajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub snapshots: Vec<GridDensity>,
    pub records: Vec<StepRecord>,
}

impl FpkTrajectory {
    /// Snapshot whose time is within half a step of `t`.
    pub fn snapshot_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|s| (s - t).abs() <= 0.5 * self.dt + 1e-12)
            .ok_or_else(|| Error::InvalidArgument(format!("no snapshot at t = {t}")))
    }

    pub fn at(&self, t: f64) -> Result<&GridDensity> {
        Ok(&self.snapshots[self.snapshot_index(t)?])
    }

    /// Largest one-step increase of the free energy.
    pub fn max_free_energy_increase(&self) -> f64 {
        self.records.windows(2).map(|w| w[1].free_energy - w[0].free_energy).fold(0.0, f64::max)
    }

    pub fn clipped_mass(&self) -> f64 {
        self.records.iter().map(|r| r.clipped_mass).sum()
    }

    /// CSV with columns `t,F,E,H,Fisher,clipped_mass`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,F,E,H,Fisher,clipped_mass")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{},{},{}", r.t, r.free_energy, r.entropy, r.energy, r.fisher, r.clipped_mass)?;
        }
        Ok(())
    }
}

impl FpkModel {
    pub fn new(boxspec: BoxSpec, manifold: Arc<WeightedManifold>, beta: f64, coupling: CouplingKernel, psi: Psi) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return invalid("β must be finite and nonnegative");
        }
        let space = StateSpace::new(manifold.len(), boxspec.len())?;
        let energies = state_energies(&boxspec, &manifold, &coupling, psi);
        let hmin = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let gibbs: Vec<f64> = energies.iter().map(|h| (-beta * (h - hmin)).exp()).collect();
        let weights = space.product_weights(&manifold.omega);
        let n = space.len();
        let mut edges = Vec::new();
        let mut degree = vec![0.0; n];
        for a in 0..n {
            for i in 0..space.sites {
                let st = space.stride(i);
                let u = (a / st) % space.nodes;
                for &(v, c) in manifold.neighbors(u) {
                    if v <= u {
                        continue;
                    }
                    let b = a - u * st + v * st;
                    let s = c * weights[a] / manifold.omega[u] * (gibbs[a] * gibbs[b]).sqrt();
                    edges.push((a as u32, b as u32, s));
                    degree[a] += s;
                    degree[b] += s;
                }
            }
        }
        Ok(FpkModel { boxspec, manifold, beta, coupling, psi, space, energies, gibbs, weights, edges, degree })
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    /// Product reference weights `ω_Λ` of the states.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn edges(&self) -> &[(u32, u32, f64)] {
        &self.edges
    }

    /// Unnormalized Gibbs factor `e^{−β(H−H_min)}`.
    pub fn gibbs_factor(&self) -> &[f64] {
        &self.gibbs
    }

    /// `e^{−βH}` normalized as a density w.r.t. `ω_Λ`.
    pub fn gibbs_density(&self) -> Result<GridDensity> {
        GridDensity::normalized(self.boxspec.clone(), self.manifold.clone(), self.gibbs.clone())
    }

    /// Largest stable explicit step.
    pub fn stability_bound(&self) -> f64 {
        let rate = (0..self.len()).map(|a| self.degree[a] / (self.weights[a] * self.gibbs[a])).fold(0.0, f64::max);
        if rate == 0.0 { f64::INFINITY } else { 1.0 / rate }
    }

    /// `(Lρ)_a = Σ_b S_ab (ρ_a − ρ_b)`.
    fn laplacian(&self, rho: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(a, b, s) in &self.edges {
            let (a, b) = (a as usize, b as usize);
            let flux = s * (rho[a] - rho[b]);
            out[a] += flux;
            out[b] -= flux;
        }
    }

    /// Backward generator `(Af)_a = Σ_b S_ab (f_b − f_a) / (ω_a g_a)`; `E_p[Af]` is `d/dt E_p[f]`.
    pub fn apply_backward(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        self.laplacian(f, &mut out);
        for a in 0..f.len() {
            out[a] = -out[a] / (self.weights[a] * self.gibbs[a]);
        }
        out
    }

    /// Time derivative of the state densities under the forward equation.
    pub fn forward_rate(&self, p: &GridDensity) -> Vec<f64> {
        let rho: Vec<f64> = p.values.iter().zip(&self.gibbs).map(|(v, g)| v / g).collect();
        let mut lr = vec![0.0; rho.len()];
        self.laplacian(&rho, &mut lr);
        lr.iter().zip(&self.weights).map(|(l, w)| -l / w).collect()
    }

    /// Solve `(D + c L) x = rhs` with `D = diag(ω g)` by preconditioned CG.
    fn solve_shifted(&self, c: f64, rhs: &[f64], x: &mut [f64]) -> Result<()> {
        let n = rhs.len();
        let d: Vec<f64> = (0..n).map(|a| self.weights[a] * self.gibbs[a]).collect();
        let apply = |v: &[f64], out: &mut [f64]| {
            self.laplacian(v, out);
            for a in 0..n {
                out[a] = d[a] * v[a] + c * out[a];
            }
        };
        let pre: Vec<f64> = (0..n).map(|a| 1.0 / (d[a] + c * self.degree[a])).collect();
        let mut r = vec![0.0; n];
        apply(x, &mut r);
        for a in 0..n {
            r[a] = rhs[a] - r[a];
        }
        let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut z: Vec<f64> = (0..n).map(|a| pre[a] * r[a]).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut q = vec![0.0; n];
        for _ in 0..2000 {
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn <= 1e-15 * bnorm {
                return Ok(());
            }
            apply(&p, &mut q);
            let alpha = rz / p.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
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
        if rn <= 1e-12 * bnorm {
            Ok(())
        } else {
            Err(Error::NoConvergence(format!("CG residual {rn:.3e}")))
        }
    }

    /// Advance by `dt`; returns the clipped negative mass (normally zero).
    pub fn step(&self, state: &mut FpkState, dt: f64, scheme: Scheme) -> Result<f64> {
        if !(dt > 0.0) {
            return invalid("time step must be positive");
        }
        let p = &state.density;
        if p.values.len() != self.len() {
            return invalid("density does not live on the model's box");
        }
        let n = self.len();
        let rho: Vec<f64> = p.values.iter().zip(&self.gibbs).map(|(v, g)| v / g).collect();
        let d: Vec<f64> = (0..n).map(|a| self.weights[a] * self.gibbs[a]).collect();
        let mut lr = vec![0.0; n];
        let new_rho = match scheme {
            Scheme::Explicit => {
                let bound = self.stability_bound();
                if dt > bound {
                    return Err(Error::Stability(format!("dt = {dt} exceeds the explicit bound {bound:.3e}")));
                }
                self.laplacian(&rho, &mut lr);
                (0..n).map(|a| rho[a] - dt * lr[a] / d[a]).collect::<Vec<f64>>()
            }
            Scheme::Implicit => {
                let rhs: Vec<f64> = (0..n).map(|a| d[a] * rho[a]).collect();
                let mut x = rho.clone();
                self.solve_shifted(dt, &rhs, &mut x)?;
                x
            }
            Scheme::CrankNicolson => {
                self.laplacian(&rho, &mut lr);
                let rhs: Vec<f64> = (0..n).map(|a| d[a] * rho[a] - 0.5 * dt * lr[a]).collect();
                let mut x = rho.clone();
                self.solve_shifted(0.5 * dt, &rhs, &mut x)?;
                x
            }
        };
        let mut values: Vec<f64> = new_rho.iter().zip(&self.gibbs).map(|(r, g)| r * g).collect();
        let mut clipped = 0.0;
        for (v, w) in values.iter_mut().zip(&self.weights) {
            if *v < 0.0 {
                clipped -= *v * w;
                *v = 0.0;
            }
        }
        let mass: f64 = values.iter().zip(&self.weights).map(|(v, w)| v * w).sum();
        if !mass.is_finite() || mass <= 0.0 {
            return Err(Error::NonFinite("FPK step lost all mass".into()));
        }
        if clipped > 0.0 {
            values.iter_mut().for_each(|v| *v /= mass);
        }
        state.density = state.density.with_values(values)?;
        state.time += dt;
        Ok(clipped)
    }

    /// Free energy `E + β⟨H⟩`, entropy and energy of a box density.
    pub fn functionals(&self, p: &GridDensity) -> (f64, f64, f64) {
        let ent = p.relative_entropy();
        let en: f64 = p.values.iter().zip(&self.weights).zip(&self.energies).map(|((v, w), h)| v * w * h).sum();
        (ent + self.beta * en, ent, en)
    }

    fn record(&self, p: &GridDensity, t: f64, clipped: f64) -> StepRecord {
        let (f, e, h) = self.functionals(p);
        StepRecord { t, free_energy: f, entropy: e, energy: h, fisher: fisher_information(p), clipped_mass: clipped }
    }

    /// Integrate to `t_end`, storing a snapshot every `every` steps (and the last one).
    pub fn run(&self, p0: &GridDensity, dt: f64, t_end: f64, scheme: Scheme, every: usize) -> Result<FpkTrajectory> {
        let steps = (t_end / dt).round() as usize;
        let every = every.max(1);
        let mut state = FpkState::new(p0.clone());
        let mut traj = FpkTrajectory { dt, times: vec![0.0], snapshots: vec![p0.clone()], records: vec![self.record(p0, 0.0, 0.0)] };
        for k in 1..=steps {
            let clipped = self.step(&mut state, dt, scheme)?;
            let t = k as f64 * dt;
            state.time = t;
            traj.records.push(self.record(&state.density, t, clipped));
            if k % every == 0 || k == steps {
                traj.times.push(t);
                traj.snapshots.push(state.density.clone());
            }
        }
        Ok(traj)
    }

    /// `E[drift_i | X_Λ = x]` for `i ∈ Λ` under the box density `p`.
    pub fn conditional_drift(&self, p: &GridDensity, window: &[usize]) -> Result<DriftField> {
        let s = self.boxspec.len();
        if window.is_empty() || window.iter().any(|&i| i >= s) {
            return invalid("window positions outside the box");
        }
        let m = self.manifold.len();
        let ip = InteractionPotential::sample(self.psi, &self.manifold.grid);
        let jm = self.boxspec.pair_couplings(&self.coupling);
        let wlen = window.len();
        let wspace = StateSpace::new(m, wlen)?;
        let pw = p.marginal_masses(window);
        let zero = Tangent::zero(self.manifold.kind());
        let mut values = vec![zero; wspace.len() * wlen];
        let mut xs = vec![0; wlen];
        for x in 0..wspace.len() {
            wspace.decode_into(x, &mut xs);
            for (k, &i) in window.iter().enumerate() {
                let mut v = zero;
                for (l, &j) in window.iter().enumerate() {
                    let c = jm[i * s + j];
                    if c != 0.0 {
                        v = v.add(&ip.d1[xs[k] * m + xs[l]].scaled(c));
                    }
                }
                values[x * wlen + k] = v;
            }
        }
        for j in (0..s).filter(|j| !window.contains(j)) {
            if window.iter().all(|&i| jm[i * s + j] == 0.0) {
                continue;
            }
            let mut ext = window.to_vec();
            ext.push(j);
            let joint = p.marginal_masses(&ext);
            for x in 0..wspace.len() {
                if pw[x] <= 0.0 {
                    continue;
                }
                wspace.decode_into(x, &mut xs);
                for (k, &i) in window.iter().enumerate() {
                    let c = jm[i * s + j];
                    if c == 0.0 {
                        continue;
                    }
                    let mut e = zero;
                    for y in 0..m {
                        let w = joint[x * m + y];
                        if w != 0.0 {
                            e = e.add(&ip.d1[xs[k] * m + y].scaled(w));
                        }
                    }
                    values[x * wlen + k] = values[x * wlen + k].add(&e.scaled(c / pw[x]));
                }
            }
        }
        for v in values.iter_mut() {
            *v = v.scaled(2.0);
        }
        Ok(DriftField { window: window.to_vec(), values })
    }

    /// One explicit step of the window equation with the drift frozen.
    ///
    /// Fluxes use exponential fitting: the potential difference along a move is
    /// the averaged projection of the drift on the connecting geodesic.
    pub fn marginal_step(&self, pw: &GridDensity, drift: &DriftField, dt: f64) -> Result<GridDensity> {
        let man = &self.manifold;
        let space = pw.space();
        if space.sites != drift.window.len() {
            return invalid("drift and marginal have different windows");
        }
        let nodes = &man.grid.nodes;
        let weights = space.product_weights(&man.omega);
        let mut masses = pw.masses();
        let mut delta = vec![0.0; masses.len()];
        for a in 0..space.len() {
            for k in 0..space.sites {
                let st = space.stride(k);
                let u = (a / st) % space.nodes;
                for &(v, c) in man.neighbors(u) {
                    if v <= u {
                        continue;
                    }
                    let b = a - u * st + v * st;
                    let w0 = c * weights[a] / man.omega[u];
                    let phi = 0.5
                        * (drift.at(a, k).dot(&log_map(&nodes[u], &nodes[v]))
                            - drift.at(b, k).dot(&log_map(&nodes[v], &nodes[u])));
                    let half = 0.5 * self.beta * phi;
                    let flux = w0 * (pw.values[b] * half.exp() - pw.values[a] * (-half).exp());
                    delta[a] += flux;
                    delta[b] -= flux;
                }
            }
        }
        for (m, d) in masses.iter_mut().zip(&delta) {
            *m += dt * d;
        }
        if masses.iter().any(|m| *m < -1e-12) {
            return Err(Error::Stability("window step produced negative mass".into()));
        }
        masses.iter_mut().for_each(|m| *m = m.max(0.0));
        GridDensity::from_masses(pw.boxspec.clone(), man.clone(), &masses)
    }

    /// Lift a function of the window nodes to all box states.
    pub fn lift(&self, window: &[usize], f: impl Fn(&[usize]) -> f64) -> Vec<f64> {
        let mut xs = vec![0; self.space.sites];
        let mut w = vec![0; window.len()];
        (0..self.len())
            .map(|a| {
                self.space.decode_into(a, &mut xs);
                for (k, &i) in window.iter().enumerate() {
                    w[k] = xs[i];
                }
                f(&w)
            })
            .collect()
    }

    fn expect(&self, p: &GridDensity, f: &[f64]) -> f64 {
        p.values.iter().zip(&self.weights).zip(f).map(|((v, w), f)| v * w * f).sum()
    }

    /// Defect of the weak formulation
    /// `E_{t1}[f(t1)] − E_{t0}[f(t0)] − ∫ E[∂_t f + A f] dt` on stored snapshots.
    pub fn dual_residual(
        &self,
        traj: &FpkTrajectory,
        f: &dyn Fn(f64, &[usize]) -> f64,
        window: &[usize],
        t0: f64,
        t1: f64,
    ) -> Result<f64> {
        let (i0, i1) = (traj.snapshot_index(t0)?, traj.snapshot_index(t1)?);
        let integrand = |k: usize| -> f64 {
            let t = traj.times[k];
            let h = 1e-5 * (1.0 + t.abs());
            let ft = self.lift(window, |x| f(t, x));
            let dt = self.lift(window, |x| (f(t + h, x) - f(t - h, x)) / (2.0 * h));
            let af = self.apply_backward(&ft);
            let total: Vec<f64> = dt.iter().zip(&af).map(|(a, b)| a + b).collect();
            self.expect(&traj.snapshots[k], &total)
        };
        let vals: Vec<f64> = (i0..=i1).map(integrand).collect();
        let integral = trapezoid(&traj.times[i0..=i1], &vals);
        let e1 = self.expect(&traj.snapshots[i1], &self.lift(window, |x| f(traj.times[i1], x)));
        let e0 = self.expect(&traj.snapshots[i0], &self.lift(window, |x| f(traj.times[i0], x)));
        Ok((e1 - e0 - integral).abs())
    }

    /// Defect of the Duhamel formula against the free heat semigroup `G` on the window:
    /// `E_{t1}[f] − E_{t0}[G_{t1−t0} f] − ∫ E[(A − L₀) G_{t1−t} f] dt`.
    pub fn duhamel_residual(
        &self,
        traj: &FpkTrajectory,
        f: &dyn Fn(&[usize]) -> f64,
        window: &[usize],
        t0: f64,
        t1: f64,
    ) -> Result<f64> {
        let (i0, i1) = (traj.snapshot_index(t0)?, traj.snapshot_index(t1)?);
        let m = self.manifold.len();
        let wspace = StateSpace::new(m, window.len())?;
        let fw: Vec<f64> = (0..wspace.len()).map(|x| f(&wspace.decode(x))).collect();
        let gen = &self.manifold.generator;
        let evolved = |s: f64| -> Result<Vec<f64>> {
            let g = self.manifold.heat_semigroup(s)?;
            Ok(tensor_apply(&fw, &g, window.len(), m))
        };
        let lift_w = |v: &[f64]| self.lift(window, |x| v[wspace.encode(x)]);
        let mut vals = Vec::with_capacity(i1 + 1 - i0);
        for k in i0..=i1 {
            let s = traj.times[i1] - traj.times[k];
            let gf = evolved(s.max(0.0))?;
            let l0 = tensor_generator(&gf, gen, window.len(), m);
            let a = self.apply_backward(&lift_w(&gf));
            let l0_lift = lift_w(&l0);
            let diff: Vec<f64> = a.iter().zip(&l0_lift).map(|(x, y)| x - y).collect();
            vals.push(self.expect(&traj.snapshots[k], &diff));
        }
        let integral = trapezoid(&traj.times[i0..=i1], &vals);
        let e1 = self.expect(&traj.snapshots[i1], &lift_w(&fw));
        let e0 = self.expect(&traj.snapshots[i0], &lift_w(&evolved(traj.times[i1] - traj.times[i0])?));
        Ok((e1 - e0 - integral).abs())
    }
}

/// Apply a single-site matrix along every axis of a tensor.
pub(crate) fn tensor_apply(f: &[f64], mat: &DMatrix<f64>, sites: usize, m: usize) -> Vec<f64> {
    let mut cur = f.to_vec();
    let mut next = vec![0.0; f.len()];
    for k in 0..sites {
        axis_apply(&cur, &mut next, mat, k, sites, m);
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// `Σ_k (I ⊗ … ⊗ L ⊗ … ⊗ I) f`.
fn tensor_generator(f: &[f64], gen: &DMatrix<f64>, sites: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    let mut tmp = vec![0.0; f.len()];
    for k in 0..sites {
        axis_apply(f, &mut tmp, gen, k, sites, m);
        out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
    }
    out
}

fn axis_apply(f: &[f64], out: &mut [f64], mat: &DMatrix<f64>, k: usize, sites: usize, m: usize) {
    let stride = m.pow((sites - 1 - k) as u32);
    let outer = f.len() / (m * stride);
    for o in 0..outer {
        for t in 0..stride {
            let base = o * m * stride + t;
            for x in 0..m {
                let mut acc = 0.0;
                for y in 0..m {
                    acc += mat[(x, y)] * f[base + y * stride];
                }
                out[base + x * stride] = acc;
            }
        }
    }
}

pub(crate) fn trapezoid(t: &[f64], v: &[f64]) -> f64 {
    t.windows(2).zip(v.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

/// Discrete Fisher information `Σ_edges W_ab (p_b − p_a)(log p_b − log p_a)` w.r.t. `ω_Λ`.
pub fn fisher_information(p: &GridDensity) -> f64 {
    let man = &p.manifold;
    let space = p.space();
    let weights = p.weights();
    let mut total = 0.0;
    for a in 0..space.len() {
        for k in 0..space.sites {
            let st = space.stride(k);
            let u = (a / st) % space.nodes;
            for &(v, c) in man.neighbors(u) {
                if v <= u {
                    continue;
                }
                let b = a - u * st + v * st;
                let (pa, pb) = (p.values[a], p.values[b]);
                if pa == pb {
                    continue;
                }
                if pa <= 0.0 || pb <= 0.0 {
                    return f64::INFINITY;
                }
                total += c * weights[a] / man.omega[u] * (pb - pa) * (pb.ln() - pa.ln());
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ManifoldKind, Potential};
    use crate::interaction::{grad_box_energy, CouplingKernel};
    use std::f64::consts::PI;

    fn circle(m: usize) -> Arc<WeightedManifold> {
        Arc::new(WeightedManifold::build(ManifoldKind::Circle, m, Potential::Zero).unwrap())
    }

    fn torus_model(sites: usize, m: usize, beta: f64) -> FpkModel {
        FpkModel::new(
            BoxSpec::torus(1, sites).unwrap(),
            circle(m),
            beta,
            CouplingKernel::nearest_neighbor(1, 0.5),
            Psi::CosDiff,
        )
        .unwrap()
    }

    fn bumpy(model: &FpkModel) -> GridDensity {
        let man = model.manifold.clone();
        let nodes = man.grid.nodes.clone();
        GridDensity::from_fn(model.boxspec.clone(), man, |x| {
            x.iter().enumerate().map(|(i, &n)| 1.0 + 0.6 * (nodes[n].angle() - i as f64).cos()).product::<f64>()
                * (1.0 + 0.3 * (nodes[x[0]].angle() - nodes[x[x.len() - 1]].angle()).sin())
        })
        .and_then(|p| GridDensity::normalized(p.boxspec.clone(), p.manifold.clone(), p.values))
        .unwrap()
    }

    #[test]
    fn cosine_mode_decays_like_heat() {
        let model = torus_model(1, 64, 0.0);
        let man = model.manifold.clone();
        let p0 = GridDensity::new(model.boxspec.clone(), man.clone(), man.sample(|x| 1.0 + 0.5 * x.angle().cos())).unwrap();
        let traj = model.run(&p0, 1e-4, 1.0, Scheme::Explicit, 10_000).unwrap();
        let p1 = traj.at(1.0).unwrap();
        let exact = man.sample(|x| 1.0 + 0.5 * (-1.0f64).exp() * x.angle().cos());
        let l1: f64 = p1.values.iter().zip(&exact).zip(&man.omega).map(|((a, b), w)| (a - b).abs() * w).sum();
        assert!(l1 < 1e-4, "L1(ω) error {l1}");
        // the discrete mode is reproduced to time-stepping accuracy
        let h = 2.0 * PI / 64.0;
        let lam = (2.0 - 2.0 * h.cos()) / (h * h);
        let discrete = man.sample(|x| 1.0 + 0.5 * (-lam).exp() * x.angle().cos());
        let sup = p1.values.iter().zip(&discrete).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(sup < 2e-5, "discrete-mode error {sup}");
        assert!((p1.mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gibbs_density_is_stationary() {
        let model = torus_model(3, 8, 0.7);
        let g = model.gibbs_density().unwrap();
        for scheme in [Scheme::Explicit, Scheme::Implicit, Scheme::CrankNicolson] {
            let mut st = FpkState::new(g.clone());
            model.step(&mut st, 1e-3, scheme).unwrap();
            assert!(st.density.l1_distance(&g) < 1e-8);
        }
    }

    #[test]
    fn free_energy_decreases_and_mass_is_kept() {
        let model = torus_model(3, 8, 0.5);
        let p0 = bumpy(&model);
        for scheme in [Scheme::Implicit, Scheme::CrankNicolson, Scheme::Explicit] {
            let traj = model.run(&p0, 1e-3, 0.1, scheme, 50).unwrap();
            assert!(traj.max_free_energy_increase() < 1e-8);
            assert_eq!(traj.clipped_mass(), 0.0);
            assert!((traj.snapshots.last().unwrap().mass() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn explicit_scheme_rejects_large_steps() {
        let model = torus_model(2, 32, 0.5);
        let p0 = model.gibbs_density().unwrap();
        let mut st = FpkState::new(p0);
        let dt = 2.0 * model.stability_bound();
        assert!(matches!(model.step(&mut st, dt, Scheme::Explicit), Err(Error::Stability(_))));
        assert!(model.step(&mut st, dt, Scheme::Implicit).is_ok());
    }

    #[test]
    fn fisher_information_of_cosine_density() {
        let exact = {
            // ∫ (0.5 sin θ)² / (1 + 0.5 cos θ) dθ/2π, fine midpoint rule
            let n = 200_000;
            (0..n)
                .map(|k| {
                    let t = 2.0 * PI * (k as f64 + 0.5) / n as f64;
                    (0.5 * t.sin()).powi(2) / (1.0 + 0.5 * t.cos())
                })
                .sum::<f64>()
                / n as f64
        };
        let err = |m: usize| {
            let man = circle(m);
            let p = GridDensity::new(BoxSpec::segment(0, 1), man.clone(), man.sample(|x| 1.0 + 0.5 * x.angle().cos())).unwrap();
            (fisher_information(&p) - exact).abs()
        };
        let (e1, e2) = (err(64), err(128));
        assert!(e1 < 2e-3);
        assert!((e1 / e2 - 4.0).abs() < 0.3, "ratio {}", e1 / e2);
        let man = circle(16);
        assert_eq!(fisher_information(&GridDensity::uniform(BoxSpec::segment(0, 1), man).unwrap()), 0.0);
    }

    #[test]
    fn full_window_drift_is_the_gradient() {
        let model = torus_model(3, 8, 0.5);
        let p = bumpy(&model);
        let drift = model.conditional_drift(&p, &[0, 1, 2]).unwrap();
        let space = model.space();
        let nodes = &model.manifold.grid.nodes;
        let couplings = model.boxspec.pair_couplings(&model.coupling);
        for x in 0..space.len() {
            let pts: Vec<_> = space.decode(x).iter().map(|&n| nodes[n]).collect();
            let g = grad_box_energy(&pts, &couplings, Psi::CosDiff);
            for k in 0..3 {
                assert!((drift.at(x, k).dot(&Tangent::Scalar(1.0)) - g[k].dot(&Tangent::Scalar(1.0))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_site_drift_matches_direct_conditioning() {
        let model = torus_model(3, 8, 0.5);
        let p = bumpy(&model);
        let drift = model.conditional_drift(&p, &[1]).unwrap();
        let space = model.space();
        let nodes = &model.manifold.grid.nodes;
        let masses = p.masses();
        for x1 in 0..8 {
            let (mut num, mut den) = (0.0, 0.0);
            for a in 0..space.len() {
                let xs = space.decode(a);
                if xs[1] != x1 {
                    continue;
                }
                // site 1 sees sites 0 and 2 with J = 1/2 each
                let g: f64 = [0usize, 2]
                    .iter()
                    .map(|&j| 2.0 * 0.5 * -(nodes[x1].angle() - nodes[xs[j]].angle()).sin())
                    .sum();
                num += masses[a] * g;
                den += masses[a];
            }
            let Tangent::Scalar(v) = *drift.at(x1, 0) else { panic!() };
            assert!((v - num / den).abs() < 1e-12);
            assert!(v.abs() <= 2.0 * model.coupling.l1_norm() + 1e-12);
        }
    }

    #[test]
    fn product_density_exterior_term_ignores_window() {
        let model = torus_model(3, 8, 0.5);
        let man = model.manifold.clone();
        let rho = man.normalize_density(&man.sample(|x| 1.0 + 0.4 * (x.angle() - 0.3).cos()));
        let p = GridDensity::product(model.boxspec.clone(), man.clone(), &[rho.clone(), rho.clone(), rho.clone()]).unwrap();
        let drift = model.conditional_drift(&p, &[0, 1]).unwrap();
        let nodes = &man.grid.nodes;
        for x0 in 0..8 {
            for x1 in 0..8 {
                // site 0: interior neighbour 1 and exterior neighbour 2
                let interior = 2.0 * 0.5 * -(nodes[x0].angle() - nodes[x1].angle()).sin();
                let exterior: f64 = (0..8)
                    .map(|y| 2.0 * 0.5 * -(nodes[x0].angle() - nodes[y].angle()).sin() * rho[y] * man.omega[y])
                    .sum();
                let Tangent::Scalar(v) = *drift.at(x0 * 8 + x1, 0) else { panic!() };
                assert!((v - interior - exterior).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn window_equation_tracks_marginal() {
        let model = torus_model(3, 16, 0.5);
        let p = bumpy(&model);
        let gap = |dt: f64| {
            let mut st = FpkState::new(p.clone());
            model.step(&mut st, dt, Scheme::Explicit).unwrap();
            let full = st.marginal(&[0]).unwrap();
            let pw = p.marginal(&[0]).unwrap();
            let drift = model.conditional_drift(&p, &[0]).unwrap();
            let win = model.marginal_step(&pw, &drift, dt).unwrap();
            full.l1_distance(&win)
        };
        let (g1, g2) = (gap(1e-3), gap(5e-4));
        assert!(g1 < 1e-3 * 0.05, "gap {g1}");
        assert!((g1 / g2 - 2.0).abs() < 0.1);
    }

    #[test]
    fn dual_and_duhamel_residuals() {
        let model = torus_model(2, 16, 0.0);
        let p0 = bumpy(&model);
        let traj = model.run(&p0, 1e-3, 0.2, Scheme::CrankNicolson, 1).unwrap();
        let nodes = model.manifold.grid.nodes.clone();
        let cst = |_: f64, _: &[usize]| 1.0;
        assert!(model.dual_residual(&traj, &cst, &[0], 0.0, 0.2).unwrap() < 1e-14);
        let f = |x: &[usize]| nodes[x[0]].angle().cos() + 0.5 * (nodes[x[1]].angle() * 2.0).sin();
        let r = model.duhamel_residual(&traj, &f, &[0, 1], 0.0, 0.2).unwrap();
        assert!(r < 1e-6, "β = 0 Duhamel residual {r}");
        let tf = |t: f64, x: &[usize]| (1.0 + t) * nodes[x[0]].angle().cos();
        assert!(model.dual_residual(&traj, &tf, &[0], 0.0, 0.2).unwrap() < 1e-6);

        let model = torus_model(2, 16, 0.5);
        let traj = model.run(&p0, 1e-4, 0.05, Scheme::CrankNicolson, 5).unwrap();
        let r = model.duhamel_residual(&traj, &f, &[0, 1], 0.0, 0.05).unwrap();
        assert!(r < 1e-3, "interacting Duhamel residual {r}");
        assert!(model.dual_residual(&traj, &tf, &[0], 0.0, 0.05).unwrap() < 1e-3);
    }

    #[test]
    fn de_bruijn_identity() {
        let model = torus_model(1, 64, 0.0);
        let man = model.manifold.clone();
        let p0 = GridDensity::new(model.boxspec.clone(), man.clone(), man.sample(|x| 1.0 + 0.5 * x.angle().cos())).unwrap();
        let traj = model.run(&p0, 1e-4, 0.02, Scheme::CrankNicolson, 1).unwrap();
        let r = &traj.records;
        for k in 1..r.len() - 1 {
            let dfdt = (r[k + 1].free_energy - r[k - 1].free_energy) / 2e-4;
            assert!((dfdt + r[k].fisher).abs() < 1e-6 * (1.0 + r[k].fisher));
        }
        assert!(r.windows(2).all(|w| w[1].fisher <= w[0].fisher + 1e-14));
    }
}
