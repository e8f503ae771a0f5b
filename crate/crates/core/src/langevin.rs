//! Interacting overdamped Langevin dynamics of spin configurations.
//!
//! Each site follows the geodesic Euler–Maruyama step
//! `x_i ← exp_{x_i}(√(2dt) ξ_i − (∇U(x_i) + β∇_i H(x)) dt)` with exact exponential
//! maps on the circle and the sphere. Gaussian increments come from counter-based
//! ChaCha streams keyed on (particle, step, lattice site), so two processes on
//! nested boxes consume identical increments at every common site, and a run is
//! reproducible bit for bit regardless of the number of threads.
//!
//! Both interaction potentials equal the inner product of embeddings, so the
//! interaction drift is `2 P_{x_i} Σ_j J_ij e(x_j)` with `P_x` the tangent projection.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{geodesic_distance, sphere_exp, wrap_angle, ManifoldGrid, ManifoldKind, Point, Potential, Tangent};
use crate::interaction::{grad_box_energy, BoxSpec, CouplingKernel, Psi, Topology};
use crate::parallel::{ensure_pool, mean_and_stderr};
use crate::vec3::{self, Vec3};

/// Bits of the noise key reserved for each lattice coordinate.
const KEY_BITS: u32 = 12;
const KEY_OFFSET: i64 = 1 << (KEY_BITS - 1);
/// ChaCha words consumed per site and step: two `f64` uniforms.
const WORDS_PER_SITE: u128 = 4;

/// Single-spin space, potentials and couplings of an interacting spin system.
#[derive(Clone, Debug)]
pub struct SpinSystem {
    pub kind: ManifoldKind,
    pub potential: Potential,
    pub coupling: CouplingKernel,
    pub psi: Psi,
    pub beta: f64,
}

impl SpinSystem {
    /// `sup |∇U| + 2β‖J‖₁ sup|∂₁Ψ|`, a bound on the drift of every site.
    pub fn drift_bound(&self) -> f64 {
        let grad_u = match self.potential {
            Potential::Zero => 0.0,
            Potential::OneMinusCos { a } | Potential::DotAxis { a } => a.abs(),
        };
        grad_u + 2.0 * self.beta.abs() * self.coupling.l1_norm() * self.psi.sup()
    }
}

/// Drift and noise structure of the dynamics on a fixed box.
#[derive(Clone, Debug)]
pub struct LangevinModel {
    pub system: SpinSystem,
    pub boxspec: BoxSpec,
    /// Multiplies the Brownian increments; one for the physical dynamics.
    pub noise_scale: f64,
    /// Per site: neighbors `j` with weight `2J_ij`, self pairs dropped.
    fields: Vec<Vec<(usize, f64)>>,
    /// Sites carrying a drift; the others are free Brownian motions.
    active: Vec<bool>,
    keys: Vec<u128>,
    keyspace: u128,
}

impl LangevinModel {
    /// Dynamics driven by the box energy `H_Λ` (wrapped on a torus).
    pub fn new(system: SpinSystem, boxspec: BoxSpec) -> Result<Self> {
        let active = vec![true; boxspec.len()];
        Self::build(system, boxspec, active)
    }

    /// The finite-volume process on `outer`: sites of `inner` feel `∇U + β∇H_inner`,
    /// the remaining sites of `outer` move as independent Brownian motions.
    pub fn finite_volume(system: SpinSystem, outer: BoxSpec, inner: &BoxSpec) -> Result<Self> {
        let active: Vec<bool> = outer.sites.iter().map(|s| inner.sites.contains(s)).collect();
        if active.iter().filter(|&&a| a).count() != inner.len() {
            return invalid("inner box is not contained in the outer box");
        }
        Self::build(system, outer, active)
    }

    fn build(system: SpinSystem, boxspec: BoxSpec, active: Vec<bool>) -> Result<Self> {
        if boxspec.dim != system.coupling.dim() {
            return invalid("box and coupling dimensions differ");
        }
        if !system.beta.is_finite() {
            return invalid("inverse temperature must be finite");
        }
        let s = boxspec.len();
        let couplings = boxspec.pair_couplings(&system.coupling);
        let fields = (0..s)
            .map(|i| {
                if !active[i] {
                    return Vec::new();
                }
                (0..s)
                    .filter(|&j| j != i && active[j] && couplings[i * s + j] != 0.0)
                    .map(|j| (j, 2.0 * couplings[i * s + j]))
                    .collect()
            })
            .collect();
        let keys = boxspec.sites.iter().map(|site| site_key(site)).collect::<Result<Vec<_>>>()?;
        let keyspace = 1u128 << (KEY_BITS as usize * boxspec.dim);
        Ok(LangevinModel { system, boxspec, noise_scale: 1.0, fields, active, keys, keyspace })
    }

    pub fn kind(&self) -> ManifoldKind {
        self.system.kind
    }

    pub fn sites(&self) -> usize {
        self.boxspec.len()
    }

    pub fn is_active(&self, site: usize) -> bool {
        self.active[site]
    }

    /// Full drift `∇U(x_i) + β∇_i H(x)` at every site of one configuration.
    pub fn drift(&self, x: &[Point]) -> Vec<Tangent> {
        let mut emb = vec![[0.0; 3]; x.len()];
        let mut out = vec![Tangent::zero(self.kind()); x.len()];
        self.drift_into(x, &mut emb, &mut out);
        out
    }

    fn drift_into(&self, x: &[Point], emb: &mut [Vec3], out: &mut [Tangent]) {
        let beta = self.system.beta;
        for (e, p) in emb.iter_mut().zip(x) {
            *e = p.embed();
        }
        for i in 0..x.len() {
            if !self.active[i] {
                out[i] = Tangent::zero(self.kind());
                continue;
            }
            let mut g = if self.system.potential.is_zero() {
                Tangent::zero(self.kind())
            } else {
                self.system.potential.gradient(&x[i])
            };
            if beta != 0.0 && !self.fields[i].is_empty() {
                let mut h = [0.0; 3];
                for &(j, w) in &self.fields[i] {
                    vec3::axpy(&mut h, w, &emb[j]);
                }
                g = g.add(&tangent_part(&x[i], &emb[i], &h).scaled(beta));
            }
            out[i] = g;
        }
    }

    /// Interaction energy `Σ_{i≠j} J_ij Ψ(x_i, x_j)` over active pairs plus `Σ U(x_i)` over active sites.
    pub fn energy(&self, x: &[Point]) -> f64 {
        let emb: Vec<Vec3> = x.iter().map(|p| p.embed()).collect();
        let mut e = 0.0;
        for i in 0..x.len() {
            if !self.active[i] {
                continue;
            }
            e += self.system.potential.value(&x[i]);
            for &(j, w) in &self.fields[i] {
                e += 0.5 * self.system.beta * w * vec3::dot(&emb[i], &emb[j]);
            }
        }
        e
    }

    fn advance(&self, x: &mut [Point], noise: &[Tangent], dt: f64, emb: &mut [Vec3], drift: &mut [Tangent]) {
        self.drift_into(x, emb, drift);
        for i in 0..x.len() {
            let v = noise[i].add(&drift[i].scaled(-dt));
            x[i] = exp_point(&x[i], &v);
        }
    }
}

/// Tangent projection of the ambient field `h` at `x` (embedding `e`).
#[inline]
fn tangent_part(x: &Point, e: &Vec3, h: &Vec3) -> Tangent {
    match x {
        Point::Angle(_) => Tangent::Scalar(-e[1] * h[0] + e[0] * h[1]),
        Point::Unit(p) => Tangent::Ambient(vec3::project(p, h)),
    }
}

#[inline]
fn exp_point(x: &Point, v: &Tangent) -> Point {
    match (x, v) {
        (Point::Angle(t), Tangent::Scalar(s)) => {
            let y = t + s;
            Point::Angle(if (0.0..TAU).contains(&y) { y } else { wrap_angle(y) })
        }
        (Point::Unit(p), Tangent::Ambient(w)) => Point::Unit(sphere_exp(p, w)),
        _ => panic!("point and tangent vector belong to different manifolds"),
    }
}

/// Tangent vector as an ambient vector of R^3.
#[inline]
fn ambient(x: &Point, v: &Tangent) -> Vec3 {
    match (x, v) {
        (Point::Angle(t), Tangent::Scalar(s)) => [-s * t.sin(), s * t.cos(), 0.0],
        (_, Tangent::Ambient(w)) => *w,
        _ => panic!("point and tangent vector belong to different manifolds"),
    }
}

/// Parallel transport of `v ∈ T_x` to `T_y` along the minimizing geodesic.
pub fn parallel_transport(x: &Point, y: &Point, v: &Tangent) -> Tangent {
    match (x, y, v) {
        (Point::Angle(_), Point::Angle(_), Tangent::Scalar(_)) => *v,
        (Point::Unit(p), Point::Unit(q), Tangent::Ambient(w)) => {
            let c = vec3::dot(p, q);
            if 1.0 + c < 1e-12 {
                // Antipodal: no unique geodesic, keep the projected vector.
                return Tangent::Ambient(vec3::project(q, w));
            }
            let s = vec3::dot(q, w) / (1.0 + c);
            Tangent::Ambient([w[0] - s * (p[0] + q[0]), w[1] - s * (p[1] + q[1]), w[2] - s * (p[2] + q[2])])
        }
        _ => panic!("points and tangent vector belong to different manifolds"),
    }
}

/// Noise key of a lattice site: coordinates offset and packed, last coordinate fastest.
fn site_key(site: &[i32]) -> Result<u128> {
    let mut key = 0u128;
    for &c in site {
        let shifted = c as i64 + KEY_OFFSET;
        if shifted < 0 || shifted >= 1 << KEY_BITS {
            return invalid(format!("site coordinate {c} is outside the noise key range"));
        }
        key = (key << KEY_BITS) | shifted as u128;
    }
    Ok(key)
}

/// Counter-based Gaussian drivers derived from a seed root.
#[derive(Clone, Copy, Debug)]
struct Drivers {
    seed: [u8; 32],
}

impl Drivers {
    fn new(seed: u64) -> Self {
        Drivers { seed: ChaCha8Rng::seed_from_u64(seed).get_seed() }
    }

    /// Two standard normals per site for one particle and step (Box–Muller).
    fn normals(&self, particle: usize, step: u64, keys: &[u128], keyspace: u128, out: &mut [[f64; 2]]) {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(particle as u64);
        let base = step as u128 * keyspace;
        let mut pos = u128::MAX;
        for (z, key) in out.iter_mut().zip(keys) {
            let wp = (base + key) * WORDS_PER_SITE;
            if wp != pos {
                rng.set_word_pos(wp);
            }
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            pos = wp + WORDS_PER_SITE;
            let r = (-2.0 * (1.0 - u1).ln()).sqrt();
            let (s, c) = (TAU * u2).sin_cos();
            *z = [r * c, r * s];
        }
    }
}

/// Tangent increment `σ(z₀e₁ + z₁e₂)` in the standard frame at `x`.
#[inline]
fn realize(x: &Point, z: [f64; 2], sigma: f64) -> Tangent {
    match x {
        Point::Angle(_) => Tangent::Scalar(sigma * z[0]),
        Point::Unit(p) => {
            let (e1, e2) = vec3::tangent_frame(p);
            let mut v = vec3::scale(&e1, sigma * z[0]);
            vec3::axpy(&mut v, sigma * z[1], &e2);
            Tangent::Ambient(v)
        }
    }
}

/// Initial law of the spins, i.i.d. over sites.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum InitialLaw {
    /// Normalized volume.
    Uniform,
    /// Density `∝ e^{k cos θ}` on the circle or `∝ e^{k z}` on the sphere.
    Tilted { k: f64 },
    /// Every spin at the given point; the circle uses the longitude as its angle.
    Aligned { colatitude: f64, longitude: f64 },
}

impl InitialLaw {
    pub fn sample<R: Rng>(&self, kind: ManifoldKind, rng: &mut R) -> Point {
        match (*self, kind) {
            (InitialLaw::Uniform, ManifoldKind::Circle) => Point::Angle(TAU * rng.random::<f64>()),
            (InitialLaw::Uniform, ManifoldKind::Sphere) => {
                let z = 2.0 * rng.random::<f64>() - 1.0;
                unit_from_z(z, TAU * rng.random::<f64>())
            }
            (InitialLaw::Tilted { k }, ManifoldKind::Circle) => loop {
                let t = TAU * rng.random::<f64>();
                let log_accept = k * t.cos() - k.abs();
                if rng.random::<f64>().ln() <= log_accept {
                    break Point::Angle(t);
                }
            },
            (InitialLaw::Tilted { k }, ManifoldKind::Sphere) => {
                let u: f64 = rng.random();
                let z = if k.abs() < 1e-12 {
                    2.0 * u - 1.0
                } else {
                    let a = k.abs();
                    let z = 1.0 + (u + (1.0 - u) * (-2.0 * a).exp()).ln() / a;
                    z.clamp(-1.0, 1.0) * k.signum()
                };
                unit_from_z(z, TAU * rng.random::<f64>())
            }
            (InitialLaw::Aligned { longitude, .. }, ManifoldKind::Circle) => Point::Angle(wrap_angle(longitude)),
            (InitialLaw::Aligned { colatitude, longitude }, ManifoldKind::Sphere) => {
                Point::from_spherical(colatitude, longitude)
            }
        }
    }
}

fn unit_from_z(z: f64, phi: f64) -> Point {
    let r = (1.0 - z * z).max(0.0).sqrt();
    Point::Unit([r * phi.cos(), r * phi.sin(), z])
}

/// `N` configurations of a box, stored particle-major, with their driver seed and clock.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub kind: ManifoldKind,
    pub sites: usize,
    pub points: Vec<Point>,
    pub seed: u64,
    pub step: u64,
    pub time: f64,
}

impl Ensemble {
    pub fn new(kind: ManifoldKind, sites: usize, points: Vec<Point>, seed: u64) -> Result<Self> {
        if sites == 0 || points.len() % sites != 0 {
            return invalid("point count is not a multiple of the site count");
        }
        let ens = Ensemble { kind, sites, points, seed, step: 0, time: 0.0 };
        if ens.max_norm_defect() > 1e-10 {
            return invalid("initial points are not on the manifold");
        }
        Ok(ens)
    }

    /// Sample `particles` configurations with i.i.d. spins; the draw is keyed on the seed and particle.
    pub fn sample(kind: ManifoldKind, sites: usize, particles: usize, law: &InitialLaw, seed: u64) -> Result<Self> {
        ensure_pool();
        let root = ChaCha8Rng::seed_from_u64(seed ^ 0x1d1_7a1_5eed).get_seed();
        let mut points = vec![Point::Angle(0.0); sites * particles];
        points.par_chunks_mut(sites.max(1)).enumerate().for_each(|(p, x)| {
            let mut rng = ChaCha8Rng::from_seed(root);
            rng.set_stream(p as u64);
            for v in x.iter_mut() {
                *v = law.sample(kind, &mut rng);
            }
        });
        Self::new(kind, sites, points, seed)
    }

    /// Same configurations under a different driver seed, with the clock reset.
    pub fn reseeded(&self, seed: u64) -> Self {
        Ensemble { seed, step: 0, time: 0.0, ..self.clone() }
    }

    pub fn particles(&self) -> usize {
        self.points.len() / self.sites
    }

    pub fn particle(&self, p: usize) -> &[Point] {
        &self.points[p * self.sites..(p + 1) * self.sites]
    }

    /// Largest deviation of a sphere spin from unit norm (zero on the circle).
    pub fn max_norm_defect(&self) -> f64 {
        self.points
            .iter()
            .map(|p| match p {
                Point::Angle(t) => if t.is_finite() { 0.0 } else { f64::INFINITY },
                Point::Unit(x) => (vec3::norm(x) - 1.0).abs(),
            })
            .fold(0.0, f64::max)
    }

    /// Empirical law of the spins at `positions`, binned to nearest grid nodes (row-major, site-major digits).
    pub fn histogram(&self, grid: &ManifoldGrid, positions: &[usize]) -> Vec<f64> {
        let m = grid.len();
        let bins = m.pow(positions.len() as u32);
        let counts = self
            .points
            .par_chunks(self.sites)
            .fold(
                || vec![0u64; bins],
                |mut acc, x| {
                    let idx = positions.iter().fold(0, |acc, &k| acc * m + grid.nearest_node(&x[k]));
                    acc[idx] += 1;
                    acc
                },
            )
            .reduce(
                || vec![0u64; bins],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    a
                },
            );
        let n = self.particles() as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    /// Binary dump: little-endian `f64` coordinates per particle and site (angle, or x y z).
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for p in &self.points {
            match p {
                Point::Angle(t) => w.write_all(&t.to_le_bytes())?,
                Point::Unit(x) => {
                    for c in x {
                        w.write_all(&c.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshot(path: &Path, kind: ManifoldKind, sites: usize, seed: u64) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let width = match kind {
            ManifoldKind::Circle => 1,
            ManifoldKind::Sphere => 3,
        };
        if bytes.len() % (8 * width) != 0 {
            return Err(Error::Schema("snapshot length is not a whole number of spins".into()));
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let points = match kind {
            ManifoldKind::Circle => vals.into_iter().map(Point::Angle).collect(),
            ManifoldKind::Sphere => vals.chunks_exact(3).map(|c| Point::Unit([c[0], c[1], c[2]])).collect(),
        };
        Self::new(kind, sites, points, seed)
    }
}

struct Scratch {
    z: Vec<[f64; 2]>,
    noise: Vec<Tangent>,
    emb: Vec<Vec3>,
    drift: Vec<Tangent>,
}

impl Scratch {
    fn new(kind: ManifoldKind, sites: usize, copies: usize) -> Self {
        Scratch {
            z: vec![[0.0; 2]; sites],
            noise: vec![Tangent::zero(kind); sites * copies],
            emb: vec![[0.0; 3]; sites],
            drift: vec![Tangent::zero(kind); sites],
        }
    }
}

fn check_compatible(model: &LangevinModel, ens: &Ensemble, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return invalid("time step must be positive");
    }
    if ens.sites != model.sites() || ens.kind != model.kind() {
        return invalid("ensemble does not match the model box or manifold");
    }
    Ok(())
}

/// One geodesic Euler–Maruyama step of every particle.
pub fn langevin_step(model: &LangevinModel, ens: &mut Ensemble, dt: f64) -> Result<()> {
    check_compatible(model, ens, dt)?;
    ensure_pool();
    let drivers = Drivers::new(ens.seed);
    let step = ens.step;
    let s = ens.sites;
    let kind = ens.kind;
    let sigma = model.noise_scale * (2.0 * dt).sqrt();
    ens.points.par_chunks_mut(s).enumerate().for_each_init(
        || Scratch::new(kind, s, 1),
        |sc, (p, x)| {
            drivers.normals(p, step, &model.keys, model.keyspace, &mut sc.z);
            for i in 0..s {
                sc.noise[i] = realize(&x[i], sc.z[i], sigma);
            }
            model.advance(x, &sc.noise, dt, &mut sc.emb, &mut sc.drift);
        },
    );
    ens.step += 1;
    ens.time += dt;
    Ok(())
}

/// Step several processes with shared drivers.
///
/// The first ensemble draws its increments in its own frames; every other
/// ensemble receives those increments parallel-transported to its own spins
/// (a synchronous coupling). All ensembles must share the box and the seed clock of the first.
pub fn shared_step(models: &[&LangevinModel], ensembles: &mut [Ensemble], dt: f64) -> Result<()> {
    if models.len() != ensembles.len() || models.is_empty() {
        return invalid("one model per ensemble is required");
    }
    for (m, e) in models.iter().zip(ensembles.iter()) {
        check_compatible(m, e, dt)?;
        if m.keys != models[0].keys || e.particles() != ensembles[0].particles() {
            return invalid("coupled ensembles must share sites and particle count");
        }
    }
    ensure_pool();
    let drivers = Drivers::new(ensembles[0].seed);
    let step = ensembles[0].step;
    let s = ensembles[0].sites;
    let kind = ensembles[0].kind;
    let copies = ensembles.len();
    let sigma = models[0].noise_scale * (2.0 * dt).sqrt();
    let mut rows: Vec<Vec<&mut [Point]>> = (0..ensembles[0].particles()).map(|_| Vec::with_capacity(copies)).collect();
    for e in ensembles.iter_mut() {
        for (row, chunk) in rows.iter_mut().zip(e.points.chunks_mut(s)) {
            row.push(chunk);
        }
    }
    rows.into_par_iter().enumerate().for_each_init(
        || Scratch::new(kind, s, copies),
        |sc, (p, mut row)| {
            drivers.normals(p, step, &models[0].keys, models[0].keyspace, &mut sc.z);
            for i in 0..s {
                sc.noise[i] = realize(&row[0][i], sc.z[i], sigma);
            }
            for k in 1..copies {
                for i in 0..s {
                    sc.noise[k * s + i] = parallel_transport(&row[0][i], &row[k][i], &sc.noise[i]);
                }
            }
            for (k, x) in row.iter_mut().enumerate() {
                models[k].advance(x, &sc.noise[k * s..(k + 1) * s], dt, &mut sc.emb, &mut sc.drift);
            }
        },
    );
    for e in ensembles.iter_mut() {
        e.step = step + 1;
        e.time += dt;
    }
    Ok(())
}

/// Per-particle observables recorded along a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// Site average of `cos θ` (circle) or `z` (sphere).
    Cos,
    /// `(Σ U(x_i) + βH) / |Λ|`.
    Energy,
    /// Norm of the site-averaged embedding.
    Magnetization,
}

impl Observable {
    pub fn name(&self) -> &'static str {
        match self {
            Observable::Cos => "cos",
            Observable::Energy => "energy",
            Observable::Magnetization => "magnetization",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cos" => Ok(Observable::Cos),
            "energy" => Ok(Observable::Energy),
            "magnetization" => Ok(Observable::Magnetization),
            other => Err(Error::Schema(format!("unknown observable '{other}'"))),
        }
    }

    pub fn evaluate(&self, model: &LangevinModel, x: &[Point]) -> f64 {
        let s = x.len() as f64;
        match self {
            Observable::Cos => x.iter().map(axis_cos).sum::<f64>() / s,
            Observable::Energy => model.energy(x) / s,
            Observable::Magnetization => {
                let mut m = [0.0; 3];
                for p in x {
                    vec3::axpy(&mut m, 1.0 / s, &p.embed());
                }
                vec3::norm(&m)
            }
        }
    }
}

#[inline]
fn axis_cos(p: &Point) -> f64 {
    match p {
        Point::Angle(t) => t.cos(),
        Point::Unit(x) => x[2],
    }
}

/// Ensemble means of observables with standard errors over time.
#[derive(Clone, Debug, Default)]
pub struct ObservableSeries {
    pub names: Vec<String>,
    pub times: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stderrs: Vec<Vec<f64>>,
}

impl ObservableSeries {
    pub(crate) fn record(&mut self, model: &LangevinModel, ens: &Ensemble, observables: &[Observable]) {
        self.times.push(ens.time);
        let (mut m, mut e) = (Vec::new(), Vec::new());
        for o in observables {
            let (mean, se) = mean_and_stderr(ens.particles(), |p| o.evaluate(model, ens.particle(p)));
            m.push(mean);
            e.push(se);
        }
        self.means.push(m);
        self.stderrs.push(e);
    }

    /// CSV with columns `t` then `<name>,<name>_se` per observable.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut header = vec!["t".to_string()];
        for n in &self.names {
            header.push(n.clone());
            header.push(format!("{n}_se"));
        }
        writeln!(w, "{}", header.join(","))?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = vec![format!("{t:.6}")];
            for (m, e) in self.means[k].iter().zip(&self.stderrs[k]) {
                row.push(format!("{m:.12e}"));
                row.push(format!("{e:.12e}"));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Number of steps of size `dt` covering `[0, t_end]`.
pub fn step_count(t_end: f64, dt: f64) -> Result<u64> {
    if !(dt > 0.0) || !(t_end >= 0.0) || !t_end.is_finite() {
        return invalid("horizon must be non-negative and the step positive");
    }
    Ok((t_end / dt - 1e-9).ceil().max(0.0) as u64)
}

/// Advance to `t_end`, recording the observables every `every` steps and at the end.
pub fn run(
    model: &LangevinModel,
    ens: &mut Ensemble,
    dt: f64,
    t_end: f64,
    every: u64,
    observables: &[Observable],
) -> Result<ObservableSeries> {
    let steps = step_count(t_end, dt)?;
    let every = every.max(1);
    let mut series = ObservableSeries { names: observables.iter().map(|o| o.name().to_string()).collect(), ..Default::default() };
    series.record(model, ens, observables);
    for k in 1..=steps {
        langevin_step(model, ens, dt)?;
        if k % every == 0 || k == steps {
            series.record(model, ens, observables);
        }
    }
    Ok(series)
}

/// Metropolis sampler of `∝ e^{−Σ U(x_i) − βH_Λ}` vol on the model's box.
pub fn gibbs_ensemble(model: &LangevinModel, particles: usize, sweeps: usize, seed: u64) -> Result<Ensemble> {
    ensure_pool();
    let kind = model.kind();
    let s = model.sites();
    let mut ens = Ensemble::sample(kind, s, particles, &InitialLaw::Uniform, seed)?;
    let root = ChaCha8Rng::seed_from_u64(seed ^ 0x6_1bb5_5eed).get_seed();
    let beta = model.system.beta;
    ens.points.par_chunks_mut(s).enumerate().for_each(|(p, x)| {
        let mut rng = ChaCha8Rng::from_seed(root);
        rng.set_stream(p as u64);
        let mut emb: Vec<Vec3> = x.iter().map(|q| q.embed()).collect();
        for _ in 0..sweeps {
            for i in 0..s {
                let proposal = match x[i] {
                    Point::Angle(t) => Point::Angle(wrap_angle(t + 2.0 * rng.random::<f64>() - 1.0)),
                    Point::Unit(_) => {
                        let z = [normal(&mut rng), normal(&mut rng)];
                        exp_point(&x[i], &realize(&x[i], z, 0.5))
                    }
                };
                let e_new = proposal.embed();
                let mut delta = model.system.potential.value(&proposal) - model.system.potential.value(&x[i]);
                if model.active[i] {
                    let mut h = [0.0; 3];
                    for &(j, w) in &model.fields[i] {
                        vec3::axpy(&mut h, w, &emb[j]);
                    }
                    delta += beta * vec3::dot(&vec3::sub(&e_new, &emb[i]), &h);
                } else {
                    delta = 0.0;
                }
                if delta <= 0.0 || rng.random::<f64>() < (-delta).exp() {
                    x[i] = proposal;
                    emb[i] = e_new;
                }
            }
        }
    });
    Ok(ens)
}

fn normal<R: RngCore>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (TAU * u2).cos()
}

/// The weighted configuration metric `d_γ` built from the Hessian bound matrix `S`.
#[derive(Clone, Debug)]
pub struct GammaMetric {
    pub window: BoxSpec,
    pub origin: usize,
    pub eta: Vec<f64>,
    /// Row-major `S` on the window.
    pub s: Vec<f64>,
    pub c: f64,
    /// Origin row of `T = Σ S^k/(1+c)^k`.
    pub t_row: Vec<f64>,
    pub gamma: Vec<f64>,
    pub terms: usize,
}

/// Build `γ` from `S_ij = ‖∇²_ij H‖∞ + η_j + 1_{i=j}` with geometric `η_j ∝ ratio^{|j|₁}`.
pub fn build_gamma(j: &CouplingKernel, psi: Psi, eta_ratio: f64, window: &BoxSpec) -> Result<GammaMetric> {
    if !(eta_ratio > 0.0 && eta_ratio < 1.0) {
        return invalid("eta ratio must lie in (0, 1)");
    }
    if window.dim != j.dim() {
        return invalid("window and coupling dimensions differ");
    }
    let origin = window
        .index_of(&vec![0; window.dim])
        .ok_or_else(|| Error::InvalidArgument("window must contain the origin".into()))?;
    let w = window.len();
    let d2 = psi.sup_d2();
    let j_l1 = j.l1_norm();
    let dist = |site: &[i32]| -> i32 {
        match window.topology {
            Topology::Free => site.iter().map(|c| c.abs()).sum(),
            Topology::Torus { period } => site.iter().map(|&c| c.min(period as i32 - c)).sum(),
        }
    };
    let mut eta: Vec<f64> = window.sites.iter().map(|s| eta_ratio.powi(dist(s))).collect();
    let eta_tail = match window.topology {
        Topology::Free => {
            let norm = ((1.0 - eta_ratio) / (1.0 + eta_ratio)).powi(window.dim as i32);
            eta.iter_mut().for_each(|v| *v *= norm);
            (1.0 - eta.iter().sum::<f64>()).max(0.0)
        }
        Topology::Torus { .. } => {
            let total: f64 = eta.iter().sum();
            eta.iter_mut().for_each(|v| *v /= total);
            0.0
        }
    };
    if eta_tail > 1e-10 {
        return invalid(format!("window too small: eta mass {eta_tail:.3e} lies outside"));
    }
    let couplings = window.pair_couplings(j);
    let mut s = vec![0.0; w * w];
    for a in 0..w {
        for b in 0..w {
            let hess = if a == b { 2.0 * j_l1 * d2 } else { 2.0 * couplings[a * w + b].abs() * d2 };
            s[a * w + b] = hess + eta[b] + if a == b { 1.0 } else { 0.0 };
        }
    }
    // Row sums on the whole lattice: add the Hessian mass of couplings leaving a free window.
    let mut c = 0.0f64;
    for a in 0..w {
        let mut lost = eta_tail;
        if window.topology == Topology::Free {
            for (o, v) in j.entries() {
                let y: Vec<i32> = window.sites[a].iter().zip(o).map(|(p, q)| p + q).collect();
                if o.iter().any(|&q| q != 0) && window.index_of(&y).is_none() {
                    lost += 2.0 * v.abs() * d2;
                }
            }
        }
        c = c.max(s[a * w..(a + 1) * w].iter().sum::<f64>() + lost);
    }
    let mut v = vec![0.0; w];
    v[origin] = 1.0;
    let mut t_row = v.clone();
    let mut terms = 1;
    let mut next = vec![0.0; w];
    loop {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (a, &va) in v.iter().enumerate() {
            if va != 0.0 {
                for (x, sab) in next.iter_mut().zip(&s[a * w..(a + 1) * w]) {
                    *x += va * sab;
                }
            }
        }
        let scale = 1.0 / (1.0 + c);
        next.iter_mut().for_each(|x| *x *= scale);
        std::mem::swap(&mut v, &mut next);
        t_row.iter_mut().zip(&v).for_each(|(t, x)| *t += x);
        terms += 1;
        let norm: f64 = v.iter().sum();
        if norm < 1e-14 {
            break;
        }
        if terms > 1_000_000 || !norm.is_finite() {
            return Err(Error::NoConvergence(format!("series for T did not converge (c = {c})")));
        }
    }
    let total: f64 = t_row.iter().sum();
    let gamma = t_row.iter().map(|t| t / total).collect();
    Ok(GammaMetric { window: window.clone(), origin, eta, s, c, t_row, gamma, terms })
}

impl GammaMetric {
    /// `max_i (Σ_j γ_j S_ji − (1+c) γ_i)`; non-positive when the Schur inequality holds.
    pub fn schur_defect(&self) -> f64 {
        let w = self.gamma.len();
        (0..w)
            .map(|i| {
                let lhs: f64 = (0..w).map(|j| self.gamma[j] * self.s[j * w + i]).sum();
                lhs - (1.0 + self.c) * self.gamma[i]
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `√(c(1+c))`, the interpolated bound on the norm of `S` acting on `ℓ²(γ)`.
    pub fn op_norm_bound(&self) -> f64 {
        (self.c * (1.0 + self.c)).sqrt()
    }

    /// Weights of the sites of `b`; sites outside the window get zero.
    pub fn weights_on(&self, b: &BoxSpec) -> Vec<f64> {
        b.sites.iter().map(|s| self.window.index_of(s).map_or(0.0, |k| self.gamma[k])).collect()
    }

    /// `d_γ(x, y)` for configurations on `b`; sites outside `b` are taken equal.
    pub fn distance(&self, b: &BoxSpec, x: &[Point], y: &[Point]) -> f64 {
        d_gamma(x, y, &self.weights_on(b))
    }
}

/// `[Σ_i w_i d(x_i, y_i)²]^{1/2}`.
pub fn d_gamma(x: &[Point], y: &[Point], weights: &[f64]) -> f64 {
    d_gamma_sq(x, y, weights).sqrt()
}

pub fn d_gamma_sq(x: &[Point], y: &[Point], weights: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|((a, b), w)| {
            let d = geodesic_distance(a, b);
            w * d * d
        })
        .sum()
}

/// Result of the empirical Lipschitz check of `∇H` on `(Conf, d_γ)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub pairs: usize,
    pub max_ratio: f64,
    pub bound: f64,
}

/// Largest `‖∇H(x) − ∇H(y)‖_{ℓ²(γ)} / d_γ(x, y)` over random pairs on the window of `gm`.
///
/// `x` is uniform; `y` moves a random subset of the central half of the window
/// by geodesic steps of random scale, so both distant and nearby pairs occur.
pub fn lipschitz_check(
    gm: &GammaMetric,
    kind: ManifoldKind,
    j: &CouplingKernel,
    psi: Psi,
    pairs: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    if gm.window.topology != Topology::Free {
        return invalid("the Lipschitz check runs on a free window");
    }
    let couplings = gm.window.pair_couplings(j);
    let radius = gm.window.sites.iter().flat_map(|s| s.iter().map(|c| c.abs())).max().unwrap_or(0);
    let inner: Vec<bool> = gm.window.sites.iter().map(|s| s.iter().all(|c| 2 * c.abs() <= radius)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio = 0.0f64;
    for _ in 0..pairs {
        let x: Vec<Point> = gm.window.sites.iter().map(|_| InitialLaw::Uniform.sample(kind, &mut rng)).collect();
        let scale = std::f64::consts::PI * 10f64.powf(-4.0 * rng.random::<f64>());
        let fraction: f64 = rng.random();
        let y: Vec<Point> = x
            .iter()
            .zip(&inner)
            .map(|(p, &movable)| {
                if movable && rng.random::<f64>() < fraction {
                    let z = [normal(&mut rng), normal(&mut rng)];
                    exp_point(p, &realize(p, z, scale))
                } else {
                    *p
                }
            })
            .collect();
        let d = d_gamma(&x, &y, &gm.gamma);
        if d == 0.0 {
            continue;
        }
        let gx = grad_box_energy(&x, &couplings, psi);
        let gy = grad_box_energy(&y, &couplings, psi);
        let num: f64 = (0..x.len())
            .map(|i| {
                let diff = vec3::sub(&ambient(&x[i], &gx[i]), &ambient(&y[i], &gy[i]));
                gm.gamma[i] * vec3::dot(&diff, &diff)
            })
            .sum();
        max_ratio = max_ratio.max(num.sqrt() / d);
    }
    Ok(LipschitzReport { pairs, max_ratio, bound: gm.op_norm_bound() })
}

/// Monte-Carlo estimate of `E[sup_{t≤T} d_γ²(X^n_t, X^p_t)]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CauchyGap {
    pub n: usize,
    pub p: usize,
    pub mean: f64,
    pub stderr: f64,
    /// Per-particle path suprema, for paired comparisons across `n`.
    #[serde(skip)]
    pub samples: Vec<f64>,
}

/// Parameters of a finite-volume coupling experiment.
#[derive(Clone, Debug)]
pub struct CauchySetup {
    pub radii: Vec<usize>,
    pub outer_radius: usize,
    pub t_end: f64,
    pub dt: f64,
    pub particles: usize,
    pub seed: u64,
    pub init: InitialLaw,
}

/// Gaps between the finite-volume processes `X^n` (`n` in `radii`) and `X^p`, all driven
/// by the same increments on `Λ_p` and started from common i.i.d. spins.
pub fn coupled_cauchy_gap(system: &SpinSystem, setup: &CauchySetup, gm: &GammaMetric) -> Result<Vec<CauchyGap>> {
    let dim = system.coupling.dim();
    let outer = BoxSpec::cube(dim, setup.outer_radius);
    if setup.radii.iter().any(|&n| n > setup.outer_radius) {
        return invalid("inner radii must not exceed the outer radius");
    }
    let mut models = vec![LangevinModel::new(system.clone(), outer.clone())?];
    for &n in &setup.radii {
        models.push(LangevinModel::finite_volume(system.clone(), outer.clone(), &BoxSpec::cube(dim, n))?);
    }
    let refs: Vec<&LangevinModel> = models.iter().collect();
    let start = Ensemble::sample(system.kind, outer.len(), setup.particles, &setup.init, setup.seed)?;
    let mut ensembles = vec![start; models.len()];
    let weights = gm.weights_on(&outer);
    let k = setup.radii.len();
    let s = outer.len();
    let mut sup = vec![0.0f64; setup.particles * k];
    let steps = step_count(setup.t_end, setup.dt)?;
    for _ in 0..steps {
        shared_step(&refs, &mut ensembles, setup.dt)?;
        let ens = &ensembles;
        sup.par_chunks_mut(k).enumerate().for_each(|(p, row)| {
            let reference = &ens[0].points[p * s..(p + 1) * s];
            for (r, e) in row.iter_mut().zip(&ens[1..]) {
                *r = r.max(d_gamma_sq(&e.points[p * s..(p + 1) * s], reference, &weights));
            }
        });
    }
    Ok((0..k)
        .map(|q| {
            let samples: Vec<f64> = (0..setup.particles).map(|p| sup[p * k + q]).collect();
            let (mean, stderr) = mean_and_stderr(samples.len(), |p| samples[p]);
            CauchyGap { n: setup.radii[q], p: setup.outer_radius, mean, stderr, samples }
        })
        .collect())
}

/// Decay of `E[d_γ²]` between two synchronously coupled ensembles.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContractionFit {
    pub times: Vec<f64>,
    pub mean_d2: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `−slope` of the least-squares fit of `log E[d_γ²]` over `[T/2, T]`; infinite if the gap vanishes.
    pub rate: f64,
    /// Root-mean-square residual of that fit.
    pub residual: f64,
}

/// Run `a` and `b` with shared drivers (noise of `a` transported to `b`) and fit the decay rate.
pub fn synchronous_contraction(
    model: &LangevinModel,
    a: &mut Ensemble,
    b: &mut Ensemble,
    dt: f64,
    t_end: f64,
    every: u64,
    weights: &[f64],
) -> Result<ContractionFit> {
    if weights.len() != model.sites() {
        return invalid("one weight per site is required");
    }
    let steps = step_count(t_end, dt)?;
    let every = every.max(1);
    let mut fit = ContractionFit { times: Vec::new(), mean_d2: Vec::new(), stderr: Vec::new(), rate: 0.0, residual: 0.0 };
    let mut pair = [a.clone(), b.clone()];
    let record = |fit: &mut ContractionFit, pair: &[Ensemble; 2]| {
        let (m, se) = mean_and_stderr(pair[0].particles(), |p| {
            d_gamma_sq(pair[0].particle(p), pair[1].particle(p), weights)
        });
        fit.times.push(pair[0].time);
        fit.mean_d2.push(m);
        fit.stderr.push(se);
    };
    record(&mut fit, &pair);
    for k in 1..=steps {
        shared_step(&[model, model], &mut pair, dt)?;
        if k % every == 0 || k == steps {
            record(&mut fit, &pair);
        }
    }
    let t_end = pair[0].time;
    let pts: Vec<(f64, f64)> = fit
        .times
        .iter()
        .zip(&fit.mean_d2)
        .filter(|(t, m)| **t >= 0.5 * t_end - 1e-12 && **m > 0.0)
        .map(|(t, m)| (*t, m.ln()))
        .collect();
    if pts.len() < 2 {
        fit.rate = f64::INFINITY;
    } else {
        let (slope, intercept) = least_squares(&pts);
        fit.rate = -slope;
        fit.residual = (pts.iter().map(|(t, y)| (y - intercept - slope * t).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    }
    [*a, *b] = pair;
    Ok(fit)
}

/// Slope and intercept of the least-squares line through `pts`.
pub fn least_squares(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Smooth single-site test functions with closed-form gradient and Laplacian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum LocalFn {
    Constant { value: f64 },
    /// `cos θ_i` on the circle, `z_i` on the sphere.
    Cos { site: usize },
}

impl LocalFn {
    pub fn value(&self, x: &[Point]) -> f64 {
        match self {
            LocalFn::Constant { value } => *value,
            LocalFn::Cos { site } => axis_cos(&x[*site]),
        }
    }

    /// `Lφ = Δ_Uφ − β∇H·∇φ` given the full drift at each site.
    fn generator(&self, x: &[Point], drift: &[Tangent]) -> f64 {
        match self {
            LocalFn::Constant { .. } => 0.0,
            LocalFn::Cos { site } => match x[*site] {
                Point::Angle(t) => {
                    let g = Tangent::Scalar(-t.sin());
                    -t.cos() - drift[*site].dot(&g)
                }
                Point::Unit(p) => {
                    let g = Tangent::Ambient(vec3::project(&p, &[0.0, 0.0, 1.0]));
                    -2.0 * p[2] - drift[*site].dot(&g)
                }
            },
        }
    }
}

/// Conditional means of the martingale increment over coarse bins of `φ(X_t)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub lag: f64,
    pub mean: f64,
    pub stderr: f64,
    /// Per bin: centre, mean increment, standard error, count.
    pub bins: Vec<(f64, f64, f64, usize)>,
    /// Largest `|mean|/stderr` over bins with at least two samples.
    pub max_z: f64,
    /// Least-squares slope of `φ(X_{t+lag})` against `φ(X_t)`.
    pub slope: f64,
}

/// Estimate `E[φ(X_{t+lag}) − φ(X_t) − ∫ Lφ(X_s) ds | φ(X_t)]` by simulation from `ens`.
pub fn martingale_residual(
    model: &LangevinModel,
    ens: &Ensemble,
    phi: &LocalFn,
    lag: f64,
    dt: f64,
    bins: usize,
) -> Result<MartingaleReport> {
    if let LocalFn::Cos { site } = phi {
        if *site >= model.sites() {
            return invalid("test function site is outside the box");
        }
    }
    let steps = step_count(lag, dt)?;
    let n = ens.particles();
    let start: Vec<f64> = (0..n).map(|p| phi.value(ens.particle(p))).collect();
    let generator_values = |e: &Ensemble| -> Vec<f64> {
        (0..n).into_par_iter().map(|p| phi.generator(e.particle(p), &model.drift(e.particle(p)))).collect()
    };
    let mut cur = ens.clone();
    let mut integral = vec![0.0; n];
    let mut prev = generator_values(&cur);
    for _ in 0..steps {
        langevin_step(model, &mut cur, dt)?;
        let next = generator_values(&cur);
        for p in 0..n {
            integral[p] += 0.5 * dt * (prev[p] + next[p]);
        }
        prev = next;
    }
    let end: Vec<f64> = (0..n).map(|p| phi.value(cur.particle(p))).collect();
    let incr: Vec<f64> = (0..n).map(|p| end[p] - start[p] - integral[p]).collect();
    let (mean, stderr) = mean_and_stderr(n, |p| incr[p]);
    let (lo, hi) = start.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let nb = bins.max(1);
    let width = if hi > lo { (hi - lo) / nb as f64 } else { 1.0 };
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); nb];
    for p in 0..n {
        let b = (((start[p] - lo) / width) as usize).min(nb - 1);
        groups[b].push(incr[p]);
    }
    let mut max_z = 0.0f64;
    let bins = groups
        .iter()
        .enumerate()
        .map(|(b, g)| {
            let (m, se) = mean_and_stderr(g.len(), |k| g[k]);
            if g.len() > 1 {
                max_z = max_z.max(if se > 0.0 { m.abs() / se } else if m == 0.0 { 0.0 } else { f64::INFINITY });
            }
            (lo + (b as f64 + 0.5) * width, m, se, g.len())
        })
        .collect();
    let (slope, _) = least_squares(&start.iter().copied().zip(end.iter().copied()).collect::<Vec<_>>());
    Ok(MartingaleReport { lag, mean, stderr, bins, max_z, slope })
}

/// `½ Σ |a − b|`.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
