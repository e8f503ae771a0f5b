//! Discretized single-spin manifolds: the circle and the 2-sphere.
//!
//! A [`WeightedManifold`] carries the reference probability `ω ∝ e^{-U} vol`
//! on the grid nodes together with a monotone finite-volume generator for
//! `Δ_U = Δ − ∇U·∇`. The generator is stored both as a dense matrix and as a
//! list of symmetric edge conductances `C_ab` with
//! `(Δ_U f)_a = (1/ω_a) Σ_b C_ab (f_b − f_a)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vec3::{self, Vec3};

/// Largest grid (per exponential) handled by the dense matrix routines.
pub const DENSE_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifoldKind {
    Circle,
    Sphere,
}

impl ManifoldKind {
    pub fn embed_dim(self) -> usize {
        match self {
            ManifoldKind::Circle => 2,
            ManifoldKind::Sphere => 3,
        }
    }

    /// Intrinsic dimension of the spin space.
    pub fn dim(self) -> usize {
        match self {
            ManifoldKind::Circle => 1,
            ManifoldKind::Sphere => 2,
        }
    }
}

/// A point of the spin space: an angle on the circle or a unit vector on the sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Point {
    Angle(f64),
    Unit(Vec3),
}

impl Point {
    pub fn angle(&self) -> f64 {
        match self {
            Point::Angle(t) => *t,
            Point::Unit(x) => x[1].atan2(x[0]),
        }
    }

    /// Embedding into R^2 (circle) or R^3 (sphere).
    pub fn embed(&self) -> Vec3 {
        match self {
            Point::Angle(t) => [t.cos(), t.sin(), 0.0],
            Point::Unit(x) => *x,
        }
    }

    pub fn from_spherical(colatitude: f64, longitude: f64) -> Point {
        let s = colatitude.sin();
        Point::Unit([s * longitude.cos(), s * longitude.sin(), colatitude.cos()])
    }

    /// Colatitude and longitude in `[0, π] × [0, 2π)`.
    pub fn spherical(&self) -> (f64, f64) {
        let x = self.embed();
        let theta = (x[0] * x[0] + x[1] * x[1]).sqrt().atan2(x[2]);
        (theta, wrap_angle(x[1].atan2(x[0])))
    }
}

/// Tangent vector: a scalar on the circle, an ambient 3-vector on the sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tangent {
    Scalar(f64),
    Ambient(Vec3),
}

impl Tangent {
    pub fn norm(&self) -> f64 {
        match self {
            Tangent::Scalar(v) => v.abs(),
            Tangent::Ambient(v) => vec3::norm(v),
        }
    }

    pub fn dot(&self, other: &Tangent) -> f64 {
        match (self, other) {
            (Tangent::Scalar(a), Tangent::Scalar(b)) => a * b,
            (Tangent::Ambient(a), Tangent::Ambient(b)) => vec3::dot(a, b),
            _ => panic!("tangent vectors of different manifold kinds"),
        }
    }

    pub fn scaled(&self, s: f64) -> Tangent {
        match self {
            Tangent::Scalar(v) => Tangent::Scalar(v * s),
            Tangent::Ambient(v) => Tangent::Ambient(vec3::scale(v, s)),
        }
    }

    pub fn add(&self, other: &Tangent) -> Tangent {
        match (self, other) {
            (Tangent::Scalar(a), Tangent::Scalar(b)) => Tangent::Scalar(a + b),
            (Tangent::Ambient(a), Tangent::Ambient(b)) => Tangent::Ambient(vec3::add(a, b)),
            _ => panic!("tangent vectors of different manifold kinds"),
        }
    }

    pub fn zero(kind: ManifoldKind) -> Tangent {
        match kind {
            ManifoldKind::Circle => Tangent::Scalar(0.0),
            ManifoldKind::Sphere => Tangent::Ambient([0.0; 3]),
        }
    }
}

/// Reduce an angle to `[0, 2π)`.
#[inline]
pub fn wrap_angle(t: f64) -> f64 {
    let r = t.rem_euclid(2.0 * PI);
    if r >= 2.0 * PI {
        0.0
    } else {
        r
    }
}

/// Signed shortest angular displacement from `a` to `b`, in `(−π, π]`.
#[inline]
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

/// Geodesic distance between two points of the same manifold.
pub fn geodesic_distance(x: &Point, y: &Point) -> f64 {
    match (x, y) {
        (Point::Angle(a), Point::Angle(b)) => {
            let d = (a - b).abs().rem_euclid(2.0 * PI);
            d.min(2.0 * PI - d)
        }
        (Point::Unit(a), Point::Unit(b)) => vec3::angle_between(a, b),
        _ => panic!("points of different manifold kinds"),
    }
}

/// Riemannian exponential map.
pub fn exp_map(x: &Point, v: &Tangent) -> Result<Point> {
    match (x, v) {
        (Point::Angle(t), Tangent::Scalar(s)) => Ok(Point::Angle(wrap_angle(t + s))),
        (Point::Unit(p), Tangent::Ambient(w)) => {
            if vec3::dot(p, w).abs() > 1e-10 * (1.0 + vec3::norm(w)) {
                return invalid("tangent vector is not orthogonal to the base point");
            }
            Ok(Point::Unit(sphere_exp(p, w)))
        }
        _ => invalid("point and tangent vector belong to different manifolds"),
    }
}

/// Sphere exponential without the tangency check; the result is renormalized.
#[inline]
pub fn sphere_exp(x: &Vec3, v: &Vec3) -> Vec3 {
    let r = vec3::norm(v);
    if r < 1e-14 {
        return *x;
    }
    let (s, c) = r.sin_cos();
    let y = [
        c * x[0] + s * v[0] / r,
        c * x[1] + s * v[1] / r,
        c * x[2] + s * v[2] / r,
    ];
    vec3::normalize(&y)
}

/// Riemannian logarithm `log_x y`, with the same antipodal tie-break as [`geodesic_point`].
pub fn log_map(x: &Point, y: &Point) -> Tangent {
    match (x, y) {
        (Point::Angle(a), Point::Angle(b)) => {
            let d = angle_diff(*a, *b);
            Tangent::Scalar(if (d.abs() - PI).abs() < 1e-12 { PI } else { d })
        }
        (Point::Unit(p), Point::Unit(q)) => {
            let r = vec3::angle_between(p, q);
            if r < 1e-15 {
                return Tangent::Ambient([0.0; 3]);
            }
            let w = vec3::project(p, q);
            let wn = vec3::norm(&w);
            let dir = if wn < 1e-12 { vec3::tangent_frame(p).0 } else { vec3::scale(&w, 1.0 / wn) };
            Tangent::Ambient(vec3::scale(&dir, r))
        }
        _ => panic!("points of different manifold kinds"),
    }
}

/// Point at fraction `t` along the minimizing geodesic from `x` to `y`.
///
/// Antipodal ties are broken deterministically: counterclockwise on the circle,
/// and on the sphere through the great circle containing the tangent frame's first axis.
pub fn geodesic_point(x: &Point, y: &Point, t: f64) -> Point {
    match (x, y) {
        (Point::Angle(a), Point::Angle(b)) => {
            let mut d = angle_diff(*a, *b);
            if (d.abs() - PI).abs() < 1e-12 {
                d = PI;
            }
            Point::Angle(wrap_angle(a + t * d))
        }
        (Point::Unit(p), Point::Unit(q)) => {
            let r = vec3::angle_between(p, q);
            if r < 1e-15 {
                return Point::Unit(*p);
            }
            let w = vec3::project(p, q);
            let wn = vec3::norm(&w);
            let dir = if wn < 1e-12 {
                vec3::tangent_frame(p).0
            } else {
                vec3::scale(&w, 1.0 / wn)
            };
            Point::Unit(sphere_exp(p, &vec3::scale(&dir, t * r)))
        }
        _ => panic!("points of different manifold kinds"),
    }
}

/// Single-spin confining potential `U`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum Potential {
    Zero,
    /// `a(1 − cos θ)`; on the sphere θ is the colatitude.
    OneMinusCos { a: f64 },
    /// Sphere: `a(1 − z)`; on the circle `a(1 − cos θ)`.
    DotAxis { a: f64 },
}

impl Potential {
    fn amplitude(&self) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::OneMinusCos { a } | Potential::DotAxis { a } => *a,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude() == 0.0
    }

    pub fn value(&self, x: &Point) -> f64 {
        let a = self.amplitude();
        match x {
            Point::Angle(t) => a * (1.0 - t.cos()),
            Point::Unit(v) => a * (1.0 - v[2]),
        }
    }

    /// Riemannian gradient of `U` at `x`.
    pub fn gradient(&self, x: &Point) -> Tangent {
        let a = self.amplitude();
        match x {
            Point::Angle(t) => Tangent::Scalar(a * t.sin()),
            Point::Unit(v) => Tangent::Ambient(vec3::scale(&vec3::project(v, &[0.0, 0.0, 1.0]), -a)),
        }
    }

    /// Laplace–Beltrami of `U` at `x`.
    pub fn laplacian(&self, x: &Point) -> f64 {
        let a = self.amplitude();
        match x {
            Point::Angle(t) => a * t.cos(),
            // Δ z = −2z on the unit sphere.
            Point::Unit(v) => 2.0 * a * v[2],
        }
    }
}

/// JSON description of a weighted manifold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    pub resolution: usize,
    #[serde(default = "zero_potential")]
    pub potential: Potential,
}

fn zero_potential() -> Potential {
    Potential::Zero
}

/// An undirected grid edge carrying the potential-free conductance.
#[derive(Clone, Copy, Debug)]
pub struct GridEdge {
    pub a: usize,
    pub b: usize,
    /// Conductance for `U ≡ 0`, normalized against the total volume.
    pub base: f64,
}

/// Node set, quadrature weights and neighbor structure of a spin-space grid.
#[derive(Clone, Debug)]
pub struct ManifoldGrid {
    pub kind: ManifoldKind,
    pub resolution: usize,
    pub nodes: Vec<Point>,
    /// Normalized Riemannian volume of each node's cell.
    pub quad_weights: Vec<f64>,
    pub edges: Vec<GridEdge>,
}

impl ManifoldGrid {
    pub fn new(kind: ManifoldKind, resolution: usize) -> Result<Self> {
        if resolution < 8 {
            return Err(Error::GridTooCoarse(format!(
                "resolution {resolution} is below the minimum of 8"
            )));
        }
        match kind {
            ManifoldKind::Circle => Ok(Self::circle(resolution)),
            ManifoldKind::Sphere => Ok(Self::sphere(resolution)),
        }
    }

    fn circle(m: usize) -> Self {
        let h = 2.0 * PI / m as f64;
        let nodes = (0..m).map(|k| Point::Angle(k as f64 * h)).collect();
        let quad_weights = vec![1.0 / m as f64; m];
        // With weights 1/m, the 3-point stencil scaled by h^{-2} has conductance 1/(m h^2).
        let base = 1.0 / (m as f64 * h * h);
        let edges = (0..m)
            .map(|k| GridEdge { a: k, b: (k + 1) % m, base })
            .collect();
        ManifoldGrid { kind: ManifoldKind::Circle, resolution: m, nodes, quad_weights, edges }
    }

    fn sphere(bands: usize) -> Self {
        let lons = 2 * bands;
        let dt = PI / bands as f64;
        let dp = 2.0 * PI / lons as f64;
        let colat = |k: usize| (k as f64 + 0.5) * dt;
        let total: f64 = (0..bands).map(|k| colat(k).sin() * dt * dp).sum::<f64>() * lons as f64;
        let mut nodes = Vec::with_capacity(bands * lons);
        let mut quad_weights = Vec::with_capacity(bands * lons);
        for k in 0..bands {
            for l in 0..lons {
                nodes.push(Point::from_spherical(colat(k), l as f64 * dp));
                quad_weights.push(colat(k).sin() * dt * dp / total);
            }
        }
        let idx = |k: usize, l: usize| k * lons + (l % lons);
        let mut edges = Vec::new();
        for k in 0..bands {
            let s = colat(k).sin();
            for l in 0..lons {
                // Longitude face: length Δθ, centers sin θ_k Δφ apart.
                edges.push(GridEdge { a: idx(k, l), b: idx(k, l + 1), base: dt / (s * dp) / total });
                if k + 1 < bands {
                    // Latitude face: length sin θ_{k+1/2} Δφ, centers Δθ apart.
                    let face = ((k + 1) as f64 * dt).sin() * dp;
                    edges.push(GridEdge { a: idx(k, l), b: idx(k + 1, l), base: face / dt / total });
                }
            }
        }
        ManifoldGrid { kind: ManifoldKind::Sphere, resolution: bands, nodes, quad_weights, edges }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.kind.embed_dim()
    }

    /// Number of longitudes of a sphere grid.
    fn lons(&self) -> usize {
        2 * self.resolution
    }

    /// Node nearest to `x` in grid coordinates.
    pub fn nearest_node(&self, x: &Point) -> usize {
        match self.kind {
            ManifoldKind::Circle => {
                let m = self.len();
                let h = 2.0 * PI / m as f64;
                (wrap_angle(x.angle()) / h).round() as usize % m
            }
            ManifoldKind::Sphere => {
                let bands = self.resolution;
                let lons = self.lons();
                let (theta, phi) = x.spherical();
                let k = ((theta / (PI / bands as f64)).floor() as usize).min(bands - 1);
                let l = (phi / (2.0 * PI / lons as f64)).round() as usize % lons;
                k * lons + l
            }
        }
    }

    /// Linear (cloud-in-cell) split of a point between neighboring nodes.
    pub fn linear_weights(&self, x: &Point) -> Vec<(usize, f64)> {
        match self.kind {
            ManifoldKind::Circle => {
                let m = self.len();
                let s = wrap_angle(x.angle()) / (2.0 * PI / m as f64);
                let k = s.floor();
                let f = s - k;
                let k = k as usize % m;
                vec![(k, 1.0 - f), ((k + 1) % m, f)]
            }
            ManifoldKind::Sphere => {
                let bands = self.resolution;
                let lons = self.lons();
                let (theta, phi) = x.spherical();
                let s = theta / (PI / bands as f64) - 0.5;
                let (k0, k1, ft) = if s <= 0.0 {
                    (0, 0, 0.0)
                } else if s >= (bands - 1) as f64 {
                    (bands - 1, bands - 1, 0.0)
                } else {
                    let k = s.floor();
                    (k as usize, k as usize + 1, s - k)
                };
                let r = phi / (2.0 * PI / lons as f64);
                let l = r.floor();
                let fp = r - l;
                let l0 = l as usize % lons;
                let l1 = (l0 + 1) % lons;
                vec![
                    (k0 * lons + l0, (1.0 - ft) * (1.0 - fp)),
                    (k0 * lons + l1, (1.0 - ft) * fp),
                    (k1 * lons + l0, ft * (1.0 - fp)),
                    (k1 * lons + l1, ft * fp),
                ]
            }
        }
    }

    /// Matrix of squared geodesic distances between nodes (row-major).
    pub fn squared_distances(&self) -> Vec<f64> {
        let m = self.len();
        let mut out = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                let d = geodesic_distance(&self.nodes[a], &self.nodes[b]);
                out[a * m + b] = d * d;
            }
        }
        out
    }
}

/// A grid with its reference measure `ω`, generator `Δ_U` and curvature bound.
#[derive(Clone, Debug)]
pub struct WeightedManifold {
    pub grid: ManifoldGrid,
    pub potential: Potential,
    /// Potential sampled at the nodes.
    pub u: Vec<f64>,
    /// `ω = e^{-U} vol`, renormalized to sum to one.
    pub omega: Vec<f64>,
    /// `log ∫ e^{-U} dvol` with `vol` normalized; recorded normalization constant.
    pub log_normalizer: f64,
    /// Symmetric conductances `C_ab`, one per undirected edge.
    pub conductances: Vec<(usize, usize, f64)>,
    /// Dense generator matrix `G` with `(Δ_U f)_a = Σ_b G_ab f_b`.
    pub generator: DMatrix<f64>,
    pub kappa: f64,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl WeightedManifold {
    pub fn build(kind: ManifoldKind, resolution: usize, potential: Potential) -> Result<Self> {
        let grid = ManifoldGrid::new(kind, resolution)?;
        Self::from_grid(grid, potential)
    }

    pub fn from_spec(spec: &ManifoldSpec) -> Result<Self> {
        Self::build(spec.kind, spec.resolution, spec.potential)
    }

    pub fn spec(&self) -> ManifoldSpec {
        ManifoldSpec { kind: self.grid.kind, resolution: self.grid.resolution, potential: self.potential }
    }

    pub fn from_grid(grid: ManifoldGrid, potential: Potential) -> Result<Self> {
        let m = grid.len();
        if m > DENSE_CAP {
            return Err(Error::StateSpaceTooLarge { states: m as u128, cap: DENSE_CAP });
        }
        let u: Vec<f64> = grid.nodes.iter().map(|x| potential.value(x)).collect();
        if let Some(k) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("potential at node {k}")));
        }
        let raw: Vec<f64> = u.iter().zip(&grid.quad_weights).map(|(u, w)| (-u).exp() * w).collect();
        let z: f64 = raw.iter().sum();
        let omega: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let conductances: Vec<(usize, usize, f64)> = grid
            .edges
            .iter()
            .map(|e| (e.a, e.b, e.base * (-(u[e.a] + u[e.b]) / 2.0).exp() / z))
            .collect();
        let mut neighbors = vec![Vec::new(); m];
        let mut generator = DMatrix::zeros(m, m);
        for &(a, b, c) in &conductances {
            neighbors[a].push((b, c));
            neighbors[b].push((a, c));
            generator[(a, b)] += c / omega[a];
            generator[(b, a)] += c / omega[b];
            generator[(a, a)] -= c / omega[a];
            generator[(b, b)] -= c / omega[b];
        }
        let kappa = bakry_emery_kappa(&grid, &potential, &u);
        Ok(WeightedManifold {
            grid,
            potential,
            u,
            omega,
            log_normalizer: z.ln(),
            conductances,
            generator,
            kappa,
            neighbors,
        })
    }

    pub fn kind(&self) -> ManifoldKind {
        self.grid.kind
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Neighbors of node `a` with their conductances.
    pub fn neighbors(&self, a: usize) -> &[(usize, f64)] {
        &self.neighbors[a]
    }

    /// Apply `Δ_U` to a nodal function.
    pub fn apply_generator(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        for &(a, b, c) in &self.conductances {
            let flux = c * (f[b] - f[a]);
            out[a] += flux / self.omega[a];
            out[b] -= flux / self.omega[b];
        }
        out
    }

    /// `⟨f, g⟩_ω`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).zip(&self.omega).map(|((a, b), w)| a * b * w).sum()
    }

    /// Dense heat semigroup `G_t = exp(t Δ_U)`, computed by scaling and squaring.
    pub fn heat_semigroup(&self, t: f64) -> Result<DMatrix<f64>> {
        if t < 0.0 || !t.is_finite() {
            return invalid(format!("heat semigroup needs t ≥ 0, got {t}"));
        }
        if t == 0.0 {
            return Ok(DMatrix::identity(self.len(), self.len()));
        }
        Ok((&self.generator * t).exp())
    }

    /// Heat kernel density `g_t(x, y)` with respect to `ω`.
    pub fn heat_kernel_density(&self, t: f64) -> Result<DMatrix<f64>> {
        let mut g = self.heat_semigroup(t)?;
        for b in 0..self.len() {
            let w = self.omega[b];
            g.column_mut(b).iter_mut().for_each(|v| *v /= w);
        }
        Ok(g)
    }

    /// Smallest `C` with `g_t(x, y) ≤ C t^{-n/2} exp(−d(x, y)²/4t)` over all node pairs and `times`.
    pub fn heat_kernel_bound_fit(&self, times: &[f64]) -> Result<HeatKernelFit> {
        let half_dim = self.kind().dim() as f64 / 2.0;
        let mut fit = HeatKernelFit { times: times.to_vec(), per_time: vec![], constant: 0.0, worst: None };
        let mut worst_log = f64::NEG_INFINITY;
        for &t in times {
            if t <= 0.0 {
                return invalid("heat kernel bound needs t > 0");
            }
            let g = self.heat_kernel_density(t)?;
            let mut best = f64::NEG_INFINITY;
            for a in 0..self.len() {
                for b in 0..self.len() {
                    let v = g[(a, b)];
                    // Nonpositive entries satisfy any bound.
                    if v <= 0.0 {
                        continue;
                    }
                    let log_c = v.ln() + half_dim * t.ln() + self.node_distance_sq(a, b) / (4.0 * t);
                    if log_c > best {
                        best = log_c;
                    }
                    if log_c > worst_log {
                        worst_log = log_c;
                        fit.worst = Some(KernelPair { t, a, b, density: v, distance: self.node_distance_sq(a, b).sqrt() });
                    }
                }
            }
            fit.per_time.push(best.exp());
        }
        fit.constant = worst_log.exp();
        Ok(fit)
    }

    /// Eigenvalues of `Δ_U` in decreasing order (0 first), via the ω-symmetrized matrix.
    pub fn spectrum(&self) -> Vec<f64> {
        let m = self.len();
        let sq: Vec<f64> = self.omega.iter().map(|w| w.sqrt()).collect();
        let sym = DMatrix::from_fn(m, m, |a, b| sq[a] * self.generator[(a, b)] / sq[b]);
        let sym = (&sym + sym.transpose()) * 0.5;
        let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    /// Squared geodesic distance between nodes.
    pub fn node_distance_sq(&self, a: usize, b: usize) -> f64 {
        let d = geodesic_distance(&self.grid.nodes[a], &self.grid.nodes[b]);
        d * d
    }

    /// Evaluate a continuous function at the nodes.
    pub fn sample(&self, f: impl Fn(&Point) -> f64) -> Vec<f64> {
        self.grid.nodes.iter().map(f).collect()
    }

    /// Density (w.r.t. `ω`) of a nodal function normalized to unit mass.
    pub fn normalize_density(&self, f: &[f64]) -> Vec<f64> {
        let mass: f64 = f.iter().zip(&self.omega).map(|(v, w)| v * w).sum();
        f.iter().map(|v| v / mass).collect()
    }

    pub fn heat_step_vector(&self, t: f64, p: &[f64]) -> Result<Vec<f64>> {
        let g = self.heat_semigroup(t)?;
        Ok((g * DVector::from_column_slice(p)).iter().copied().collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelPair {
    pub t: f64,
    pub a: usize,
    pub b: usize,
    pub density: f64,
    pub distance: f64,
}

/// Gaussian upper-bound constant of the grid heat kernel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatKernelFit {
    pub times: Vec<f64>,
    /// Smallest admissible constant at each time.
    pub per_time: Vec<f64>,
    pub constant: f64,
    /// Pair attaining `constant`.
    pub worst: Option<KernelPair>,
}

/// Lower bound `κ` of `Ric + ∇²U` on the grid.
fn bakry_emery_kappa(grid: &ManifoldGrid, potential: &Potential, u: &[f64]) -> f64 {
    match grid.kind {
        ManifoldKind::Circle => {
            let m = u.len();
            let h = 2.0 * PI / m as f64;
            (0..m)
                .map(|k| (u[(k + 1) % m] - 2.0 * u[k] + u[(k + m - 1) % m]) / (h * h))
                .fold(f64::INFINITY, f64::min)
        }
        ManifoldKind::Sphere => {
            if potential.is_zero() {
                return 1.0;
            }
            let s = 1e-3;
            let min_eig = grid
                .nodes
                .iter()
                .map(|p| {
                    let x = p.embed();
                    let (e1, e2) = vec3::tangent_frame(&x);
                    let u0 = potential.value(p);
                    let second = |v: Vec3| {
                        let up = potential.value(&Point::Unit(sphere_exp(&x, &vec3::scale(&v, s))));
                        let um = potential.value(&Point::Unit(sphere_exp(&x, &vec3::scale(&v, -s))));
                        (up - 2.0 * u0 + um) / (s * s)
                    };
                    let h11 = second(e1);
                    let h22 = second(e2);
                    let r = std::f64::consts::FRAC_1_SQRT_2;
                    let hpp = second(vec3::add(&vec3::scale(&e1, r), &vec3::scale(&e2, r)));
                    let h12 = hpp - 0.5 * (h11 + h22);
                    let mean = 0.5 * (h11 + h22);
                    let rad = (0.25 * (h11 - h22).powi(2) + h12 * h12).sqrt();
                    mean - rad
                })
                .fold(f64::INFINITY, f64::min);
            1.0 + min_eig
        }
    }
}
