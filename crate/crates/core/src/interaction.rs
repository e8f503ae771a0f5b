//! Pair couplings, the spin–spin potential, box energies and their gradients.
//!
//! Energies follow the double-sum convention `H_Λ(x) = Σ_{i,j∈Λ} J_ij Ψ(x_i, x_j)`,
//! diagonal included. Gradients are the true Riemannian gradients of that
//! energy, so every pair contributes through both of its ordered terms.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{ManifoldGrid, ManifoldKind, Point, Tangent};
use crate::vec3;

pub type Site = Vec<i32>;

fn euclid(o: &[i32]) -> f64 {
    o.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Translation-invariant symmetric coupling `J_{0,i}` with finite support.
#[derive(Clone, Debug)]
pub struct CouplingKernel {
    dim: usize,
    entries: Vec<(Site, f64)>,
    lookup: HashMap<Site, f64>,
    /// Bound on `Σ|J_{0,i}|` over offsets dropped by the cutoff.
    tail_bound: f64,
}

impl CouplingKernel {
    pub fn from_entries(dim: usize, entries: Vec<(Site, f64)>, tail_bound: f64) -> Result<Self> {
        let mut lookup = HashMap::new();
        for (o, v) in &entries {
            if o.len() != dim {
                return invalid(format!("offset {o:?} does not have dimension {dim}"));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("coupling at offset {o:?}")));
            }
            if lookup.insert(o.clone(), *v).is_some() {
                return invalid(format!("offset {o:?} listed twice"));
            }
        }
        for (o, v) in &entries {
            let neg: Site = o.iter().map(|x| -x).collect();
            let w = lookup.get(&neg).copied().unwrap_or(0.0);
            if (w - v).abs() > 1e-15 * (1.0 + v.abs()) {
                return invalid(format!("coupling is not symmetric at offset {o:?}"));
            }
        }
        let entries = entries.into_iter().filter(|(_, v)| *v != 0.0).collect();
        Ok(CouplingKernel { dim, entries, lookup, tail_bound })
    }

    pub fn zero(dim: usize) -> Self {
        CouplingKernel { dim, entries: Vec::new(), lookup: HashMap::new(), tail_bound: 0.0 }
    }

    /// `J_{0,±e_k} = value` for every lattice direction.
    pub fn nearest_neighbor(dim: usize, value: f64) -> Self {
        let mut entries = Vec::new();
        for k in 0..dim {
            for s in [-1, 1] {
                let mut o = vec![0; dim];
                o[k] = s;
                entries.push((o, value));
            }
        }
        Self::from_entries(dim, entries, 0.0).expect("nearest-neighbor kernel is symmetric")
    }

    /// `J_{0,i} = amplitude·(1+|i|)^{-exponent}` for `0 < |i| ≤ cutoff`, with `J_{0,0} = 0`.
    pub fn power_law(dim: usize, amplitude: f64, exponent: f64, cutoff: usize) -> Result<Self> {
        if exponent <= dim as f64 {
            return invalid(format!("power-law exponent {exponent} must exceed the dimension {dim}"));
        }
        let r = cutoff as i32;
        let mut entries = Vec::new();
        let mut o = vec![-r; dim];
        loop {
            let n = euclid(&o);
            if n > 0.0 && n <= cutoff as f64 {
                entries.push((o.clone(), amplitude * (1.0 + n).powf(-exponent)));
            }
            let mut k = 0;
            loop {
                if k == dim {
                    let tail = power_tail(dim, amplitude.abs(), exponent, cutoff as f64);
                    return Self::from_entries(dim, entries, tail);
                }
                o[k] += 1;
                if o[k] <= r {
                    break;
                }
                o[k] = -r;
                k += 1;
            }
        }
    }

    pub fn from_spec(dim: usize, spec: &CouplingSpec) -> Result<Self> {
        match spec.kind {
            CouplingType::Nn => Ok(Self::nearest_neighbor(dim, spec.j)),
            CouplingType::Power => Self::power_law(
                dim,
                spec.j,
                spec.exponent.ok_or_else(|| Error::Schema("power coupling needs an exponent".into()))?,
                spec.cutoff.ok_or_else(|| Error::Schema("power coupling needs a cutoff".into()))?,
            ),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, offset: &[i32]) -> f64 {
        self.lookup.get(offset).copied().unwrap_or(0.0)
    }

    /// Nonzero entries `(offset, J_{0,offset})`.
    pub fn entries(&self) -> &[(Site, f64)] {
        &self.entries
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v.abs()).sum()
    }

    pub fn linf_norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max)
    }

    pub fn tail_bound(&self) -> f64 {
        self.tail_bound
    }

    /// Largest Euclidean length of an offset in the support.
    pub fn range(&self) -> f64 {
        self.entries.iter().map(|(o, _)| euclid(o)).fold(0.0, f64::max)
    }

    /// `Σ_{|i|>radius} |J_{0,i}|` over the support.
    pub fn mass_beyond(&self, radius: f64) -> f64 {
        self.entries.iter().filter(|(o, _)| euclid(o) > radius).map(|(_, v)| v.abs()).sum()
    }
}

/// Integral bound on the power-law sum beyond the cutoff.
fn power_tail(dim: usize, amplitude: f64, exponent: f64, cutoff: f64) -> f64 {
    if dim == 1 {
        return 2.0 * amplitude * (1.0 + cutoff).powf(1.0 - exponent) / (exponent - 1.0);
    }
    // A unit-width shell at radius r holds at most c_d (r+2)^{d-1} ≤ c_d 2^{d-1} (1+r)^{d-1} sites.
    let c = match dim {
        2 => 8.0,
        _ => 40.0 * 2f64.powi(dim as i32 - 3),
    };
    let d = dim as f64;
    amplitude * c * 2f64.powf(d - 1.0) * (1.0 + cutoff).powf(d - exponent) / (exponent - d)
}

/// `(ℓ¹, ℓ^∞)` norms of the coupling.
pub fn coupling_norms(j: &CouplingKernel) -> (f64, f64) {
    (j.l1_norm(), j.linf_norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingType {
    Nn,
    Power,
}

/// JSON form of a coupling kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    #[serde(rename = "type")]
    pub kind: CouplingType,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<usize>,
}

/// The spin–spin potential `Ψ`. Both variants equal the inner product of embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Psi {
    /// `cos(θ − θ')` on the circle.
    CosDiff,
    /// `x·y` on the sphere.
    Dot,
}

impl Psi {
    #[inline]
    pub fn value(&self, x: &Point, y: &Point) -> f64 {
        match (x, y) {
            (Point::Angle(a), Point::Angle(b)) => (a - b).cos(),
            _ => vec3::dot(&x.embed(), &y.embed()),
        }
    }

    /// `∂₁Ψ(x, y)`, the gradient in the first argument.
    #[inline]
    pub fn d1(&self, x: &Point, y: &Point) -> Tangent {
        match (x, y) {
            (Point::Angle(a), Point::Angle(b)) => Tangent::Scalar(-(a - b).sin()),
            _ => Tangent::Ambient(vec3::project(&x.embed(), &y.embed())),
        }
    }

    /// Operator norms of the blocks `∂²₁₁Ψ` and `∂²₁₂Ψ` at `(x, y)`.
    pub fn d2_norms(&self, x: &Point, y: &Point) -> (f64, f64) {
        let c = self.value(x, y).abs();
        match x {
            Point::Angle(_) => (c, c),
            // P_x P_y keeps the direction x×y, so its norm is one.
            Point::Unit(_) => (c, 1.0),
        }
    }

    pub fn sup(&self) -> f64 {
        1.0
    }

    /// Uniform bound on the operator norms of `∂²₁₁Ψ` and `∂²₁₂Ψ`.
    pub fn sup_d2(&self) -> f64 {
        1.0
    }
}

/// `Ψ` and its first derivative sampled on a grid, with the derived sup norms.
#[derive(Clone, Debug)]
pub struct InteractionPotential {
    pub psi: Psi,
    pub m: usize,
    /// Row-major `Ψ(x_a, x_b)`.
    pub values: Vec<f64>,
    /// Row-major `∂₁Ψ(x_a, x_b)`.
    pub d1: Vec<Tangent>,
    pub sup_psi: f64,
    pub sup_d1: f64,
    pub sup_d2: f64,
}

impl InteractionPotential {
    pub fn sample(psi: Psi, grid: &ManifoldGrid) -> Self {
        let m = grid.len();
        let mut values = Vec::with_capacity(m * m);
        let mut d1 = Vec::with_capacity(m * m);
        let (mut sup_psi, mut sup_d1, mut sup_d2) = (0.0f64, 0.0f64, 0.0f64);
        for x in &grid.nodes {
            for y in &grid.nodes {
                let v = psi.value(x, y);
                let g = psi.d1(x, y);
                let (h11, h12) = psi.d2_norms(x, y);
                sup_psi = sup_psi.max(v.abs());
                sup_d1 = sup_d1.max(g.norm());
                sup_d2 = sup_d2.max(h11.max(h12));
                values.push(v);
                d1.push(g);
            }
        }
        InteractionPotential { psi, m, values, d1, sup_psi, sup_d1, sup_d2 }
    }

    #[inline]
    pub fn at(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.m + b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Topology {
    Free,
    Torus { period: usize },
}

/// A finite set of lattice sites with its boundary topology.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub dim: usize,
    pub sites: Vec<Site>,
    pub topology: Topology,
}

impl BoxSpec {
    /// `Λ_n = {−n..n}^d` with free boundary.
    pub fn cube(dim: usize, radius: usize) -> Self {
        let n = radius as i32;
        BoxSpec { dim, sites: lattice_block(dim, -n, n), topology: Topology::Free }
    }

    /// Periodic box `{0..N−1}^d`.
    pub fn torus(dim: usize, period: usize) -> Result<Self> {
        if period == 0 {
            return invalid("torus period must be positive");
        }
        Ok(BoxSpec { dim, sites: lattice_block(dim, 0, period as i32 - 1), topology: Topology::Torus { period } })
    }

    pub fn explicit(dim: usize, sites: Vec<Site>) -> Result<Self> {
        if sites.is_empty() {
            return invalid("box must contain at least one site");
        }
        let mut seen = std::collections::HashSet::new();
        for s in &sites {
            if s.len() != dim {
                return invalid(format!("site {s:?} does not have dimension {dim}"));
            }
            if !seen.insert(s.clone()) {
                return invalid(format!("site {s:?} listed twice"));
            }
        }
        Ok(BoxSpec { dim, sites, topology: Topology::Free })
    }

    /// One-dimensional free segment `{start, …, start+len−1}`.
    pub fn segment(start: i32, len: usize) -> Self {
        BoxSpec { dim: 1, sites: (0..len as i32).map(|k| vec![start + k]).collect(), topology: Topology::Free }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn index_of(&self, site: &[i32]) -> Option<usize> {
        let site = self.canonical(site);
        self.sites.iter().position(|s| *s == site)
    }

    /// Reduce a site modulo the period on a torus.
    pub fn canonical(&self, site: &[i32]) -> Site {
        match self.topology {
            Topology::Free => site.to_vec(),
            Topology::Torus { period } => site.iter().map(|v| v.rem_euclid(period as i32)).collect(),
        }
    }

    /// Dense pair couplings `J_ij` for sites of this box; on a torus the offsets wrap.
    pub fn pair_couplings(&self, j: &CouplingKernel) -> Vec<f64> {
        self.pair_couplings_within(j, f64::INFINITY)
    }

    /// Pair couplings restricted to offsets of length at most `radius`.
    pub fn pair_couplings_within(&self, j: &CouplingKernel, radius: f64) -> Vec<f64> {
        let s = self.len();
        let mut out = vec![0.0; s * s];
        match self.topology {
            Topology::Free => {
                for (a, x) in self.sites.iter().enumerate() {
                    for (b, y) in self.sites.iter().enumerate() {
                        let o: Site = y.iter().zip(x).map(|(p, q)| p - q).collect();
                        if euclid(&o) <= radius {
                            out[a * s + b] = j.value(&o);
                        }
                    }
                }
            }
            Topology::Torus { .. } => {
                let index: HashMap<Site, usize> =
                    self.sites.iter().enumerate().map(|(k, x)| (x.clone(), k)).collect();
                for (a, x) in self.sites.iter().enumerate() {
                    for (o, v) in j.entries() {
                        if euclid(o) > radius {
                            continue;
                        }
                        let y: Site = x.iter().zip(o).map(|(p, q)| p + q).collect();
                        let b = index[&self.canonical(&y)];
                        out[a * s + b] += v;
                    }
                }
            }
        }
        out
    }
}

fn lattice_block(dim: usize, lo: i32, hi: i32) -> Vec<Site> {
    let mut out = Vec::new();
    let mut cur = vec![lo; dim];
    if dim == 0 {
        return vec![Vec::new()];
    }
    loop {
        out.push(cur.clone());
        let mut k = dim;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            cur[k] += 1;
            if cur[k] <= hi {
                break;
            }
            cur[k] = lo;
        }
    }
}

/// Spin values on a finite set of sites.
#[derive(Clone, Debug)]
pub struct Configuration {
    pub sites: Vec<Site>,
    pub points: Vec<Point>,
    index: HashMap<Site, usize>,
}

impl Configuration {
    pub fn new(sites: Vec<Site>, points: Vec<Point>) -> Result<Self> {
        if sites.len() != points.len() {
            return invalid("sites and points differ in length");
        }
        let index = sites.iter().enumerate().map(|(k, s)| (s.clone(), k)).collect();
        Ok(Configuration { sites, points, index })
    }

    pub fn on_box(b: &BoxSpec, points: Vec<Point>) -> Result<Self> {
        Self::new(b.sites.clone(), points)
    }

    pub fn get(&self, site: &[i32]) -> Option<&Point> {
        self.index.get(site).map(|&k| &self.points[k])
    }

    fn require(&self, site: &[i32]) -> Result<&Point> {
        self.get(site).ok_or_else(|| Error::MissingCollar(site.to_vec()))
    }

    /// Values on the sites of `b`, in box order.
    pub fn restrict(&self, b: &BoxSpec) -> Result<Vec<Point>> {
        b.sites.iter().map(|s| self.require(s).copied()).collect()
    }
}

/// `H_Λ(x) = Σ_{i,j∈Λ} J_ij Ψ(x_i,x_j)` for points listed in box order.
pub fn energy_in_box(x: &[Point], b: &BoxSpec, j: &CouplingKernel, psi: Psi) -> Result<f64> {
    if x.len() != b.len() {
        return invalid(format!("configuration has {} sites, box has {}", x.len(), b.len()));
    }
    Ok(energy_with_couplings(x, &b.pair_couplings(j), psi))
}

/// Energy from a precomputed dense coupling matrix.
pub fn energy_with_couplings(x: &[Point], couplings: &[f64], psi: Psi) -> f64 {
    let s = x.len();
    let mut e = 0.0;
    for a in 0..s {
        for b in 0..s {
            let c = couplings[a * s + b];
            if c != 0.0 {
                e += c * psi.value(&x[a], &x[b]);
            }
        }
    }
    e
}

/// `H_{Λ,L}`: the box energy keeping only pairs with `|i − j| ≤ radius`.
pub fn truncated_energy(x: &[Point], b: &BoxSpec, radius: f64, j: &CouplingKernel, psi: Psi) -> Result<f64> {
    if x.len() != b.len() {
        return invalid("configuration does not match the box");
    }
    Ok(energy_with_couplings(x, &b.pair_couplings_within(j, radius), psi))
}

/// Gradient of the box energy `H_Λ` with respect to each spin of the box.
pub fn grad_box_energy(x: &[Point], couplings: &[f64], psi: Psi) -> Vec<Tangent> {
    let s = x.len();
    (0..s)
        .map(|a| {
            let mut g = Tangent::zero(kind_of(&x[a]));
            for b in 0..s {
                let c = couplings[a * s + b];
                if c != 0.0 {
                    g = g.add(&psi.d1(&x[a], &x[b]).scaled(2.0 * c));
                }
            }
            g
        })
        .collect()
}

fn kind_of(p: &Point) -> ManifoldKind {
    match p {
        Point::Angle(_) => ManifoldKind::Circle,
        Point::Unit(_) => ManifoldKind::Sphere,
    }
}

/// Gradient field `∇H(ℤ^d→Λ)` over the sites of `b`.
///
/// On a torus the collar wraps and `x` only needs the box sites. With a free
/// boundary `x` must cover every site within coupling range of the box.
pub fn grad_energy(x: &Configuration, b: &BoxSpec, j: &CouplingKernel, psi: Psi) -> Result<Vec<Tangent>> {
    match b.topology {
        Topology::Torus { .. } => {
            let pts = x.restrict(b)?;
            Ok(grad_box_energy(&pts, &b.pair_couplings(j), psi))
        }
        Topology::Free => b
            .sites
            .iter()
            .map(|site| {
                let xi = x.require(site)?;
                let mut g = Tangent::zero(kind_of(xi));
                let self_term = j.value(&vec![0; b.dim]);
                if self_term != 0.0 {
                    g = g.add(&psi.d1(xi, xi).scaled(2.0 * self_term));
                }
                for (o, v) in j.entries() {
                    if o.iter().all(|&c| c == 0) {
                        continue;
                    }
                    let y: Site = site.iter().zip(o).map(|(p, q)| p + q).collect();
                    let xj = x.require(&y)?;
                    g = g.add(&psi.d1(xi, xj).scaled(2.0 * v));
                }
                Ok(g)
            })
            .collect(),
    }
}

/// `H̃_Λ(x) = Σ_{i∈Λ, j∈ℤ^d} J_ij Ψ(x_i,x_j)`, the one-sided convention; needs the collar.
pub fn one_sided_energy(x: &Configuration, b: &BoxSpec, j: &CouplingKernel, psi: Psi) -> Result<f64> {
    let mut e = 0.0;
    for site in &b.sites {
        let xi = x.require(site)?;
        for (o, v) in j.entries() {
            let y: Site = site.iter().zip(o).map(|(p, q)| p + q).collect();
            e += v * psi.value(xi, x.require(&y)?);
        }
    }
    Ok(e)
}

/// `sup_x |H_Λ − H̃_Λ| / |Λ| = ‖Ψ‖∞ Σ_{i∈Λ} Σ_{j∉Λ} |J_ij| / |Λ|`.
///
/// The supremum is attained by a constant configuration when `J ≥ 0`.
pub fn convention_gap_per_site(b: &BoxSpec, j: &CouplingKernel, psi_sup: f64) -> f64 {
    let inside: std::collections::HashSet<&Site> = b.sites.iter().collect();
    let mut total = 0.0;
    for site in &b.sites {
        for (o, v) in j.entries() {
            let y: Site = site.iter().zip(o).map(|(p, q)| p + q).collect();
            if !inside.contains(&y) {
                total += v.abs();
            }
        }
    }
    psi_sup * total / b.len() as f64
}

/// Curvature constants of the free energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityConstants {
    /// `κ − 2β‖J‖₁‖Ψ‖∞`.
    pub k_beta: f64,
    /// `½κ / (‖J‖₁‖∇²Ψ‖∞)`, infinite when the denominator vanishes.
    pub beta_c: f64,
}

pub fn convexity_constants(kappa: f64, beta: f64, j_l1: f64, psi_sup: f64, psi_sup_d2: f64) -> ConvexityConstants {
    let k_beta = kappa - 2.0 * beta * j_l1 * psi_sup;
    let denom = j_l1 * psi_sup_d2;
    let beta_c = if denom == 0.0 { f64::INFINITY } else { 0.5 * kappa / denom };
    ConvexityConstants { k_beta, beta_c }
}

/// JSON description of the interaction: coupling, potential and inverse temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSpec {
    pub coupling: CouplingSpec,
    pub psi: Psi,
    pub beta: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn angles(v: &[f64]) -> Vec<Point> {
        v.iter().map(|&t| Point::Angle(t)).collect()
    }

    #[test]
    fn norms_examples() {
        let nn = CouplingKernel::nearest_neighbor(1, 0.5);
        assert_eq!(coupling_norms(&nn), (1.0, 0.5));
        assert_eq!(coupling_norms(&CouplingKernel::zero(1)), (0.0, 0.0));
        let p = CouplingKernel::power_law(1, 1.0, 3.0, 100).unwrap();
        let brute: f64 = (1..=100).map(|i| 2.0 * (1.0 + i as f64).powi(-3)).sum();
        assert!((p.l1_norm() - brute).abs() < 1e-12);
        assert!((p.linf_norm() - 0.125).abs() < 1e-15);
        let tail: f64 = (101..2_000_000).map(|i| 2.0 * (1.0 + i as f64).powi(-3)).sum();
        assert!(tail <= p.tail_bound());
    }

    #[test]
    fn rejects_asymmetric_kernel() {
        assert!(CouplingKernel::from_entries(1, vec![(vec![1], 1.0)], 0.0).is_err());
    }

    #[test]
    fn energy_examples() {
        let b = BoxSpec::segment(0, 2);
        let nn = CouplingKernel::nearest_neighbor(1, 0.5);
        let e = energy_in_box(&angles(&[0.0, 0.0]), &b, &nn, Psi::CosDiff).unwrap();
        assert!((e - 1.0).abs() < 1e-15);
        let z = energy_in_box(&angles(&[0.3, 1.0]), &b, &CouplingKernel::zero(1), Psi::CosDiff).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn energy_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let j = CouplingKernel::power_law(1, 1.0, 2.5, 10).unwrap();
        let b = BoxSpec::segment(-1, 4);
        let th: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
        let e = energy_in_box(&angles(&th), &b, &j, Psi::CosDiff).unwrap();
        let mut brute = 0.0;
        for a in 0..4i32 {
            for c in 0..4i32 {
                if a != c {
                    brute += (1.0 + (a - c).abs() as f64).powf(-2.5) * (th[a as usize] - th[c as usize]).cos();
                }
            }
        }
        assert!((e - brute).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_on_constant_and_zero_coupling() {
        let b = BoxSpec::torus(1, 3).unwrap();
        let x = Configuration::on_box(&b, angles(&[1.0, 1.0, 1.0])).unwrap();
        for g in grad_energy(&x, &b, &CouplingKernel::nearest_neighbor(1, 1.0), Psi::CosDiff).unwrap() {
            assert!(g.norm() < 1e-15);
        }
        let y = Configuration::on_box(&b, angles(&[0.1, 2.0, 4.0])).unwrap();
        for g in grad_energy(&y, &b, &CouplingKernel::zero(1), Psi::CosDiff).unwrap() {
            assert_eq!(g.norm(), 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_torus() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = BoxSpec::torus(1, 3).unwrap();
        let j = CouplingKernel::power_law(1, 1.0, 2.0, 4).unwrap();
        for _ in 0..20 {
            let th: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
            let x = Configuration::on_box(&b, angles(&th)).unwrap();
            let g = grad_energy(&x, &b, &j, Psi::CosDiff).unwrap();
            for i in 0..3 {
                let h = 1e-5;
                let mut p = th.clone();
                let mut m = th.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (energy_in_box(&angles(&p), &b, &j, Psi::CosDiff).unwrap()
                    - energy_in_box(&angles(&m), &b, &j, Psi::CosDiff).unwrap())
                    / (2.0 * h);
                let Tangent::Scalar(gi) = g[i] else { panic!() };
                assert!((gi - fd).abs() < 1e-6, "{gi} vs {fd}");
                assert!(g[i].norm() <= 2.0 * j.l1_norm() + 1e-12);
            }
        }
    }

    #[test]
    fn sphere_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = BoxSpec::torus(1, 3).unwrap();
        let j = CouplingKernel::nearest_neighbor(1, 0.7);
        let pts: Vec<Point> = (0..3)
            .map(|_| Point::from_spherical(rng.random::<f64>() * PI, rng.random::<f64>() * 2.0 * PI))
            .collect();
        let g = grad_energy(&Configuration::on_box(&b, pts.clone()).unwrap(), &b, &j, Psi::Dot).unwrap();
        for i in 0..3 {
            let x = pts[i].embed();
            let (e1, e2) = vec3::tangent_frame(&x);
            for e in [e1, e2] {
                let h = 1e-5;
                let mut p = pts.clone();
                let mut m = pts.clone();
                p[i] = Point::Unit(crate::geometry::sphere_exp(&x, &vec3::scale(&e, h)));
                m[i] = Point::Unit(crate::geometry::sphere_exp(&x, &vec3::scale(&e, -h)));
                let fd = (energy_in_box(&p, &b, &j, Psi::Dot).unwrap() - energy_in_box(&m, &b, &j, Psi::Dot).unwrap())
                    / (2.0 * h);
                let Tangent::Ambient(gi) = g[i] else { panic!() };
                assert!((vec3::dot(&gi, &e) - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn free_gradient_requires_collar() {
        let b = BoxSpec::segment(0, 2);
        let x = Configuration::on_box(&b, angles(&[0.0, 1.0])).unwrap();
        let err = grad_energy(&x, &b, &CouplingKernel::nearest_neighbor(1, 1.0), Psi::CosDiff);
        assert!(matches!(err, Err(Error::MissingCollar(_))));
        let wide = BoxSpec::segment(-1, 4);
        let x = Configuration::on_box(&wide, angles(&[0.0, 0.0, 1.0, 1.0])).unwrap();
        let g = grad_energy(&x, &b, &CouplingKernel::nearest_neighbor(1, 1.0), Psi::CosDiff).unwrap();
        let Tangent::Scalar(g0) = g[0] else { panic!() };
        assert!((g0 - 2.0 * (1.0f64).sin()).abs() < 1e-14);
    }

    #[test]
    fn truncation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = BoxSpec::segment(0, 12);
        let th: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
        let x = angles(&th);
        let nn = CouplingKernel::nearest_neighbor(1, 1.0);
        let full = energy_in_box(&x, &b, &nn, Psi::CosDiff).unwrap();
        assert_eq!(truncated_energy(&x, &b, 20.0, &nn, Psi::CosDiff).unwrap(), full);
        assert_eq!(truncated_energy(&x, &b, 0.0, &nn, Psi::CosDiff).unwrap(), 0.0);
        let p = CouplingKernel::power_law(1, 1.0, 2.0, 30).unwrap();
        let gap = (energy_in_box(&x, &b, &p, Psi::CosDiff).unwrap()
            - truncated_energy(&x, &b, 5.0, &p, Psi::CosDiff).unwrap())
        .abs();
        let tail: f64 = (6..=30).map(|i| 2.0 * (1.0 + i as f64).powi(-2)).sum();
        assert!(gap <= 12.0 * tail + 1e-12);
    }

    #[test]
    fn convexity_examples() {
        let c = convexity_constants(1.0, 0.1, 1.0, 1.0, 1.0);
        assert!((c.k_beta - 0.8).abs() < 1e-15);
        assert!((c.beta_c - 0.5).abs() < 1e-15);
        assert_eq!(convexity_constants(0.7, 0.0, 1.0, 1.0, 1.0).k_beta, 0.7);
        assert!(convexity_constants(1.0, 0.3, 0.0, 1.0, 1.0).beta_c.is_infinite());
    }

    #[test]
    fn stability_bound_on_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = BoxSpec::segment(0, 8);
        let j = CouplingKernel::power_law(1, 1.0, 2.0, 6).unwrap();
        for _ in 0..1000 {
            let th: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
            let e = energy_in_box(&angles(&th), &b, &j, Psi::CosDiff).unwrap();
            assert!(e.abs() / 8.0 <= j.l1_norm() + 1e-12);
        }
    }

    #[test]
    fn convention_gap_shrinks_with_box() {
        let j = CouplingKernel::power_law(1, 1.0, 2.5, 40).unwrap();
        let gaps: Vec<f64> = [4, 8, 16].iter().map(|&n| convention_gap_per_site(&BoxSpec::cube(1, n), &j, 1.0)).collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
        // the supremum is attained by the constant configuration
        let b = BoxSpec::cube(1, 4);
        let wide = BoxSpec::cube(1, 4 + 40);
        let x = Configuration::on_box(&wide, vec![Point::Angle(0.0); wide.len()]).unwrap();
        let h = energy_in_box(&x.restrict(&b).unwrap(), &b, &j, Psi::CosDiff).unwrap();
        let ht = one_sided_energy(&x, &b, &j, Psi::CosDiff).unwrap();
        assert!(((ht - h).abs() / 9.0 - gaps[0]).abs() < 1e-12);
    }

    #[test]
    fn torus_couplings_wrap() {
        let b = BoxSpec::torus(1, 3).unwrap();
        let c = b.pair_couplings(&CouplingKernel::nearest_neighbor(1, 0.5));
        assert_eq!(c, vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0]);
        let two = BoxSpec::torus(1, 2).unwrap();
        assert_eq!(two.pair_couplings(&CouplingKernel::nearest_neighbor(1, 0.5)), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn sampled_norms() {
        let g = ManifoldGrid::new(ManifoldKind::Circle, 16).unwrap();
        let ip = InteractionPotential::sample(Psi::CosDiff, &g);
        assert!((ip.sup_psi - 1.0).abs() < 1e-15);
        assert!((ip.sup_d1 - 1.0).abs() < 1e-12);
        assert!((ip.sup_d2 - 1.0).abs() < 1e-15);
        for a in 0..16 {
            for b in 0..16 {
                assert!((ip.at(a, b) - ip.at(b, a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spec_json() {
        let s: InteractionSpec = serde_json::from_str(
            r#"{"coupling":{"type":"power","J":1.0,"exponent":3.0,"cutoff":32},"psi":{"name":"cos_diff"},"beta":0.2}"#,
        )
        .unwrap();
        assert_eq!(s.psi, Psi::CosDiff);
        let k = CouplingKernel::from_spec(1, &s.coupling).unwrap();
        assert_eq!(k.entries().len(), 64);
    }
}
