//! Wasserstein-2 distances between grid densities on `(grid)^Λ`.
//!
//! Exact costs come from a network simplex on the transportation problem; larger
//! state spaces use log-domain Sinkhorn with certified lower and upper bounds.

pub mod network_simplex;
pub mod sinkhorn;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{geodesic_point, WeightedManifold, DENSE_CAP};
use crate::interaction::BoxSpec;
use crate::measures::{GridDensity, LocalLaw, StateSpace};

pub use network_simplex::TransportSolution;
pub use sinkhorn::SinkhornOptions;

/// Largest state count handled by Sinkhorn.
pub const SINKHORN_CAP: usize = 100_000;

/// Separable squared geodesic cost `d_Λ²(x,y) = Σ_i d²(x_i, y_i)`.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    space: StateSpace,
    site: Arc<Vec<f64>>,
}

impl CostMatrix {
    pub fn new(manifold: &WeightedManifold, sites: usize) -> Result<Self> {
        Ok(CostMatrix { space: StateSpace::new(manifold.len(), sites)?, site: Arc::new(manifold.grid.squared_distances()) })
    }

    pub fn nodes(&self) -> usize {
        self.space.nodes
    }

    pub fn sites(&self) -> usize {
        self.space.sites
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    /// Single-site cost table, row-major.
    pub fn site_cost(&self) -> &[f64] {
        &self.site
    }

    pub fn cost(&self, x: usize, y: usize) -> f64 {
        let m = self.space.nodes;
        let (mut x, mut y) = (x, y);
        let mut total = 0.0;
        for _ in 0..self.space.sites {
            total += self.site[(x % m) * m + y % m];
            x /= m;
            y /= m;
        }
        total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Method {
    Lp,
    Sinkhorn { eps: f64 },
}

#[derive(Clone, Debug)]
pub struct TransportResult {
    pub cost: f64,
    pub method: Method,
    /// Positive entries `(x, y, mass)` of the optimal plan (LP only).
    pub plan: Option<Vec<(usize, usize, f64)>>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iters: usize,
    pub marginal_err: f64,
    /// Interval known to contain the exact `W²`.
    pub lower: f64,
    pub upper: f64,
}

/// Compact export record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportSummary {
    pub cost: f64,
    pub method: String,
    pub eps: Option<f64>,
    pub iters: usize,
    pub marginal_err: f64,
}

impl TransportResult {
    pub fn summary(&self) -> TransportSummary {
        let (method, eps) = match self.method {
            Method::Lp => ("lp".to_string(), None),
            Method::Sinkhorn { eps } => ("sinkhorn".to_string(), Some(eps)),
        };
        TransportSummary { cost: self.cost, method, eps, iters: self.iters, marginal_err: self.marginal_err }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }

    /// Dual objective `Σ μ f + Σ ν g`.
    pub fn dual_value(&self, mu: &[f64], nu: &[f64]) -> f64 {
        mu.iter().zip(&self.f).map(|(a, b)| a * b).sum::<f64>() + nu.iter().zip(&self.g).map(|(a, b)| a * b).sum::<f64>()
    }
}

fn check_pair(p: &GridDensity, q: &GridDensity) -> Result<()> {
    if p.boxspec.sites != q.boxspec.sites {
        return invalid("densities live on different boxes");
    }
    if p.manifold.spec() != q.manifold.spec() || p.manifold.len() != q.manifold.len() {
        return invalid("densities live on different manifolds");
    }
    Ok(())
}

/// `W²` between two grid densities.
pub fn wasserstein2(p: &GridDensity, q: &GridDensity, method: Method) -> Result<TransportResult> {
    check_pair(p, q)?;
    let cost = CostMatrix::new(&p.manifold, p.boxspec.len())?;
    wasserstein2_masses(&p.masses(), &q.masses(), &cost, method)
}

/// `W²` between mass vectors on the states of `cost`.
pub fn wasserstein2_masses(mu: &[f64], nu: &[f64], cost: &CostMatrix, method: Method) -> Result<TransportResult> {
    let n = cost.len();
    if mu.len() != n || nu.len() != n {
        return invalid("mass vectors do not match the state space");
    }
    match method {
        Method::Lp => {
            if n > DENSE_CAP {
                return Err(Error::StateSpaceTooLarge { states: n as u128, cap: DENSE_CAP });
            }
            let sol = network_simplex::solve(mu, nu, &|x, y| cost.cost(x, y))?;
            let mut row = vec![0.0; n];
            let mut col = vec![0.0; n];
            for &(x, y, w) in &sol.flows {
                row[x] += w;
                col[y] += w;
            }
            let err = (0..n).map(|i| (row[i] - mu[i]).abs() + (col[i] - nu[i]).abs()).sum();
            let mut out = TransportResult {
                cost: sol.cost,
                method,
                plan: Some(sol.flows),
                f: sol.f,
                g: sol.g,
                iters: sol.pivots,
                marginal_err: err,
                lower: 0.0,
                upper: sol.cost,
            };
            out.lower = out.dual_value(mu, nu).min(sol.cost);
            Ok(out)
        }
        Method::Sinkhorn { eps } => {
            if n > SINKHORN_CAP {
                return Err(Error::StateSpaceTooLarge { states: n as u128, cap: SINKHORN_CAP });
            }
            let opts = SinkhornOptions { eps, ..Default::default() };
            let out = sinkhorn::solve(mu, nu, cost.nodes(), cost.sites(), cost.site_cost(), opts)?;
            Ok(TransportResult {
                cost: out.cost,
                method,
                plan: None,
                f: out.f,
                g: out.g,
                iters: out.iters,
                marginal_err: out.marginal_err,
                lower: out.lower,
                upper: out.upper,
            })
        }
    }
}

/// Exact when the state space allows it, otherwise Sinkhorn at `eps`.
pub fn auto_method(states: usize, eps: f64) -> Method {
    if states <= DENSE_CAP {
        Method::Lp
    } else {
        Method::Sinkhorn { eps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rebin {
    Nearest,
    Linear,
}

/// McCann interpolant at time `t`: the optimal plan pushed through site-wise geodesics.
pub fn displacement_interpolate(p: &GridDensity, q: &GridDensity, t: f64, rebin: Rebin) -> Result<GridDensity> {
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("interpolation time {t} outside [0,1]"));
    }
    let res = wasserstein2(p, q, Method::Lp)?;
    if t == 0.0 {
        return Ok(p.clone());
    }
    if t == 1.0 {
        return Ok(q.clone());
    }
    let space = p.space();
    let grid = &p.manifold.grid;
    let mut masses = vec![0.0; space.len()];
    let mut xs = vec![0; space.sites];
    let mut ys = vec![0; space.sites];
    for &(x, y, w) in res.plan.as_ref().expect("lp plan") {
        space.decode_into(x, &mut xs);
        space.decode_into(y, &mut ys);
        // per-site list of (node, weight)
        let per_site: Vec<Vec<(usize, f64)>> = xs
            .iter()
            .zip(&ys)
            .map(|(&a, &b)| {
                let z = geodesic_point(&grid.nodes[a], &grid.nodes[b], t);
                match rebin {
                    Rebin::Nearest => vec![(grid.nearest_node(&z), 1.0)],
                    Rebin::Linear => grid.linear_weights(&z),
                }
            })
            .collect();
        let mut idx = vec![0usize; space.sites];
        'outer: loop {
            let mut state = 0;
            let mut weight = w;
            for (k, &i) in idx.iter().enumerate() {
                let (node, wk) = per_site[k][i];
                state = state * space.nodes + node;
                weight *= wk;
            }
            masses[state] += weight;
            for k in (0..space.sites).rev() {
                idx[k] += 1;
                if idx[k] < per_site[k].len() {
                    continue 'outer;
                }
                idx[k] = 0;
            }
            break;
        }
    }
    GridDensity::from_masses(p.boxspec.clone(), p.manifold.clone(), &masses)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WassersteinCurve {
    pub sizes: Vec<usize>,
    /// Unnormalized `W²` on each window.
    pub w2: Vec<f64>,
    /// Certified brackets of `w2` (equal to `w2` for exact windows).
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub per_volume: Vec<f64>,
    /// `w2` nondecreasing up to the solver brackets.
    pub monotone: bool,
}

impl WassersteinCurve {
    /// Estimate of the specific distance: the largest per-volume value.
    pub fn estimate(&self) -> f64 {
        self.per_volume.iter().copied().fold(0.0, f64::max)
    }
}

/// Per-volume `W²` between the window marginals of two stationary laws.
pub fn specific_wasserstein_curve(
    p: &dyn LocalLaw,
    q: &dyn LocalLaw,
    windows: &[BoxSpec],
    eps: f64,
) -> Result<WassersteinCurve> {
    let mut curve =
        WassersteinCurve { sizes: vec![], w2: vec![], lower: vec![], upper: vec![], per_volume: vec![], monotone: true };
    for w in windows {
        let pw = p.window_density(w)?;
        let qw = q.window_density(w)?;
        let res = wasserstein2(&pw, &qw, auto_method(pw.len(), eps))?;
        let (lo, hi) = match res.method {
            Method::Lp => (res.cost, res.cost),
            Method::Sinkhorn { .. } => (res.lower, res.upper),
        };
        if let Some(prev) = curve.upper.last() {
            if hi < *prev - 1e-9 * (1.0 + prev.abs()) {
                curve.monotone = false;
            }
        }
        curve.sizes.push(w.len());
        curve.w2.push(res.cost);
        curve.lower.push(lo);
        curve.upper.push(hi);
        curve.per_volume.push(res.cost / w.len() as f64);
    }
    Ok(curve)
}

/// Index-matched coupling bound: mean over particles of `d²_window / |window|`.
///
/// `a` and `b` hold one point list per particle; `window` selects site positions.
pub fn coupled_ensemble_distance(
    a: &[Vec<crate::geometry::Point>],
    b: &[Vec<crate::geometry::Point>],
    window: &[usize],
) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid("ensembles must have equal, nonzero particle counts");
    }
    if window.is_empty() {
        return invalid("empty window");
    }
    let mut total = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        for &i in window {
            let d = crate::geometry::geodesic_distance(&pa[i], &pb[i]);
            total += d * d;
        }
    }
    Ok(total / (a.len() * window.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ManifoldKind, Potential};
    use crate::interaction::BoxSpec;
    use crate::measures::ProductLaw;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn circle(m: usize) -> Arc<WeightedManifold> {
        Arc::new(WeightedManifold::build(ManifoldKind::Circle, m, Potential::Zero).unwrap())
    }

    fn delta(man: &Arc<WeightedManifold>, node: usize) -> GridDensity {
        let mut w = vec![0.0; man.len()];
        w[node] = 1.0;
        GridDensity::from_masses(BoxSpec::segment(0, 1), man.clone(), &w).unwrap()
    }

    fn smooth(man: &Arc<WeightedManifold>, phase: f64, amp: f64) -> GridDensity {
        let vals = man.sample(|x| 1.0 + amp * (x.angle() - phase).cos());
        GridDensity::normalized(BoxSpec::segment(0, 1), man.clone(), vals).unwrap()
    }

    #[test]
    fn identical_densities_cost_nothing() {
        let man = circle(16);
        let p = smooth(&man, 0.3, 0.5);
        assert!(wasserstein2(&p, &p, Method::Lp).unwrap().cost.abs() < 1e-14);
    }

    #[test]
    fn deltas_cost_squared_arc() {
        let man = circle(16);
        for k in 0..=8 {
            let s = 2.0 * PI * k as f64 / 16.0;
            let r = wasserstein2(&delta(&man, 0), &delta(&man, k), Method::Lp).unwrap();
            assert!((r.cost - s * s).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoint_of_quarter_turn() {
        let man = circle(16);
        let mid = displacement_interpolate(&delta(&man, 0), &delta(&man, 4), 0.5, Rebin::Nearest).unwrap();
        let masses = mid.masses();
        assert!((masses[2] - 1.0).abs() < 1e-14);
        let p = smooth(&man, 0.0, 0.8);
        let q = smooth(&man, 2.0, 0.8);
        let end = displacement_interpolate(&p, &q, 1.0, Rebin::Nearest).unwrap();
        assert_eq!(end.values, q.values);
    }

    #[test]
    fn midpoint_entropy_is_convex_on_flat_circle() {
        let man = circle(128);
        let p = smooth(&man, 0.0, 0.7);
        let q = smooth(&man, 1.5, 0.7);
        let mid = displacement_interpolate(&p, &q, 0.5, Rebin::Linear).unwrap();
        let avg = 0.5 * (p.relative_entropy() + q.relative_entropy());
        assert!(mid.relative_entropy() <= avg + 2e-2);
    }

    #[test]
    fn json_summary_has_fields() {
        let man = circle(8);
        let r = wasserstein2(&delta(&man, 0), &delta(&man, 1), Method::Lp).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in ["cost", "method", "eps", "iters", "marginal_err"] {
            assert!(v.get(key).is_some());
        }
    }

    #[test]
    fn cost_matrix_is_additive() {
        let man = circle(8);
        let c = CostMatrix::new(&man, 3).unwrap();
        let s = StateSpace::new(8, 3).unwrap();
        for x in (0..c.len()).step_by(7) {
            for y in (0..c.len()).step_by(5) {
                let (xs, ys) = (s.decode(x), s.decode(y));
                let direct: f64 = (0..3).map(|i| man.node_distance_sq(xs[i], ys[i])).sum();
                assert!((c.cost(x, y) - direct).abs() < 1e-14);
                assert_eq!(c.cost(x, y), c.cost(y, x));
            }
            assert_eq!(c.cost(x, x), 0.0);
        }
    }

    #[test]
    fn sinkhorn_approaches_lp() {
        let man = circle(32);
        let p = smooth(&man, 0.0, 0.9);
        let q = smooth(&man, 2.5, 0.6);
        let exact = wasserstein2(&p, &q, Method::Lp).unwrap().cost;
        let mut prev = f64::INFINITY;
        for eps in [0.1, 0.05, 0.01] {
            let r = wasserstein2(&p, &q, Method::Sinkhorn { eps }).unwrap();
            let gap = (r.cost - exact).abs();
            assert!(gap < prev);
            assert!(r.lower <= exact + 1e-9 && exact <= r.upper + 1e-9);
            prev = gap;
        }
        assert!(prev / exact < 0.02);
    }

    #[test]
    fn product_laws_tensorize() {
        let man = circle(8);
        let p = ProductLaw::new(man.clone(), man.sample(|x| 1.0 + 0.5 * x.angle().cos()));
        let q = ProductLaw::new(man.clone(), man.sample(|x| 1.0 + 0.5 * x.angle().sin()));
        let windows: Vec<BoxSpec> = (1..=3).map(|l| BoxSpec::segment(0, l)).collect();
        let curve = specific_wasserstein_curve(&p, &q, &windows, 0.01).unwrap();
        for v in &curve.per_volume {
            assert!((v - curve.per_volume[0]).abs() < 1e-9);
        }
        assert!(curve.monotone);
        let same = specific_wasserstein_curve(&p, &p, &windows, 0.01).unwrap();
        assert!(same.w2.iter().all(|v| v.abs() < 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn root_cost_is_a_metric(a in prop::collection::vec(0.01f64..1.0, 12),
                                 b in prop::collection::vec(0.01f64..1.0, 12),
                                 c in prop::collection::vec(0.01f64..1.0, 12)) {
            let man = circle(12);
            let mk = |v: &Vec<f64>| GridDensity::normalized(BoxSpec::segment(0, 1), man.clone(), v.clone()).unwrap();
            let (p, q, r) = (mk(&a), mk(&b), mk(&c));
            let d = |x: &GridDensity, y: &GridDensity| wasserstein2(x, y, Method::Lp).unwrap().cost.max(0.0).sqrt();
            prop_assert!((d(&p, &q) - d(&q, &p)).abs() < 1e-9);
            prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-9);
        }
    }
}
