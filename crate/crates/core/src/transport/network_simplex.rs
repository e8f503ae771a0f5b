//! Primal network simplex for the dense balanced transportation problem.
//!
//! The spanning tree is kept strongly feasible (artificial root, leaving-arc
//! tie-breaking toward the apex), which rules out cycling on degenerate pivots.
//! Entering arcs are found by block search.

use crate::error::{Error, Result};

/// Optimal plan and Kantorovich potentials of a transportation problem.
#[derive(Clone, Debug)]
pub struct TransportSolution {
    pub cost: f64,
    /// `(source, sink, mass)` for every positive plan entry.
    pub flows: Vec<(usize, usize, f64)>,
    /// Potentials with `f_i + g_j ≤ c_ij`, tight on the support of the plan.
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub pivots: usize,
}

struct Tree {
    parent: Vec<usize>,
    /// Arc joining a node to its parent.
    pred: Vec<usize>,
    /// True when the pred arc points from the node to its parent.
    up: Vec<bool>,
    flow: Vec<f64>,
    depth: Vec<usize>,
    pot: Vec<f64>,
    children: Vec<Vec<usize>>,
}

/// Solve `min Σ c_ij π_ij` over couplings of `supply` and `demand`.
///
/// Zero entries are removed before solving; potentials on them are filled by c-transforms.
pub fn solve(supply: &[f64], demand: &[f64], cost: &dyn Fn(usize, usize) -> f64) -> Result<TransportSolution> {
    let sa: f64 = supply.iter().sum();
    let sb: f64 = demand.iter().sum();
    if supply.iter().chain(demand).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("masses must be finite and nonnegative".into()));
    }
    if sa <= 0.0 || (sa - sb).abs() > 1e-9 * sa.max(sb) {
        return Err(Error::InvalidArgument(format!("unbalanced masses {sa} and {sb}")));
    }
    let src: Vec<usize> = (0..supply.len()).filter(|&i| supply[i] > 0.0).collect();
    let snk: Vec<usize> = (0..demand.len()).filter(|&j| demand[j] > 0.0).collect();
    let a: Vec<f64> = src.iter().map(|&i| supply[i]).collect();
    // absorb the rounding imbalance in the demand side
    let b: Vec<f64> = snk.iter().map(|&j| demand[j] * sa / sb).collect();
    let n1 = a.len();
    let n2 = b.len();
    let dense = if n1 * n2 <= 1 << 24 {
        let mut c = Vec::with_capacity(n1 * n2);
        for &i in &src {
            for &j in &snk {
                c.push(cost(i, j));
            }
        }
        Some(c)
    } else {
        None
    };
    let arc_cost = |k: usize| -> f64 {
        match &dense {
            Some(c) => c[k],
            None => cost(src[k / n2], snk[k % n2]),
        }
    };
    let max_cost = match &dense {
        Some(c) => c.iter().copied().fold(0.0, f64::max),
        None => (0..n1 * n2).map(arc_cost).fold(0.0, f64::max),
    };
    let n = n1 + n2;
    let root = n;
    let real = n1 * n2;
    let art_cost = (max_cost + 1.0) * (n as f64 + 1.0);
    let mut t = Tree {
        parent: vec![root; n + 1],
        pred: (0..=n).map(|v| real + v).collect(),
        up: vec![false; n + 1],
        flow: vec![0.0; n + 1],
        depth: vec![1; n + 1],
        pot: vec![0.0; n + 1],
        children: vec![Vec::new(); n + 1],
    };
    t.depth[root] = 0;
    for v in 0..n {
        t.children[root].push(v);
        if v < n1 {
            t.up[v] = true;
            t.flow[v] = a[v];
            t.pot[v] = -art_cost;
        } else {
            t.flow[v] = b[v - n1];
            t.pot[v] = art_cost;
        }
    }
    let arc_ends = |k: usize| -> (usize, usize) {
        if k < real {
            (k / n2, n1 + k % n2)
        } else {
            let v = k - real;
            if v < n1 { (v, root) } else { (root, v) }
        }
    };
    let cost_of = |k: usize| if k < real { arc_cost(k) } else { art_cost };
    let eps = 1e-13 * (max_cost + 1.0) * (n as f64).sqrt();
    let block = ((real as f64).sqrt() as usize).max(10).min(real.max(1));
    let mut next = 0usize;
    let mut pivots = 0usize;
    let max_pivots = 50 * (n + 10) * (n as f64).ln().max(1.0) as usize + 10_000;
    loop {
        // block search for the entering arc
        let mut best = None;
        let mut best_rc = -eps;
        let mut scanned = 0usize;
        let mut in_block = 0usize;
        while scanned < real {
            let k = next;
            next += 1;
            if next == real {
                next = 0;
            }
            let (u, v) = (k / n2, n1 + k % n2);
            let rc = arc_cost(k) + t.pot[u] - t.pot[v];
            if rc < best_rc {
                best_rc = rc;
                best = Some(k);
            }
            scanned += 1;
            in_block += 1;
            if in_block == block {
                if best.is_some() {
                    break;
                }
                in_block = 0;
            }
        }
        let Some(k_in) = best else { break };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::NoConvergence(format!("network simplex exceeded {max_pivots} pivots")));
        }
        let (first, second) = arc_ends(k_in);
        // join node
        let (mut x, mut y) = (first, second);
        while x != y {
            if t.depth[x] >= t.depth[y] {
                x = t.parent[x];
            } else {
                y = t.parent[y];
            }
        }
        let join = x;
        // leaving arc, ties resolved toward the apex
        let mut delta = f64::INFINITY;
        let mut out = usize::MAX;
        let mut out_first_side = true;
        let mut w = first;
        while w != join {
            if t.up[w] && t.flow[w] < delta {
                delta = t.flow[w];
                out = w;
                out_first_side = true;
            }
            w = t.parent[w];
        }
        let mut w = second;
        while w != join {
            if !t.up[w] && t.flow[w] <= delta {
                delta = t.flow[w];
                out = w;
                out_first_side = false;
            }
            w = t.parent[w];
        }
        if out == usize::MAX {
            return Err(Error::NoConvergence("unbounded transportation cycle".into()));
        }
        // push delta around the cycle
        if delta > 0.0 {
            let mut w = first;
            while w != join {
                t.flow[w] += if t.up[w] { -delta } else { delta };
                if t.flow[w] < 0.0 {
                    t.flow[w] = 0.0;
                }
                w = t.parent[w];
            }
            let mut w = second;
            while w != join {
                t.flow[w] += if t.up[w] { delta } else { -delta };
                if t.flow[w] < 0.0 {
                    t.flow[w] = 0.0;
                }
                w = t.parent[w];
            }
        }
        // re-hang the detached subtree through the entering arc
        let (start, new_parent, start_up) =
            if out_first_side { (first, second, true) } else { (second, first, false) };
        let mut path = vec![start];
        while *path.last().unwrap() != out {
            let last = *path.last().unwrap();
            path.push(t.parent[last]);
        }
        let old_parent_of_out = t.parent[out];
        remove_child(&mut t.children[old_parent_of_out], out);
        for s in (1..path.len()).rev() {
            let child = path[s - 1];
            let par = path[s];
            remove_child(&mut t.children[par], child);
            // arc that joined child to par now joins par to child
            t.parent[par] = child;
            t.pred[par] = t.pred[child];
            t.up[par] = !t.up[child];
            t.flow[par] = t.flow[child];
            t.children[child].push(par);
        }
        t.parent[start] = new_parent;
        t.pred[start] = k_in;
        t.up[start] = start_up;
        t.flow[start] = delta;
        t.children[new_parent].push(start);
        // depths and potentials on the moved subtree
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            let p = t.parent[v];
            t.depth[v] = t.depth[p] + 1;
            let c = cost_of(t.pred[v]);
            t.pot[v] = if t.up[v] { t.pot[p] - c } else { t.pot[p] + c };
            stack.extend(t.children[v].iter().copied());
        }
    }
    // artificial flow must have vanished
    let residual: f64 = (0..n).filter(|&v| t.pred[v] >= real).map(|v| t.flow[v]).sum();
    if residual > 1e-9 * sa {
        return Err(Error::NoConvergence(format!("artificial flow {residual} remains")));
    }
    let mut flows = Vec::new();
    let mut total = 0.0;
    for v in 0..n {
        let k = t.pred[v];
        if k < real && t.flow[v] > 0.0 {
            let (i, j) = (k / n2, k % n2);
            total += t.flow[v] * arc_cost(k);
            flows.push((src[i], snk[j], t.flow[v]));
        }
    }
    flows.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    // f_i = −pot_i, g_j = pot_j; extend to zero-mass states by c-transforms
    let mut g = vec![0.0; demand.len()];
    for (jj, &j) in snk.iter().enumerate() {
        g[j] = t.pot[n1 + jj];
    }
    let mut f = vec![0.0; supply.len()];
    for (ii, &i) in src.iter().enumerate() {
        f[i] = -t.pot[ii];
    }
    for i in 0..supply.len() {
        if supply[i] == 0.0 {
            f[i] = snk.iter().map(|&j| cost(i, j) - g[j]).fold(f64::INFINITY, f64::min);
        }
    }
    for j in 0..demand.len() {
        if demand[j] == 0.0 {
            g[j] = src.iter().map(|&i| cost(i, j) - f[i]).fold(f64::INFINITY, f64::min);
        }
    }
    Ok(TransportSolution { cost: total, flows, f, g, pivots })
}

fn remove_child(list: &mut Vec<usize>, v: usize) {
    if let Some(pos) = list.iter().position(|&c| c == v) {
        list.swap_remove(pos);
    }
}
