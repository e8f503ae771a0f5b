//! Log-domain Sinkhorn for separable costs `C(x,y) = Σ_i c(x_i, y_i)` on product grids.
//!
//! Every kernel application factors into one contraction per site, so a sweep on
//! `m^s` states costs `s·m^{s+1}` operations. Exponentials are taken once per
//! entry after a max shift; rows whose shifted sum underflows are redone exactly.

use crate::error::{Error, Result};

/// One factor of a separable kernel: `log K(x,y)` and `K(x,y)`, row-major `m×m`.
#[derive(Clone, Debug)]
pub(crate) struct AxisKernel {
    m: usize,
    log: Vec<f64>,
    exp: Vec<f64>,
}

impl AxisKernel {
    pub(crate) fn from_log(m: usize, log: Vec<f64>) -> Self {
        let exp = log.iter().map(|v| v.exp()).collect();
        AxisKernel { m, log, exp }
    }

    fn transposed(&self) -> Self {
        let m = self.m;
        let mut log = vec![0.0; m * m];
        for x in 0..m {
            for y in 0..m {
                log[y * m + x] = self.log[x * m + y];
            }
        }
        AxisKernel::from_log(m, log)
    }
}

/// Contract axis `k` of `a` against `ker`: `out[..x..] = LSE_y (a[..y..] + log K(x,y))`.
fn log_pass(a: &[f64], out: &mut [f64], k: usize, sites: usize, ker: &AxisKernel, scratch: &mut [f64]) {
    let m = ker.m;
    let stride = m.pow((sites - 1 - k) as u32);
    let outer = a.len() / (m * stride);
    let (v, w) = scratch.split_at_mut(m);
    for o in 0..outer {
        for t in 0..stride {
            let base = o * m * stride + t;
            let mut top = f64::NEG_INFINITY;
            for y in 0..m {
                v[y] = a[base + y * stride];
                top = top.max(v[y]);
            }
            if top == f64::NEG_INFINITY {
                for x in 0..m {
                    out[base + x * stride] = f64::NEG_INFINITY;
                }
                continue;
            }
            for y in 0..m {
                w[y] = (v[y] - top).exp();
            }
            for x in 0..m {
                let row = &ker.exp[x * m..(x + 1) * m];
                let s: f64 = row.iter().zip(w.iter()).map(|(kx, wy)| kx * wy).sum();
                out[base + x * stride] = if s > 1e-250 {
                    top + s.ln()
                } else {
                    let lrow = &ker.log[x * m..(x + 1) * m];
                    lse(v.iter().zip(lrow).map(|(vy, ly)| vy + ly))
                };
            }
        }
    }
}

/// Min-plus analogue of [`log_pass`] with cost matrix `c`.
fn min_pass(a: &[f64], out: &mut [f64], k: usize, sites: usize, m: usize, c: &[f64]) {
    let stride = m.pow((sites - 1 - k) as u32);
    let outer = a.len() / (m * stride);
    for o in 0..outer {
        for t in 0..stride {
            let base = o * m * stride + t;
            for x in 0..m {
                let mut best = f64::INFINITY;
                for y in 0..m {
                    best = best.min(a[base + y * stride] + c[x * m + y]);
                }
                out[base + x * stride] = best;
            }
        }
    }
}

pub(crate) fn lse(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let top = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + it.map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// Apply a separable kernel in log domain; `kernels[i]` acts on site `i`.
pub(crate) fn log_apply(a: &[f64], sites: usize, kernels: &[&AxisKernel]) -> Vec<f64> {
    let m = kernels[0].m;
    let mut cur = a.to_vec();
    let mut next = vec![0.0; a.len()];
    let mut scratch = vec![0.0; 2 * m];
    for (k, ker) in kernels.iter().enumerate().take(sites) {
        log_pass(&cur, &mut next, k, sites, ker, &mut scratch);
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

fn min_apply(a: &[f64], sites: usize, m: usize, c: &[f64]) -> Vec<f64> {
    let mut cur = a.to_vec();
    let mut next = vec![0.0; a.len()];
    for k in 0..sites {
        min_pass(&cur, &mut next, k, sites, m, c);
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Marginal of a mass vector on one site.
fn site_marginal(mass: &[f64], m: usize, sites: usize, k: usize) -> Vec<f64> {
    let stride = m.pow((sites - 1 - k) as u32);
    let mut out = vec![0.0; m];
    for (idx, v) in mass.iter().enumerate() {
        out[(idx / stride) % m] += v;
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct SinkhornOptions {
    pub eps: f64,
    /// Start from a large ε and halve down to `eps`.
    pub anneal: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions { eps: 0.01, anneal: true, tol: 1e-9, max_iter: 10_000 }
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornOutput {
    /// `⟨C, π_ε⟩` for the (unrounded) entropic plan.
    pub cost: f64,
    /// Certified interval containing the unregularized optimum.
    pub lower: f64,
    pub upper: f64,
    pub iters: usize,
    pub marginal_err: f64,
    /// Dual-feasible potentials (`f ⊕ g ≤ C`).
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

/// Entropic transport between `mu` and `nu` on `m^sites` states with site cost `c` (`m×m`).
pub fn solve(mu: &[f64], nu: &[f64], m: usize, sites: usize, c: &[f64], opts: SinkhornOptions) -> Result<SinkhornOutput> {
    let n = m.pow(sites as u32);
    if mu.len() != n || nu.len() != n || c.len() != m * m {
        return Err(Error::InvalidArgument("inconsistent Sinkhorn dimensions".into()));
    }
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidArgument("ε must be positive".into()));
    }
    let sa: f64 = mu.iter().sum();
    let sb: f64 = nu.iter().sum();
    if (sa - sb).abs() > 1e-9 * sa.max(sb) {
        return Err(Error::InvalidArgument(format!("unbalanced masses {sa} and {sb}")));
    }
    let log_mu: Vec<f64> = mu.iter().map(|v| v.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|v| (v * sa / sb).ln()).collect();
    let cmax = c.iter().copied().fold(0.0, f64::max);
    let mut schedule = Vec::new();
    if opts.anneal {
        let mut e = cmax.max(opts.eps);
        while e > opts.eps {
            schedule.push(e);
            e *= 0.5;
        }
    }
    schedule.push(opts.eps);

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    let mut iters = 0;
    let mut err = f64::INFINITY;
    let mut kernel = None;
    for (stage, &eps) in schedule.iter().enumerate() {
        let last = stage + 1 == schedule.len();
        let ker = AxisKernel::from_log(m, c.iter().map(|v| -v / eps).collect());
        let ker_t = ker.transposed();
        let axes: Vec<&AxisKernel> = vec![&ker; sites];
        let axes_t: Vec<&AxisKernel> = vec![&ker_t; sites];
        for i in 0..n {
            alpha[i] = if mu[i] > 0.0 { f[i] / eps + log_mu[i] } else { f64::NEG_INFINITY };
            beta[i] = if nu[i] > 0.0 { g[i] / eps + log_nu[i] } else { f64::NEG_INFINITY };
        }
        let (tol, cap) = if last { (opts.tol, opts.max_iter) } else { (opts.tol.max(1e-5), 2_000) };
        err = f64::INFINITY;
        let mut it = 0;
        while it < cap {
            let t = log_apply(&beta, sites, &axes);
            for i in 0..n {
                alpha[i] = if mu[i] > 0.0 { log_mu[i] - t[i] } else { f64::NEG_INFINITY };
            }
            let t = log_apply(&alpha, sites, &axes_t);
            for i in 0..n {
                beta[i] = if nu[i] > 0.0 { log_nu[i] - t[i] } else { f64::NEG_INFINITY };
            }
            it += 1;
            if it % 5 == 0 || it == cap {
                let r = log_apply(&beta, sites, &axes);
                err = (0..n).map(|i| ((alpha[i] + r[i]).exp() - mu[i]).abs()).sum::<f64>();
                if !err.is_finite() {
                    return Err(Error::NonFinite("Sinkhorn potentials diverged".into()));
                }
                if err < tol {
                    break;
                }
            }
        }
        iters += it;
        for i in 0..n {
            f[i] = if mu[i] > 0.0 { eps * (alpha[i] - log_mu[i]) } else { 0.0 };
            g[i] = if nu[i] > 0.0 { eps * (beta[i] - log_nu[i]) } else { 0.0 };
        }
        if last {
            if err >= tol {
                return Err(Error::NoConvergence(format!(
                    "Sinkhorn marginal error {err:.3e} after {it} iterations at ε = {eps} (ε too small?)"
                )));
            }
            kernel = Some((ker, ker_t));
        }
    }
    let (ker, ker_t) = kernel.expect("final stage ran");
    let eps = opts.eps;
    let axes: Vec<&AxisKernel> = vec![&ker; sites];
    let axes_t: Vec<&AxisKernel> = vec![&ker_t; sites];

    // ⟨C,π⟩ by swapping one axis for the cost-weighted kernel
    let weighted = AxisKernel::from_log(m, (0..m * m).map(|k| -c[k] / eps + c[k].ln()).collect());
    let plan_cost = |a: &[f64], b: &[f64]| -> f64 {
        (0..sites)
            .map(|i| {
                let mut ks = axes.clone();
                ks[i] = &weighted;
                let t = log_apply(b, sites, &ks);
                lse(a.iter().zip(&t).map(|(x, y)| x + y)).exp()
            })
            .sum()
    };
    let cost = plan_cost(&alpha, &beta);

    // rounding onto the coupling polytope
    let r = log_apply(&beta, sites, &axes);
    let a2: Vec<f64> = (0..n).map(|i| alpha[i] + (log_mu[i] - (alpha[i] + r[i])).min(0.0)).collect();
    let cc = log_apply(&a2, sites, &axes_t);
    let b2: Vec<f64> = (0..n).map(|i| beta[i] + (log_nu[i] - (beta[i] + cc[i])).min(0.0)).collect();
    let r2 = log_apply(&b2, sites, &axes);
    let c2 = log_apply(&a2, sites, &axes_t);
    let err_r: Vec<f64> = (0..n).map(|i| (mu[i] - (a2[i] + r2[i]).exp()).max(0.0)).collect();
    let err_c: Vec<f64> = (0..n).map(|i| (nu[i] * sa / sb - (b2[i] + c2[i]).exp()).max(0.0)).collect();
    let err_mass: f64 = err_r.iter().sum();
    let mut upper = plan_cost(&a2, &b2);
    if err_mass > 0.0 {
        let mut corr = 0.0;
        for k in 0..sites {
            let pr = site_marginal(&err_r, m, sites, k);
            let pc = site_marginal(&err_c, m, sites, k);
            for x in 0..m {
                for y in 0..m {
                    corr += pr[x] * pc[y] * c[x * m + y];
                }
            }
        }
        upper += corr / err_mass;
    }

    // dual bound from c-transforms of g
    let neg_g: Vec<f64> = (0..n).map(|i| if nu[i] > 0.0 { -g[i] } else { f64::INFINITY }).collect();
    let fc = min_apply(&neg_g, sites, m, c);
    let neg_f: Vec<f64> = fc.iter().map(|v| -v).collect();
    let mut ct = vec![0.0; m * m];
    for x in 0..m {
        for y in 0..m {
            ct[y * m + x] = c[x * m + y];
        }
    }
    let gcc = min_apply(&neg_f, sites, m, &ct);
    let lower = mu.iter().zip(&fc).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * v).sum::<f64>()
        + nu.iter().zip(&gcc).filter(|(w, _)| **w > 0.0).map(|(w, v)| w * v * sa / sb).sum::<f64>();
    Ok(SinkhornOutput { cost, lower, upper: upper.max(lower), iters, marginal_err: err, f: fc, g: gcc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::network_simplex;

    fn circle_cost(m: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * m];
        for x in 0..m {
            for y in 0..m {
                let k = (x as i64 - y as i64).unsigned_abs() as usize;
                let d = std::f64::consts::TAU * k.min(m - k) as f64 / m as f64;
                c[x * m + y] = d * d;
            }
        }
        c
    }

    #[test]
    fn separable_apply_matches_dense() {
        let m = 4;
        let c = circle_cost(m);
        let ker = AxisKernel::from_log(m, c.iter().map(|v| -v / 0.7).collect());
        let a: Vec<f64> = (0..m * m).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = log_apply(&a, 2, &[&ker, &ker]);
        for x in 0..m * m {
            let (x0, x1) = (x / m, x % m);
            let direct = lse((0..m * m).map(|y| a[y] - (c[x0 * m + y / m] + c[x1 * m + y % m]) / 0.7));
            assert!((out[x] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn bounds_bracket_exact_cost() {
        let m = 8;
        let c = circle_cost(m);
        let n = m * m;
        let mut mu: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64).sin().abs()).collect();
        let mut nu: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7) as f64).cos().powi(2)).collect();
        mu[3] = 0.0;
        let sa: f64 = mu.iter().sum();
        let sb: f64 = nu.iter().sum();
        mu.iter_mut().for_each(|v| *v /= sa);
        nu.iter_mut().for_each(|v| *v /= sb);
        let cost = |x: usize, y: usize| c[(x / m) * m + y / m] + c[(x % m) * m + y % m];
        let exact = network_simplex::solve(&mu, &nu, &cost).unwrap().cost;
        let out = solve(&mu, &nu, m, 2, &c, SinkhornOptions { eps: 0.02, ..Default::default() }).unwrap();
        assert!(out.marginal_err < 1e-9);
        assert!(out.lower <= exact + 1e-9 && exact <= out.upper + 1e-9, "{} {} {}", out.lower, exact, out.upper);
        assert!(out.upper - out.lower < 0.1 * exact);
        for x in 0..n {
            for y in 0..n {
                assert!(out.f[x] + out.g[y] <= cost(x, y) + 1e-9);
            }
        }
    }
}
