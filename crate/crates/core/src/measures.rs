//! Densities on product grids, free-energy functionals and the stationarization map.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::geometry::{ManifoldKind, ManifoldSpec, WeightedManifold};
use crate::interaction::{BoxSpec, CouplingKernel, InteractionPotential, Psi, Site, Topology};

/// Hard cap on the number of states of a grid density.
pub const STATE_CAP: usize = 1 << 24;

/// Row-major indexing of `(grid)^Λ`: the first site is the most significant digit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateSpace {
    pub nodes: usize,
    pub sites: usize,
}

impl StateSpace {
    pub fn new(nodes: usize, sites: usize) -> Result<Self> {
        let states = (nodes as u128).pow(sites as u32);
        if states > STATE_CAP as u128 {
            return Err(Error::StateSpaceTooLarge { states, cap: STATE_CAP });
        }
        Ok(StateSpace { nodes, sites })
    }

    pub fn len(&self) -> usize {
        self.nodes.pow(self.sites as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn decode_into(&self, mut idx: usize, out: &mut [usize]) {
        for k in (0..self.sites).rev() {
            out[k] = idx % self.nodes;
            idx /= self.nodes;
        }
    }

    pub fn decode(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.sites];
        self.decode_into(idx, &mut out);
        out
    }

    pub fn encode(&self, nodes: &[usize]) -> usize {
        nodes.iter().fold(0, |acc, &n| acc * self.nodes + n)
    }

    /// Stride of site `k` in the flat index.
    pub fn stride(&self, k: usize) -> usize {
        self.nodes.pow((self.sites - 1 - k) as u32)
    }

    /// Product reference weights `ω_Λ` of every state.
    pub fn product_weights(&self, omega: &[f64]) -> Vec<f64> {
        let mut w = vec![1.0];
        for _ in 0..self.sites {
            let mut next = Vec::with_capacity(w.len() * self.nodes);
            for a in &w {
                for o in omega {
                    next.push(a * o);
                }
            }
            w = next;
        }
        w
    }
}

/// Probability density on `(grid)^Λ` with respect to the product reference measure `ω_Λ`.
#[derive(Clone, Debug)]
pub struct GridDensity {
    pub boxspec: BoxSpec,
    pub manifold: Arc<WeightedManifold>,
    pub values: Vec<f64>,
    space: StateSpace,
    weights: Arc<Vec<f64>>,
}

impl GridDensity {
    /// Build from density values; errors on negative entries or a mass defect above 1e-10.
    pub fn new(boxspec: BoxSpec, manifold: Arc<WeightedManifold>, values: Vec<f64>) -> Result<Self> {
        let d = Self::unchecked(boxspec, manifold, values)?;
        if let Some(k) = d.values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid(format!("density value {} at state {k} is not a nonnegative number", d.values[k]));
        }
        let mass = d.mass();
        if (mass - 1.0).abs() > 1e-10 {
            return invalid(format!("density has mass {mass}, expected 1"));
        }
        Ok(d)
    }

    fn unchecked(boxspec: BoxSpec, manifold: Arc<WeightedManifold>, values: Vec<f64>) -> Result<Self> {
        let space = StateSpace::new(manifold.len(), boxspec.len())?;
        if values.len() != space.len() {
            return invalid(format!("expected {} density values, got {}", space.len(), values.len()));
        }
        let weights = Arc::new(space.product_weights(&manifold.omega));
        Ok(GridDensity { boxspec, manifold, values, space, weights })
    }

    /// Normalize arbitrary nonnegative values to unit mass.
    pub fn normalized(boxspec: BoxSpec, manifold: Arc<WeightedManifold>, values: Vec<f64>) -> Result<Self> {
        let mut d = Self::unchecked(boxspec, manifold, values)?;
        let mass = d.mass();
        if !(mass > 0.0 && mass.is_finite()) {
            return invalid("cannot normalize a density with zero or non-finite mass");
        }
        d.values.iter_mut().for_each(|v| *v /= mass);
        Self::new(d.boxspec, d.manifold, d.values)
    }

    pub fn uniform(boxspec: BoxSpec, manifold: Arc<WeightedManifold>) -> Result<Self> {
        let n = StateSpace::new(manifold.len(), boxspec.len())?.len();
        Self::new(boxspec, manifold, vec![1.0; n])
    }

    /// Density from unnormalized values of a function of the node tuple.
    pub fn from_fn(boxspec: BoxSpec, manifold: Arc<WeightedManifold>, f: impl Fn(&[usize]) -> f64) -> Result<Self> {
        let space = StateSpace::new(manifold.len(), boxspec.len())?;
        let mut buf = vec![0; space.sites];
        let values = (0..space.len())
            .map(|k| {
                space.decode_into(k, &mut buf);
                f(&buf)
            })
            .collect();
        Self::normalized(boxspec, manifold, values)
    }

    /// Product of single-site densities (each w.r.t. `ω`), one per site.
    pub fn product(boxspec: BoxSpec, manifold: Arc<WeightedManifold>, marginals: &[Vec<f64>]) -> Result<Self> {
        if marginals.len() != boxspec.len() {
            return invalid("one marginal per site is required");
        }
        let normed: Vec<Vec<f64>> = marginals.iter().map(|m| manifold.normalize_density(m)).collect();
        Self::from_fn(boxspec, manifold, |x| x.iter().zip(&normed).map(|(&n, m)| m[n]).product())
    }

    /// Density from state masses `p·ω_Λ`.
    pub fn from_masses(boxspec: BoxSpec, manifold: Arc<WeightedManifold>, masses: &[f64]) -> Result<Self> {
        let mut d = Self::unchecked(boxspec, manifold, masses.to_vec())?;
        for (v, w) in d.values.iter_mut().zip(d.weights.iter()) {
            *v /= w;
        }
        let mass = d.mass();
        if mass > 0.0 && (mass - 1.0).abs() > 1e-10 {
            d.values.iter_mut().for_each(|v| *v /= mass);
        }
        Self::new(d.boxspec, d.manifold, d.values)
    }

    /// Same shape, new values (masses are renormalized).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::normalized(self.boxspec.clone(), self.manifold.clone(), values)
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `ω_Λ` of every state.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().zip(self.weights.iter()).map(|(v, w)| v * w).sum()
    }

    /// State masses `p·ω_Λ`.
    pub fn masses(&self) -> Vec<f64> {
        self.values.iter().zip(self.weights.iter()).map(|(v, w)| v * w).collect()
    }

    /// `E[f]` for a function of the node tuple.
    pub fn expectation(&self, f: impl Fn(&[usize]) -> f64) -> f64 {
        let mut buf = vec![0; self.space.sites];
        let mut acc = 0.0;
        for (k, (v, w)) in self.values.iter().zip(self.weights.iter()).enumerate() {
            let m = v * w;
            if m != 0.0 {
                self.space.decode_into(k, &mut buf);
                acc += m * f(&buf);
            }
        }
        acc
    }

    /// Relative entropy with respect to `ω_Λ`: `Σ p log p · ω_Λ`.
    pub fn relative_entropy(&self) -> f64 {
        self.values
            .iter()
            .zip(self.weights.iter())
            .map(|(&p, w)| if p > 0.0 { p * p.ln() * w } else { 0.0 })
            .sum::<f64>()
            .max(0.0)
    }

    /// Box energy `H_Λ` of every state, using the box topology for the couplings.
    pub fn state_energies(&self, j: &CouplingKernel, psi: Psi) -> Vec<f64> {
        state_energies(&self.boxspec, &self.manifold, j, psi)
    }

    /// Mean interaction energy `E_P[H_Λ]`.
    pub fn mean_energy(&self, j: &CouplingKernel, psi: Psi) -> f64 {
        let e = self.state_energies(j, psi);
        self.values.iter().zip(self.weights.iter()).zip(&e).map(|((v, w), e)| v * w * e).sum()
    }

    /// `E_n + β H_n`.
    pub fn free_energy(&self, beta: f64, j: &CouplingKernel, psi: Psi) -> f64 {
        self.relative_entropy() + beta * self.mean_energy(j, psi)
    }

    /// Marginal masses over the listed box positions (node tuples in the given order).
    pub fn marginal_masses(&self, positions: &[usize]) -> Vec<f64> {
        let m = self.space.nodes;
        let sub = StateSpace { nodes: m, sites: positions.len() };
        let mut out = vec![0.0; sub.len()];
        let mut buf = vec![0; self.space.sites];
        for (k, (v, w)) in self.values.iter().zip(self.weights.iter()).enumerate() {
            let mass = v * w;
            if mass == 0.0 {
                continue;
            }
            self.space.decode_into(k, &mut buf);
            let idx = positions.iter().fold(0, |acc, &p| acc * m + buf[p]);
            out[idx] += mass;
        }
        out
    }

    /// Marginal density on a subset of box positions, as a free box of those sites.
    pub fn marginal(&self, positions: &[usize]) -> Result<GridDensity> {
        let sites: Vec<Site> = positions.iter().map(|&p| self.boxspec.sites[p].clone()).collect();
        let b = BoxSpec { dim: self.boxspec.dim, sites, topology: Topology::Free };
        GridDensity::from_masses(b, self.manifold.clone(), &self.marginal_masses(positions))
    }

    /// Single-site marginal densities.
    pub fn site_marginals(&self) -> Vec<Vec<f64>> {
        (0..self.space.sites)
            .map(|k| {
                self.marginal_masses(&[k]).iter().zip(&self.manifold.omega).map(|(m, w)| m / w).collect()
            })
            .collect()
    }

    /// `‖p − q‖_{L¹(ω_Λ)}`.
    pub fn l1_distance(&self, other: &GridDensity) -> f64 {
        self.values.iter().zip(&other.values).zip(self.weights.iter()).map(|((a, b), w)| (a - b).abs() * w).sum()
    }

    pub fn checksum(&self) -> String {
        hex_digest(&self.to_le_bytes())
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Write `<stem>.bin` (little-endian f64, row-major over sites) and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let bytes = self.to_le_bytes();
        let header = DensityHeader {
            boxspec: self.boxspec.clone(),
            manifold: self.manifold.spec(),
            states: self.len(),
            encoding: "f64-le".into(),
            checksum: hex_digest(&bytes),
        };
        std::fs::write(stem.with_extension("bin"), &bytes)?;
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    /// Read a density written by [`GridDensity::write`], verifying the checksum.
    pub fn read(stem: &Path) -> Result<GridDensity> {
        let header: DensityHeader = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        if hex_digest(&bytes) != header.checksum {
            return Err(Error::Schema(format!("checksum mismatch for {}", stem.display())));
        }
        if bytes.len() != 8 * header.states {
            return Err(Error::Schema("binary length does not match the header".into()));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let manifold = Arc::new(WeightedManifold::from_spec(&header.manifold)?);
        GridDensity::new(header.boxspec, manifold, values)
    }
}

/// JSON header accompanying a binary density file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityHeader {
    #[serde(rename = "box")]
    pub boxspec: BoxSpec,
    pub manifold: ManifoldSpec,
    pub states: usize,
    pub encoding: String,
    pub checksum: String,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Box energy of every state of `(grid)^Λ`.
pub fn state_energies(b: &BoxSpec, manifold: &WeightedManifold, j: &CouplingKernel, psi: Psi) -> Vec<f64> {
    let ip = InteractionPotential::sample(psi, &manifold.grid);
    let couplings = b.pair_couplings(j);
    let space = StateSpace { nodes: manifold.len(), sites: b.len() };
    let s = b.len();
    let pairs: Vec<(usize, usize, f64)> = (0..s)
        .flat_map(|a| (0..s).map(move |c| (a, c)))
        .filter_map(|(a, c)| {
            let v = couplings[a * s + c];
            (v != 0.0).then_some((a, c, v))
        })
        .collect();
    let mut buf = vec![0; s];
    (0..space.len())
        .map(|k| {
            space.decode_into(k, &mut buf);
            pairs.iter().map(|&(a, c, v)| v * ip.at(buf[a], buf[c])).sum()
        })
        .collect()
}

/// Average a torus density over all cyclic translations of the lattice.
pub fn torus_symmetrize(p: &GridDensity) -> Result<GridDensity> {
    let Topology::Torus { period } = p.boxspec.topology else {
        return invalid("cyclic averaging needs a torus box");
    };
    let b = &p.boxspec;
    let space = p.space();
    let shifts: Vec<Site> = BoxSpec::torus(b.dim, period)?.sites;
    // position permutation for each shift: site k moves to the position of site k+u
    let perms: Vec<Vec<usize>> = shifts
        .iter()
        .map(|u| {
            b.sites
                .iter()
                .map(|s| {
                    let t: Site = s.iter().zip(u).map(|(a, c)| a + c).collect();
                    b.index_of(&t).expect("torus site")
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; p.len()];
    let mut buf = vec![0; space.sites];
    let mut moved = vec![0; space.sites];
    for (k, v) in p.values.iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        space.decode_into(k, &mut buf);
        for perm in &perms {
            for (pos, &target) in perm.iter().enumerate() {
                moved[target] = buf[pos];
            }
            out[space.encode(&moved)] += v;
        }
    }
    let n = perms.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    GridDensity::new(p.boxspec.clone(), p.manifold.clone(), out)
}

/// Law placed independently on each tile of the stationarization.
#[derive(Clone, Debug)]
pub enum BlockLaw {
    /// Arbitrary density on the block.
    Dense(GridDensity),
    /// Independent sites, with one mass vector per block position.
    Product(Vec<Vec<f64>>),
}

/// Mixture over shifts of i.i.d. tilings of a block law.
///
/// Tiles are translates of a cubic block of side `side` starting at `origin`;
/// the shift is uniform over the `side^d` residues.
#[derive(Debug)]
pub struct StationarizedMeasure {
    pub manifold: Arc<WeightedManifold>,
    pub base: BlockLaw,
    pub dim: usize,
    pub side: usize,
    pub origin: Site,
    dense_cdf: Option<Vec<f64>>,
    cache: Mutex<HashMap<Vec<usize>, Arc<Vec<f64>>>>,
}

/// Stationarize a density on a cubic free box.
pub fn stationarize(p: &GridDensity) -> Result<StationarizedMeasure> {
    let (side, origin) = cube_shape(&p.boxspec)?;
    let masses = p.masses();
    let mut acc = 0.0;
    let cdf = masses
        .iter()
        .map(|m| {
            acc += m;
            acc
        })
        .collect();
    Ok(StationarizedMeasure {
        manifold: p.manifold.clone(),
        base: BlockLaw::Dense(p.clone()),
        dim: p.boxspec.dim,
        side,
        origin,
        dense_cdf: Some(cdf),
        cache: Mutex::new(HashMap::new()),
    })
}

/// Stationarize a product block law on a one-dimensional segment starting at `origin`.
///
/// Each entry of `marginals` is a density w.r.t. `ω` for one block position.
pub fn stationarize_product(
    manifold: Arc<WeightedManifold>,
    marginals: &[Vec<f64>],
    origin: i32,
) -> Result<StationarizedMeasure> {
    if marginals.is_empty() {
        return invalid("block must contain at least one site");
    }
    let masses = marginals
        .iter()
        .map(|m| {
            if m.len() != manifold.len() || m.iter().any(|v| *v < 0.0) {
                return invalid("marginal must be a nonnegative nodal vector");
            }
            let d = manifold.normalize_density(m);
            Ok(d.iter().zip(&manifold.omega).map(|(a, w)| a * w).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(StationarizedMeasure {
        manifold,
        base: BlockLaw::Product(masses),
        dim: 1,
        side: marginals.len(),
        origin: vec![origin],
        dense_cdf: None,
        cache: Mutex::new(HashMap::new()),
    })
}

fn cube_shape(b: &BoxSpec) -> Result<(usize, Site)> {
    if b.topology != Topology::Free {
        return invalid("stationarization needs a free box");
    }
    let origin: Site = (0..b.dim).map(|k| b.sites.iter().map(|s| s[k]).min().unwrap()).collect();
    let len = b.len() as f64;
    let side = len.powf(1.0 / b.dim as f64).round() as usize;
    let expected: Vec<Site> = {
        let hi: Vec<i32> = origin.iter().map(|o| o + side as i32 - 1).collect();
        let mut out = Vec::new();
        let mut cur = origin.clone();
        loop {
            out.push(cur.clone());
            let mut k = b.dim;
            let mut done = true;
            while k > 0 {
                k -= 1;
                cur[k] += 1;
                if cur[k] <= hi[k] {
                    done = false;
                    break;
                }
                cur[k] = origin[k];
            }
            if done {
                break;
            }
        }
        out
    };
    if expected != b.sites {
        return invalid("stationarization needs a cubic block listed in lattice order");
    }
    Ok((side, origin))
}

/// Source of exact window densities for a stationary law.
pub trait LocalLaw {
    fn manifold(&self) -> &Arc<WeightedManifold>;
    /// Exact marginal density on the sites of `window`.
    fn window_density(&self, window: &BoxSpec) -> Result<GridDensity>;
}

/// Independent identically distributed spins.
#[derive(Clone, Debug)]
pub struct ProductLaw {
    pub manifold: Arc<WeightedManifold>,
    /// Single-site density w.r.t. `ω`.
    pub marginal: Vec<f64>,
}

impl ProductLaw {
    pub fn new(manifold: Arc<WeightedManifold>, marginal: Vec<f64>) -> Self {
        let marginal = manifold.normalize_density(&marginal);
        ProductLaw { manifold, marginal }
    }
}

impl LocalLaw for ProductLaw {
    fn manifold(&self) -> &Arc<WeightedManifold> {
        &self.manifold
    }

    fn window_density(&self, window: &BoxSpec) -> Result<GridDensity> {
        let w = BoxSpec { topology: Topology::Free, ..window.clone() };
        GridDensity::from_fn(w, self.manifold.clone(), |x| x.iter().map(|&n| self.marginal[n]).product())
    }
}

/// Translation-invariant density on a torus, read through its marginals.
#[derive(Clone, Debug)]
pub struct TorusLaw(pub GridDensity);

impl LocalLaw for TorusLaw {
    fn manifold(&self) -> &Arc<WeightedManifold> {
        &self.0.manifold
    }

    fn window_density(&self, window: &BoxSpec) -> Result<GridDensity> {
        let positions: Vec<usize> = window
            .sites
            .iter()
            .map(|s| self.0.boxspec.index_of(s).ok_or_else(|| Error::InvalidArgument(format!("site {s:?}"))))
            .collect::<Result<_>>()?;
        let mut seen = positions.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != positions.len() {
            return invalid("window wraps onto itself on the torus");
        }
        let w = BoxSpec { topology: Topology::Free, ..window.clone() };
        GridDensity::from_masses(w, self.0.manifold.clone(), &self.0.marginal_masses(&positions))
    }
}

impl StationarizedMeasure {
    pub fn block_len(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    fn nodes(&self) -> usize {
        self.manifold.len()
    }

    /// Tile coordinates and block position of a lattice site.
    fn locate(&self, site: &[i32]) -> (Site, usize) {
        let side = self.side as i32;
        let mut tile = Vec::with_capacity(self.dim);
        let mut pos = 0usize;
        for (k, &v) in site.iter().enumerate() {
            let r = v - self.origin[k];
            tile.push(r.div_euclid(side));
            pos = pos * self.side + r.rem_euclid(side) as usize;
        }
        (tile, pos)
    }

    /// All shifts, as lattice offsets in `{0..side}^d`.
    fn shifts(&self) -> Vec<Site> {
        BoxSpec::torus(self.dim, self.side).expect("positive side").sites
    }

    /// Marginal masses of one tile over block positions (cached).
    fn block_marginal(&self, positions: &[usize]) -> Arc<Vec<f64>> {
        if let Some(v) = self.cache.lock().unwrap().get(positions) {
            return v.clone();
        }
        let masses = match &self.base {
            BlockLaw::Dense(p) => p.marginal_masses(positions),
            BlockLaw::Product(ms) => {
                let mut out = vec![1.0];
                for &p in positions {
                    out = out.iter().flat_map(|a| ms[p].iter().map(move |b| a * b)).collect();
                }
                out
            }
        };
        let arc = Arc::new(masses);
        self.cache.lock().unwrap().insert(positions.to_vec(), arc.clone());
        arc
    }

    /// For one shift, the tiles met by the window: block positions and window indices.
    fn groups(&self, window: &[Site], shift: &[i32]) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut groups: Vec<(Site, Vec<usize>, Vec<usize>)> = Vec::new();
        for (w, site) in window.iter().enumerate() {
            let g: Site = site.iter().zip(shift).map(|(a, b)| a + b).collect();
            let (tile, pos) = self.locate(&g);
            match groups.iter_mut().find(|(t, _, _)| *t == tile) {
                Some((_, ps, ws)) => {
                    ps.push(pos);
                    ws.push(w);
                }
                None => groups.push((tile, vec![pos], vec![w])),
            }
        }
        groups.into_iter().map(|(_, p, w)| (p, w)).collect()
    }

    /// Exact window masses, by enumerating the shift mixture.
    pub fn window_masses(&self, window: &BoxSpec) -> Result<Vec<f64>> {
        let m = self.nodes();
        let space = StateSpace::new(m, window.len())?;
        let shifts = self.shifts();
        let mut out = vec![0.0; space.len()];
        let mut buf = vec![0; space.sites];
        for shift in &shifts {
            let groups: Vec<(Arc<Vec<f64>>, Vec<usize>)> = self
                .groups(&window.sites, shift)
                .into_iter()
                .map(|(ps, ws)| (self.block_marginal(&ps), ws))
                .collect();
            for (k, o) in out.iter_mut().enumerate() {
                space.decode_into(k, &mut buf);
                let mut v = 1.0;
                for (marg, ws) in &groups {
                    let idx = ws.iter().fold(0, |acc, &w| acc * m + buf[w]);
                    v *= marg[idx];
                    if v == 0.0 {
                        break;
                    }
                }
                *o += v;
            }
        }
        let n = shifts.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }

    /// Expectation of a window observable, exactly.
    pub fn expectation(&self, window: &BoxSpec, f: impl Fn(&[usize]) -> f64) -> Result<f64> {
        Ok(self.window_density(window)?.expectation(f))
    }

    /// `|E_Stat[f] − mean_u E_p[f∘θ_u]|`, the mean running over the shifts that keep the
    /// translated window inside a single tile.
    pub fn interior_shift_gap(&self, window: &BoxSpec, f: impl Fn(&[usize]) -> f64) -> Result<f64> {
        let stat = self.expectation(window, &f)?;
        let space = StateSpace::new(self.nodes(), window.len())?;
        let mut buf = vec![0; window.len()];
        let mut acc = 0.0;
        let mut count = 0usize;
        for shift in self.shifts() {
            let groups = self.groups(&window.sites, &shift);
            if groups.len() != 1 {
                continue;
            }
            let marg = self.block_marginal(&groups[0].0);
            acc += marg
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    space.decode_into(k, &mut buf);
                    m * f(&buf)
                })
                .sum::<f64>();
            count += 1;
        }
        if count == 0 {
            return invalid("window does not fit inside one tile");
        }
        Ok((stat - acc / count as f64).abs())
    }

    /// Sample node values on a window.
    pub fn sample_window<R: Rng>(&self, window: &[Site], rng: &mut R) -> Vec<usize> {
        let shifts = self.shifts();
        let shift = &shifts[rng.random_range(0..shifts.len())];
        let mut out = vec![0; window.len()];
        let bspace = StateSpace { nodes: self.nodes(), sites: self.block_len() };
        let mut tile_draws: Vec<(Site, Vec<usize>)> = Vec::new();
        for (w, site) in window.iter().enumerate() {
            let g: Site = site.iter().zip(shift).map(|(a, b)| a + b).collect();
            let (tile, pos) = self.locate(&g);
            if !tile_draws.iter().any(|(t, _)| *t == tile) {
                let draw = match &self.base {
                    BlockLaw::Dense(_) => {
                        let cdf = self.dense_cdf.as_ref().unwrap();
                        let u = rng.random::<f64>() * cdf[cdf.len() - 1];
                        let k = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
                        bspace.decode(k)
                    }
                    BlockLaw::Product(ms) => ms.iter().map(|m| sample_discrete(m, rng)).collect(),
                };
                tile_draws.push((tile.clone(), draw));
            }
            let draw = &tile_draws.iter().find(|(t, _)| *t == tile).unwrap().1;
            out[w] = draw[pos];
        }
        out
    }

    /// Log of the window density (w.r.t. `ω_W`) at a node tuple.
    pub fn window_log_density(&self, window: &[Site], x: &[usize]) -> f64 {
        let m = self.nodes();
        let shifts = self.shifts();
        let mut terms = Vec::with_capacity(shifts.len());
        for shift in &shifts {
            let mut lv = 0.0;
            for (ps, ws) in self.groups(window, shift) {
                let marg = self.block_marginal(&ps);
                let idx = ws.iter().fold(0, |acc, &w| acc * m + x[w]);
                lv += marg[idx].ln();
            }
            terms.push(lv);
        }
        let lse = log_sum_exp(&terms) - (shifts.len() as f64).ln();
        let lw: f64 = x.iter().map(|&n| self.manifold.omega[n].ln()).sum();
        lse - lw
    }

    /// Single-site marginal density w.r.t. `ω` (identical at every site).
    pub fn site_marginal(&self) -> Vec<f64> {
        let b = BoxSpec::segment(0, 1);
        let b = BoxSpec { dim: self.dim, sites: vec![vec![0; self.dim]], ..b };
        self.window_masses(&b).unwrap().iter().zip(&self.manifold.omega).map(|(m, w)| m / w).collect()
    }

    /// Relative entropy of the base law over its block.
    pub fn base_entropy(&self) -> f64 {
        match &self.base {
            BlockLaw::Dense(p) => p.relative_entropy(),
            BlockLaw::Product(ms) => ms
                .iter()
                .map(|m| {
                    m.iter()
                        .zip(&self.manifold.omega)
                        .map(|(a, w)| if *a > 0.0 { a * (a / w).ln() } else { 0.0 })
                        .sum::<f64>()
                })
                .sum(),
        }
    }

    /// Mean energy of the base law in its block, with free boundary.
    pub fn base_energy(&self, j: &CouplingKernel, psi: Psi) -> Result<f64> {
        let block = BoxSpec::cube(self.dim, 0);
        let sites: Vec<Site> = BoxSpec::torus(self.dim, self.side)?
            .sites
            .iter()
            .map(|s| s.iter().zip(&self.origin).map(|(a, o)| a + o).collect())
            .collect();
        let b = BoxSpec { sites, ..block };
        let couplings = b.pair_couplings(j);
        let ip = InteractionPotential::sample(psi, &self.manifold.grid);
        let s = b.len();
        let mut e = 0.0;
        for a in 0..s {
            for c in 0..s {
                let v = couplings[a * s + c];
                if v == 0.0 {
                    continue;
                }
                let (_, pa) = self.locate(&b.sites[a]);
                let (_, pc) = self.locate(&b.sites[c]);
                e += v * if pa == pc {
                    let marg = self.block_marginal(&[pa]);
                    (0..self.nodes()).map(|k| marg[k] * ip.at(k, k)).sum::<f64>()
                } else {
                    let marg = self.block_marginal(&[pa, pc]);
                    let m = self.nodes();
                    (0..m * m).map(|k| marg[k] * ip.at(k / m, k % m)).sum::<f64>()
                };
            }
        }
        Ok(e)
    }
}

impl LocalLaw for StationarizedMeasure {
    fn manifold(&self) -> &Arc<WeightedManifold> {
        &self.manifold
    }

    fn window_density(&self, window: &BoxSpec) -> Result<GridDensity> {
        let w = BoxSpec { topology: Topology::Free, ..window.clone() };
        GridDensity::from_masses(w, self.manifold.clone(), &self.window_masses(window)?)
    }
}

/// Finite convex combination of stationary laws.
pub struct MixtureLaw {
    pub manifold: Arc<WeightedManifold>,
    pub components: Vec<(f64, Box<dyn LocalLaw + Send + Sync>)>,
}

impl MixtureLaw {
    pub fn new(components: Vec<(f64, Box<dyn LocalLaw + Send + Sync>)>) -> Result<Self> {
        let Some((_, first)) = components.first() else {
            return invalid("mixture needs at least one component");
        };
        let total: f64 = components.iter().map(|(w, _)| *w).sum();
        if components.iter().any(|(w, _)| *w < 0.0) || (total - 1.0).abs() > 1e-12 {
            return invalid("mixture weights must be a probability vector");
        }
        Ok(MixtureLaw { manifold: first.manifold().clone(), components })
    }
}

impl LocalLaw for MixtureLaw {
    fn manifold(&self) -> &Arc<WeightedManifold> {
        &self.manifold
    }

    fn window_density(&self, window: &BoxSpec) -> Result<GridDensity> {
        let mut values: Option<Vec<f64>> = None;
        let mut shape = None;
        for (w, law) in &self.components {
            let d = law.window_density(window)?;
            match values.as_mut() {
                None => values = Some(d.values.iter().map(|v| w * v).collect()),
                Some(acc) => acc.iter_mut().zip(&d.values).for_each(|(a, v)| *a += w * v),
            }
            shape.get_or_insert(d.boxspec);
        }
        GridDensity::new(shape.expect("nonempty"), self.manifold.clone(), values.expect("nonempty"))
    }
}

/// Half-circle tiling on the line: a block of `2n` independent sites, uniform on the open
/// upper half for the first `n` positions and on the open lower half for the rest.
pub struct SemicircleLaws {
    /// Stationarization of the block law.
    pub stationary: StationarizedMeasure,
    pub upper: ProductLaw,
    pub lower: ProductLaw,
    /// Equal-weight mixture of `upper` and `lower`.
    pub mixture: MixtureLaw,
}

pub fn semicircle_laws(manifold: Arc<WeightedManifold>, n: usize) -> Result<SemicircleLaws> {
    if manifold.kind() != ManifoldKind::Circle {
        return invalid("half-circle laws live on the circle");
    }
    if n == 0 {
        return invalid("block half-length must be positive");
    }
    let half = |upper: bool| -> Vec<f64> {
        manifold
            .grid
            .nodes
            .iter()
            .map(|p| {
                let s = p.angle().sin();
                if (upper && s > 1e-12) || (!upper && s < -1e-12) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    let (up, down) = (half(true), half(false));
    let mut block = vec![up.clone(); n];
    block.extend(std::iter::repeat_n(down.clone(), n));
    let stationary = stationarize_product(manifold.clone(), &block, -(n as i32))?;
    let upper = ProductLaw::new(manifold.clone(), up);
    let lower = ProductLaw::new(manifold.clone(), down);
    let mixture = MixtureLaw::new(vec![(0.5, Box::new(upper.clone())), (0.5, Box::new(lower.clone()))])?;
    Ok(SemicircleLaws { stationary, upper, lower, mixture })
}

fn sample_discrete<R: Rng>(masses: &[f64], rng: &mut R) -> usize {
    let total: f64 = masses.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, m) in masses.iter().enumerate() {
        if u < *m {
            return k;
        }
        u -= m;
    }
    masses.iter().rposition(|m| *m > 0.0).unwrap_or(0)
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Specific energy of a stationary law, `Σ_j J_{0,j} E[Ψ(x_0, x_j)]`, from two-site marginals.
pub fn specific_energy(law: &dyn LocalLaw, j: &CouplingKernel, psi: Psi) -> Result<f64> {
    let ip = InteractionPotential::sample(psi, &law.manifold().grid);
    let zero: Site = vec![0; j.dim()];
    let mut e = 0.0;
    for (o, v) in j.entries() {
        if *o == zero {
            let d = law.window_density(&BoxSpec { dim: j.dim(), sites: vec![zero.clone()], topology: Topology::Free })?;
            e += v * d.expectation(|x| ip.at(x[0], x[0]));
        } else {
            let w = BoxSpec { dim: j.dim(), sites: vec![zero.clone(), o.clone()], topology: Topology::Free };
            e += v * law.window_density(&w)?.expectation(|x| ip.at(x[0], x[1]));
        }
    }
    Ok(e)
}

/// Per-volume entropy, energy and free energy on a sequence of boxes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FunctionalReport {
    pub box_sizes: Vec<usize>,
    pub entropy_curve: Vec<f64>,
    pub energy_curve: Vec<f64>,
    pub entropy_per_vol: f64,
    pub energy_per_vol: f64,
    pub free_energy_per_vol: f64,
    /// Last increments of the entropy and energy curves.
    pub entropy_residual: f64,
    pub energy_residual: f64,
    /// Whether the entropy curve is nondecreasing within 1e-10.
    pub entropy_monotone: bool,
}

/// Per-volume functionals on `Λ_n` for each radius in `radii` (d = 1 windows `{−n..n}`).
pub fn specific_functionals(
    law: &dyn LocalLaw,
    radii: &[usize],
    beta: f64,
    j: &CouplingKernel,
    psi: Psi,
) -> Result<FunctionalReport> {
    if radii.is_empty() {
        return invalid("at least one box size is required");
    }
    let mut sizes = Vec::new();
    let mut ent = Vec::new();
    let mut en = Vec::new();
    for &n in radii {
        let b = BoxSpec::cube(j.dim(), n);
        let d = law.window_density(&b)?;
        let vol = b.len() as f64;
        sizes.push(b.len());
        ent.push(d.relative_entropy() / vol);
        en.push(d.mean_energy(j, psi) / vol);
    }
    let last = ent.len() - 1;
    let inc = |v: &[f64]| if v.len() > 1 { v[last] - v[last - 1] } else { 0.0 };
    Ok(FunctionalReport {
        entropy_per_vol: ent[last],
        energy_per_vol: en[last],
        free_energy_per_vol: ent[last] + beta * en[last],
        entropy_residual: inc(&ent),
        energy_residual: inc(&en),
        entropy_monotone: ent.windows(2).all(|w| w[1] >= w[0] - 1e-10),
        box_sizes: sizes,
        entropy_curve: ent,
        energy_curve: en,
    })
}

/// Monte Carlo estimate of a window's relative entropy with a product control variate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

pub fn mc_window_entropy(s: &StationarizedMeasure, window: &[Site], samples: usize, seed: u64) -> Result<EntropyEstimate> {
    if samples < 2 {
        return invalid("at least two samples are required");
    }
    let p1 = s.site_marginal();
    let ent1: f64 = p1
        .iter()
        .zip(&s.manifold.omega)
        .map(|(p, w)| if *p > 0.0 { p * p.ln() * w } else { 0.0 })
        .sum();
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let base = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..samples {
        let mut rng = base.clone();
        rng.set_stream(k as u64);
        let x = s.sample_window(window, &mut rng);
        let lp = s.window_log_density(window, &x);
        let cv: f64 = x.iter().map(|&n| p1[n].ln()).sum();
        let d = lp - cv;
        sum += d;
        sum2 += d * d;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sum2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(EntropyEstimate {
        value: mean + window.len() as f64 * ent1,
        std_error: (var / n).sqrt(),
        samples,
    })
}

/// Outcome of the specific-entropy inequality check for a stationarized measure.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EntropyCheck {
    /// Estimated per-volume entropy of the stationarized measure on the window.
    pub lhs: f64,
    /// Per-volume entropy of the block law.
    pub rhs: f64,
    pub std_error: f64,
    pub pass: bool,
}

/// Compare the per-volume entropy of `s` on a segment of `window_len` sites against
/// the block entropy per site; passes iff `lhs ≤ rhs + 3·SE`.
pub fn stationarized_entropy_check(
    s: &StationarizedMeasure,
    window_len: usize,
    samples: usize,
    seed: u64,
    max_std_error: f64,
) -> Result<EntropyCheck> {
    if s.dim != 1 {
        return invalid("entropy check is implemented for one-dimensional lattices");
    }
    let window: Vec<Site> = (0..window_len as i32).map(|k| vec![k]).collect();
    let est = mc_window_entropy(s, &window, samples, seed)?;
    let k = window_len as f64;
    let lhs = est.value / k;
    let se = est.std_error / k;
    if se > max_std_error {
        return invalid(format!("standard error {se:.3e} exceeds {max_std_error:.3e}; increase the sample count"));
    }
    let rhs = s.base_entropy() / s.block_len() as f64;
    Ok(EntropyCheck { lhs, rhs, std_error: se, pass: lhs <= rhs + 3.0 * se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ManifoldKind, Potential};
    use std::f64::consts::PI;

    fn circle(m: usize) -> Arc<WeightedManifold> {
        Arc::new(WeightedManifold::build(ManifoldKind::Circle, m, Potential::Zero).unwrap())
    }

    fn random_values(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>() + 0.05).collect()
    }

    #[test]
    fn entropy_examples() {
        let w = circle(16);
        let u = GridDensity::uniform(BoxSpec::segment(0, 1), w.clone()).unwrap();
        assert_eq!(u.relative_entropy(), 0.0);
        let half: Vec<f64> = (0..16).map(|k| if k < 8 { 2.0 } else { 0.0 }).collect();
        let h = GridDensity::new(BoxSpec::segment(0, 1), w.clone(), half).unwrap();
        assert!((h.relative_entropy() - 2f64.ln()).abs() < 1e-14);
        let r = GridDensity::normalized(BoxSpec::segment(0, 2), w.clone(), random_values(256, 1)).unwrap();
        let oracle: f64 = r.values.iter().map(|p| p * p.ln() / 256.0).sum();
        assert!((r.relative_entropy() - oracle).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_and_oversized() {
        let w = circle(16);
        assert!(GridDensity::new(BoxSpec::segment(0, 1), w.clone(), vec![2.0; 16]).is_err());
        assert!(matches!(
            GridDensity::uniform(BoxSpec::segment(0, 7), w),
            Err(Error::StateSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn energy_examples() {
        let w = circle(16);
        let nn = CouplingKernel::nearest_neighbor(1, 1.0);
        let u = GridDensity::uniform(BoxSpec::segment(0, 2), w.clone()).unwrap();
        assert!(u.mean_energy(&nn, Psi::CosDiff).abs() < 1e-14);
        // delta at the constant configuration (node 3, node 3)
        let mut v = vec![0.0; 256];
        v[3 * 16 + 3] = 256.0;
        let d = GridDensity::new(BoxSpec::segment(0, 2), w.clone(), v).unwrap();
        assert!((d.mean_energy(&nn, Psi::CosDiff) - 2.0).abs() < 1e-14);
        // brute-force expectation on 3 sites
        let b = BoxSpec::segment(0, 3);
        let w8 = circle(8);
        let r = GridDensity::normalized(b.clone(), w8.clone(), random_values(512, 2)).unwrap();
        let j = CouplingKernel::power_law(1, 1.0, 2.0, 3).unwrap();
        let mut brute = 0.0;
        for a in 0..8 {
            for c in 0..8 {
                for e in 0..8 {
                    let th = [a, c, e].map(|k| k as f64 * 2.0 * PI / 8.0);
                    let mut h = 0.0;
                    for i in 0..3 {
                        for k in 0..3 {
                            if i != k {
                                h += (1.0 + (i as f64 - k as f64).abs()).powi(-2) * (th[i] - th[k]).cos();
                            }
                        }
                    }
                    brute += r.values[a * 64 + c * 8 + e] / 512.0 * h;
                }
            }
        }
        assert!((r.mean_energy(&j, Psi::CosDiff) - brute).abs() < 1e-12);
        let f = r.free_energy(0.3, &j, Psi::CosDiff);
        assert!((f - r.relative_entropy() - 0.3 * brute).abs() < 1e-12);
        assert_eq!(r.free_energy(0.0, &j, Psi::CosDiff), r.relative_entropy());
    }

    #[test]
    fn strict_convexity_of_entropy() {
        let w = circle(8);
        for seed in 0..20 {
            let p = GridDensity::normalized(BoxSpec::segment(0, 2), w.clone(), random_values(64, seed)).unwrap();
            let q = GridDensity::normalized(BoxSpec::segment(0, 2), w.clone(), random_values(64, seed + 100)).unwrap();
            let mid = p.with_values(p.values.iter().zip(&q.values).map(|(a, b)| 0.5 * (a + b)).collect()).unwrap();
            assert!(mid.relative_entropy() < 0.5 * (p.relative_entropy() + q.relative_entropy()) - 1e-6);
        }
    }

    #[test]
    fn marginals_retensorize_products() {
        let w = circle(8);
        let m0 = random_values(8, 3);
        let m1 = random_values(8, 4);
        let p = GridDensity::product(BoxSpec::segment(0, 2), w.clone(), &[m0, m1]).unwrap();
        let margs = p.site_marginals();
        let q = GridDensity::product(BoxSpec::segment(0, 2), w, &margs).unwrap();
        assert!(p.l1_distance(&q) < 1e-14);
    }

    #[test]
    fn binary_roundtrip_and_checksum() {
        let w = circle(8);
        let p = GridDensity::normalized(BoxSpec::segment(0, 2), w, random_values(64, 9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("p");
        p.write(&stem).unwrap();
        let q = GridDensity::read(&stem).unwrap();
        assert_eq!(p.values, q.values);
        let mut bytes = std::fs::read(stem.with_extension("bin")).unwrap();
        bytes[3] ^= 1;
        std::fs::write(stem.with_extension("bin"), bytes).unwrap();
        assert!(GridDensity::read(&stem).is_err());
    }

    #[test]
    fn stationarized_product_is_iid() {
        let w = circle(8);
        let rho = random_values(8, 5);
        let p = GridDensity::product(BoxSpec::cube(1, 1), w.clone(), &[rho.clone(), rho.clone(), rho.clone()]).unwrap();
        let s = stationarize(&p).unwrap();
        let iid = ProductLaw::new(w.clone(), rho);
        let win = BoxSpec::segment(-1, 3);
        let a = s.window_density(&win).unwrap();
        let b = iid.window_density(&win).unwrap();
        assert!(a.l1_distance(&b) < 1e-13);
    }

    #[test]
    fn one_site_expectation_is_mean_of_marginals() {
        let w = circle(8);
        let p = GridDensity::normalized(BoxSpec::cube(1, 1), w.clone(), random_values(512, 6)).unwrap();
        let s = stationarize(&p).unwrap();
        let f = |x: &[usize]| (x[0] as f64 * 0.7).sin();
        let stat = s.expectation(&BoxSpec::segment(5, 1), f).unwrap();
        let margs = p.site_marginals();
        let mean: f64 = margs
            .iter()
            .map(|m| (0..8).map(|k| m[k] * w.omega[k] * f(&[k])).sum::<f64>())
            .sum::<f64>()
            / 3.0;
        assert!((stat - mean).abs() < 1e-14);
    }

    #[test]
    fn stationarized_measure_is_shift_invariant() {
        let w = circle(8);
        let p = GridDensity::normalized(BoxSpec::cube(1, 1), w.clone(), random_values(512, 7)).unwrap();
        let s = stationarize(&p).unwrap();
        let f = |x: &[usize]| ((x[0] * 3 + x[1] * 5) % 7) as f64;
        let e0 = s.expectation(&BoxSpec::segment(0, 2), f).unwrap();
        for u in [-4, 1, 2, 7] {
            let eu = s.expectation(&BoxSpec::segment(u, 2), f).unwrap();
            assert!((eu - e0).abs() < 1e-13);
        }
    }

    #[test]
    fn mc_entropy_matches_exhaustive_window() {
        let w = circle(8);
        // mixture of two shifted products arises from a non-identical product block
        let s = stationarize_product(w.clone(), &[random_values(8, 11), random_values(8, 12)], 0).unwrap();
        let win = BoxSpec::segment(0, 3);
        let exact = s.window_density(&win).unwrap().relative_entropy();
        let est = mc_window_entropy(&s, &win.sites, 20_000, 3).unwrap();
        assert!((est.value - exact).abs() < 3.0 * est.std_error + 1e-12, "{est:?} vs {exact}");
    }

    #[test]
    fn entropy_check_product_and_correlated() {
        let w = circle(8);
        let rho = random_values(8, 13);
        let s = stationarize_product(w.clone(), &[rho.clone(), rho.clone()], 0).unwrap();
        let c = stationarized_entropy_check(&s, 4, 2000, 1, 0.05).unwrap();
        assert!(c.pass);
        assert!((c.lhs - c.rhs).abs() < 1e-12);
        let corr = GridDensity::from_fn(BoxSpec::cube(1, 1), w.clone(), |x| {
            let th: Vec<f64> = x.iter().map(|&k| k as f64 * PI / 4.0).collect();
            (2.0 * (th[0] - th[1]).cos() + 2.0 * (th[1] - th[2]).cos()).exp()
        })
        .unwrap();
        let s = stationarize(&corr).unwrap();
        let c = stationarized_entropy_check(&s, 6, 20_000, 2, 0.05).unwrap();
        assert!(c.pass && c.lhs < c.rhs, "{c:?}");
    }

    #[test]
    fn functionals_of_iid_product_are_additive() {
        let w = circle(8);
        let rho = random_values(8, 14);
        let law = ProductLaw::new(w.clone(), rho);
        let single: f64 = law.marginal.iter().zip(&w.omega).map(|(p, o)| p * p.ln() * o).sum();
        let r = specific_functionals(&law, &[0, 1], 0.0, &CouplingKernel::zero(1), Psi::CosDiff).unwrap();
        for e in &r.entropy_curve {
            assert!((e - single).abs() < 1e-12);
        }
        assert_eq!(r.free_energy_per_vol, r.entropy_per_vol);
    }

    #[test]
    fn interior_gap_vanishes_for_identical_sites_and_shrinks_with_block() {
        let man = circle(16);
        let rho: Vec<f64> = man.sample(|p| (p.angle().cos()).exp());
        let f = |x: &[usize]| (man.grid.nodes[x[0]].angle() - man.grid.nodes[x[1]].angle()).cos();
        let w = BoxSpec::segment(0, 2);
        let iid = stationarize_product(man.clone(), &vec![rho; 6], 0).unwrap();
        assert!(iid.interior_shift_gap(&w, f).unwrap() < 1e-12);
        let graded = |n: usize| {
            let block: Vec<Vec<f64>> = (0..n)
                .map(|k| {
                    let tilt = 2.0 * k as f64 / (n - 1) as f64 - 1.0;
                    man.sample(|p| (2.0 * tilt * p.angle().cos()).exp())
                })
                .collect();
            stationarize_product(man.clone(), &block, 0).unwrap().interior_shift_gap(&w, f).unwrap()
        };
        let (g4, g8) = (graded(4), graded(8));
        assert!(g4 > 0.0 && g8 < g4);
    }

    #[test]
    fn semicircle_laws_share_one_site_marginal_with_the_mixture() {
        let man = circle(8);
        let laws = semicircle_laws(man.clone(), 2).unwrap();
        let one = BoxSpec::segment(0, 1);
        let a = laws.stationary.window_density(&one).unwrap();
        let b = laws.mixture.window_density(&one).unwrap();
        assert!(a.l1_distance(&b) < 1e-12);
        let two = BoxSpec::segment(0, 2);
        let up = laws.upper.window_density(&two).unwrap();
        let mix = laws.mixture.window_density(&two).unwrap();
        assert!((mix.mass() - 1.0).abs() < 1e-12 && up.l1_distance(&mix) > 0.5);
    }

    #[test]
    fn torus_symmetrization_is_translation_invariant() {
        let w = circle(8);
        let p = GridDensity::normalized(BoxSpec::torus(1, 3).unwrap(), w, random_values(512, 15)).unwrap();
        let s = torus_symmetrize(&p).unwrap();
        let m = s.site_marginals();
        for k in 0..8 {
            assert!((m[0][k] - m[1][k]).abs() < 1e-12 && (m[0][k] - m[2][k]).abs() < 1e-12);
        }
        assert!((s.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stat_energy_boundary_effect_shrinks() {
        let w = circle(8);
        let nn = CouplingKernel::nearest_neighbor(1, 1.0);
        let mut gaps = Vec::new();
        for n in [2usize, 4, 8] {
            let len = 2 * n + 1;
            // aligned spins inside the block: a product with concentrated marginals
            let margs: Vec<Vec<f64>> = (0..len).map(|_| (0..8).map(|k| if k == 0 { 1.0 } else { 0.05 }).collect()).collect();
            let s = stationarize_product(w.clone(), &margs, -(n as i32)).unwrap();
            let spec = specific_energy(&s, &nn, Psi::CosDiff).unwrap();
            let block = s.base_energy(&nn, Psi::CosDiff).unwrap() / len as f64;
            gaps.push((spec - block).abs());
        }
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }
}
