//! Topology-aware shot allocation.
//!
//! Fragment uncertainties are coupled through a Matérn-1/2 kernel over
//! hardware graph distance. The stitched-variance bound
//! `u^T D(s)^-1 Σ̃ D(s)^-1 u` is relaxed to `λ_max(Σ̃) Σ u_i²/s_i²`, which is
//! minimized in closed form (`s_i ∝ u_i^{2/3}`) and then projected onto the
//! integers.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::drifttrack::KalmanState;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AllocError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("infeasible budget: {0}")]
    Infeasible(String),
    #[error("nodes {0} and {1} are not connected")]
    Disconnected(usize, usize),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("topology parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("numeric error: {0}")]
    Numeric(String),
}

/// Hardware connectivity graph with fragments anchored to nodes.
#[derive(Debug, Clone)]
pub struct Topology {
    adjacency: Vec<Vec<usize>>,
    anchors: Vec<usize>,
    // all-pairs hop counts, u32::MAX when unreachable
    dist: Vec<Vec<u32>>,
}

impl Topology {
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self, AllocError> {
        let mut adjacency = vec![Vec::new(); n_nodes];
        for &(a, b) in edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(AllocError::Topology(format!("edge ({a}, {b}) outside {n_nodes} nodes")));
            }
            if a != b && !adjacency[a].contains(&b) {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for nb in &mut adjacency {
            nb.sort_unstable();
        }
        let dist = (0..n_nodes).map(|s| bfs(&adjacency, s)).collect();
        Ok(Self {
            adjacency,
            anchors: Vec::new(),
            dist,
        })
    }

    /// Parse an edge list, one `u v` pair of node ids per line; `#` starts a
    /// comment. Node count is one more than the largest id.
    pub fn parse_edge_list(src: &str) -> Result<Self, AllocError> {
        let mut edges = Vec::new();
        let mut n = 0;
        for (i, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| AllocError::Parse {
                line: i + 1,
                msg: msg.into(),
            };
            let ids: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(&format!("`{t}` is not a node id"))))
                .collect::<Result<_, _>>()?;
            if ids.len() != 2 {
                return Err(bad("expected exactly two node ids"));
            }
            n = n.max(ids[0] + 1).max(ids[1] + 1);
            edges.push((ids[0], ids[1]));
        }
        Self::from_edges(n, &edges)
    }

    /// Heavy-hex lattice: `rows + 1` horizontal chains of `4 cols + 1` nodes,
    /// joined by degree-2 bridge nodes. Bridges sit at chain positions
    /// `0 mod 4` below even chains and `2 mod 4` below odd chains, so every
    /// cell is a 12-node hexagon.
    pub fn heavy_hex(rows: usize, cols: usize) -> Result<Self, AllocError> {
        if rows == 0 || cols == 0 {
            return Err(AllocError::Topology("heavy-hex needs rows, cols >= 1".into()));
        }
        let width = 4 * cols + 1;
        let chain = |l: usize, p: usize| l * width + p;
        let mut edges = Vec::new();
        for l in 0..=rows {
            for p in 0..width - 1 {
                edges.push((chain(l, p), chain(l, p + 1)));
            }
        }
        let mut next = (rows + 1) * width;
        for l in 0..rows {
            let offset = if l % 2 == 0 { 0 } else { 2 };
            for p in (offset..width).step_by(4) {
                edges.push((chain(l, p), next));
                edges.push((next, chain(l + 1, p)));
                next += 1;
            }
        }
        Self::from_edges(next, &edges)
    }

    /// `heavyhex:RxC`.
    pub fn parse_generator(spec: &str) -> Result<Self, AllocError> {
        let dims = spec
            .strip_prefix("heavyhex:")
            .ok_or_else(|| AllocError::Topology(format!("unknown generator `{spec}`")))?;
        let (r, c) = dims
            .split_once('x')
            .ok_or_else(|| AllocError::Topology(format!("expected heavyhex:RxC, got `{spec}`")))?;
        let parse = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| AllocError::Topology(format!("bad dimension `{t}` in `{spec}`")))
        };
        Self::heavy_hex(parse(r)?, parse(c)?)
    }

    /// Anchor fragment `i` at node `nodes[i]`.
    pub fn with_anchors(mut self, nodes: Vec<usize>) -> Result<Self, AllocError> {
        if let Some(&bad) = nodes.iter().find(|&&a| a >= self.num_nodes()) {
            return Err(AllocError::Topology(format!("anchor node {bad} does not exist")));
        }
        self.anchors = nodes;
        Ok(self)
    }

    /// Spread `n` fragment anchors evenly over the node ids.
    pub fn with_spread_anchors(self, n: usize) -> Result<Self, AllocError> {
        let nodes = self.num_nodes();
        if nodes == 0 {
            return Err(AllocError::Topology("empty topology".into()));
        }
        let anchors = (0..n).map(|i| i * nodes / n.max(1)).collect();
        self.with_anchors(anchors)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbours(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn is_connected(&self) -> bool {
        self.dist.first().is_none_or(|row| row.iter().all(|&d| d != u32::MAX))
    }

    /// Hop distance between two nodes.
    pub fn distance(&self, a: usize, b: usize) -> Result<u32, AllocError> {
        match self.dist[a][b] {
            u32::MAX => Err(AllocError::Disconnected(a, b)),
            d => Ok(d),
        }
    }
}

fn bfs(adjacency: &[Vec<usize>], source: usize) -> Vec<u32> {
    let mut dist = vec![u32::MAX; adjacency.len()];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(v) = queue.pop_front() {
        for &w in &adjacency[v] {
            if dist[w] == u32::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    dist
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma_k2: f64,
    /// Length scale in hops.
    pub ell: f64,
}

impl KernelParams {
    pub fn new(sigma_k2: f64, ell: f64) -> Result<Self, AllocError> {
        if !(sigma_k2 > 0.0 && sigma_k2.is_finite() && ell > 0.0 && ell.is_finite()) {
            return Err(AllocError::Domain(format!("kernel needs sigma_k2 > 0, ell > 0 (got {sigma_k2}, {ell})")));
        }
        Ok(Self { sigma_k2, ell })
    }
}

/// `σ_k² exp(-d/ℓ)`.
pub fn kernel(d: f64, params: &KernelParams) -> Result<f64, AllocError> {
    if !(d >= 0.0) {
        return Err(AllocError::Domain(format!("negative distance {d}")));
    }
    Ok(params.sigma_k2 * (-d / params.ell).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    pub sigma: DMatrix<f64>,
    /// `Σ + diag(P)`.
    pub sigma_tilde: DMatrix<f64>,
}

impl CovarianceModel {
    /// Use an arbitrary symmetric PSD matrix as `Σ̃` (and `Σ`).
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, AllocError> {
        if !m.is_square() {
            return Err(AllocError::Dimension("covariance must be square".into()));
        }
        let scale = m.amax().max(1.0);
        if (&m - m.transpose()).amax() > 1e-12 * scale {
            return Err(AllocError::Domain("covariance must be symmetric".into()));
        }
        Ok(Self {
            sigma: m.clone(),
            sigma_tilde: m,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma_tilde.nrows()
    }

    /// Largest eigenvalue of `Σ̃`: symmetric eigendecomposition, with power
    /// iteration (tolerance 1e-10) if that fails to converge.
    pub fn lambda_max(&self) -> Result<f64, AllocError> {
        let n = self.dim();
        if n == 0 {
            return Ok(0.0);
        }
        if let Some(eig) = self.sigma_tilde.clone().try_symmetric_eigen(1e-14, 10_000) {
            return Ok(eig.eigenvalues.max());
        }
        power_iteration(&self.sigma_tilde, 1e-10, 100_000)
    }
}

pub(crate) fn power_iteration(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<f64, AllocError> {
    let n = m.nrows();
    let mut v = nalgebra::DVector::from_fn(n, |i, _| 1.0 + i as f64 / n as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= tol * next.abs().max(1.0) {
            return Ok(next);
        }
        lambda = next;
    }
    Err(AllocError::Numeric("power iteration did not converge".into()))
}

/// `Σ_pq = kernel(dist(anchor_p, anchor_q))`, `Σ̃ = Σ + diag(kalman_p)`.
pub fn build_covariance(
    topology: &Topology,
    params: &KernelParams,
    kalman_p: &[f64],
) -> Result<CovarianceModel, AllocError> {
    let anchors = topology.anchors();
    let n = anchors.len();
    if kalman_p.len() != n {
        return Err(AllocError::Dimension(format!("{n} anchored fragments but {} variances", kalman_p.len())));
    }
    if let Some(p) = kalman_p.iter().find(|p| !(**p >= 0.0)) {
        return Err(AllocError::Domain(format!("negative filter variance {p}")));
    }
    let mut sigma = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let d = topology.distance(anchors[i], anchors[j])?;
            let k = kernel(d as f64, params)?;
            sigma[(i, j)] = k;
            sigma[(j, i)] = k;
        }
    }
    let sigma_tilde = &sigma + DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(kalman_p));
    Ok(CovarianceModel { sigma, sigma_tilde })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailParams {
    pub rho: f64,
    pub n_obs: f64,
}

impl TailParams {
    pub fn new(rho: f64, n_obs: f64) -> Result<Self, AllocError> {
        if !(rho > 0.0 && n_obs >= rho && n_obs.is_finite()) {
            return Err(AllocError::Domain(format!("tail needs 0 < rho <= N (rho={rho}, N={n_obs})")));
        }
        Ok(Self { rho, n_obs })
    }

    pub fn factor(&self) -> f64 {
        (self.n_obs / self.rho).ln().sqrt()
    }
}

/// `u = σ̂ sqrt(ln(N/ρ))`.
pub fn tail_factor(sigma_hat: f64, tail: &TailParams) -> Result<f64, AllocError> {
    if !(sigma_hat >= 0.0) {
        return Err(AllocError::Domain(format!("negative sigma_hat {sigma_hat}")));
    }
    if !(tail.n_obs / tail.rho >= 1.0) {
        return Err(AllocError::Domain("N/rho < 1".into()));
    }
    Ok(sigma_hat * tail.factor())
}

fn check_dims(u: &[f64], shots: &[f64], cov: &CovarianceModel) -> Result<(), AllocError> {
    if u.len() != shots.len() || u.len() != cov.dim() {
        return Err(AllocError::Dimension(format!(
            "u has {}, shots {}, covariance {}",
            u.len(),
            shots.len(),
            cov.dim()
        )));
    }
    if let Some(s) = shots.iter().find(|s| !(**s > 0.0)) {
        return Err(AllocError::Domain(format!("shot count {s} must be positive")));
    }
    Ok(())
}

/// Stitched-variance bound `Σ_ij u_i u_j Σ̃_ij / (s_i s_j)`.
pub fn variance_bound(u: &[f64], shots: &[f64], cov: &CovarianceModel) -> Result<f64, AllocError> {
    check_dims(u, shots, cov)?;
    let y: Vec<f64> = u.iter().zip(shots).map(|(u, s)| u / s).collect();
    let m = &cov.sigma_tilde;
    let mut total = 0.0;
    for i in 0..y.len() {
        let row: f64 = (0..y.len()).map(|j| m[(i, j)] * y[j]).sum();
        total += y[i] * row;
    }
    Ok(total)
}

/// `λ_max(Σ̃) Σ_i u_i²/s_i²`, an upper bound on [`variance_bound`].
pub fn spectral_bound(u: &[f64], shots: &[f64], cov: &CovarianceModel) -> Result<f64, AllocError> {
    check_dims(u, shots, cov)?;
    Ok(cov.lambda_max()? * diagonal_objective(u, shots))
}

/// `Σ u_i² / s_i²`.
pub fn diagonal_objective(u: &[f64], shots: &[f64]) -> f64 {
    u.iter().zip(shots).map(|(u, s)| term(*u, *s)).sum()
}

fn term(u: f64, s: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        u * u / (s * s)
    }
}

/// Split `total` in proportion to `weights`, pinning any share that falls
/// below `floor` at the floor and re-splitting the remainder among the rest
/// until no new floor activates. Zero-weight entries get exactly the floor.
pub fn floored_share(weights: &[f64], total: f64, floor: f64) -> Result<Vec<f64>, AllocError> {
    let n = weights.len();
    if n == 0 {
        return Err(AllocError::Dimension("no fragments".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(AllocError::Domain(format!("invalid weight {w}")));
    }
    if !(floor >= 0.0) || total < n as f64 * floor {
        return Err(AllocError::Infeasible(format!(
            "budget {total} below {n} x floor {floor}"
        )));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(AllocError::Domain("at least one weight must be positive".into()));
    }
    let mut pinned: Vec<bool> = weights.iter().map(|&w| w == 0.0).collect();
    loop {
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        let remaining = total - n_pinned as f64 * floor;
        let z: f64 = (0..n).filter(|&i| !pinned[i]).map(|i| weights[i]).sum();
        let share: Vec<f64> = (0..n)
            .map(|i| if pinned[i] { floor } else { remaining * weights[i] / z })
            .collect();
        let mut changed = false;
        for i in 0..n {
            if !pinned[i] && share[i] < floor {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(share);
        }
    }
}

/// Continuous minimizer of `Σ u_i²/s_i²` subject to `Σ s_i = S`, `s_i >= s_min`.
pub fn waterfill(u: &[f64], total: f64, s_min: f64) -> Result<Vec<f64>, AllocError> {
    let w: Vec<f64> = u
        .iter()
        .map(|&x| if x >= 0.0 { x.powf(2.0 / 3.0) } else { f64::NAN })
        .collect();
    floored_share(&w, total, s_min)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotPlan {
    pub shots: Vec<u64>,
    pub total: u64,
    pub s_min: u64,
}

impl ShotPlan {
    pub fn as_f64(&self) -> Vec<f64> {
        self.shots.iter().map(|&s| s as f64).collect()
    }
}

fn cost_at(u: f64, s: u64) -> f64 {
    if u == 0.0 {
        0.0
    } else if s == 0 {
        f64::INFINITY
    } else {
        term(u, s as f64)
    }
}

// objective reduction from one more shot
fn inc_gain(u: f64, s: u64) -> f64 {
    let g = cost_at(u, s) - cost_at(u, s + 1);
    if g.is_nan() {
        f64::INFINITY
    } else {
        g
    }
}

// objective increase from one fewer shot
fn dec_cost(u: f64, s: u64) -> f64 {
    cost_at(u, s - 1) - cost_at(u, s)
}

fn argmax_by(items: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    items.fold(None, |best, (i, v)| match best {
        Some((_, bv)) if bv >= v => best,
        _ => Some((i, v)),
    })
}

/// Round a continuous allocation to integers summing to `total`.
///
/// Entries are rounded to nearest (and lifted to `s_min`); the surplus or
/// deficit is then cleared one shot at a time, each time incrementing the
/// entry whose extra shot lowers `Σ u_i²/s_i²` most, or decrementing the
/// entry (above the floor) whose removal raises it least. Ties go to the
/// lowest index. A final exchange pass moves single shots between entries
/// while that strictly lowers the objective, which makes the plan optimal
/// among integer plans for this separable convex objective.
pub fn integer_project(continuous: &[f64], total: u64, u: &[f64], s_min: u64) -> Result<ShotPlan, AllocError> {
    let n = continuous.len();
    if u.len() != n {
        return Err(AllocError::Dimension(format!("{n} shares but {} uncertainties", u.len())));
    }
    if n == 0 {
        return Err(AllocError::Dimension("no fragments".into()));
    }
    if (n as u64).saturating_mul(s_min) > total {
        return Err(AllocError::Infeasible(format!("budget {total} below {n} x floor {s_min}")));
    }
    if let Some(x) = continuous.iter().chain(u).find(|x| !(**x >= 0.0 && x.is_finite())) {
        return Err(AllocError::Domain(format!("invalid entry {x}")));
    }
    let mut s: Vec<u64> = continuous.iter().map(|&x| (x.round() as u64).max(s_min)).collect();
    let mut sum: u64 = s.iter().sum();
    while sum < total {
        let (i, _) = argmax_by((0..n).map(|i| (i, inc_gain(u[i], s[i])))).unwrap();
        s[i] += 1;
        sum += 1;
    }
    while sum > total {
        let (i, _) = argmax_by((0..n).filter(|&i| s[i] > s_min).map(|i| (i, -dec_cost(u[i], s[i]))))
            .expect("sum above n * s_min leaves an entry above the floor");
        s[i] -= 1;
        sum -= 1;
    }
    exchange_polish(&mut s, u, s_min);
    Ok(ShotPlan {
        shots: s,
        total,
        s_min,
    })
}

fn exchange_polish(s: &mut [u64], u: &[f64], s_min: u64) {
    let n = s.len();
    if n < 2 {
        return;
    }
    loop {
        // best two increments and best two decrements, so i != j is always available
        let mut inc: Vec<(usize, f64)> = (0..n).map(|i| (i, inc_gain(u[i], s[i]))).collect();
        inc.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut dec: Vec<(usize, f64)> = (0..n)
            .filter(|&j| s[j] > s_min)
            .map(|j| (j, dec_cost(u[j], s[j])))
            .collect();
        if dec.is_empty() {
            return;
        }
        dec.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let mut best: Option<(usize, usize, f64)> = None;
        for &(i, g) in inc.iter().take(2) {
            for &(j, c) in dec.iter().take(2) {
                if i != j && best.is_none_or(|(_, _, d)| g - c > d) {
                    best = Some((i, j, g - c));
                }
            }
        }
        let scale = diagonal_objective(u, &s.iter().map(|&x| x as f64).collect::<Vec<_>>());
        // an unfunded fragment makes the objective infinite; any finite fix is a strict gain
        let tol = if scale.is_finite() { 1e-13 * scale } else { 0.0 };
        match best {
            Some((i, j, delta)) if delta > tol.max(f64::MIN_POSITIVE) => {
                s[i] += 1;
                s[j] -= 1;
            }
            _ => return,
        }
    }
}

/// Full allocation output, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub u: Vec<f64>,
    pub continuous: Vec<f64>,
    pub plan: ShotPlan,
    pub covariance: CovarianceModel,
}

/// `σ̂_i = sqrt(mean_i)` from the filters, then tail factor, covariance,
/// water-filling, and integer projection.
pub fn allocate(
    states: &[KalmanState],
    topology: &Topology,
    params: &KernelParams,
    tail: &TailParams,
    total: u64,
    s_min: u64,
) -> Result<Allocation, AllocError> {
    let n = states.len();
    if n == 0 {
        return Err(AllocError::Dimension("no fragments".into()));
    }
    let u: Vec<f64> = states
        .iter()
        .map(|st| tail_factor(st.mean.max(0.0).sqrt(), tail))
        .collect::<Result<_, _>>()?;
    let p: Vec<f64> = states.iter().map(|st| st.p).collect();
    let covariance = build_covariance(topology, params, &p)?;
    let continuous = if u.iter().all(|&x| x == 0.0) {
        floored_share(&vec![1.0; n], total as f64, s_min as f64)?
    } else {
        waterfill(&u, total as f64, s_min as f64)?
    };
    let plan = integer_project(&continuous, total, &u, s_min)?;
    Ok(Allocation {
        u,
        continuous,
        plan,
        covariance,
    })
}

/// Reallocation cadence: one event per `every` executed shots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cadence {
    every: u64,
    pending: u64,
}

impl Cadence {
    pub fn new(every: u64) -> Result<Self, AllocError> {
        if every == 0 {
            return Err(AllocError::Domain("cadence B must be positive".into()));
        }
        Ok(Self { every, pending: 0 })
    }

    pub fn every(&self) -> u64 {
        self.every
    }

    /// Record executed shots; returns how many reallocation events fall due.
    pub fn record(&mut self, shots: u64) -> u64 {
        self.pending += shots;
        let events = self.pending / self.every;
        self.pending %= self.every;
        events
    }
}
