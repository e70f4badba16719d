use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::objective::PartitionState;
use super::{BlockCaps, CostModel, Hypergraph, Partition, PartitionError};

/// Gains at or below this are treated as "no improvement".
const GAIN_EPS: f64 = 1e-12;

/// Boundary FM refinement.
///
/// Each pass pushes the boundary vertices into a max-heap keyed by local cut
/// pressure (incident cut edges, ties by ascending vertex id), pops each
/// vertex once, and applies its best feasible move to a neighbouring block
/// if that strictly lowers the objective. Stops after a pass with no
/// accepted move, or after `max_passes`.
pub fn fm_refine(
    hg: &Hypergraph,
    part: &Partition,
    cost: &CostModel<'_>,
    max_passes: usize,
) -> Result<Partition, PartitionError> {
    part.validate(hg)?;
    let mut state = PartitionState::new(hg, part)?;
    let units: Vec<Vec<usize>> = (0..hg.num_vertices()).map(|v| vec![v]).collect();
    refine_units(&mut state, &units, cost, max_passes, part.cut_budget())?;
    Ok(state.to_partition())
}

/// FM over groups of vertices that move together. Singleton units give
/// plain vertex FM; clusters give the coarse levels of the multilevel scheme.
pub(crate) fn refine_units(
    state: &mut PartitionState<'_>,
    units: &[Vec<usize>],
    cost: &CostModel<'_>,
    max_passes: usize,
    cut_limit: usize,
) -> Result<usize, PartitionError> {
    let hg = state.hypergraph();
    let mut unit_of = vec![usize::MAX; hg.num_vertices()];
    for (u, members) in units.iter().enumerate() {
        for &v in members {
            unit_of[v] = u;
        }
    }
    let mut moves = 0;
    for _ in 0..max_passes {
        let mut current = state.objective(cost)?.j;
        let mut visited = vec![false; units.len()];
        let mut heap: BinaryHeap<(u32, Reverse<usize>)> = BinaryHeap::new();
        for u in 0..units.len() {
            let p = unit_pressure(state, &units[u]);
            if p > 0 {
                heap.push((p, Reverse(u)));
            }
        }
        let mut pass_moves = 0;
        while let Some((key, Reverse(u))) = heap.pop() {
            if visited[u] {
                continue;
            }
            let p = unit_pressure(state, &units[u]);
            if p == 0 {
                continue;
            }
            if p != key {
                heap.push((p, Reverse(u)));
                continue;
            }
            visited[u] = true;
            let Some((target, j_new)) = best_move(state, &units[u], cost, cut_limit)? else {
                continue;
            };
            if current - j_new > GAIN_EPS {
                for &v in &units[u] {
                    state.apply_move(v, target);
                }
                current = j_new;
                pass_moves += 1;
                for &v in &units[u] {
                    for w in hg.neighbours(v) {
                        let nu = unit_of[w];
                        if !visited[nu] {
                            let np = unit_pressure(state, &units[nu]);
                            if np > 0 {
                                heap.push((np, Reverse(nu)));
                            }
                        }
                    }
                }
            }
        }
        moves += pass_moves;
        if pass_moves == 0 {
            break;
        }
    }
    Ok(moves)
}

fn unit_pressure(state: &PartitionState<'_>, members: &[usize]) -> u32 {
    let hg = state.hypergraph();
    let mut seen: Vec<usize> = members
        .iter()
        .flat_map(|&v| hg.incident(v).iter().copied())
        .filter(|&e| state.is_cut(e))
        .collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len() as u32
}

/// Best feasible target block among the unit's neighbouring blocks, with the
/// objective value it would reach. Ties go to the lowest block id.
fn best_move(
    state: &mut PartitionState<'_>,
    members: &[usize],
    cost: &CostModel<'_>,
    cut_limit: usize,
) -> Result<Option<(usize, f64)>, PartitionError> {
    let hg = state.hypergraph();
    let from = state.block_of(members[0]);
    let mut targets: Vec<usize> = members
        .iter()
        .flat_map(|&v| hg.neighbours(v))
        .map(|w| state.block_of(w))
        .filter(|&b| b != from)
        .collect();
    targets.sort_unstable();
    targets.dedup();
    let mut best: Option<(usize, f64)> = None;
    for t in targets {
        for &v in members {
            state.apply_move(v, t);
        }
        let feasible = state.block_within_caps(t) && state.cut_count() <= cut_limit;
        let j = if feasible {
            Some(state.objective(cost)?.j)
        } else {
            None
        };
        for &v in members {
            state.apply_move(v, from);
        }
        if let Some(j) = j {
            if best.is_none_or(|(_, bj)| j < bj) {
                best = Some((t, j));
            }
        }
    }
    Ok(best)
}

/// Multilevel coarsen, seed, uncoarsen partitioning.
///
/// Coarsening repeatedly matches each cluster with its most heavily
/// connected unmatched neighbour (connection = sum of `w_e / (|e| - 1)`
/// over shared edges) while the merged cluster still fits the largest block
/// caps, until at most `2k` clusters remain. The coarsest clusters are seeded
/// greedily into `k` blocks; each level is then projected back and refined
/// with FM. Several seeded attempts are made and the lowest objective wins.
pub fn initial_partition(
    hg: &Hypergraph,
    caps: &[BlockCaps],
    cut_budget: usize,
    seed: u64,
    cost: &CostModel<'_>,
) -> Result<Partition, PartitionError> {
    const ATTEMPTS: usize = 8;
    const PASSES: usize = 8;
    let k = caps.len();
    if k == 0 {
        return Err(PartitionError::Config("need at least one block".into()));
    }
    if cut_budget == 0 {
        return Err(PartitionError::Config("cut budget C_max must be positive".into()));
    }
    let qubit_capacity: usize = caps.iter().map(|c| c.max_qubits).sum();
    if qubit_capacity < hg.num_qubits() {
        return Err(PartitionError::Infeasible(format!(
            "blocks hold at most {qubit_capacity} qubits in total, circuit uses {}",
            hg.num_qubits()
        )));
    }
    let max_q = caps.iter().map(|c| c.max_qubits).max().unwrap_or(0);
    let max_d = caps.iter().map(|c| c.max_depth).max().unwrap_or(0);
    if let Some(v) = (0..hg.num_vertices()).find(|&v| hg.qubits_of(v).len() > max_q || max_d == 0) {
        return Err(PartitionError::Infeasible(format!(
            "gate {} does not fit any block",
            hg.gates()[v].id
        )));
    }
    if hg.num_vertices() == 0 {
        return Partition::new(Vec::new(), caps.to_vec(), cut_budget);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let template = Partition::new(vec![0; hg.num_vertices()], caps.to_vec(), cut_budget)?;

    let mut best: Option<(f64, Partition)> = None;
    for attempt in 0..ATTEMPTS {
        let levels = coarsen(hg, 2 * k, max_q, max_d, &mut rng);
        let coarsest = levels.last().unwrap();
        let Some(assign) = seed_blocks(hg, coarsest, caps, attempt, &mut rng) else {
            continue;
        };
        let part = template.with_assignment(assign);
        let mut state = PartitionState::new(hg, &part)?;
        for level in levels.iter().rev() {
            let limit = cut_budget.max(state.cut_count());
            refine_units(&mut state, level, cost, PASSES, limit)?;
        }
        if state.cut_count() > cut_budget || !(0..k).all(|b| state.block_within_caps(b)) {
            continue;
        }
        let j = state.objective(cost)?.j;
        if best.as_ref().is_none_or(|(bj, _)| j < *bj) {
            best = Some((j, state.to_partition()));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        PartitionError::Infeasible("no seeded attempt met the caps and cut budget".into())
    })
}

/// Cluster hierarchy, finest (singletons) first.
fn coarsen(
    hg: &Hypergraph,
    stop_at: usize,
    max_q: usize,
    max_d: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<Vec<Vec<usize>>> {
    let n = hg.num_vertices();
    let mut levels: Vec<Vec<Vec<usize>>> = vec![(0..n).map(|v| vec![v]).collect()];
    loop {
        let clusters = levels.last().unwrap();
        if clusters.len() <= stop_at.max(1) {
            break;
        }
        let mut cluster_of = vec![0; n];
        for (c, members) in clusters.iter().enumerate() {
            for &v in members {
                cluster_of[v] = c;
            }
        }
        let mut conn: Vec<HashMap<usize, f64>> = vec![HashMap::new(); clusters.len()];
        for e in hg.edges() {
            let mut cs: Vec<usize> = e.pins.iter().map(|&p| cluster_of[p]).collect();
            cs.sort_unstable();
            cs.dedup();
            if cs.len() < 2 {
                continue;
            }
            let w = e.weight.max(1e-9) / (e.pins.len() - 1) as f64;
            for &a in &cs {
                for &b in &cs {
                    if a != b {
                        *conn[a].entry(b).or_insert(0.0) += w;
                    }
                }
            }
        }
        let footprint = |members: &[usize]| {
            let mut q: Vec<usize> = members.iter().flat_map(|&v| hg.qubits_of(v).iter().copied()).collect();
            q.sort_unstable();
            q.dedup();
            let mut d: Vec<usize> = members.iter().map(|&v| hg.level_of(v)).collect();
            d.sort_unstable();
            d.dedup();
            (q.len(), d.len())
        };
        let mut order: Vec<usize> = (0..clusters.len()).collect();
        order.shuffle(rng);
        let mut matched = vec![false; clusters.len()];
        let mut next: Vec<Vec<usize>> = Vec::with_capacity(clusters.len() / 2 + 1);
        for &c in &order {
            if matched[c] {
                continue;
            }
            matched[c] = true;
            let mut cands: Vec<(usize, f64)> = conn[c]
                .iter()
                .filter(|(&b, _)| !matched[b])
                .map(|(&b, &w)| (b, w))
                .collect();
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut merged = clusters[c].clone();
            for (b, _) in cands {
                let mut trial = merged.clone();
                trial.extend_from_slice(&clusters[b]);
                let (q, d) = footprint(&trial);
                if q <= max_q && d <= max_d {
                    matched[b] = true;
                    merged = trial;
                    break;
                }
            }
            merged.sort_unstable();
            next.push(merged);
        }
        // stalls when caps block further merging
        if next.len() * 10 > clusters.len() * 9 {
            break;
        }
        next.sort();
        levels.push(next);
    }
    levels
}

/// Greedy seeding of the coarsest clusters. Attempt 0 goes largest-first;
/// later attempts use a shuffled order.
fn seed_blocks(
    hg: &Hypergraph,
    clusters: &[Vec<usize>],
    caps: &[BlockCaps],
    attempt: usize,
    rng: &mut ChaCha12Rng,
) -> Option<Vec<usize>> {
    let k = caps.len();
    let n = hg.num_vertices();
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    if attempt == 0 {
        order.sort_by_key(|&c| (Reverse(clusters[c].len()), c));
    } else {
        order.shuffle(rng);
    }
    let mut assign = vec![usize::MAX; n];
    let mut block_qubits: Vec<Vec<bool>> = vec![vec![false; hg.num_qubits()]; k];
    let mut block_levels: Vec<Vec<bool>> = vec![vec![false; hg.num_levels()]; k];
    let mut load = vec![0usize; k];
    for &c in &order {
        let members = &clusters[c];
        let mut best: Option<(f64, usize)> = None;
        for b in 0..k {
            let mut q = block_qubits[b].iter().filter(|&&x| x).count();
            let mut seen_q = block_qubits[b].clone();
            let mut d = block_levels[b].iter().filter(|&&x| x).count();
            let mut seen_d = block_levels[b].clone();
            for &v in members {
                for &qq in hg.qubits_of(v) {
                    if !seen_q[qq] {
                        seen_q[qq] = true;
                        q += 1;
                    }
                }
                let l = hg.level_of(v);
                if !seen_d[l] {
                    seen_d[l] = true;
                    d += 1;
                }
            }
            if q > caps[b].max_qubits || d > caps[b].max_depth {
                continue;
            }
            let connection: f64 = members
                .iter()
                .flat_map(|&v| hg.neighbours(v))
                .filter(|&w| assign[w] == b)
                .count() as f64;
            let total = n.max(1) as f64;
            let score = connection - 2.0 * (load[b] + members.len()) as f64 / total * members.len() as f64;
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, b));
            }
        }
        let (_, b) = best?;
        for &v in members {
            assign[v] = b;
            for &qq in hg.qubits_of(v) {
                block_qubits[b][qq] = true;
            }
            block_levels[b][hg.level_of(v)] = true;
        }
        load[b] += members.len();
    }
    Some(assign)
}
