//! Non-learning channel allocation: centralized graph coloring (CGC),
//! greedy SINR selection, random allocation and an exhaustive oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{AllocationVector, Snapshot};
use crate::exec::{self, Execution};
use crate::rng;
use crate::{Error, Result};

/// Largest `K^N` the exhaustive search accepts.
pub const BRUTE_FORCE_LIMIT: f64 = 1e6;

/// Mutual coupling graph: each vertex links to its `K - 1` strongest
/// interferers. Edge weights are symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceGraph {
    pub weights: Vec<Vec<f64>>,
    /// Out-neighbours chosen by each vertex, strongest first.
    pub neighbors: Vec<Vec<usize>>,
}

impl InterferenceGraph {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Undirected edge set `(a, b, w)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut e: Vec<(usize, usize, f64)> = self
            .neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, nb)| nb.iter().map(move |&b| (a.min(b), a.max(b))))
            .map(|(a, b)| (a, b, self.weights[a][b]))
            .collect();
        e.sort_by_key(|x| (x.0, x.1));
        e.dedup_by(|x, y| x.0 == y.0 && x.1 == y.1);
        e
    }

    /// Undirected adjacency lists derived from `edges`.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.len()];
        for (a, b, w) in self.edges() {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        adj
    }

    /// Total weight of edges whose endpoints share a channel.
    pub fn monochromatic_weight(&self, colors: &[usize]) -> f64 {
        self.edges().iter().filter(|(a, b, _)| colors[*a] == colors[*b]).map(|e| e.2).sum()
    }
}

/// Builds the coupling graph from pairwise interference powers.
/// Asymmetric inputs are symmetrised by taking the larger direction.
pub fn build_graph(pairwise_power: &[Vec<f64>], k: usize) -> Result<InterferenceGraph> {
    let n = pairwise_power.len();
    if pairwise_power.iter().any(|r| r.len() != n) {
        return Err(Error::Shape { expected: n, got: pairwise_power.iter().map(Vec::len).find(|&l| l != n).unwrap_or(n) });
    }
    if pairwise_power.iter().flatten().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::domain("interference powers must be finite and non-negative"));
    }
    let mut weights = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            if a != b {
                weights[a][b] = pairwise_power[a][b].max(pairwise_power[b][a]);
            }
        }
    }
    let degree = k.saturating_sub(1);
    let neighbors = (0..n)
        .map(|a| {
            let mut others: Vec<usize> = (0..n).filter(|&b| b != a).collect();
            others.sort_by(|&x, &y| weights[a][y].total_cmp(&weights[a][x]).then(x.cmp(&y)));
            others.truncate(degree);
            others
        })
        .collect();
    Ok(InterferenceGraph { weights, neighbors })
}

/// Cost of giving `v` channel `c` against the current coloring.
fn conflict(adj: &[Vec<(usize, f64)>], colors: &[usize], v: usize, c: usize) -> f64 {
    adj[v].iter().filter(|(u, _)| colors[*u] == c).map(|(_, w)| w).sum()
}

fn least_conflicted(adj: &[Vec<(usize, f64)>], colors: &[usize], v: usize, k: usize) -> (usize, f64) {
    (0..k)
        .map(|c| (c, conflict(adj, colors, v, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Greedy coloring in order of decreasing weighted degree, then single
/// vertex moves while any strictly lowers the monochromatic weight.
pub fn cgc_allocate(graph: &InterferenceGraph, k: usize) -> AllocationVector {
    cgc_allocate_traced(graph, k).0
}

/// As [`cgc_allocate`], also returning the objective after the greedy pass
/// and after every accepted move.
pub fn cgc_allocate_traced(graph: &InterferenceGraph, k: usize) -> (AllocationVector, Vec<f64>) {
    let n = graph.len();
    let k = k.max(1);
    let adj = graph.adjacency();
    let mut order: Vec<usize> = (0..n).collect();
    let strength: Vec<f64> = adj.iter().map(|a| a.iter().map(|e| e.1).sum()).collect();
    order.sort_by(|&a, &b| strength[b].total_cmp(&strength[a]).then(a.cmp(&b)));

    const UNSET: usize = usize::MAX;
    let mut colors = vec![UNSET; n];
    for &v in &order {
        colors[v] = least_conflicted(&adj, &colors, v, k).0;
    }
    let mut trace = vec![graph.monochromatic_weight(&colors)];
    loop {
        let mut improved = false;
        for &v in &order {
            let current = conflict(&adj, &colors, v, colors[v]);
            let (c, cost) = least_conflicted(&adj, &colors, v, k);
            if cost < current {
                colors[v] = c;
                improved = true;
                trace.push(graph.monochromatic_weight(&colors));
            }
        }
        if !improved {
            break;
        }
    }
    (AllocationVector(colors), trace)
}

/// Channel with the highest measurement; ties go to the lowest index.
pub fn greedy_select(measurements: &[f64]) -> usize {
    let mut best = 0;
    for (c, &x) in measurements.iter().enumerate() {
        if x > measurements[best] {
            best = c;
        }
    }
    best
}

/// Independent uniform channel per subnetwork.
pub fn random_allocate(n: usize, k: usize, seed: u64) -> AllocationVector {
    let mut r = rng::stream(seed, &[]);
    AllocationVector((0..n).map(|_| r.random_range(0..k.max(1))).collect())
}

fn decode(mut index: usize, n: usize, k: usize, out: &mut [usize]) {
    for slot in out.iter_mut().take(n) {
        *slot = index % k;
        index /= k;
    }
}

/// Exhaustive maximiser of the sum rate over all `K^N` allocations.
/// Ties resolve to the lexicographically first allocation in base-K order.
pub fn brute_force_optimal(snapshot: &Snapshot, k: usize, execution: Execution) -> Result<(AllocationVector, f64)> {
    let n = snapshot.gains.num_subnetworks;
    let size = (k as f64).powi(n as i32);
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge { size });
    }
    if k != snapshot.gains.num_channels {
        return Err(Error::Shape { expected: snapshot.gains.num_channels, got: k });
    }
    let total = size as usize;
    let chunk = 4096usize;
    let chunks = total.div_ceil(chunk);
    let bests = exec::map_range(execution, 0..chunks, |c| {
        let mut alloc = vec![0; n];
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for idx in c * chunk..((c + 1) * chunk).min(total) {
            decode(idx, n, k, &mut alloc);
            let v = snapshot.sum_rate(&alloc);
            if v > best.1 {
                best = (idx, v);
            }
        }
        best
    });
    let (idx, value) = bests.into_iter().fold((usize::MAX, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let mut alloc = vec![0; n];
    decode(idx, n, k, &mut alloc);
    Ok((AllocationVector(alloc), value))
}
