//! Size-capped graph partitioning of output columns.
//!
//! Two orderings of the nodes are built: one from capped label propagation (clusters laid
//! out along a traversal of the cluster graph) and one from breadth-first search started at
//! pseudo-peripheral nodes. Each ordering is cut into `k` consecutive blocks that try not to
//! split clusters, and the partition with the smaller objective is kept.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::active::ActiveSet;
use crate::error::{config, structural, Result};

/// Disjoint cover of `{0, …, n−1}` by non-empty blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    blocks: Vec<Vec<usize>>,
    block_of: Vec<usize>,
}

impl BlockPartition {
    pub fn new(blocks: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut block_of = vec![usize::MAX; n];
        for (b, blk) in blocks.iter().enumerate() {
            if blk.is_empty() {
                return structural(format!("block {b} is empty"));
            }
            for &v in blk {
                if v >= n || block_of[v] != usize::MAX {
                    return structural(format!("node {v} is out of range or assigned twice"));
                }
                block_of[v] = b;
            }
        }
        if block_of.contains(&usize::MAX) {
            return structural("partition does not cover every node");
        }
        let mut blocks = blocks;
        for b in blocks.iter_mut() {
            b.sort_unstable();
        }
        Ok(BlockPartition { blocks, block_of })
    }

    pub fn single(n: usize) -> Self {
        BlockPartition { blocks: vec![(0..n).collect()], block_of: vec![0; n] }
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block_of(&self, v: usize) -> usize {
        self.block_of[v]
    }

    pub fn max_block_size(&self) -> usize {
        self.blocks.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Weighted undirected graph with sorted adjacency lists.
#[derive(Debug, Clone)]
struct Graph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl Graph {
    fn from_edges(n: usize, edges: HashMap<(usize, usize), f64>) -> Self {
        let mut adj = vec![Vec::new(); n];
        for ((u, v), w) in edges {
            adj[u].push((v, w));
            adj[v].push((u, w));
        }
        for a in adj.iter_mut() {
            a.sort_by(|x, y| x.0.cmp(&y.0));
        }
        Graph { adj }
    }

    fn n(&self) -> usize {
        self.adj.len()
    }
}

/// Number of active off-diagonal `Λ` pairs whose endpoints fall in different blocks.
pub fn lambda_offdiag_count(active: &ActiveSet, part: &BlockPartition) -> usize {
    active.lambda_coords.iter().filter(|&&(i, j)| i != j && part.block_of(i) != part.block_of(j)).count()
}

/// Number of `(row, block)` pairs holding at least one active `Θ` coordinate.
pub fn theta_row_block_count(active: &ActiveSet, part: &BlockPartition) -> usize {
    let mut pairs: Vec<(usize, usize)> = active.theta_coords.iter().map(|&(i, j)| (i, part.block_of(j))).collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs.len()
}

/// A uniformly shuffled partition into `k` blocks of sizes differing by at most one.
pub fn random_balanced_partition(n: usize, k: usize, seed: u64) -> Result<BlockPartition> {
    check_k(n, k)?;
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    BlockPartition::new(balanced_cut(&nodes, k), n)
}

fn balanced_cut(seq: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = seq.len();
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for b in 0..k {
        let len = n / k + usize::from(b < n % k);
        out.push(seq[start..start + len].to_vec());
        start += len;
    }
    out
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return config(format!("cannot split {n} columns into {k} blocks"));
    }
    Ok(())
}

/// Partition of the `q` outputs minimizing active `Λ` pairs between blocks.
pub fn partition_lambda(active: &ActiveSet, q: usize, k: usize, seed: u64) -> Result<BlockPartition> {
    check_k(q, k)?;
    if k == 1 {
        return Ok(BlockPartition::single(q));
    }
    let mut edges = HashMap::new();
    for &(i, j) in &active.lambda_coords {
        if i != j {
            *edges.entry((i.min(j), i.max(j))).or_insert(0.0) += 1.0;
        }
    }
    let g = Graph::from_edges(q, edges);
    partition_graph(&g, k, seed, |p| lambda_offdiag_count(active, p))
}

/// Partition of the `q` outputs minimizing `(row, block)` pairs with active `Θ` entries.
/// Columns are adjacent when some row has both of them active.
pub fn partition_theta(active: &ActiveSet, p: usize, q: usize, k: usize, seed: u64) -> Result<BlockPartition> {
    check_k(q, k)?;
    if k == 1 {
        return Ok(BlockPartition::single(q));
    }
    let mut by_row: Vec<Vec<usize>> = vec![Vec::new(); p];
    for &(i, j) in &active.theta_coords {
        if i >= p {
            return structural(format!("Θ row {i} out of range for p = {p}"));
        }
        by_row[i].push(j);
    }
    let mut edges = HashMap::new();
    for cols in by_row.iter_mut() {
        cols.sort_unstable();
        for a in 0..cols.len() {
            for b in a + 1..cols.len() {
                *edges.entry((cols[a], cols[b])).or_insert(0.0) += 1.0;
            }
        }
    }
    let g = Graph::from_edges(q, edges);
    partition_graph(&g, k, seed, |part| theta_row_block_count(active, part))
}

fn partition_graph(g: &Graph, k: usize, seed: u64, objective: impl Fn(&BlockPartition) -> usize) -> Result<BlockPartition> {
    let n = g.n();
    let cap = n.div_ceil(k);

    let labels = label_propagation(g, cap, seed);
    let (seq_lp, cl_lp) = cluster_sequence(g, &labels);
    let comps = components(g);
    let seq_bfs = bfs_sequence(g, &comps);
    let cl_bfs: Vec<usize> = seq_bfs.iter().map(|&v| comps[v]).collect();

    let a = BlockPartition::new(pack(&seq_lp, &cl_lp, k, cap), n)?;
    let b = BlockPartition::new(pack(&seq_bfs, &cl_bfs, k, cap), n)?;
    Ok(if objective(&b) < objective(&a) { b } else { a })
}

/// Capped label propagation; returns a label per node.
fn label_propagation(g: &Graph, cap: usize, seed: u64) -> Vec<usize> {
    let n = g.n();
    let mut labels: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut weight: HashMap<usize, f64> = HashMap::new();
    for _ in 0..30 {
        let mut changed = false;
        for &v in &order {
            weight.clear();
            for &(u, w) in &g.adj[v] {
                *weight.entry(labels[u]).or_insert(0.0) += w;
            }
            let own = labels[v];
            let own_w = weight.get(&own).copied().unwrap_or(0.0);
            let mut best: Option<(f64, usize)> = None;
            for (&l, &w) in &weight {
                if l == own || size[l] >= cap {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bw, bl)) => w > bw || (w == bw && l < bl),
                };
                if better {
                    best = Some((w, l));
                }
            }
            if let Some((w, l)) = best {
                if w > own_w {
                    size[own] -= 1;
                    size[l] += 1;
                    labels[v] = l;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Lays clusters out along a greedy traversal of the cluster graph, each cluster in BFS
/// order starting next to its predecessor. Returns the node sequence and, per position,
/// a cluster id.
fn cluster_sequence(g: &Graph, labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n = g.n();
    let mut ids: HashMap<usize, usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for v in 0..n {
        let next = ids.len();
        let c = *ids.entry(labels[v]).or_insert(next);
        if c == members.len() {
            members.push(Vec::new());
        }
        members[c].push(v);
    }
    let cid: Vec<usize> = (0..n).map(|v| ids[&labels[v]]).collect();
    let nc = members.len();
    let mut cgraph: Vec<HashMap<usize, f64>> = vec![HashMap::new(); nc];
    for v in 0..n {
        for &(u, w) in &g.adj[v] {
            if cid[u] != cid[v] {
                *cgraph[cid[v]].entry(cid[u]).or_insert(0.0) += w;
            }
        }
    }

    let mut placed = vec![false; nc];
    let mut in_seq = vec![false; n];
    let mut seq = Vec::with_capacity(n);
    let mut seq_cl = Vec::with_capacity(n);
    let mut last: Option<usize> = None;
    for _ in 0..nc {
        let next = last
            .and_then(|l| {
                cgraph[l]
                    .iter()
                    .filter(|(c, _)| !placed[**c])
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
                    .map(|(c, _)| *c)
            })
            .unwrap_or_else(|| (0..nc).find(|&c| !placed[c]).unwrap());
        placed[next] = true;
        let start = members[next]
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let wa: f64 = g.adj[a].iter().filter(|(u, _)| in_seq[*u]).map(|(_, w)| w).sum();
                let wb: f64 = g.adj[b].iter().filter(|(u, _)| in_seq[*u]).map(|(_, w)| w).sum();
                wa.partial_cmp(&wb).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        let mut queue = VecDeque::new();
        let mut pending: Vec<usize> = members[next].clone();
        pending.sort_unstable();
        let mut seeds = std::iter::once(start).chain(pending.into_iter());
        loop {
            if queue.is_empty() {
                match seeds.by_ref().find(|&s| !in_seq[s]) {
                    Some(s) => {
                        in_seq[s] = true;
                        queue.push_back(s);
                    }
                    None => break,
                }
            }
            while let Some(v) = queue.pop_front() {
                seq.push(v);
                seq_cl.push(next);
                for &(u, _) in &g.adj[v] {
                    if !in_seq[u] && cid[u] == next {
                        in_seq[u] = true;
                        queue.push_back(u);
                    }
                }
            }
        }
        last = Some(next);
    }
    (seq, seq_cl)
}

fn components(g: &Graph) -> Vec<usize> {
    let n = g.n();
    let mut comp = vec![usize::MAX; n];
    let mut c = 0;
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = c;
        let mut stack = vec![s];
        while let Some(v) = stack.pop() {
            for &(u, _) in &g.adj[v] {
                if comp[u] == usize::MAX {
                    comp[u] = c;
                    stack.push(u);
                }
            }
        }
        c += 1;
    }
    comp
}

fn bfs_from(g: &Graph, s: usize, seen: &mut [bool], out: &mut Vec<usize>) {
    let mut queue = VecDeque::from([s]);
    seen[s] = true;
    while let Some(v) = queue.pop_front() {
        out.push(v);
        for &(u, _) in &g.adj[v] {
            if !seen[u] {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
}

/// BFS orderings of each component, started from a pseudo-peripheral node.
fn bfs_sequence(g: &Graph, comps: &[usize]) -> Vec<usize> {
    let n = g.n();
    let mut done = vec![false; n];
    let mut seq = Vec::with_capacity(n);
    for s in 0..n {
        if done[s] {
            continue;
        }
        let mut start = s;
        for _ in 0..2 {
            let mut seen = vec![false; n];
            let mut order = Vec::new();
            bfs_from(g, start, &mut seen, &mut order);
            start = *order.last().unwrap();
        }
        debug_assert_eq!(comps[start], comps[s]);
        bfs_from(g, start, &mut done, &mut seq);
    }
    seq
}

/// Cuts `seq` into `k` consecutive non-empty blocks of at most `cap` nodes, closing a block
/// early rather than splitting a cluster when the remaining room allows it.
fn pack(seq: &[usize], cluster: &[usize], k: usize, cap: usize) -> Vec<Vec<usize>> {
    let n = seq.len();
    let mut run_len = vec![0usize; n];
    let mut t = n;
    while t > 0 {
        let end = t;
        let c = cluster[t - 1];
        while t > 0 && cluster[t - 1] == c {
            t -= 1;
        }
        for r in t..end {
            run_len[r] = end - r;
        }
    }
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new()];
    for (pos, &v) in seq.iter().enumerate() {
        let remaining = n - pos;
        let closed = blocks.len() - 1;
        let cur = blocks.last().unwrap().len();
        let blocks_after = k - closed - 1;
        let starts_cluster = pos == 0 || cluster[pos] != cluster[pos - 1];
        let must_close = cur > 0 && blocks_after > 0 && (cur == cap || remaining == blocks_after);
        let want_close = cur > 0
            && blocks_after > 0
            && starts_cluster
            && run_len[pos] <= cap
            && cur + run_len[pos] > cap
            && remaining <= blocks_after * cap;
        if must_close || want_close {
            blocks.push(Vec::new());
        }
        blocks.last_mut().unwrap().push(v);
    }
    blocks
}
