use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{MetricsError, MetricsReport};

pub const DEFAULT_K: usize = 15;

/// Louvain resolutions swept by [`cluster_report`]: 0.1, 0.2, ..., 2.0.
pub fn resolutions() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 10.0).collect()
}

/// Undirected weighted graph as symmetric adjacency lists.
///
/// A self-loop of weight `w` is stored once with weight `2w`, so a node's
/// degree is the plain sum of its row.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl CellGraph {
    /// Build from undirected edges; repeated edges add up.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(a, b, w) in edges {
            if a == b {
                *rows[a].entry(a).or_default() += 2.0 * w;
            } else {
                *rows[a].entry(b).or_default() += w;
                *rows[b].entry(a).or_default() += w;
            }
        }
        Self {
            adj: rows.into_iter().map(|r| r.into_iter().collect()).collect(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].iter().any(|&(k, _)| k == j)
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.adj[i].iter().map(|&(_, w)| w).sum()
    }

    /// Total edge weight `m`.
    pub fn total_weight(&self) -> f64 {
        (0..self.n_nodes()).map(|i| self.degree(i)).sum::<f64>() / 2.0
    }

    fn aggregate(&self, community: &[usize], n_comm: usize) -> Self {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_comm];
        for (i, row) in self.adj.iter().enumerate() {
            for &(j, w) in row {
                *rows[community[i]].entry(community[j]).or_default() += w;
            }
        }
        Self {
            adj: rows.into_iter().map(|r| r.into_iter().collect()).collect(),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_rows(emb: &[Vec<f64>]) -> Result<(), MetricsError> {
    let d = emb.first().map_or(0, Vec::len);
    for (i, r) in emb.iter().enumerate() {
        if r.len() != d {
            return Err(MetricsError::Invalid(format!("row {i} has {} columns, expected {d}", r.len())));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::Invalid(format!("row {i} has a non-finite entry")));
        }
    }
    Ok(())
}

/// Symmetrized k-nearest-neighbour graph under Euclidean distance with
/// unit weights. Distance ties go to the lower index.
pub fn knn_graph(emb: &[Vec<f64>], k: usize) -> Result<CellGraph, MetricsError> {
    let n = emb.len();
    if k == 0 || k >= n {
        return Err(MetricsError::KTooLarge { k, n });
    }
    check_rows(emb)?;
    let nearest: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (sq_dist(&emb[i], &emb[j]), j)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();
    let mut edges = std::collections::BTreeSet::new();
    for (i, js) in nearest.iter().enumerate() {
        for &j in js {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    let edges: Vec<(usize, usize, f64)> = edges.into_iter().map(|(a, b)| (a, b, 1.0)).collect();
    Ok(CellGraph::from_edges(n, &edges))
}

/// `Q = sum_c [ e_c / m - gamma (d_c / 2m)^2 ]`.
pub fn modularity(graph: &CellGraph, partition: &[usize], gamma: f64) -> f64 {
    let m = graph.total_weight();
    if m == 0.0 {
        return 0.0;
    }
    let mut internal: BTreeMap<usize, f64> = BTreeMap::new();
    let mut degree: BTreeMap<usize, f64> = BTreeMap::new();
    for i in 0..graph.n_nodes() {
        let c = partition[i];
        for &(j, w) in graph.neighbors(i) {
            *degree.entry(c).or_default() += w;
            if partition[j] == c {
                *internal.entry(c).or_default() += w;
            }
        }
    }
    degree
        .iter()
        .map(|(c, &d)| internal.get(c).copied().unwrap_or(0.0) / (2.0 * m) - gamma * (d / (2.0 * m)).powi(2))
        .sum()
}

/// Relabel to 0.. in order of first appearance.
fn canonical(partition: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    partition
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// Move nodes between communities until no single move improves
/// modularity. Returns whether any node moved.
fn local_moves(graph: &CellGraph, community: &mut [usize], gamma: f64, order: &[usize]) -> bool {
    let m2 = 2.0 * graph.total_weight();
    let k: Vec<f64> = (0..graph.n_nodes()).map(|i| graph.degree(i)).collect();
    let mut tot = vec![0.0; graph.n_nodes()];
    let mut members = vec![0usize; graph.n_nodes()];
    for (i, &c) in community.iter().enumerate() {
        tot[c] += k[i];
        members[c] += 1;
    }
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for &i in order {
            let own = community[i];
            tot[own] -= k[i];
            members[own] -= 1;
            let mut links: Vec<(usize, f64)> = Vec::new();
            let mut own_links = 0.0;
            for &(j, w) in graph.neighbors(i) {
                if j == i {
                    continue;
                }
                let c = community[j];
                if c == own {
                    own_links += w;
                }
                match links.iter_mut().find(|(cc, _)| *cc == c) {
                    Some(e) => e.1 += w,
                    None => links.push((c, w)),
                }
            }
            let gain = |links_c: f64, c: usize| links_c - gamma * tot[c] * k[i] / m2;
            let mut best = own;
            let mut best_gain = gain(own_links, own);
            for &(c, l) in &links {
                let g = gain(l, c);
                if g > best_gain + 1e-12 {
                    best = c;
                    best_gain = g;
                }
            }
            if best_gain < -1e-12 && members[own] > 0 {
                best = members.iter().position(|&c| c == 0).expect("a free community id");
            }
            tot[best] += k[i];
            members[best] += 1;
            if best != own {
                community[i] = best;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            return moved_any;
        }
    }
}

/// Multi-level Louvain at resolution `gamma`. Nodes are visited in a
/// seeded random order at every level.
pub fn louvain(graph: &CellGraph, gamma: f64, seed: u64) -> Vec<usize> {
    let n = graph.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: Vec<usize> = (0..n).collect();
    if graph.total_weight() == 0.0 {
        return assignment;
    }
    let mut level = graph.clone();
    loop {
        let mut order: Vec<usize> = (0..level.n_nodes()).collect();
        order.shuffle(&mut rng);
        let mut community: Vec<usize> = (0..level.n_nodes()).collect();
        if !local_moves(&level, &mut community, gamma, &order) {
            break;
        }
        let community = canonical(&community);
        let n_comm = community.iter().max().map_or(0, |&c| c + 1);
        for a in assignment.iter_mut() {
            *a = community[*a];
        }
        if n_comm == level.n_nodes() {
            break;
        }
        level = level.aggregate(&community, n_comm);
    }
    canonical(&assignment)
}

/// Run the local-move phase on `graph` starting from `partition`.
pub fn refine(graph: &CellGraph, partition: &[usize], gamma: f64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..graph.n_nodes()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut community = canonical(partition);
    if graph.total_weight() > 0.0 {
        local_moves(graph, &mut community, gamma, &order);
    }
    canonical(&community)
}

/// Best partition of a small graph by enumerating every set partition.
pub fn brute_force_modularity_optimum(graph: &CellGraph, gamma: f64) -> (Vec<usize>, f64) {
    fn rec(i: usize, cur: &mut Vec<usize>, n_blocks: usize, g: &CellGraph, gamma: f64, best: &mut (Vec<usize>, f64)) {
        if i == g.n_nodes() {
            let q = modularity(g, cur, gamma);
            if q > best.1 {
                *best = (cur.clone(), q);
            }
            return;
        }
        for b in 0..=n_blocks {
            cur.push(b);
            rec(i + 1, cur, n_blocks.max(b + 1), g, gamma, best);
            cur.pop();
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    rec(0, &mut Vec::new(), 0, graph, gamma, &mut best);
    best
}

type Counts<K> = BTreeMap<K, f64>;

fn contingency(a: &[usize], b: &[usize]) -> (Counts<(usize, usize)>, Counts<usize>, Counts<usize>) {
    let mut joint = BTreeMap::new();
    let mut ra = BTreeMap::new();
    let mut rb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
        *ra.entry(x).or_insert(0.0) += 1.0;
        *rb.entry(y).or_insert(0.0) += 1.0;
    }
    (joint, ra, rb)
}

fn aligned(a: &[usize], b: &[usize]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Invalid("empty labelling".into()));
    }
    Ok(())
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn nmi(labels: &[usize], partition: &[usize]) -> Result<f64, MetricsError> {
    aligned(labels, partition)?;
    let n = labels.len() as f64;
    let (joint, ra, rb) = contingency(labels, partition);
    let entropy = |m: &BTreeMap<usize, f64>| -m.values().map(|&c| c / n * (c / n).ln()).sum::<f64>();
    let (ha, hb) = (entropy(&ra), entropy(&rb));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| c / n * (c * n / (ra[&x] * rb[&y])).ln())
        .sum();
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

/// Adjusted Rand index by pair counting.
pub fn ari(labels: &[usize], partition: &[usize]) -> Result<f64, MetricsError> {
    aligned(labels, partition)?;
    let pairs = |c: f64| c * (c - 1.0) / 2.0;
    let (joint, ra, rb) = contingency(labels, partition);
    let index: f64 = joint.values().map(|&c| pairs(c)).sum();
    let sa: f64 = ra.values().map(|&c| pairs(c)).sum();
    let sb: f64 = rb.values().map(|&c| pairs(c)).sum();
    let total = pairs(labels.len() as f64);
    // (index - sa sb / total) / (mean(sa, sb) - sa sb / total), scaled by total
    let num = index * total - sa * sb;
    let den = (sa + sb) / 2.0 * total - sa * sb;
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(num / den)
}

/// Mean silhouette width over all cells; a cell alone in its label
/// scores 0.
pub fn asw(emb: &[Vec<f64>], labels: &[usize]) -> Result<f64, MetricsError> {
    aligned(labels, &vec![0; emb.len()])?;
    check_rows(emb)?;
    let mut size: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *size.entry(l).or_default() += 1;
    }
    if size.len() < 2 {
        return Err(MetricsError::SingleCluster);
    }
    let s: Vec<f64> = (0..emb.len())
        .into_par_iter()
        .map(|i| {
            if size[&labels[i]] == 1 {
                return 0.0;
            }
            let mut sum: BTreeMap<usize, f64> = BTreeMap::new();
            for j in 0..emb.len() {
                if j != i {
                    *sum.entry(labels[j]).or_default() += sq_dist(&emb[i], &emb[j]).sqrt();
                }
            }
            let a = sum[&labels[i]] / (size[&labels[i]] - 1) as f64;
            let b = sum
                .iter()
                .filter(|(l, _)| **l != labels[i])
                .map(|(l, s)| s / size[l] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

pub fn avg_bio(nmi: f64, ari: f64, asw: f64) -> f64 {
    (nmi + ari + asw) / 3.0
}

/// Map string labels to ids in order of first appearance.
pub fn encode_labels(labels: &[String]) -> Vec<usize> {
    let mut map: HashMap<&str, usize> = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l.as_str()).or_insert(next)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub nmi: f64,
    pub ari: f64,
    pub asw: f64,
    pub asw_rescaled: f64,
    pub avg_bio: f64,
    pub best_resolution: f64,
    pub n_clusters: usize,
    /// NMI at each swept resolution.
    pub nmi_by_resolution: Vec<(f64, f64)>,
    pub partition: Vec<usize>,
}

impl ClusterReport {
    pub fn to_report(&self) -> MetricsReport {
        let mut r = MetricsReport::default();
        r.set("NMI_cell", self.nmi);
        r.set("ARI_cell", self.ari);
        r.set("ASW_cell", self.asw);
        r.set("ASW_cell_rescaled", self.asw_rescaled);
        r.set("AvgBIO", self.avg_bio);
        r.set("best_resolution", self.best_resolution);
        r.set("n_clusters", self.n_clusters as f64);
        r
    }
}

/// kNN graph, Louvain sweep, NMI-optimal partition, ARI on that partition,
/// ASW on the embeddings, and their mean.
pub fn cluster_report(emb: &[Vec<f64>], labels: &[usize], k: usize, seed: u64) -> Result<ClusterReport, MetricsError> {
    aligned(labels, &vec![0; emb.len()])?;
    let graph = knn_graph(emb, k)?;
    let sweep: Vec<(f64, Vec<usize>, f64)> = resolutions()
        .into_par_iter()
        .map(|gamma| {
            let p = louvain(&graph, gamma, seed);
            let score = nmi(labels, &p)?;
            Ok((gamma, p, score))
        })
        .collect::<Result<_, MetricsError>>()?;
    let best = sweep
        .iter()
        .fold(&sweep[0], |best, cur| if cur.2 > best.2 { cur } else { best });
    let nmi_cell = best.2;
    let ari_cell = ari(labels, &best.1)?;
    let asw_cell = asw(emb, labels)?;
    Ok(ClusterReport {
        nmi: nmi_cell,
        ari: ari_cell,
        asw: asw_cell,
        asw_rescaled: (asw_cell + 1.0) / 2.0,
        avg_bio: avg_bio(nmi_cell, ari_cell, asw_cell),
        best_resolution: best.0,
        n_clusters: best.1.iter().max().map_or(0, |&c| c + 1),
        nmi_by_resolution: sweep.iter().map(|s| (s.0, s.2)).collect(),
        partition: best.1.clone(),
    })
}
