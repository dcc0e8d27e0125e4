//! Cosine retrieval: exact top-k, the k-NN similarity graph, Louvain
//! communities over it, and the centroid-routed index built from them.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentSource, LatentVector};

/// Minimum modularity gain for a Louvain node move.
pub const LOUVAIN_MIN_GAIN: f64 = 1e-9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::VectorDimension(a.len(), b.len()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine with a precomputed query norm; zero-norm candidates score 0.
fn scored(query: &[f64], query_norm: f64, candidate: &[f64]) -> f64 {
    let n = l2_norm(candidate);
    if n == 0.0 {
        0.0
    } else {
        (dot(query, candidate) / (query_norm * n)).clamp(-1.0, 1.0)
    }
}

/// One retrieved latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub source: LatentSource,
    pub score: f64,
}

/// Score descending, then provenance ascending.
fn rank_order(a: &(f64, &LatentSource), b: &(f64, &LatentSource)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn top_k_of<'a>(query: &[f64], candidates: impl Iterator<Item = &'a LatentVector>, k: usize) -> Result<Vec<Hit>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let qn = l2_norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mut all = Vec::new();
    for lv in candidates {
        if lv.values.len() != query.len() {
            return Err(Error::VectorDimension(query.len(), lv.values.len()));
        }
        all.push((scored(query, qn, &lv.values), &lv.source));
    }
    if all.len() > k {
        all.select_nth_unstable_by(k - 1, rank_order);
        all.truncate(k);
    }
    all.sort_by(rank_order);
    Ok(all
        .into_iter()
        .map(|(score, source)| Hit {
            source: source.clone(),
            score,
        })
        .collect())
}

/// The `min(k, |corpus|)` most cosine-similar latents, best first.
pub fn exact_top_k(query: &[f64], corpus: &[LatentVector], k: usize) -> Result<Vec<Hit>> {
    top_k_of(query, corpus.iter(), k)
}

/// Undirected weighted similarity graph without self-loops. Each edge is
/// stored once with `u < v`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    node_count: usize,
    edges: Vec<(usize, usize, f64)>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl KnnGraph {
    /// Builds a graph from an explicit edge list.
    pub fn from_edges(node_count: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut list = Vec::new();
        for (u, v, w) in edges {
            if u == v {
                return Err(Error::InvalidConfig(format!("self-loop on node {u}")));
            }
            if u >= node_count || v >= node_count {
                return Err(Error::InvalidConfig(format!("edge ({u}, {v}) out of range")));
            }
            if !(-1.0..=1.0).contains(&w) {
                return Err(Error::InvalidConfig(format!("edge weight {w} outside [-1, 1]")));
            }
            let key = (u.min(v), u.max(v));
            if !seen.insert(key) {
                return Err(Error::InvalidConfig(format!("duplicate edge {key:?}")));
            }
            list.push((key.0, key.1, w));
        }
        list.sort_by_key(|&(u, v, _)| (u, v));
        let mut adjacency = vec![Vec::new(); node_count];
        for &(u, v, w) in &list {
            adjacency[u].push((v, w));
            adjacency[v].push((u, w));
        }
        Ok(Self {
            node_count,
            edges: list,
            adjacency,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adjacency[node]
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.2).sum()
    }
}

/// The `k` most similar other nodes of every node, by similarity then
/// index. Zero vectors have similarity 0 to everything.
pub fn nearest_neighbors<V: AsRef<[f64]>>(vectors: &[V], k: usize) -> Vec<Vec<(usize, f64)>> {
    let norms: Vec<f64> = vectors.iter().map(|v| l2_norm(v.as_ref())).collect();
    let n = vectors.len();
    let sim = |i: usize, j: usize| {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            (dot(vectors[i].as_ref(), vectors[j].as_ref()) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
        }
    };
    (0..n)
        .map(|i| {
            let mut others: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, sim(i, j))).collect();
            others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            others.truncate(k);
            others
        })
        .collect()
}

/// Links each vector to its `k_graph` nearest neighbors and symmetrizes.
/// Edge weights are `max(0, cosine)`.
pub fn build_knn_graph<V: AsRef<[f64]>>(vectors: &[V], k_graph: usize) -> Result<KnnGraph> {
    if vectors.len() < 2 {
        return Err(Error::TooFewNodes(vectors.len()));
    }
    if k_graph == 0 {
        return Err(Error::InvalidConfig("k_graph must be at least 1".into()));
    }
    let dim = vectors[0].as_ref().len();
    if let Some(v) = vectors.iter().find(|v| v.as_ref().len() != dim) {
        return Err(Error::VectorDimension(dim, v.as_ref().len()));
    }
    let mut edges = std::collections::BTreeMap::new();
    for (i, nbrs) in nearest_neighbors(vectors, k_graph).into_iter().enumerate() {
        for (j, s) in nbrs {
            edges.entry((i.min(j), i.max(j))).or_insert(s.max(0.0));
        }
    }
    KnnGraph::from_edges(vectors.len(), edges.into_iter().map(|((u, v), w)| (u, v, w)))
}

/// Community label per node, dense from 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
}

impl Partition {
    /// Relabels arbitrary labels densely in order of first appearance.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Self { assignment }
    }

    pub fn single(node_count: usize) -> Self {
        Self {
            assignment: vec![0; node_count],
        }
    }

    pub fn singletons(node_count: usize) -> Self {
        Self {
            assignment: (0..node_count).collect(),
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn community_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    pub fn node_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn community_count(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }
}

/// Newman–Girvan modularity of a weighted partition:
/// `Q = Σ_c [Σin_c/(2m) − (Σtot_c/(2m))²]`.
pub fn modularity(graph: &KnnGraph, partition: &Partition) -> Result<f64> {
    if partition.node_count() != graph.node_count() {
        return Err(Error::PartitionMismatch(format!(
            "{} labels for {} nodes",
            partition.node_count(),
            graph.node_count()
        )));
    }
    let m = graph.total_weight();
    if !(m > 0.0) {
        return Err(Error::EmptyGraph);
    }
    let c = partition.community_count();
    let mut inside = vec![0.0; c];
    let mut total = vec![0.0; c];
    for &(u, v, w) in graph.edges() {
        let (cu, cv) = (partition.community_of(u), partition.community_of(v));
        if cu == cv {
            inside[cu] += 2.0 * w;
        }
        total[cu] += w;
        total[cv] += w;
    }
    let two_m = 2.0 * m;
    Ok(inside
        .iter()
        .zip(&total)
        .map(|(i, t)| i / two_m - (t / two_m).powi(2))
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LouvainResult {
    pub partition: Partition,
    /// Modularity of the returned partition, recomputed on the input graph.
    pub modularity: f64,
    /// Modularity after each aggregation level.
    pub history: Vec<f64>,
}

/// Working graph for one Louvain level. `adj` excludes self-loops;
/// `degree` includes them.
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
    self_loop: Vec<f64>,
}

impl Level {
    fn from_graph(graph: &KnnGraph) -> Self {
        let n = graph.node_count();
        let adj: Vec<Vec<(usize, f64)>> = (0..n).map(|u| graph.neighbors(u).to_vec()).collect();
        let degree = adj.iter().map(|nb| nb.iter().map(|e| e.1).sum()).collect();
        Self {
            adj,
            degree,
            self_loop: vec![0.0; n],
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    /// Greedy local moves until a full pass changes nothing. Returns the
    /// per-node community and whether anything moved.
    fn local_moves(&self, two_m: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
        let n = self.len();
        let mut community: Vec<usize> = (0..n).collect();
        let mut tot = self.degree.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);

        let mut link = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut moved_any = false;
        loop {
            let mut moved = false;
            for &node in &order {
                let own = community[node];
                let k = self.degree[node];
                touched.clear();
                for &(nb, w) in &self.adj[node] {
                    let c = community[nb];
                    if link[c] == 0.0 && !touched.contains(&c) {
                        touched.push(c);
                    }
                    link[c] += w;
                }
                tot[own] -= k;
                let gain = |c: usize, link_c: f64| link_c - tot[c] * k / two_m;
                let own_gain = gain(own, link[own]);
                let mut best = own;
                let mut best_gain = own_gain;
                for &c in &touched {
                    let g = gain(c, link[c]);
                    if g > best_gain {
                        best = c;
                        best_gain = g;
                    }
                }
                // gains are in units of m·ΔQ
                if best != own && (best_gain - own_gain) / (two_m / 2.0) > LOUVAIN_MIN_GAIN {
                    community[node] = best;
                    moved = true;
                } else {
                    best = own;
                }
                tot[best] += k;
                for &c in &touched {
                    link[c] = 0.0;
                }
                link[own] = 0.0;
            }
            if !moved {
                break;
            }
            moved_any = true;
        }
        (community, moved_any)
    }

    /// Collapses communities (dense labels) into single nodes.
    fn aggregate(&self, community: &[usize], count: usize) -> Self {
        let mut weights: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); count];
        let mut self_loop = vec![0.0; count];
        let mut degree = vec![0.0; count];
        for u in 0..self.len() {
            let cu = community[u];
            degree[cu] += self.degree[u];
            self_loop[cu] += self.self_loop[u];
            for &(v, w) in &self.adj[u] {
                let cv = community[v];
                if cu == cv {
                    // each internal edge is seen from both ends: 2·w in total
                    self_loop[cu] += w;
                } else {
                    *weights[cu].entry(cv).or_default() += w;
                }
            }
        }
        Self {
            adj: weights.into_iter().map(|m| m.into_iter().collect()).collect(),
            degree,
            self_loop,
        }
    }
}

/// Two-phase Louvain. Visit order at each level is shuffled by a ChaCha
/// stream seeded with `seed`, so results are deterministic per seed.
pub fn louvain(graph: &KnnGraph, seed: u64) -> Result<LouvainResult> {
    if graph.node_count() == 0 {
        return Err(Error::EmptyGraph);
    }
    let m = graph.total_weight();
    if !(m > 0.0) {
        return Err(Error::EmptyGraph);
    }
    let two_m = 2.0 * m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = Level::from_graph(graph);
    let mut membership: Vec<usize> = (0..graph.node_count()).collect();
    let mut history = vec![modularity(graph, &Partition::singletons(graph.node_count()))?];

    loop {
        let (community, moved) = level.local_moves(two_m, &mut rng);
        if !moved {
            break;
        }
        let dense = Partition::from_labels(&community);
        let count = dense.community_count();
        for m in membership.iter_mut() {
            *m = dense.community_of(*m);
        }
        history.push(modularity(graph, &Partition::from_labels(&membership))?);
        if count == level.len() {
            break;
        }
        level = level.aggregate(dense.assignment(), count);
    }

    let partition = Partition::from_labels(&membership);
    let q = modularity(graph, &partition)?;
    Ok(LouvainResult {
        partition,
        modularity: q,
        history,
    })
}

/// A community's members and its unit-norm centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Community {
    pub centroid: Vec<f64>,
    /// The member mean was the zero vector; the centroid is left at zero
    /// and the community ranks last when probing.
    pub degenerate: bool,
    pub members: Vec<LatentVector>,
}

/// Community-partitioned latents with centroid routing.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub dim: usize,
    pub communities: Vec<Community>,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.communities.iter().map(|c| c.members.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn community_count(&self) -> usize {
        self.communities.len()
    }

    pub fn members(&self) -> impl Iterator<Item = &LatentVector> {
        self.communities.iter().flat_map(|c| c.members.iter())
    }
}

pub fn build_centroid_index(latents: Vec<LatentVector>, partition: &Partition) -> Result<VectorIndex> {
    if partition.node_count() != latents.len() {
        return Err(Error::PartitionMismatch(format!(
            "{} labels for {} latents",
            partition.node_count(),
            latents.len()
        )));
    }
    let dim = latents.first().map_or(0, |l| l.values.len());
    if let Some(l) = latents.iter().find(|l| l.values.len() != dim) {
        return Err(Error::VectorDimension(dim, l.values.len()));
    }
    let mut groups: Vec<Vec<LatentVector>> = vec![Vec::new(); partition.community_count()];
    for (node, lv) in latents.into_iter().enumerate() {
        groups[partition.community_of(node)].push(lv);
    }
    let communities = groups
        .into_iter()
        .enumerate()
        .map(|(c, members)| {
            if members.is_empty() {
                return Err(Error::EmptyCommunity(c));
            }
            let mut mean = vec![0.0; dim];
            for m in &members {
                for (acc, v) in mean.iter_mut().zip(&m.values) {
                    *acc += v;
                }
            }
            let count = members.len() as f64;
            mean.iter_mut().for_each(|v| *v /= count);
            let norm = l2_norm(&mean);
            let degenerate = !(norm > 0.0);
            if !degenerate {
                mean.iter_mut().for_each(|v| *v /= norm);
            }
            Ok(Community {
                centroid: mean,
                degenerate,
                members,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VectorIndex { dim, communities })
}

/// Probes the `nprobe` communities whose centroids are most similar to the
/// query and runs exact top-k over their pooled members.
pub fn query_index(index: &VectorIndex, query: &[f64], k: usize, nprobe: usize) -> Result<Vec<Hit>> {
    let count = index.community_count();
    if nprobe == 0 || nprobe > count {
        return Err(Error::InvalidProbe {
            nprobe,
            communities: count,
        });
    }
    if query.len() != index.dim {
        return Err(Error::VectorDimension(index.dim, query.len()));
    }
    let qn = l2_norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mut ranked: Vec<(usize, f64)> = index
        .communities
        .iter()
        .enumerate()
        .map(|(c, com)| {
            let s = if com.degenerate {
                f64::NEG_INFINITY
            } else {
                scored(query, qn, &com.centroid)
            };
            (c, s)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let probed = ranked[..nprobe].iter().flat_map(|&(c, _)| index.communities[c].members.iter());
    top_k_of(query, probed, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Modality;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn latent(i: usize, values: Vec<f64>) -> LatentVector {
        LatentVector {
            source: LatentSource {
                slide_id: format!("s{:03}", i / 10),
                channel_index: 0,
                grid_row: i % 10,
                grid_col: 0,
            },
            values,
            modality: Modality::Mif,
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        let oracle = 1.0 / (2f64.sqrt() * 1.0);
        assert!((s - oracle).abs() < 1e-15);
        assert!((s - 0.70711).abs() < 1e-5);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(Error::VectorDimension(1, 2))));
    }

    #[test]
    fn cosine_symmetric_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let a = random_vec(&mut rng, 7);
            let b = random_vec(&mut rng, 7);
            let lambda: f64 = rng.random_range(1e-3..1e3);
            let scaled: Vec<f64> = a.iter().map(|v| v * lambda).collect();
            let s = cosine_similarity(&a, &b).unwrap();
            assert!((s - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
            assert!((s - cosine_similarity(&scaled, &b).unwrap()).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn top_k_self_retrieval_and_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus: Vec<_> = (0..20).map(|i| latent(i, random_vec(&mut rng, 5))).collect();
        let hits = exact_top_k(&corpus[7].values, &corpus, 1).unwrap();
        assert_eq!(hits[0].source, corpus[7].source);
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        let all = exact_top_k(&corpus[0].values, &corpus, 50).unwrap();
        assert_eq!(all.len(), 20);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(matches!(exact_top_k(&[0.0; 5], &corpus, 3), Err(Error::ZeroVector)));
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let corpus: Vec<_> = (0..100).map(|i| latent(i, random_vec(&mut rng, 6))).collect();
            let q = random_vec(&mut rng, 6);
            let mut oracle: Vec<(f64, LatentSource)> = corpus
                .iter()
                .map(|l| {
                    let s = dot(&q, &l.values) / (l2_norm(&q) * l2_norm(&l.values));
                    (s, l.source.clone())
                })
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let got: Vec<_> = exact_top_k(&q, &corpus, 5).unwrap().into_iter().map(|h| h.source).collect();
            let want: Vec<_> = oracle.into_iter().take(5).map(|o| o.1).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn ties_break_by_provenance() {
        let corpus: Vec<_> = (0..5).rev().map(|i| latent(i, vec![1.0, 0.0])).collect();
        let hits = exact_top_k(&[2.0, 0.0], &corpus, 3).unwrap();
        let rows: Vec<_> = hits.iter().map(|h| h.source.grid_row).collect();
        assert_eq!(rows, vec![0, 1, 2]);
    }

    #[test]
    fn two_node_graph() {
        let g = build_knn_graph(&[vec![1.0, 0.0], vec![0.5, 0.5]], 1).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert!(matches!(build_knn_graph(&[vec![1.0]], 1), Err(Error::TooFewNodes(1))));
    }

    fn opposite_clusters(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for sign in [1.0, -1.0] {
            for _ in 0..5 {
                out.push(vec![sign * 10.0 + rng.random_range(-0.5..0.5), sign * 10.0 + rng.random_range(-0.5..0.5)]);
            }
        }
        out
    }

    #[test]
    fn opposite_clusters_have_no_positive_cross_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = opposite_clusters(&mut rng);
        let g = build_knn_graph(&pts, 2).unwrap();
        for &(u, v, w) in g.edges() {
            if (u < 5) != (v < 5) {
                assert_eq!(w, 0.0);
            }
            assert!((0.0..=1.0).contains(&w));
            assert_ne!(u, v);
        }
    }

    #[test]
    fn neighbor_lists_match_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<_> = (0..25).map(|_| random_vec(&mut rng, 4)).collect();
        let k = 3;
        let g = build_knn_graph(&pts, k).unwrap();
        for i in 0..pts.len() {
            // oracle: full pairwise similarity row, sorted
            let mut row: Vec<(usize, f64)> = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| (j, cosine_similarity(&pts[i], &pts[j]).unwrap()))
                .collect();
            row.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for &(j, s) in &row[..k] {
                let w = g.neighbors(i).iter().find(|e| e.0 == j).expect("kNN edge present").1;
                assert!((w - s.max(0.0)).abs() < 1e-15);
            }
            // every edge at i comes from i's or the neighbor's own k-list
            for &(j, _) in g.neighbors(i) {
                let in_mine = row[..k].iter().any(|e| e.0 == j);
                let mut theirs: Vec<(usize, f64)> = (0..pts.len())
                    .filter(|&t| t != j)
                    .map(|t| (t, cosine_similarity(&pts[j], &pts[t]).unwrap()))
                    .collect();
                theirs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                assert!(in_mine || theirs[..k].iter().any(|e| e.0 == i));
            }
        }
    }

    /// Direct summation over node pairs: Q = 1/(2m) Σ_ij [A_ij − k_i k_j/(2m)] δ(c_i, c_j).
    fn modularity_oracle(n: usize, edges: &[(usize, usize, f64)], labels: &[usize]) -> f64 {
        let mut a = vec![vec![0.0; n]; n];
        for &(u, v, w) in edges {
            a[u][v] += w;
            a[v][u] += w;
        }
        let k: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let two_m: f64 = k.iter().sum();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == labels[j] {
                    q += a[i][j] - k[i] * k[j] / two_m;
                }
            }
        }
        q / two_m
    }

    fn clique_edges(offset: usize, size: usize) -> Vec<(usize, usize, f64)> {
        let mut e = Vec::new();
        for i in 0..size {
            for j in i + 1..size {
                e.push((offset + i, offset + j, 1.0));
            }
        }
        e
    }

    #[test]
    fn modularity_examples() {
        let mut edges = clique_edges(0, 4);
        edges.extend(clique_edges(4, 4));
        let g = KnnGraph::from_edges(8, edges.clone()).unwrap();
        assert!(modularity(&g, &Partition::single(8)).unwrap().abs() < 1e-15);
        let planted = Partition::from_labels(&[0, 0, 0, 0, 1, 1, 1, 1]);
        let q = modularity(&g, &planted).unwrap();
        assert!((q - 0.5).abs() < 1e-15);
        assert!((q - modularity_oracle(8, &edges, planted.assignment())).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = 12;
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(0.4) {
                        edges.push((i, j, rng.random_range(0.01..1.0)));
                    }
                }
            }
            if edges.is_empty() {
                continue;
            }
            let g = KnnGraph::from_edges(n, edges.clone()).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let p = Partition::from_labels(&labels);
            let q = modularity(&g, &p).unwrap();
            assert!((q - modularity_oracle(n, &edges, p.assignment())).abs() < 1e-12);
            assert!((-0.5..=1.0).contains(&q));
        }
        let empty = KnnGraph::from_edges(3, vec![]).unwrap();
        assert!(matches!(modularity(&empty, &Partition::single(3)), Err(Error::EmptyGraph)));
    }

    #[test]
    fn louvain_basics() {
        let mut edges = clique_edges(0, 4);
        edges.extend(clique_edges(4, 4));
        edges.push((3, 4, 0.1));
        let g = KnnGraph::from_edges(8, edges).unwrap();
        let r = louvain(&g, 7).unwrap();
        assert_eq!(r.partition.assignment(), &[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(r.modularity, modularity(&g, &r.partition).unwrap());
        assert!(r.history.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(louvain(&g, 7).unwrap(), r);

        let single = KnnGraph::from_edges(2, vec![(0, 1, 1.0)]).unwrap();
        let r = louvain(&single, 0).unwrap();
        assert_eq!(r.modularity, modularity(&single, &r.partition).unwrap());
        assert!(r.partition.community_count() <= 2);

        assert!(matches!(louvain(&KnnGraph::from_edges(0, vec![]).unwrap(), 0), Err(Error::EmptyGraph)));
    }

    #[test]
    fn centroids() {
        let v = vec![0.6, 0.8];
        let same: Vec<_> = (0..3).map(|i| latent(i, v.clone())).collect();
        let idx = build_centroid_index(same, &Partition::single(3)).unwrap();
        assert!(idx.communities[0].centroid.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-15));

        let pair = vec![latent(0, vec![1.0, 0.0]), latent(1, vec![0.0, 1.0])];
        let idx = build_centroid_index(pair, &Partition::single(2)).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!(idx.communities[0].centroid.iter().all(|c| (c - h).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lat: Vec<_> = (0..30).map(|i| latent(i, random_vec(&mut rng, 3))).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 4).collect();
        let idx = build_centroid_index(lat, &Partition::from_labels(&labels)).unwrap();
        assert_eq!(idx.len(), 30);
        for c in &idx.communities {
            assert!((l2_norm(&c.centroid) - 1.0).abs() < 1e-12);
        }

        let opposite = vec![latent(0, vec![1.0, 0.0]), latent(1, vec![-1.0, 0.0])];
        let idx = build_centroid_index(opposite, &Partition::single(2)).unwrap();
        assert!(idx.communities[0].degenerate);
    }

    #[test]
    fn probing_everything_equals_exact_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lat: Vec<_> = (0..120).map(|i| latent(i, random_vec(&mut rng, 5))).collect();
        let g = build_knn_graph(&lat.iter().map(|l| l.values.clone()).collect::<Vec<_>>(), 5).unwrap();
        let part = louvain(&g, 1).unwrap().partition;
        let idx = build_centroid_index(lat.clone(), &part).unwrap();
        let all = idx.community_count();
        for _ in 0..30 {
            let q = random_vec(&mut rng, 5);
            assert_eq!(query_index(&idx, &q, 5, all).unwrap(), exact_top_k(&q, &lat, 5).unwrap());
        }
        let hit = query_index(&idx, &lat[17].values, 1, 1).unwrap();
        let nearest = {
            let mut r: Vec<_> = idx
                .communities
                .iter()
                .enumerate()
                .map(|(c, com)| (c, cosine_similarity(&lat[17].values, &com.centroid).unwrap()))
                .collect();
            r.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            r[0].0
        };
        if idx.communities[nearest].members.iter().any(|m| m.source == lat[17].source) {
            assert_eq!(hit[0].source, lat[17].source);
            assert!((hit[0].score - 1.0).abs() < 1e-12);
        }
        assert!(matches!(query_index(&idx, &[1.0; 5], 5, 0), Err(Error::InvalidProbe { .. })));
        assert!(matches!(query_index(&idx, &[1.0; 5], 5, all + 1), Err(Error::InvalidProbe { .. })));
        assert!(matches!(query_index(&idx, &[0.0; 5], 5, 1), Err(Error::ZeroVector)));
    }
}
