//! Greedy weighted clique sampling and epoch batch assembly.
//!
//! A seed is the node with the highest mean affinity to all other nodes; the
//! clique then grows by repeatedly adding the outside node with the highest
//! mean affinity to the current members. Both argmax steps break ties by the
//! lowest node index.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::AffinityGraph;

fn check_weights(w: &[Vec<f64>]) -> Result<usize> {
    let n = w.len();
    for (i, r) in w.iter().enumerate() {
        if r.len() != n {
            return Err(Error::DimensionMismatch {
                what: format!("affinity row {i}"),
                expected: n,
                actual: r.len(),
            });
        }
        if r[i] != 0.0 {
            return Err(Error::invalid(format!("affinity diagonal at {i} is not zero")));
        }
    }
    Ok(n)
}

/// Mean affinity of each node to all others.
pub fn seed_scores(w: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = check_weights(w)?;
    if n < 2 {
        return Err(Error::invalid("seed scores need at least two nodes"));
    }
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| w[i][j]).sum::<f64>() / denom)
        .collect())
}

/// Index of the largest value, lowest index on ties. Panics on an empty slice.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn select_seed(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores to select a seed from"));
    }
    Ok(argmax_lowest(scores))
}

/// Greedy expansion from `seed` until `k` members; returns members in
/// selection order.
pub fn greedy_expand(w: &[Vec<f64>], seed: usize, k: usize) -> Result<Vec<usize>> {
    let n = check_weights(w)?;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("clique size {k} not in 1..={n}")));
    }
    if seed >= n {
        return Err(Error::invalid(format!("seed {seed} out of range for {n} nodes")));
    }
    expand(w, seed, k, |_, _| true).ok_or_else(|| Error::invalid("expansion found no candidate"))
}

/// Like [`greedy_expand`], but a candidate is eligible only if `allowed(u, v)`
/// holds for every current member `u`. Returns `None` when the clique cannot
/// reach `k` members.
pub fn greedy_expand_within<F>(w: &[Vec<f64>], seed: usize, k: usize, allowed: F) -> Option<Vec<usize>>
where
    F: Fn(usize, usize) -> bool,
{
    if k == 0 || k > w.len() || seed >= w.len() {
        return None;
    }
    expand(w, seed, k, allowed)
}

fn expand<F>(w: &[Vec<f64>], seed: usize, k: usize, allowed: F) -> Option<Vec<usize>>
where
    F: Fn(usize, usize) -> bool,
{
    let n = w.len();
    let mut members = Vec::with_capacity(k);
    let mut inside = vec![false; n];
    let mut sums = vec![0.0; n];
    members.push(seed);
    inside[seed] = true;
    for v in 0..n {
        sums[v] = w[seed][v];
    }
    while members.len() < k {
        let size = members.len() as f64;
        let mut best: Option<(usize, f64)> = None;
        for v in 0..n {
            if inside[v] || !members.iter().all(|&u| allowed(u, v)) {
                continue;
            }
            let score = sums[v] / size;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((v, score));
            }
        }
        let (v, _) = best?;
        members.push(v);
        inside[v] = true;
        for (x, s) in sums.iter_mut().enumerate() {
            *s += w[v][x];
        }
    }
    Some(members)
}

/// Mean pairwise affinity among `members`.
pub fn mean_internal_affinity(w: &[Vec<f64>], members: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            sum += w[i][j];
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledClique {
    /// Node indices into the source graph, in selection order.
    pub members: Vec<usize>,
    pub place_ids: Vec<String>,
    pub image_ids: Vec<String>,
    pub source: String,
    pub graph_index: usize,
    pub mean_internal_affinity: f64,
}

/// Draws one clique of `k` members from a graph whose members are pairwise
/// connected in the retained edge set.
///
/// Seeds are tried in descending score order; the first one whose constrained
/// expansion reaches `k` members wins. When the retained edge set is complete
/// this is exactly seed argmax followed by unconstrained expansion.
pub fn sample_clique(graph: &AffinityGraph, k: usize, source: &str, graph_index: usize) -> Result<Option<SampledClique>> {
    let scores = seed_scores(&graph.weights)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for seed in order {
        if let Some(members) = greedy_expand_within(&graph.weights, seed, k, |u, v| graph.has_edge(u, v)) {
            return Ok(Some(SampledClique {
                place_ids: members.iter().map(|&i| graph.nodes[i].place_id.clone()).collect(),
                image_ids: members.iter().map(|&i| graph.nodes[i].image_id.clone()).collect(),
                mean_internal_affinity: mean_internal_affinity(&graph.weights, &members),
                members,
                source: source.to_string(),
                graph_index,
            }));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub cliques: Vec<SampledClique>,
}

impl Batch {
    pub fn source_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for c in &self.cliques {
            *m.entry(c.source.clone()).or_default() += 1;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanWarning {
    SingleSource { source: String },
    Insufficient { requested: usize, produced: usize, exhausted: String },
    NoClique { source: String, graph_index: usize },
}

impl fmt::Display for PlanWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanWarning::SingleSource { source } => write!(f, "only source `{source}` contributes cliques"),
            PlanWarning::Insufficient {
                requested,
                produced,
                exhausted,
            } => write!(f, "produced {produced} of {requested} batches; source `{exhausted}` ran out of graphs"),
            PlanWarning::NoClique { source, graph_index } => {
                write!(f, "graph {graph_index} of source `{source}` has no retained clique of the requested size")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub epoch: u64,
    pub batches: Vec<Batch>,
    pub warnings: Vec<PlanWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchConfig {
    pub clique_size: usize,
    pub cliques_per_batch: usize,
    pub batches: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            clique_size: 4,
            cliques_per_batch: 4,
            batches: 4,
        }
    }
}

/// Assembles batches by alternating sources slot by slot, so every batch
/// holds an equal (plus or minus one) number of cliques from each source.
/// Each clique comes from a distinct graph; graph order per source is shuffled
/// with `rng`. Only complete batches are emitted.
pub fn assemble_epoch_batches<R: Rng + ?Sized>(
    epoch: u64,
    graphs: &BTreeMap<String, Vec<AffinityGraph>>,
    config: BatchConfig,
    rng: &mut R,
) -> Result<BatchPlan> {
    if config.clique_size == 0 || config.cliques_per_batch == 0 {
        return Err(Error::invalid("clique size and cliques per batch must be >= 1"));
    }
    let sources: Vec<(&String, &Vec<AffinityGraph>)> = graphs.iter().filter(|(_, g)| !g.is_empty()).collect();
    if sources.is_empty() {
        return Err(Error::invalid("no source has any graphs"));
    }
    let mut warnings = Vec::new();
    if sources.len() == 1 {
        warnings.push(PlanWarning::SingleSource {
            source: sources[0].0.clone(),
        });
    }
    let mut queues: Vec<(usize, Vec<usize>)> = sources
        .iter()
        .map(|(_, g)| {
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.shuffle(rng);
            (0, order)
        })
        .collect();

    let mut batches = Vec::new();
    let mut exhausted: Option<String> = None;
    'outer: for b in 0..config.batches {
        let mut cliques = Vec::with_capacity(config.cliques_per_batch);
        for slot in 0..config.cliques_per_batch {
            let s = (b * config.cliques_per_batch + slot) % sources.len();
            let (name, list) = sources[s];
            let (cursor, order) = &mut queues[s];
            let clique = loop {
                let Some(&gi) = order.get(*cursor) else {
                    exhausted = Some(name.clone());
                    break 'outer;
                };
                *cursor += 1;
                match sample_clique(&list[gi], config.clique_size, name, gi)? {
                    Some(c) => break c,
                    None => warnings.push(PlanWarning::NoClique {
                        source: name.clone(),
                        graph_index: gi,
                    }),
                }
            };
            cliques.push(clique);
        }
        batches.push(Batch { cliques });
    }
    if let Some(source) = exhausted {
        warnings.push(PlanWarning::Insufficient {
            requested: config.batches,
            produced: batches.len(),
            exhausted: source,
        });
    }
    Ok(BatchPlan { epoch, batches, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphNode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sym(n: usize, entries: &[((usize, usize), f64)]) -> Vec<Vec<f64>> {
        let mut w = vec![vec![0.0; n]; n];
        for &((i, j), v) in entries {
            w[i][j] = v;
            w[j][i] = v;
        }
        w
    }

    fn five_node() -> Vec<Vec<f64>> {
        sym(
            5,
            &[
                ((0, 1), -1.0),
                ((0, 2), -5.0),
                ((0, 3), -4.0),
                ((0, 4), -9.0),
                ((1, 2), -2.0),
                ((1, 3), -8.0),
                ((1, 4), -7.0),
                ((2, 3), -3.0),
                ((2, 4), -6.0),
                ((3, 4), -10.0),
            ],
        )
    }

    #[test]
    fn three_node_scores() {
        let w = sym(3, &[((0, 1), -2.0), ((0, 2), -4.0), ((1, 2), -6.0)]);
        let s = seed_scores(&w).unwrap();
        assert_eq!(s, vec![-3.0, -4.0, -5.0]);
        assert_eq!(select_seed(&s).unwrap(), 0);
        assert_eq!(seed_scores(&sym(3, &[])).unwrap(), vec![0.0; 3]);
        assert!(seed_scores(&sym(1, &[])).is_err());
    }

    #[test]
    fn seed_tie_breaks() {
        assert_eq!(select_seed(&[1.0, 1.0, 1.0]).unwrap(), 0);
        assert_eq!(select_seed(&[-2.0]).unwrap(), 0);
        assert!(select_seed(&[]).is_err());
    }

    #[test]
    fn five_node_example() {
        let w = five_node();
        let s = seed_scores(&w).unwrap();
        assert_eq!(s, vec![-4.75, -4.5, -4.0, -6.25, -8.0]);
        let seed = select_seed(&s).unwrap();
        assert_eq!(seed, 2);
        assert_eq!(greedy_expand(&w, seed, 4).unwrap(), vec![2, 1, 0, 3]);
        assert_eq!(greedy_expand(&w, seed, 1).unwrap(), vec![2]);
        assert_eq!(greedy_expand(&w, seed, 5).unwrap(), vec![2, 1, 0, 3, 4]);
        assert!(greedy_expand(&w, seed, 6).is_err());
    }

    #[test]
    fn constrained_expansion_skips_non_edges() {
        let w = five_node();
        // forbid 1 next to 2: expansion must pick 3 (mean -3) first
        let got = greedy_expand_within(&w, 2, 3, |u, v| !matches!((u.min(v), u.max(v)), (1, 2))).unwrap();
        assert_eq!(got, vec![2, 3, 0]);
        assert_eq!(greedy_expand_within(&w, 2, 2, |_, _| false), None);
    }

    fn graph_from(w: Vec<Vec<f64>>) -> AffinityGraph {
        let n = w.len();
        let nodes = (0..n)
            .map(|i| GraphNode {
                place_id: format!("p{i}"),
                image_id: format!("i{i}"),
            })
            .collect();
        let geo: Vec<Vec<f64>> = w.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        let vis = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect()).collect();
        AffinityGraph::from_distances(nodes, geo, vis, 0.0, n, false, 0).unwrap()
    }

    #[test]
    fn clique_from_complete_graph_matches_plain_expansion() {
        let g = graph_from(five_node());
        let c = sample_clique(&g, 4, "a", 0).unwrap().unwrap();
        assert_eq!(c.members, vec![2, 1, 0, 3]);
        assert_eq!(c.place_ids, vec!["p2", "p1", "p0", "p3"]);
        let expected = (-2.0 - 5.0 - 3.0 - 1.0 - 8.0 - 4.0) / 6.0;
        assert!((c.mean_internal_affinity - expected).abs() < 1e-12);
    }

    fn random_graphs(rng: &mut ChaCha8Rng, count: usize) -> Vec<AffinityGraph> {
        (0..count)
            .map(|_| {
                let n = 6;
                let mut w = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for j in (i + 1)..n {
                        w[i][j] = -rng.random_range(0.1..10.0);
                        w[j][i] = w[i][j];
                    }
                }
                graph_from(w)
            })
            .collect()
    }

    #[test]
    fn two_sources_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut graphs = BTreeMap::new();
        graphs.insert("gsv".to_string(), random_graphs(&mut rng, 10));
        graphs.insert("msls".to_string(), random_graphs(&mut rng, 10));
        let cfg = BatchConfig { batches: 8, ..BatchConfig::default() };
        let plan = assemble_epoch_batches(0, &graphs, cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(plan.batches.len(), 5);
        assert!(matches!(plan.warnings.last(), Some(PlanWarning::Insufficient { produced: 5, .. })));
        for b in &plan.batches {
            let counts = b.source_counts();
            assert_eq!(counts["gsv"], 2);
            assert_eq!(counts["msls"], 2);
        }
        let again = assemble_epoch_batches(0, &graphs, cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(plan, again);
    }

    #[test]
    fn odd_slots_differ_by_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut graphs = BTreeMap::new();
        graphs.insert("a".to_string(), random_graphs(&mut rng, 20));
        graphs.insert("b".to_string(), random_graphs(&mut rng, 20));
        let cfg = BatchConfig {
            clique_size: 3,
            cliques_per_batch: 3,
            batches: 4,
        };
        let plan = assemble_epoch_batches(1, &graphs, cfg, &mut rng).unwrap();
        assert_eq!(plan.batches.len(), 4);
        assert!(plan.warnings.is_empty());
        for b in &plan.batches {
            let c = b.source_counts();
            assert!(c["a"].abs_diff(c["b"]) <= 1);
        }
    }

    #[test]
    fn single_source_warns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut graphs = BTreeMap::new();
        graphs.insert("only".to_string(), random_graphs(&mut rng, 8));
        let plan = assemble_epoch_batches(
            0,
            &graphs,
            BatchConfig {
                batches: 2,
                ..BatchConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(plan.batches.len(), 2);
        assert!(plan.batches.iter().all(|b| b.source_counts()["only"] == 4));
        assert_eq!(plan.warnings, vec![PlanWarning::SingleSource { source: "only".into() }]);
        assert!(assemble_epoch_batches(0, &BTreeMap::new(), BatchConfig::default(), &mut rng).is_err());
    }
}
