//! Per-epoch geo-visual affinity graphs.
//!
//! One graph is built per attempt: draw a city with probability proportional
//! to its cluster count, pick an anchor place, draw `P` visually similar
//! places, connect places closer than `tau_geo`, extract a clique of at least
//! `min_clique` places, then weight every pair inside the clique by
//! `W_ij = -(d_geo * d_vis)` and keep the pairs above the per-graph quantile
//! threshold, capped to each node's strongest neighbours.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rand::Rng;

use crate::clique::{extract_clique, Adjacency};
use crate::descriptor::GlobalDescriptor;
use crate::error::{Error, Result};
use crate::geo::{geo_distance_unchecked, GeoPoint};
use crate::manifest::ManifestRow;
use crate::rng::Streams;

/// A place (cluster) and the images that depict it.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceRecord {
    pub place_id: String,
    pub city_id: String,
    pub cluster_label: i64,
    pub location: GeoPoint,
    pub image_ids: Vec<String>,
}

impl PlaceRecord {
    pub fn validate(&self) -> Result<()> {
        self.location.validate()?;
        if self.image_ids.is_empty() {
            return Err(Error::invalid(format!("place `{}` has no images", self.place_id)));
        }
        Ok(())
    }
}

/// Places grouped by city, in first-appearance order of the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub places: Vec<PlaceRecord>,
    /// `(city_id, indices into places)`
    pub cities: Vec<(String, Vec<usize>)>,
}

impl Dataset {
    /// Groups manifest rows into places keyed by `(city, cluster)`. A place is
    /// located at the mean position of its images.
    pub fn from_rows(rows: &[ManifestRow]) -> Result<Self> {
        let mut index: HashMap<(String, i64), usize> = HashMap::new();
        let mut places: Vec<PlaceRecord> = Vec::new();
        let mut sums: Vec<(f64, f64)> = Vec::new();
        for row in rows {
            let key = (row.city.clone(), row.cluster);
            let i = *index.entry(key).or_insert_with(|| {
                places.push(PlaceRecord {
                    place_id: format!("{}/{}", row.city, row.cluster),
                    city_id: row.city.clone(),
                    cluster_label: row.cluster,
                    location: GeoPoint { lat: 0.0, lon: 0.0 },
                    image_ids: Vec::new(),
                });
                sums.push((0.0, 0.0));
                places.len() - 1
            });
            places[i].image_ids.push(row.id.clone());
            sums[i].0 += row.lat;
            sums[i].1 += row.lon;
        }
        for (p, (lat, lon)) in places.iter_mut().zip(sums) {
            let n = p.image_ids.len() as f64;
            p.location = GeoPoint { lat: lat / n, lon: lon / n };
            p.validate()?;
        }
        let mut cities: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, p) in places.iter().enumerate() {
            match cities.iter_mut().find(|(c, _)| *c == p.city_id) {
                Some((_, v)) => v.push(i),
                None => cities.push((p.city_id.clone(), vec![i])),
            }
        }
        Ok(Self { places, cities })
    }
}

/// Image descriptors looked up by image id.
#[derive(Debug, Clone, Default)]
pub struct DescriptorTable {
    index: HashMap<String, usize>,
    descriptors: Vec<GlobalDescriptor>,
}

impl DescriptorTable {
    pub fn new(descriptors: Vec<GlobalDescriptor>) -> Result<Self> {
        let mut index = HashMap::with_capacity(descriptors.len());
        for (i, d) in descriptors.iter().enumerate() {
            if index.insert(d.image_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate descriptor for image `{}`", d.image_id)));
            }
        }
        Ok(Self { index, descriptors })
    }

    pub fn get(&self, image_id: &str) -> Option<&GlobalDescriptor> {
        self.index.get(image_id).map(|&i| &self.descriptors[i])
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    /// Geographic adjacency radius in meters (strict `<`).
    pub tau_geo: f64,
    /// Quantile of the off-diagonal weights used as the edge threshold; 0 keeps every pair.
    pub tau2_quantile: f64,
    pub similar_places: usize,
    pub min_clique: usize,
    pub temperature: f64,
    pub knn_cap: usize,
    pub graphs_per_epoch: usize,
    pub max_attempts: usize,
    /// Rescale d_geo and d_vis to [0, 1] within each graph before weighting.
    pub rescale_distances: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            tau_geo: 75.0,
            tau2_quantile: 0.5,
            similar_places: 15,
            min_clique: 10,
            temperature: 0.25,
            knn_cap: 10,
            graphs_per_epoch: 16,
            max_attempts: 400,
            rescale_distances: false,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.tau_geo.is_finite() && self.tau_geo > 0.0) {
            return bad("tau_geo must be > 0");
        }
        if !(0.0..=1.0).contains(&self.tau2_quantile) {
            return bad("tau2_quantile must lie in [0, 1]");
        }
        if self.similar_places < 1 {
            return bad("similar_places must be >= 1");
        }
        if self.min_clique < 2 {
            return bad("min_clique must be >= 2");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if self.knn_cap < 1 {
            return bad("knn_cap must be >= 1");
        }
        if self.graphs_per_epoch < 1 || self.max_attempts < 1 {
            return bad("graphs_per_epoch and max_attempts must be >= 1");
        }
        Ok(())
    }
}

/// Draws a city index with probability proportional to its cluster count.
pub fn sample_city<R: Rng + ?Sized>(cluster_counts: &[usize], rng: &mut R) -> Result<usize> {
    let total: usize = cluster_counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no city has any clusters"));
    }
    let mut ticket = rng.random_range(0..total);
    for (i, &c) in cluster_counts.iter().enumerate() {
        if ticket < c {
            return Ok(i);
        }
        ticket -= c;
    }
    unreachable!("ticket below total")
}

/// Per-epoch representative image of one place.
#[derive(Debug, Clone, PartialEq)]
pub struct Representative {
    pub place: usize,
    pub place_id: String,
    pub image_id: String,
    pub location: GeoPoint,
    pub descriptor: GlobalDescriptor,
}

/// Picks one image per place uniformly among its images.
pub fn pick_representatives<R: Rng + ?Sized>(
    dataset: &Dataset,
    places: &[usize],
    table: &DescriptorTable,
    rng: &mut R,
) -> Result<Vec<Representative>> {
    places
        .iter()
        .map(|&pi| {
            let place = &dataset.places[pi];
            let image_id = &place.image_ids[rng.random_range(0..place.image_ids.len())];
            let descriptor = table.get(image_id).ok_or_else(|| {
                Error::invalid(format!("place `{}`: image `{image_id}` has no stored descriptor", place.place_id))
            })?;
            Ok(Representative {
                place: pi,
                place_id: place.place_id.clone(),
                image_id: image_id.clone(),
                location: place.location,
                descriptor: descriptor.clone(),
            })
        })
        .collect()
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws `count` distinct pool indices without replacement, weighting each
/// candidate by `exp(-d_cos(anchor, j) / temperature)`. Pool members sharing
/// the anchor's place are never drawn.
pub fn sample_similar_places<R: Rng + ?Sized>(
    anchor: &Representative,
    pool: &[Representative],
    count: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = (0..pool.len()).filter(|&j| pool[j].place != anchor.place).collect();
    if candidates.len() < count {
        return Err(Error::invalid(format!(
            "similar-place pool has {} candidates, need {count}",
            candidates.len()
        )));
    }
    let dists: Vec<f64> = candidates
        .iter()
        .map(|&j| cosine_distance(&anchor.descriptor.vector, &pool[j].descriptor.vector))
        .collect();
    let d_min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let mut weights: Vec<f64> = dists.iter().map(|d| (-(d - d_min) / temperature).exp()).collect();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < w {
                break;
            }
            u -= w;
        }
        let i = pick.expect("positive weight remains");
        chosen.push(candidates[i]);
        weights[i] = 0.0;
    }
    Ok(chosen)
}

pub fn geo_distance_matrix(points: &[GeoPoint]) -> Result<Vec<Vec<f64>>> {
    for p in points {
        p.validate()?;
    }
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = geo_distance_unchecked(points[i], points[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

/// Relative band below `tau` treated as "at the threshold", so that grid
/// points placed exactly `tau` apart stay unconnected despite round-off in
/// the lat/lon projection.
pub const TAU_BOUNDARY_REL: f64 = 1e-9;

/// Connects every pair strictly closer than `tau`.
pub fn build_geo_adjacency(distances: &[Vec<f64>], tau: f64) -> Result<Adjacency> {
    let n = distances.len();
    if n < 2 {
        return Err(Error::invalid("geographic adjacency needs at least two nodes"));
    }
    check_square(distances, "distance matrix")?;
    let limit = tau * (1.0 - TAU_BOUNDARY_REL);
    let mut adj = Adjacency::empty(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if distances[i][j] < limit {
                adj.add_edge(i, j)?;
            }
        }
    }
    Ok(adj)
}

fn check_square(m: &[Vec<f64>], what: &str) -> Result<()> {
    let n = m.len();
    for (i, r) in m.iter().enumerate() {
        if r.len() != n {
            return Err(Error::DimensionMismatch {
                what: format!("{what} row {i}"),
                expected: n,
                actual: r.len(),
            });
        }
        for (j, &v) in r.iter().enumerate() {
            if !v.is_finite() || v != m[j][i] {
                return Err(Error::invalid(format!("{what} is not finite and symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub place_id: String,
    pub image_id: String,
}

/// Weighted graph over one clique of places.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub epoch: u64,
    pub nodes: Vec<GraphNode>,
    pub geo: Vec<Vec<f64>>,
    pub vis: Vec<Vec<f64>>,
    /// `W_ij = -(d_geo * d_vis)`, zero diagonal.
    pub weights: Vec<Vec<f64>>,
    pub tau2: f64,
    /// Retained pairs `(i, j)` with `i < j`.
    pub edges: BTreeSet<(usize, usize)>,
}

impl AffinityGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn retained_adjacency(&self) -> Adjacency {
        let mut a = Adjacency::empty(self.nodes.len());
        for &(i, j) in &self.edges {
            a.add_edge(i, j).expect("edges are in range");
        }
        a
    }

    pub fn mean_weight(&self) -> f64 {
        let n = self.nodes.len();
        let pairs = (n * (n - 1) / 2).max(1) as f64;
        (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| self.weights[i][j]).sum::<f64>() / pairs
    }

    /// Retained edges as sorted place-id pairs.
    pub fn edge_keys(&self) -> BTreeSet<(String, String)> {
        self.edges
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (&self.nodes[i].place_id, &self.nodes[j].place_id);
                if a <= b {
                    (a.clone(), b.clone())
                } else {
                    (b.clone(), a.clone())
                }
            })
            .collect()
    }

    /// Builds the graph from precomputed symmetric distance matrices.
    pub fn from_distances(
        nodes: Vec<GraphNode>,
        geo: Vec<Vec<f64>>,
        vis: Vec<Vec<f64>>,
        tau2_quantile: f64,
        knn_cap: usize,
        rescale: bool,
        epoch: u64,
    ) -> Result<Self> {
        let n = nodes.len();
        if n < 2 {
            return Err(Error::invalid("affinity graph needs at least two nodes"));
        }
        if geo.len() != n || vis.len() != n {
            return Err(Error::DimensionMismatch {
                what: "distance matrices".into(),
                expected: n,
                actual: geo.len().min(vis.len()),
            });
        }
        check_square(&geo, "geographic distances")?;
        check_square(&vis, "visual distances")?;
        if !(0.0..=1.0).contains(&tau2_quantile) {
            return Err(Error::invalid("tau2_quantile must lie in [0, 1]"));
        }
        if knn_cap < 1 {
            return Err(Error::invalid("knn_cap must be >= 1"));
        }
        let (gs, vs) = if rescale { (max_off_diagonal(&geo), max_off_diagonal(&vis)) } else { (1.0, 1.0) };
        let mut weights = vec![vec![0.0; n]; n];
        let mut off = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                let w = -((geo[i][j] / gs) * (vis[i][j] / vs));
                // keep a true zero rather than -0.0
                let w = if w == 0.0 { 0.0 } else { w };
                weights[i][j] = w;
                weights[j][i] = w;
                off.push(w);
            }
        }
        let tau2 = if tau2_quantile == 0.0 { f64::NEG_INFINITY } else { quantile(&mut off, tau2_quantile) };

        let candidate = |i: usize, j: usize| i != j && weights[i][j] > tau2;
        let mut top: Vec<BTreeSet<usize>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut nbrs: Vec<usize> = (0..n).filter(|&j| candidate(i, j)).collect();
            nbrs.sort_by(|&a, &b| weights[i][b].total_cmp(&weights[i][a]).then(a.cmp(&b)));
            nbrs.truncate(knn_cap);
            top.push(nbrs.into_iter().collect());
        }
        let mut edges = BTreeSet::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if candidate(i, j) && (top[i].contains(&j) || top[j].contains(&i)) {
                    edges.insert((i, j));
                }
            }
        }
        Ok(Self {
            epoch,
            nodes,
            geo,
            vis,
            weights,
            tau2,
            edges,
        })
    }
}

fn max_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let mx = m.iter().flatten().copied().fold(0.0, f64::max);
    if mx > 0.0 {
        mx
    } else {
        1.0
    }
}

/// Linearly interpolated quantile (sorts `values` in place).
fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Affinity graph over representatives (typically one extracted clique).
pub fn affinity_graph(members: &[&Representative], config: &GraphConfig, epoch: u64) -> Result<AffinityGraph> {
    if members.len() < 2 {
        return Err(Error::invalid("affinity graph needs at least two nodes"));
    }
    let points: Vec<GeoPoint> = members.iter().map(|r| r.location).collect();
    let geo = geo_distance_matrix(&points)?;
    let n = members.len();
    let mut vis = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&members[i].descriptor.vector, &members[j].descriptor.vector);
            vis[i][j] = d;
            vis[j][i] = d;
        }
    }
    let nodes = members
        .iter()
        .map(|r| GraphNode {
            place_id: r.place_id.clone(),
            image_id: r.image_id.clone(),
        })
        .collect();
    AffinityGraph::from_distances(nodes, geo, vis, config.tau2_quantile, config.knn_cap, config.rescale_distances, epoch)
}

/// Graphs of one epoch plus attempt bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochGraphs {
    pub epoch: u64,
    pub graphs: Vec<AffinityGraph>,
    pub attempts: usize,
    /// failure counts keyed by stage name
    pub failures: BTreeMap<&'static str, usize>,
}

impl EpochGraphs {
    pub fn edge_keys(&self) -> BTreeSet<(String, String)> {
        self.graphs.iter().flat_map(AffinityGraph::edge_keys).collect()
    }

    /// Retained edges tagged with the index of their graph.
    pub fn indexed_edge_keys(&self) -> BTreeSet<(usize, String, String)> {
        self.graphs
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| g.edge_keys().into_iter().map(move |(a, b)| (gi, a, b)))
            .collect()
    }
}

pub const STAGE_SIMILAR: &str = "similar-place sampling";
pub const STAGE_CLIQUE: &str = "clique extraction";

/// Rebuilds the graphs of one epoch.
///
/// `epoch` labels the output; `stream_epoch` selects the random substreams.
/// Passing the same `stream_epoch` for every epoch replays identical random
/// choices so that only the embeddings differ between epochs.
pub fn rebuild_epoch(
    dataset: &Dataset,
    table: &DescriptorTable,
    config: &GraphConfig,
    streams: &Streams,
    epoch: u64,
    stream_epoch: u64,
) -> Result<EpochGraphs> {
    config.validate()?;
    if dataset.cities.is_empty() {
        return Err(Error::invalid("dataset has no cities"));
    }
    let reps: Vec<Vec<Representative>> = dataset
        .cities
        .iter()
        .enumerate()
        .map(|(ci, (_, places))| {
            let mut rng = streams.stream("representatives", stream_epoch, ci as u64);
            pick_representatives(dataset, places, table, &mut rng)
        })
        .collect::<Result<_>>()?;
    let counts: Vec<usize> = dataset.cities.iter().map(|(_, p)| p.len()).collect();

    let mut graphs = Vec::new();
    let mut failures: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut attempts = 0;
    while graphs.len() < config.graphs_per_epoch && attempts < config.max_attempts {
        let mut rng = streams.stream("graph", stream_epoch, attempts as u64);
        attempts += 1;
        let city = sample_city(&counts, &mut rng)?;
        let pool = &reps[city];
        if pool.len() < config.similar_places + 1 {
            *failures.entry(STAGE_SIMILAR).or_default() += 1;
            continue;
        }
        let anchor = rng.random_range(0..pool.len());
        let similar = sample_similar_places(&pool[anchor], pool, config.similar_places, config.temperature, &mut rng)?;
        let mut members: Vec<&Representative> = Vec::with_capacity(similar.len() + 1);
        members.push(&pool[anchor]);
        members.extend(similar.iter().map(|&j| &pool[j]));

        let points: Vec<GeoPoint> = members.iter().map(|r| r.location).collect();
        let adjacency = build_geo_adjacency(&geo_distance_matrix(&points)?, config.tau_geo)?;
        let Some(clique) = extract_clique(&adjacency, config.min_clique, &mut rng) else {
            *failures.entry(STAGE_CLIQUE).or_default() += 1;
            continue;
        };
        let clique_members: Vec<&Representative> = clique.iter().map(|&i| members[i]).collect();
        graphs.push(affinity_graph(&clique_members, config, epoch)?);
    }
    if graphs.is_empty() {
        let (stage, count) = failures
            .iter()
            .max_by_key(|(_, &c)| c)
            .map(|(&s, &c)| (s, c))
            .unwrap_or((STAGE_CLIQUE, 0));
        return Err(Error::GraphBudgetExhausted {
            attempts,
            stage,
            failures: count,
        });
    }
    Ok(EpochGraphs {
        epoch,
        graphs,
        attempts,
        failures,
    })
}

pub const GRAPH_DUMP_HEADER: &str = "epoch,node_i,node_j,d_geo,d_vis,W";

/// Writes retained edges of every graph as `epoch,node_i,node_j,d_geo,d_vis,W`.
pub fn write_graph_dump<W: Write>(graphs: &[AffinityGraph], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{GRAPH_DUMP_HEADER}")?;
    for g in graphs {
        for &(i, j) in &g.edges {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                g.epoch, g.nodes[i].place_id, g.nodes[j].place_id, g.geo[i][j], g.vis[i][j], g.weights[i][j]
            )?;
        }
    }
    Ok(())
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rep(place: usize, v: Vec<f64>) -> Representative {
        Representative {
            place,
            place_id: format!("p{place}"),
            image_id: format!("i{place}"),
            location: GeoPoint { lat: 0.0, lon: 0.0 },
            descriptor: GlobalDescriptor::unit(format!("i{place}"), v).unwrap(),
        }
    }

    #[test]
    fn city_frequencies_follow_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_city(&[3, 1], &mut rng).unwrap() == 0).count();
        assert!((hits as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn degenerate_city_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_city(&[4], &mut rng).unwrap(), 0);
        for _ in 0..1000 {
            assert_eq!(sample_city(&[0, 5], &mut rng).unwrap(), 1);
        }
        assert!(sample_city(&[], &mut rng).is_err());
        assert!(sample_city(&[0, 0], &mut rng).is_err());
    }

    #[test]
    fn similar_place_softmax_probability() {
        let anchor = rep(0, vec![1.0, 0.0]);
        let pool = vec![anchor.clone(), rep(1, vec![1.0, 0.0]), rep(2, vec![-1.0, 0.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let near = (0..n)
            .filter(|_| sample_similar_places(&anchor, &pool, 1, 0.25, &mut rng).unwrap() == vec![1])
            .count();
        let expected = 1.0 / (1.0 + (-8.0f64).exp());
        assert!((expected - 0.99966).abs() < 1e-5);
        assert!((near as f64 / n as f64 - expected).abs() < 3e-4);
    }

    #[test]
    fn similar_places_exhaust_and_reject() {
        let anchor = rep(0, vec![1.0, 0.0]);
        let pool: Vec<_> = std::iter::once(anchor.clone())
            .chain((1..5).map(|i| rep(i, vec![1.0, i as f64])))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut got = sample_similar_places(&anchor, &pool, 4, 0.25, &mut rng).unwrap();
        got.sort();
        assert_eq!(got, vec![1, 2, 3, 4]);
        assert!(sample_similar_places(&anchor, &pool, 5, 0.25, &mut rng).is_err());
    }

    #[test]
    fn equidistant_candidates_are_uniform() {
        let anchor = rep(0, vec![1.0, 0.0, 0.0, 0.0]);
        let pool = vec![
            anchor.clone(),
            rep(1, vec![0.0, 1.0, 0.0, 0.0]),
            rep(2, vec![0.0, 0.0, 1.0, 0.0]),
            rep(3, vec![0.0, 0.0, 0.0, 1.0]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hist = [0usize; 4];
        for _ in 0..30_000 {
            hist[sample_similar_places(&anchor, &pool, 1, 0.25, &mut rng).unwrap()[0]] += 1;
        }
        for &h in &hist[1..] {
            assert!((h as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.015);
        }
    }

    #[test]
    fn representatives_are_uniform() {
        let rows: Vec<ManifestRow> = (0..4)
            .map(|i| ManifestRow::simple(&format!("img{i}"), "c", 0, 10.0, 10.0))
            .chain(std::iter::once(ManifestRow::simple("solo", "c", 1, 10.0, 10.001)))
            .collect();
        let ds = Dataset::from_rows(&rows).unwrap();
        let table = DescriptorTable::new(
            rows.iter()
                .map(|r| GlobalDescriptor::unit(r.id.clone(), vec![1.0, 0.0]).unwrap())
                .collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for _ in 0..20_000 {
            let reps = pick_representatives(&ds, &[0, 1], &table, &mut rng).unwrap();
            assert_eq!(reps.len(), 2);
            assert_eq!(reps[1].image_id, "solo");
            *counts.entry(reps[0].image_id.clone()).or_default() += 1;
        }
        for i in 0..4 {
            assert!((counts[&format!("img{i}")] as f64 / 20_000.0 - 0.25).abs() < 0.015);
        }
        let empty = DescriptorTable::default();
        let err = pick_representatives(&ds, &[1], &empty, &mut rng).unwrap_err();
        assert!(err.to_string().contains("c/1"));
    }

    #[test]
    fn planar_adjacency() {
        let pos = [(0.0, 0.0), (0.0, 50.0), (0.0, 200.0)];
        let d: Vec<Vec<f64>> = pos
            .iter()
            .map(|a: &(f64, f64)| pos.iter().map(|b| (a.0 - b.0).hypot(a.1 - b.1)).collect())
            .collect();
        assert_eq!(build_geo_adjacency(&d, 100.0).unwrap().edges(), vec![(0, 1)]);
        assert_eq!(build_geo_adjacency(&d, 1e6).unwrap().edge_count(), 3);
        assert_eq!(build_geo_adjacency(&d, 0.0).unwrap().edge_count(), 0);
        assert!(build_geo_adjacency(&d[..1], 1.0).is_err());
    }

    fn nodes(n: usize) -> Vec<GraphNode> {
        (0..n)
            .map(|i| GraphNode {
                place_id: format!("p{i}"),
                image_id: format!("i{i}"),
            })
            .collect()
    }

    #[test]
    fn weight_is_negated_product() {
        let geo = vec![vec![0.0, 10.0], vec![10.0, 0.0]];
        let vis = vec![vec![0.0, 0.5], vec![0.5, 0.0]];
        let g = AffinityGraph::from_distances(nodes(2), geo, vis, 0.0, 10, false, 0).unwrap();
        assert_eq!(g.weights[0][1], -5.0);
        assert_eq!(g.weights[1][0], -5.0);
        assert_eq!(g.weights[0][0], 0.0);
        assert_eq!(g.edges.len(), 1);
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, q: f64, cap: usize) -> AffinityGraph {
        let mut geo = vec![vec![0.0; n]; n];
        let mut vis = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                geo[i][j] = rng.random_range(1.0..100.0);
                geo[j][i] = geo[i][j];
                vis[i][j] = rng.random_range(0.0..2.0);
                vis[j][i] = vis[i][j];
            }
        }
        AffinityGraph::from_distances(nodes(n), geo, vis, q, cap, false, 0).unwrap()
    }

    #[test]
    fn keep_all_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_graph(&mut rng, 8, 0.0, 7);
        assert_eq!(g.edges.len(), 28);
        for _ in 0..50 {
            let q = rng.random_range(0.0..1.0);
            let g = random_graph(&mut rng, 9, q, 3);
            for i in 0..9 {
                assert_eq!(g.weights[i][i], 0.0);
                for j in 0..9 {
                    assert_eq!(g.weights[i][j], g.weights[j][i]);
                    if i != j {
                        assert!(g.weights[i][j] <= 0.0);
                    }
                }
            }
            assert!(g.edges.iter().all(|&(i, j)| g.weights[i][j] > g.tau2));
        }
    }

    #[test]
    fn raising_quantile_never_adds_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let seed: u64 = rng.random();
            let mut prev: Option<BTreeSet<(usize, usize)>> = None;
            for q in [0.0, 0.2, 0.4, 0.5, 0.7, 0.9, 1.0] {
                let g = random_graph(&mut ChaCha8Rng::seed_from_u64(seed), 10, q, 9);
                if let Some(p) = &prev {
                    assert!(g.edges.is_subset(p));
                }
                prev = Some(g.edges);
            }
        }
    }

    #[test]
    fn knn_cap_keeps_union_of_top_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_graph(&mut rng, 10, 0.0, 1);
        // each node keeps at least its single strongest neighbour
        for i in 0..10 {
            let best = (0..10).filter(|&j| j != i).max_by(|&a, &b| g.weights[i][a].total_cmp(&g.weights[i][b]).then(b.cmp(&a))).unwrap();
            assert!(g.has_edge(i, best));
        }
        assert!(g.edges.len() <= 10);
    }

    #[test]
    fn dump_format() {
        let geo = vec![vec![0.0, 10.0], vec![10.0, 0.0]];
        let vis = vec![vec![0.0, 0.5], vec![0.5, 0.0]];
        let g = AffinityGraph::from_distances(nodes(2), geo, vis, 0.0, 1, false, 3).unwrap();
        let mut buf = Vec::new();
        write_graph_dump(&[g], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,node_i,node_j,d_geo,d_vis,W\n3,p0,p1,10,0.5,-5\n");
    }

    #[test]
    fn rescale_bounds_distances() {
        let geo = vec![vec![0.0, 10.0, 40.0], vec![10.0, 0.0, 20.0], vec![40.0, 20.0, 0.0]];
        let vis = vec![vec![0.0, 0.5, 1.0], vec![0.5, 0.0, 2.0], vec![1.0, 2.0, 0.0]];
        let g = AffinityGraph::from_distances(nodes(3), geo, vis, 0.0, 2, true, 0).unwrap();
        assert_eq!(g.weights[0][2], -0.5);
        assert_eq!(g.weights[1][2], -0.5);
    }
}
