//! Undirected adjacency and first-qualifying clique search.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Symmetric, loop-free adjacency over nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    matrix: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            matrix: vec![false; n * n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(n);
        for &(i, j) in edges {
            a.add_edge(i, j)?;
        }
        Ok(a)
    }

    pub fn from_matrix(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        let mut a = Self::empty(n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::invalid(format!("adjacency row {i} has {} entries, expected {n}", r.len())));
            }
            if r[i] {
                return Err(Error::invalid(format!("adjacency has a self-loop at {i}")));
            }
            for (j, &e) in r.iter().enumerate() {
                if e != rows[j][i] {
                    return Err(Error::invalid(format!("adjacency is not symmetric at ({i}, {j})")));
                }
                a.matrix[i * n + j] = e;
            }
        }
        Ok(a)
    }

    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<()> {
        if i >= self.n || j >= self.n {
            return Err(Error::invalid(format!("edge ({i}, {j}) out of range for {} nodes", self.n)));
        }
        if i == j {
            return Err(Error::invalid(format!("self-loop at {i}")));
        }
        self.matrix[i * self.n + j] = true;
        self.matrix[j * self.n + i] = true;
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.matrix[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.matrix[i * self.n..(i + 1) * self.n].iter().filter(|&&e| e).count()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.matrix.iter().filter(|&&e| e).count() / 2
    }

    pub fn is_clique(&self, nodes: &[usize]) -> bool {
        nodes.iter().enumerate().all(|(a, &i)| nodes[a + 1..].iter().all(|&j| i != j && self.has_edge(i, j)))
    }
}

/// Bron-Kerbosch with pivoting over a seeded node order, stopping at the
/// first maximal clique with at least `min_size` members. Returns the clique
/// sorted ascending, or `None` when the graph has no clique that large.
pub fn extract_clique<R: Rng + ?Sized>(adj: &Adjacency, min_size: usize, rng: &mut R) -> Option<Vec<usize>> {
    let mut order: Vec<usize> = (0..adj.node_count()).collect();
    order.shuffle(rng);
    let mut r = Vec::new();
    let mut found = search(adj, &mut r, order, Vec::new(), min_size.max(1))?;
    found.sort_unstable();
    Some(found)
}

fn search(adj: &Adjacency, r: &mut Vec<usize>, mut p: Vec<usize>, mut x: Vec<usize>, min_size: usize) -> Option<Vec<usize>> {
    if p.is_empty() && x.is_empty() {
        return (r.len() >= min_size).then(|| r.clone());
    }
    if r.len() + p.len() < min_size {
        return None;
    }
    let pivot = p
        .iter()
        .chain(x.iter())
        .copied()
        .fold((usize::MAX, 0usize), |best, u| {
            let covered = p.iter().filter(|&&v| adj.has_edge(u, v)).count();
            if best.0 == usize::MAX || covered > best.1 {
                (u, covered)
            } else {
                best
            }
        })
        .0;
    let candidates: Vec<usize> = p.iter().copied().filter(|&v| !adj.has_edge(pivot, v)).collect();
    for v in candidates {
        let next_p: Vec<usize> = p.iter().copied().filter(|&w| adj.has_edge(v, w)).collect();
        let next_x: Vec<usize> = x.iter().copied().filter(|&w| adj.has_edge(v, w)).collect();
        r.push(v);
        if let Some(c) = search(adj, r, next_p, next_x, min_size) {
            return Some(c);
        }
        r.pop();
        p.retain(|&w| w != v);
        x.push(v);
        if r.len() + p.len() < min_size {
            return None;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn has_clique_brute(adj: &Adjacency, k: usize) -> bool {
        let n = adj.node_count();
        (0u32..1 << n).any(|mask| {
            if (mask.count_ones() as usize) < k {
                return false;
            }
            let nodes: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            adj.is_clique(&nodes)
        })
    }

    #[test]
    fn triangle() {
        let adj = Adjacency::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(extract_clique(&adj, 3, &mut rng), Some(vec![0, 1, 2]));
    }

    #[test]
    fn path_has_no_triangle() {
        let adj = Adjacency::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(!has_clique_brute(&adj, 3));
        assert_eq!(extract_clique(&adj, 3, &mut rng), None);
    }

    #[test]
    fn complete_twelve() {
        let edges: Vec<_> = (0..12).flat_map(|i| ((i + 1)..12).map(move |j| (i, j))).collect();
        let adj = Adjacency::from_edges(12, &edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = extract_clique(&adj, 10, &mut rng).unwrap();
        assert!(c.len() >= 10);
        assert!(adj.is_clique(&c));
    }

    #[test]
    fn matches_brute_force_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(2..=11);
            let density: f64 = rng.random_range(0.2..0.8);
            let mut adj = Adjacency::empty(n);
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.random_bool(density) {
                        adj.add_edge(i, j).unwrap();
                    }
                }
            }
            let k = rng.random_range(2..=n);
            let got = extract_clique(&adj, k, &mut rng);
            assert_eq!(got.is_some(), has_clique_brute(&adj, k));
            if let Some(c) = got {
                assert!(c.len() >= k && adj.is_clique(&c));
            }
        }
    }

    #[test]
    fn same_seed_same_clique() {
        let edges: Vec<_> = (0..9).flat_map(|i| ((i + 1)..9).map(move |j| (i, j))).filter(|&(i, j)| (i + j) % 4 != 0).collect();
        let adj = Adjacency::from_edges(9, &edges).unwrap();
        let a = extract_clique(&adj, 3, &mut ChaCha8Rng::seed_from_u64(3));
        let b = extract_clique(&adj, 3, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn matrix_validation() {
        assert!(Adjacency::from_matrix(&[vec![false, true], vec![false, false]]).is_err());
        assert!(Adjacency::from_matrix(&[vec![true]]).is_err());
        let a = Adjacency::from_matrix(&[vec![false, true], vec![true, false]]).unwrap();
        assert_eq!(a.edge_count(), 1);
        assert_eq!(a.degree(0), 1);
    }
}
