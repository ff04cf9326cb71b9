//! Deterministic graph generators for tests, benchmarks, and toy tasks.

use crate::graph::Graph;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn build(n: usize, edges: Vec<(u32, u32)>) -> Graph {
    Graph::from_edges(n, &edges, None, false)
        .expect("generator produced an invalid graph")
        .graph
}

/// Path graph P_n: 0 - 1 - ... - (n-1).
pub fn path_graph(n: usize) -> Graph {
    assert!(n >= 2, "path graph needs at least 2 nodes");
    let edges = (0..n - 1).map(|i| (i as u32, (i + 1) as u32)).collect();
    build(n, edges)
}

/// Cycle C_n.
pub fn ring_graph(n: usize) -> Graph {
    assert!(n >= 3, "ring graph needs at least 3 nodes");
    let mut edges: Vec<(u32, u32)> = (0..n - 1).map(|i| (i as u32, (i + 1) as u32)).collect();
    edges.push((0, (n - 1) as u32));
    build(n, edges)
}

/// Star S_n: node 0 joined to all others.
pub fn star_graph(n: usize) -> Graph {
    assert!(n >= 2, "star graph needs at least 2 nodes");
    let edges = (1..n).map(|i| (0u32, i as u32)).collect();
    build(n, edges)
}

/// Complete graph K_n.
pub fn complete_graph(n: usize) -> Graph {
    assert!(n >= 2, "complete graph needs at least 2 nodes");
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i as u32, j as u32));
        }
    }
    build(n, edges)
}

/// Complete binary tree with `n` nodes, parent i linked to 2i+1 and 2i+2.
pub fn balanced_binary_tree(n: usize) -> Graph {
    assert!(n >= 2, "tree needs at least 2 nodes");
    let mut edges = Vec::new();
    for i in 0..n {
        for child in [2 * i + 1, 2 * i + 2] {
            if child < n {
                edges.push((i as u32, child as u32));
            }
        }
    }
    build(n, edges)
}

/// Connected Erdős–Rényi-style graph: a random spanning tree guarantees
/// connectivity, then each remaining pair joins independently with
/// probability `extra_p`. Deterministic in `seed`.
pub fn random_connected_graph(n: usize, extra_p: f64, seed: u64) -> Graph {
    assert!(n >= 2, "need at least 2 nodes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut rng);
    let mut edges: Vec<(u32, u32)> = Vec::new();
    // Random tree: attach each node (in shuffled order) to a uniformly
    // chosen earlier node.
    for i in 1..n {
        let j = rng.gen_range(0..i);
        edges.push((order[i], order[j]));
    }
    for u in 0..n as u32 {
        for v in u + 1..n as u32 {
            if rng.gen_bool(extra_p.clamp(0.0, 1.0)) {
                edges.push((u, v));
            }
        }
    }
    build(n, edges)
}

/// Random d-regular graph via the pairing model: d copies of each node are
/// shuffled and matched; retries until the matching is simple and connected.
/// `n * d` must be even. Deterministic in `seed`.
pub fn random_regular_graph(n: usize, d: usize, seed: u64) -> Graph {
    assert!(d >= 1 && d < n, "degree must satisfy 1 <= d < n");
    assert!(n * d % 2 == 0, "n * d must be even");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..1000 {
        let mut stubs: Vec<u32> = (0..n as u32).flat_map(|v| std::iter::repeat(v).take(d)).collect();
        stubs.shuffle(&mut rng);
        let mut edges: Vec<(u32, u32)> = Vec::with_capacity(n * d / 2);
        let mut ok = true;
        for pair in stubs.chunks(2) {
            let (u, v) = (pair[0], pair[1]);
            if u == v {
                ok = false;
                break;
            }
            edges.push((u.min(v), u.max(v)));
        }
        if !ok {
            continue;
        }
        edges.sort_unstable();
        let before = edges.len();
        edges.dedup();
        if edges.len() != before {
            continue;
        }
        let g = build(n, edges);
        if crate::graph::hop_distances(&g, 0)
            .unwrap()
            .iter()
            .all(|d| d.is_some())
        {
            return g;
        }
    }
    panic!("pairing model failed to produce a simple connected {d}-regular graph on {n} nodes");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_and_ring_shapes() {
        let p = path_graph(5);
        assert_eq!(p.edge_count(), 4);
        assert_eq!(p.degrees(), vec![1, 2, 2, 2, 1]);
        let r = ring_graph(5);
        assert_eq!(r.edge_count(), 5);
        assert!(r.degrees().iter().all(|&d| d == 2));
    }

    #[test]
    fn star_and_complete_shapes() {
        let s = star_graph(6);
        assert_eq!(s.degree(0), 5);
        assert!(s.degrees()[1..].iter().all(|&d| d == 1));
        let k = complete_graph(5);
        assert_eq!(k.edge_count(), 10);
    }

    #[test]
    fn tree_is_connected_acyclic() {
        let t = balanced_binary_tree(13);
        assert_eq!(t.edge_count(), 12);
        assert!(crate::graph::hop_distances(&t, 0)
            .unwrap()
            .iter()
            .all(|d| d.is_some()));
    }

    #[test]
    fn random_connected_is_connected_and_deterministic() {
        for seed in 0..5 {
            let g = random_connected_graph(40, 0.05, seed);
            assert!(crate::graph::hop_distances(&g, 0)
                .unwrap()
                .iter()
                .all(|d| d.is_some()));
            let h = random_connected_graph(40, 0.05, seed);
            assert_eq!(g.edges(), h.edges());
        }
    }

    #[test]
    fn regular_graph_has_uniform_degree() {
        let g = random_regular_graph(50, 3, 1);
        assert!(g.degrees().iter().all(|&d| d == 3));
        let h = random_regular_graph(50, 3, 1);
        assert_eq!(g.edges(), h.edges());
    }
}
