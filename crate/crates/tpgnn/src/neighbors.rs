//! Temporal adjacency with recency-based sampling.
//!
//! Each node keeps its interactions in insertion order, which is also
//! timestamp order because edges arrive chronologically. Sampling the most
//! recent `n` neighbors at time `t` is then a binary search plus a reversed
//! tail slice, never a scan of the full history.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborEntry {
    pub node: usize,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct NeighborIndex {
    lists: Vec<Vec<NeighborEntry>>,
    last_t: f64,
    edges: u64,
}

/// Cheap rollback point: per-node list lengths at the time of the mark.
/// The index is append-only, so truncating restores it exactly.
#[derive(Debug, Clone)]
pub struct IndexMark {
    lens: Vec<usize>,
    last_t: f64,
    edges: u64,
}

impl NeighborIndex {
    pub fn new(num_nodes: usize) -> Self {
        NeighborIndex {
            lists: vec![Vec::new(); num_nodes],
            last_t: f64::NEG_INFINITY,
            edges: 0,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.lists.len()
    }

    pub fn num_edges(&self) -> u64 {
        self.edges
    }

    /// Records an undirected interaction at time `t`, appending each endpoint
    /// to the other's history. Edges must arrive in non-decreasing time.
    pub fn insert_edge(&mut self, src: usize, dst: usize, t: f64) -> Result<()> {
        if t < self.last_t {
            return Err(Error::usage(format!(
                "edge at t={t} arrived after an edge at t={}",
                self.last_t
            )));
        }
        let n = self.lists.len();
        if src >= n || dst >= n {
            return Err(Error::usage(format!(
                "edge ({src}, {dst}) outside node range 0..{n}"
            )));
        }
        self.lists[src].push(NeighborEntry { node: dst, t });
        self.lists[dst].push(NeighborEntry { node: src, t });
        self.last_t = t;
        self.edges += 1;
        Ok(())
    }

    /// Up to `n` most recent interactions of `node` at or before time `t`,
    /// most recent first. Equal timestamps rank by insertion order, later
    /// insertions counting as more recent. Repeated interactions with the
    /// same neighbor yield repeated entries.
    pub fn sample_neighbors(&self, node: usize, t: f64, n: usize) -> Vec<NeighborEntry> {
        let list = &self.lists[node];
        let end = list.partition_point(|e| e.t <= t);
        let start = end.saturating_sub(n);
        list[start..end].iter().rev().copied().collect()
    }

    /// Number of interactions recorded for `node`.
    pub fn degree(&self, node: usize) -> usize {
        self.lists[node].len()
    }

    pub fn mark(&self) -> IndexMark {
        IndexMark {
            lens: self.lists.iter().map(Vec::len).collect(),
            last_t: self.last_t,
            edges: self.edges,
        }
    }

    /// Drops every edge inserted after `mark` was taken.
    pub fn truncate(&mut self, mark: &IndexMark) {
        assert_eq!(mark.lens.len(), self.lists.len(), "mark from another index");
        for (list, &len) in self.lists.iter_mut().zip(&mark.lens) {
            list.truncate(len);
        }
        self.last_t = mark.last_t;
        self.edges = mark.edges;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn sampling_is_recency_ordered_and_time_bounded() {
        let mut idx = NeighborIndex::new(5);
        idx.insert_edge(0, 1, 1.0).unwrap();
        idx.insert_edge(0, 2, 2.0).unwrap();
        idx.insert_edge(0, 3, 3.0).unwrap();
        idx.insert_edge(0, 4, 4.0).unwrap();

        let got = idx.sample_neighbors(0, 3.0, 2);
        assert_eq!(
            got,
            vec![
                NeighborEntry { node: 3, t: 3.0 },
                NeighborEntry { node: 2, t: 2.0 }
            ]
        );
        // inclusive bound: the t=3.0 edge is visible at t=3.0
        assert_eq!(idx.sample_neighbors(0, 2.999, 2)[0].node, 2);
        // future edges never appear
        assert!(idx.sample_neighbors(0, 0.5, 10).is_empty());
        // fresh node has no history
        assert!(idx.sample_neighbors(1, 0.5, 10).is_empty());
    }

    #[test]
    fn ties_rank_later_insertions_as_more_recent() {
        let mut idx = NeighborIndex::new(4);
        idx.insert_edge(0, 1, 5.0).unwrap();
        idx.insert_edge(0, 2, 5.0).unwrap();
        idx.insert_edge(0, 3, 5.0).unwrap();
        let got: Vec<usize> = idx.sample_neighbors(0, 5.0, 3).iter().map(|e| e.node).collect();
        assert_eq!(got, vec![3, 2, 1]);
    }

    #[test]
    fn repeated_interactions_repeat_in_the_sample() {
        let mut idx = NeighborIndex::new(3);
        idx.insert_edge(0, 1, 1.0).unwrap();
        idx.insert_edge(0, 1, 2.0).unwrap();
        let got: Vec<(usize, f64)> = idx
            .sample_neighbors(0, 10.0, 5)
            .iter()
            .map(|e| (e.node, e.t))
            .collect();
        assert_eq!(got, vec![(1, 2.0), (1, 1.0)]);
    }

    #[test]
    fn both_endpoints_see_the_edge_once() {
        let mut idx = NeighborIndex::new(2);
        idx.insert_edge(0, 1, 1.0).unwrap();
        assert_eq!(idx.degree(0), 1);
        assert_eq!(idx.degree(1), 1);
        assert_eq!(idx.sample_neighbors(1, 1.0, 10)[0].node, 0);
    }

    #[test]
    fn out_of_order_insert_rejected() {
        let mut idx = NeighborIndex::new(3);
        idx.insert_edge(0, 1, 2.0).unwrap();
        assert!(idx.insert_edge(0, 2, 1.0).is_err());
        // equal timestamp is fine
        assert!(idx.insert_edge(0, 2, 2.0).is_ok());
    }

    #[test]
    fn out_of_range_node_rejected() {
        let mut idx = NeighborIndex::new(2);
        assert!(idx.insert_edge(0, 5, 1.0).is_err());
    }

    #[test]
    fn mark_truncate_restores_exactly() {
        let mut idx = NeighborIndex::new(4);
        idx.insert_edge(0, 1, 1.0).unwrap();
        idx.insert_edge(2, 3, 2.0).unwrap();
        let mark = idx.mark();
        let before: Vec<Vec<NeighborEntry>> = (0..4).map(|v| idx.sample_neighbors(v, 10.0, 10)).collect();

        idx.insert_edge(0, 3, 3.0).unwrap();
        idx.insert_edge(1, 2, 4.0).unwrap();
        idx.truncate(&mark);

        let after: Vec<Vec<NeighborEntry>> = (0..4).map(|v| idx.sample_neighbors(v, 10.0, 10)).collect();
        assert_eq!(before, after);
        assert_eq!(idx.num_edges(), 2);
        // timeline rewound: the t=3.0 insert is legal again
        assert!(idx.insert_edge(0, 3, 2.0).is_ok());
    }

    /// Reference implementation: filter by participation and time, sort by
    /// (t, arrival), truncate to the most recent n. Works straight off the
    /// flat edge list, independent of the index structure.
    fn oracle_sample(
        edges: &[(usize, usize, f64)],
        node: usize,
        t: f64,
        n: usize,
    ) -> Vec<(usize, f64)> {
        let mut hits: Vec<(usize, f64, usize)> = edges
            .iter()
            .enumerate()
            .filter(|(_, &(s, d, et))| (s == node || d == node) && et <= t)
            .map(|(i, &(s, d, et))| (if s == node { d } else { s }, et, i))
            .collect();
        hits.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.2.cmp(&b.2)));
        hits.iter()
            .rev()
            .take(n)
            .map(|&(v, et, _)| (v, et))
            .collect()
    }

    #[test]
    fn sampling_matches_filter_sort_truncate_oracle() {
        let mut rng = StdRng::seed_from_u64(2024);
        for _ in 0..50 {
            let nodes = rng.gen_range(2..30);
            let n_events = rng.gen_range(1..400);
            let mut t = 0.0;
            let mut edges = Vec::new();
            let mut idx = NeighborIndex::new(nodes);
            for _ in 0..n_events {
                // coarse timestamps so ties actually happen
                if rng.gen_bool(0.7) {
                    t += rng.gen_range(0..3) as f64;
                }
                let a = rng.gen_range(0..nodes);
                let mut b = rng.gen_range(0..nodes);
                while b == a {
                    b = rng.gen_range(0..nodes);
                }
                idx.insert_edge(a, b, t).unwrap();
                edges.push((a, b, t));
            }
            for _ in 0..40 {
                let node = rng.gen_range(0..nodes);
                let q = rng.gen_range(-1.0..t + 2.0);
                let n = rng.gen_range(0..15);
                let got: Vec<(usize, f64)> = idx
                    .sample_neighbors(node, q, n)
                    .iter()
                    .map(|e| (e.node, e.t))
                    .collect();
                assert_eq!(got, oracle_sample(&edges, node, q, n));
            }
        }
    }
}
