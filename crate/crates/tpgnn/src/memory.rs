//! Per-node, per-layer memory state with deferred message application.
//!
//! Each node keeps one memory vector per propagation layer plus the
//! representation cached at its previous update. Incoming messages are not
//! applied immediately: they accumulate in per-layer mailboxes as a running
//! mean, and are drained the next time the node participates in a batch, so
//! the recurrent update can happen inside the training graph. Layer `n`
//! state is only ever written by layer `n` traffic.

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Pending messages for one (node, layer) slot, kept as a running mean so
/// the slot's size never depends on how many messages arrived.
#[derive(Debug, Clone, PartialEq)]
pub struct MailboxSlot<T> {
    pub mean: Tensor<T>,
    pub count: u64,
    pub latest_t: f64,
}

impl<T: Scalar> MailboxSlot<T> {
    fn empty(msg_dim: usize) -> Self {
        MailboxSlot {
            mean: Tensor::zeros(&[msg_dim]),
            count: 0,
            latest_t: f64::NEG_INFINITY,
        }
    }

    fn stage(&mut self, payload: &Tensor<T>, t: f64, weight: u64) {
        let old = c::<T>(self.count as f64);
        let w = c::<T>(weight as f64);
        let total = old + w;
        for (m, &p) in self.mean.data_mut().iter_mut().zip(payload.data()) {
            *m = (*m * old + p * w) / total;
        }
        self.count += weight;
        self.latest_t = self.latest_t.max(t);
    }

    fn clear(&mut self) {
        self.mean.data_mut().fill(T::zero());
        self.count = 0;
        self.latest_t = f64::NEG_INFINITY;
    }
}

/// One node's state across all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState<T> {
    /// `memories[n-1]` is the layer-n memory vector.
    pub memories: Vec<Tensor<T>>,
    /// Representation cached at the node's previous update.
    pub prev_repr: Tensor<T>,
    /// Per-layer timestamp of the last committed memory write.
    pub last_update: Vec<f64>,
    pub mailboxes: Vec<MailboxSlot<T>>,
}

impl<T: Scalar> NodeState<T> {
    fn fresh(hops: usize, dim: usize, msg_dim: usize) -> Self {
        NodeState {
            memories: vec![Tensor::zeros(&[dim]); hops],
            prev_repr: Tensor::zeros(&[dim]),
            last_update: vec![f64::NEG_INFINITY; hops],
            mailboxes: vec![MailboxSlot::empty(msg_dim); hops],
        }
    }

    /// Number of stored floats; fixed by (hops, dim, msg_dim), independent of
    /// traffic.
    pub fn float_count(&self) -> usize {
        self.memories.iter().map(Tensor::numel).sum::<usize>()
            + self.prev_repr.numel()
            + self.mailboxes.iter().map(|m| m.mean.numel()).sum::<usize>()
    }
}

/// A drained mailbox slot ready for the recurrent update.
#[derive(Debug, Clone)]
pub struct DrainedSlot<T> {
    pub hop: usize,
    pub mean: Tensor<T>,
    pub count: u64,
    pub latest_t: f64,
}

#[derive(Debug, Clone)]
pub struct MemoryStore<T> {
    states: Vec<NodeState<T>>,
    hops: usize,
    dim: usize,
    msg_dim: usize,
}

/// Deep copy of every node state, used to roll evaluation back.
#[derive(Debug, Clone)]
pub struct MemorySnapshot<T> {
    states: Vec<NodeState<T>>,
}

impl<T: Scalar> MemoryStore<T> {
    /// `msg_dim` is the width of raw message payloads (source representation,
    /// edge features, destination representation, concatenated).
    pub fn new(num_nodes: usize, hops: usize, dim: usize, msg_dim: usize) -> Self {
        MemoryStore {
            states: (0..num_nodes)
                .map(|_| NodeState::fresh(hops, dim, msg_dim))
                .collect(),
            hops,
            dim,
            msg_dim,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.states.len()
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn msg_dim(&self) -> usize {
        self.msg_dim
    }

    /// Ensures `node` has zeroed state. Growing past the current roster is
    /// allowed; re-initializing an existing node is a no-op.
    pub fn init_node(&mut self, node: usize) {
        while self.states.len() <= node {
            self.states
                .push(NodeState::fresh(self.hops, self.dim, self.msg_dim));
        }
    }

    pub fn state(&self, node: usize) -> &NodeState<T> {
        &self.states[node]
    }

    fn check_hop(&self, hop: usize) -> Result<usize> {
        if hop == 0 || hop > self.hops {
            return Err(Error::usage(format!(
                "layer {hop} outside 1..={}",
                self.hops
            )));
        }
        Ok(hop - 1)
    }

    /// Folds a message into the (node, hop) mailbox. `weight` counts how many
    /// identical copies arrive (multiple propagation paths of equal length).
    pub fn stage_message(
        &mut self,
        node: usize,
        hop: usize,
        payload: &Tensor<T>,
        t: f64,
        weight: u64,
    ) -> Result<()> {
        let slot = self.check_hop(hop)?;
        if payload.shape() != [self.msg_dim] {
            return Err(Error::Shape {
                op: "stage_message",
                lhs: payload.shape().to_vec(),
                rhs: vec![self.msg_dim],
            });
        }
        if weight == 0 {
            return Err(Error::usage("stage_message with zero weight"));
        }
        if !t.is_finite() {
            return Err(Error::usage(format!("non-finite message timestamp {t}")));
        }
        self.states[node].mailboxes[slot].stage(payload, t, weight);
        Ok(())
    }

    /// Total staged message count across every node and layer.
    pub fn pending_total(&self) -> u64 {
        self.states
            .iter()
            .flat_map(|s| s.mailboxes.iter())
            .map(|m| m.count)
            .sum()
    }

    /// Empties the node's non-empty mailboxes, returning their contents in
    /// ascending layer order. Memories are untouched; applying the update is
    /// the caller's job.
    pub fn drain(&mut self, node: usize) -> Vec<DrainedSlot<T>> {
        let state = &mut self.states[node];
        let mut out = Vec::new();
        for (i, slot) in state.mailboxes.iter_mut().enumerate() {
            if slot.count > 0 {
                out.push(DrainedSlot {
                    hop: i + 1,
                    mean: slot.mean.clone(),
                    count: slot.count,
                    latest_t: slot.latest_t,
                });
                slot.clear();
            }
        }
        out
    }

    /// Writes the layer-`hop` memory of `node`. The write must not move
    /// backwards in time relative to the layer's previous commit.
    pub fn commit(&mut self, node: usize, hop: usize, memory: Tensor<T>, t: f64) -> Result<()> {
        let slot = self.check_hop(hop)?;
        if memory.shape() != [self.dim] {
            return Err(Error::Shape {
                op: "commit",
                lhs: memory.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        let state = &mut self.states[node];
        if t < state.last_update[slot] {
            return Err(Error::usage(format!(
                "commit at t={t} behind layer-{hop} last update {}",
                state.last_update[slot]
            )));
        }
        state.memories[slot] = memory;
        state.last_update[slot] = t;
        Ok(())
    }

    /// Caches the representation computed at the node's latest update.
    pub fn cache_repr(&mut self, node: usize, repr: Tensor<T>) -> Result<()> {
        if repr.shape() != [self.dim] {
            return Err(Error::Shape {
                op: "cache_repr",
                lhs: repr.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        self.states[node].prev_repr = repr;
        Ok(())
    }

    pub fn snapshot(&self) -> MemorySnapshot<T> {
        MemorySnapshot {
            states: self.states.clone(),
        }
    }

    pub fn restore(&mut self, snap: &MemorySnapshot<T>) {
        self.states = snap.states.clone();
    }

    /// Identical state check, used by rollback tests.
    pub fn same_states(&self, snap: &MemorySnapshot<T>) -> bool {
        self.states == snap.states
    }

}

impl<T: Scalar> MemorySnapshot<T> {
    pub(crate) fn states(&self) -> &[NodeState<T>] {
        &self.states
    }

    pub(crate) fn from_states(states: Vec<NodeState<T>>) -> Self {
        MemorySnapshot { states }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(vals: &[f64]) -> Tensor<f64> {
        Tensor::vector(vals.to_vec())
    }

    fn store() -> MemoryStore<f64> {
        // hops=3, dim=2, msg_dim=5
        MemoryStore::new(4, 3, 2, 5)
    }

    #[test]
    fn fresh_state_is_zero() {
        let s = store();
        let st = s.state(0);
        assert_eq!(st.memories.len(), 3);
        assert!(st.memories.iter().all(|m| m.data().iter().all(|&x| x == 0.0)));
        assert!(st.prev_repr.data().iter().all(|&x| x == 0.0));
        assert!(st.last_update.iter().all(|&t| t == f64::NEG_INFINITY));
        assert_eq!(s.pending_total(), 0);
    }

    #[test]
    fn init_node_is_idempotent_and_grows() {
        let mut s = store();
        s.commit(1, 2, payload(&[1.0, 2.0]), 5.0).ok();
        s.init_node(1);
        // prior state survives re-init
        assert_eq!(s.state(1).memories[1].data(), &[1.0, 2.0]);
        s.init_node(10);
        assert_eq!(s.num_nodes(), 11);
        assert!(s.state(10).prev_repr.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn staging_keeps_a_running_mean() {
        let mut s = store();
        s.stage_message(0, 1, &payload(&[2.0, 0.0, 0.0, 0.0, 2.0]), 1.0, 1).unwrap();
        s.stage_message(0, 1, &payload(&[4.0, 0.0, 0.0, 0.0, 6.0]), 2.0, 1).unwrap();
        let slot = &s.state(0).mailboxes[0];
        assert_eq!(slot.mean.data(), &[3.0, 0.0, 0.0, 0.0, 4.0]);
        assert_eq!(slot.count, 2);
        assert_eq!(slot.latest_t, 2.0);
    }

    #[test]
    fn weighted_staging_counts_copies() {
        let mut s = store();
        s.stage_message(0, 2, &payload(&[6.0, 0.0, 0.0, 0.0, 0.0]), 1.0, 1).unwrap();
        s.stage_message(0, 2, &payload(&[0.0, 0.0, 0.0, 0.0, 0.0]), 2.0, 2).unwrap();
        let slot = &s.state(0).mailboxes[1];
        // mean of {6, 0, 0}
        assert_eq!(slot.mean.data()[0], 2.0);
        assert_eq!(slot.count, 3);
    }

    #[test]
    fn staging_never_touches_memories_or_other_layers() {
        let mut s = store();
        s.commit(0, 1, payload(&[7.0, 8.0]), 0.0).ok();
        let mems_before = s.state(0).memories.clone();
        let other_before = s.state(0).mailboxes[2].clone();
        s.stage_message(0, 2, &payload(&[1.0; 5]), 1.0, 1).unwrap();
        assert_eq!(s.state(0).memories, mems_before);
        assert_eq!(s.state(0).mailboxes[2], other_before);
        assert_eq!(s.state(0).mailboxes[0].count, 0);
    }

    #[test]
    fn drain_returns_ascending_layers_and_clears() {
        let mut s = store();
        s.stage_message(0, 3, &payload(&[3.0; 5]), 3.0, 1).unwrap();
        s.stage_message(0, 1, &payload(&[1.0; 5]), 1.0, 2).unwrap();
        let before = s.pending_total();
        let drained = s.drain(0);
        assert_eq!(drained.len(), 2);
        assert_eq!(drained[0].hop, 1);
        assert_eq!(drained[0].count, 2);
        assert_eq!(drained[1].hop, 3);
        assert_eq!(drained[1].latest_t, 3.0);
        // counts drop by exactly the drained total
        assert_eq!(s.pending_total(), before - 3);
        assert!(s.drain(0).is_empty());
        // other nodes unaffected
        assert!(s.drain(1).is_empty());
    }

    #[test]
    fn commit_updates_one_layer_only() {
        let mut s = store();
        s.commit(2, 2, payload(&[1.5, -2.5]), 4.0).unwrap();
        let st = s.state(2);
        assert_eq!(st.memories[1].data(), &[1.5, -2.5]);
        assert!(st.memories[0].data().iter().all(|&x| x == 0.0));
        assert!(st.memories[2].data().iter().all(|&x| x == 0.0));
        assert_eq!(st.last_update, vec![f64::NEG_INFINITY, 4.0, f64::NEG_INFINITY]);
    }

    #[test]
    fn commit_rejects_time_regression() {
        let mut s = store();
        s.commit(0, 1, Tensor::zeros(&[2]), 5.0).unwrap();
        assert!(s.commit(0, 1, Tensor::zeros(&[2]), 4.0).is_err());
        // same-time and later commits pass
        assert!(s.commit(0, 1, Tensor::zeros(&[2]), 5.0).is_ok());
        assert!(s.commit(0, 1, Tensor::zeros(&[2]), 6.0).is_ok());
        // other layers keep their own clocks
        assert!(s.commit(0, 2, Tensor::zeros(&[2]), 0.0).is_ok());
    }

    #[test]
    fn layer_bounds_checked() {
        let mut s = store();
        assert!(s.stage_message(0, 0, &payload(&[0.0; 5]), 1.0, 1).is_err());
        assert!(s.stage_message(0, 4, &payload(&[0.0; 5]), 1.0, 1).is_err());
        assert!(s.commit(0, 0, Tensor::zeros(&[2]), 1.0).is_err());
        assert!(s.stage_message(0, 1, &payload(&[0.0; 3]), 1.0, 1).is_err());
        assert!(s.commit(0, 1, Tensor::zeros(&[3]), 1.0).is_err());
    }

    #[test]
    fn footprint_is_constant_under_traffic() {
        let mut s = store();
        let fresh = s.state(3).float_count();
        assert_eq!(fresh, 3 * 2 + 2 + 3 * 5);
        for i in 0..100 {
            s.stage_message(0, 1 + (i % 3), &payload(&[i as f64; 5]), i as f64, 1 + i as u64 % 4)
                .unwrap();
        }
        s.drain(0);
        s.commit(0, 1, payload(&[1.0, 1.0]), 100.0).unwrap();
        s.cache_repr(0, payload(&[2.0, 2.0])).unwrap();
        assert_eq!(s.state(0).float_count(), fresh);
    }

    #[test]
    fn snapshot_restore_is_bit_identical() {
        let mut s = store();
        s.stage_message(0, 1, &payload(&[0.1, 0.2, 0.3, 0.4, 0.5]), 1.0, 1).unwrap();
        s.commit(1, 3, payload(&[9.0, -9.0]), 2.0).unwrap();
        s.cache_repr(2, payload(&[0.25, 0.75])).unwrap();
        let snap = s.snapshot();
        assert!(s.same_states(&snap));

        s.stage_message(2, 2, &payload(&[1.0; 5]), 3.0, 5).unwrap();
        s.drain(0);
        s.commit(0, 1, Tensor::zeros(&[2]), 4.0).unwrap();
        assert!(!s.same_states(&snap));

        s.restore(&snap);
        assert!(s.same_states(&snap));
        assert_eq!(s.state(0).mailboxes[0].count, 1);
        assert_eq!(s.state(0).mailboxes[0].mean.data(), &[0.1, 0.2, 0.3, 0.4, 0.5]);
    }
}
