//! Temporal message propagation.
//!
//! When an event (i, j, t) arrives, each endpoint forms a raw message from
//! the freshly computed representations and the edge features. The message
//! is then pushed breadth-first through the temporal neighborhood: hop-1
//! receivers are the anchor's most recent neighbors at t, hop-(n+1)
//! receivers are each hop-n receiver's most recent neighbors, and a receiver
//! at hop n collects the payload into its layer-n mailbox. Payloads travel
//! unchanged; one copy is delivered per path, and the per-slot running mean
//! merges them.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::neighbors::NeighborIndex;
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::{xavier_init, Tensor};

/// Raw messages for one event: the view from each endpoint, leading with its
/// own representation.
pub fn generate_messages<T: Scalar>(
    z_src: &Tensor<T>,
    features: &Tensor<T>,
    z_dst: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let cat = |a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>| {
        let mut data = Vec::with_capacity(a.numel() + b.numel() + c.numel());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        data.extend_from_slice(c.data());
        Tensor::vector(data)
    };
    (cat(z_src, features, z_dst), cat(z_dst, features, z_src))
}

/// Elementwise mean of same-shape message payloads.
pub fn combine_messages<T: Scalar>(messages: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = messages
        .first()
        .ok_or_else(|| crate::error::Error::usage("combine_messages of zero messages"))?;
    let mut acc = vec![T::zero(); first.numel()];
    for m in messages {
        if m.shape() != first.shape() {
            return Err(crate::error::Error::Shape {
                op: "combine_messages",
                lhs: first.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(m.data()) {
            *a += x;
        }
    }
    let inv = T::one() / crate::scalar::c::<T>(messages.len() as f64);
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok(Tensor::vector(acc))
}

/// One (receiver, hop) pair with the number of distinct propagation paths
/// that reach it. Staging the payload with `paths` as the weight reproduces
/// one delivery per path exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub node: usize,
    pub hop: usize,
    pub paths: u64,
}

/// Receiver set of a k-hop breadth-first dissemination from `anchor` at time
/// `t`, sampling up to `n_sample` most recent neighbors per expansion. The
/// anchor never receives its own message. Path multiplicity is aggregated
/// per hop instead of enumerated, so cost is bounded by (hops × distinct
/// receivers × n_sample) rather than n_sample^hops.
pub fn disseminate(
    index: &NeighborIndex,
    anchor: usize,
    t: f64,
    n_sample: usize,
    hops: usize,
) -> Vec<Delivery> {
    let mut deliveries = Vec::new();
    // path counts of the current frontier, keyed by node for determinism
    let mut frontier: BTreeMap<usize, u64> = BTreeMap::new();
    for e in index.sample_neighbors(anchor, t, n_sample) {
        if e.node != anchor {
            *frontier.entry(e.node).or_insert(0) += 1;
        }
    }
    for hop in 1..=hops {
        if frontier.is_empty() {
            break;
        }
        for (&node, &paths) in &frontier {
            deliveries.push(Delivery { node, hop, paths });
        }
        if hop == hops {
            break;
        }
        let mut next: BTreeMap<usize, u64> = BTreeMap::new();
        for (&node, &paths) in &frontier {
            for e in index.sample_neighbors(node, t, n_sample) {
                if e.node != anchor {
                    *next.entry(e.node).or_insert(0) += paths;
                }
            }
        }
        frontier = next;
    }
    deliveries
}

/// Per-layer recurrent updater parameters. Gates read the mailbox mean `m`
/// (width `msg_dim`) and the previous memory (width `dim`); all six maps are
/// registered as `dim x msg_dim` or `dim x dim` matrices without biases.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub input_update: ParamId,
    pub hidden_update: ParamId,
    pub input_reset: ParamId,
    pub hidden_reset: ParamId,
    pub input_cand: ParamId,
    pub hidden_cand: ParamId,
}

impl GruParams {
    /// Registers one layer's updater, Xavier-initialized from `seed`.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        layer: usize,
        dim: usize,
        msg_dim: usize,
        seed: u64,
    ) -> Self {
        let mut reg = |name: &str, shape: &[usize], salt: u64| {
            store.register(
                format!("gru{layer}.{name}"),
                xavier_init(shape, seed.wrapping_add(salt)),
            )
        };
        GruParams {
            input_update: reg("input_update", &[dim, msg_dim], 1),
            hidden_update: reg("hidden_update", &[dim, dim], 2),
            input_reset: reg("input_reset", &[dim, msg_dim], 3),
            hidden_reset: reg("hidden_reset", &[dim, dim], 4),
            input_cand: reg("input_cand", &[dim, msg_dim], 5),
            hidden_cand: reg("hidden_cand", &[dim, dim], 6),
        }
    }
}

/// Applies the gated update to previous memories given drained mailbox
/// means. Accepts a single vector pair (`[msg_dim]`, `[dim]`) or a batch
/// (`[b, msg_dim]`, `[b, dim]`) and returns the new memory with the same
/// rank as `mem_prev`:
///
/// update gate  u = sigmoid(W_u m + U_u mem)
/// reset gate   r = sigmoid(W_r m + U_r mem)
/// candidate    c = tanh(W_c m + r * (U_c mem))
/// new memory   mem' = u * mem + (1 - u) * c
pub fn gru_update<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    gru: &GruParams,
    msg: ValueId,
    mem_prev: ValueId,
) -> Result<ValueId> {
    // stored as [dim, in]; inputs arrive row-major, so multiply by transposes
    let wt = |tape: &mut Tape<T>, p: ParamId| tape.transpose(bound.id(p));
    let w_u = wt(tape, gru.input_update)?;
    let u_u = wt(tape, gru.hidden_update)?;
    let w_r = wt(tape, gru.input_reset)?;
    let u_r = wt(tape, gru.hidden_reset)?;
    let w_c = wt(tape, gru.input_cand)?;
    let u_c = wt(tape, gru.hidden_cand)?;

    let xm_u = tape.matmul(msg, w_u)?;
    let hm_u = tape.matmul(mem_prev, u_u)?;
    let pre_u = tape.add(xm_u, hm_u)?;
    let u = tape.sigmoid(pre_u);

    let xm_r = tape.matmul(msg, w_r)?;
    let hm_r = tape.matmul(mem_prev, u_r)?;
    let pre_r = tape.add(xm_r, hm_r)?;
    let r = tape.sigmoid(pre_r);

    let xm_c = tape.matmul(msg, w_c)?;
    let hm_c = tape.matmul(mem_prev, u_c)?;
    let gated = tape.mul(r, hm_c)?;
    let pre_c = tape.add(xm_c, gated)?;
    let cand = tape.tanh(pre_c);

    let one_minus_u = tape.affine(u, -T::one(), T::one());
    let keep = tape.mul(u, mem_prev)?;
    let write = tape.mul(one_minus_u, cand)?;
    tape.add(keep, write)
}
