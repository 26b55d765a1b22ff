//! Batch-driven training and evaluation over the event stream.
//!
//! Every batch runs the same state lifecycle, whether learning or scoring:
//! drain the mailboxes of all touched nodes and apply the recurrent update
//! inside the gradient tape, encode fresh representations, score candidate
//! pairs, then commit memories, cache representations, index the new edges,
//! and disseminate the batch's messages. Training adds one optimizer step
//! between scoring and committing; evaluation skips it and turns dropout
//! off, but still applies the state updates so the stream stays causal.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::ctdg::{Event, EventLog};
use crate::encoder::{encode, EncodeOptions};
use crate::error::{Error, Result};
use crate::memory::{MemorySnapshot, MemoryStore};
use crate::metrics::{accuracy, average_precision, roc_auc};
use crate::model::{derive, mlp_apply, mlp_forward, Model};
use crate::neighbors::{IndexMark, NeighborIndex};
use crate::optim::Adam;
use crate::params::BoundParams;
use crate::propagator::{disseminate, generate_messages, gru_update};
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm.
pub const CLAMP_EPS: f64 = 1e-7;

/// Feature vector attached to sampled negative edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegFeatures {
    /// Reuse the paired positive event's features, forcing the decoder to
    /// discriminate on node identity rather than feature presence.
    Reuse,
    /// All-zero features.
    Zeros,
}

/// Run-level knobs, orthogonal to the model's architectural dims.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// Batch size used when streaming evaluation splits; `None` reuses
    /// `batch_size`. Pinning this keeps scoring granularity constant while
    /// sweeping the training batch size.
    pub eval_batch: Option<usize>,
    /// Most-recent neighbors sampled per dissemination expansion.
    pub n_neighbors: usize,
    pub lr: f64,
    pub dropout: f64,
    /// Learned hop-depth attention scores; turned off for the ablation.
    pub hop_bias: bool,
    pub neg_features: NegFeatures,
    pub seed: u64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 200,
            eval_batch: None,
            n_neighbors: 20,
            lr: 1e-4,
            dropout: 0.1,
            hop_bias: true,
            neg_features: NegFeatures::Reuse,
            seed: 0,
            patience: 5,
            max_epochs: 50,
        }
    }
}

/// One emitted metrics record. Wall-clock fields (`train_s`,
/// `infer_ms_per_batch`) are the only fields allowed to differ between
/// same-seed runs.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
    pub ap: f64,
    pub auc: f64,
    pub train_s: f64,
    pub infer_ms_per_batch: f64,
}

impl RunMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    streak: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::NEG_INFINITY, best_epoch: 0, streak: 0 }
    }

    pub fn best_value(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Records one epoch's validation value; true means stop now.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.streak = 0;
            false
        } else {
            self.streak += 1;
            self.streak >= self.patience
        }
    }
}

/// One uniformly drawn destination per positive event, never equal to the
/// event's own destination. Deterministic for a given generator state.
pub fn sample_negatives(
    events: &[Event],
    dst_range: &Range<usize>,
    rng: &mut StdRng,
) -> Result<Vec<usize>> {
    if dst_range.is_empty() {
        return Err(Error::usage("negative sampling over an empty destination universe"));
    }
    events
        .iter()
        .map(|e| {
            if dst_range.len() == 1 {
                if dst_range.start == e.dst {
                    return Err(Error::usage(
                        "cannot sample a negative: the destination universe holds only the positive",
                    ));
                }
                return Ok(dst_range.start);
            }
            loop {
                let n = rng.gen_range(dst_range.clone());
                if n != e.dst {
                    return Ok(n);
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Link loss, backprop, one optimizer step.
    TrainLink,
    /// Link scoring only; state still advances.
    EvalLink,
    /// Node-decoder training on frozen upstream outputs.
    TrainNode,
    /// Node-decoder scoring.
    EvalNode,
    /// Link loss plus node loss on one tape, no step; used by gradient
    /// instrumentation so a single backprop reaches every parameter.
    Probe,
}

impl BatchMode {
    fn link(self) -> bool {
        matches!(self, BatchMode::TrainLink | BatchMode::EvalLink | BatchMode::Probe)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Task {
    Link,
    Node,
}

struct Commit {
    node: usize,
    hop: usize,
    batch: ValueId,
    row: usize,
    latest_t: f64,
}

/// Tape and bookkeeping for one batch, before any state is written back.
pub struct BatchForward<T: Scalar> {
    pub tape: Tape<T>,
    pub bound: BoundParams,
    /// Total loss on the tape; absent in node modes, whose loss lives on a
    /// separate decoder-only tape.
    pub loss: Option<ValueId>,
    pos_probs: Vec<f64>,
    neg_probs: Vec<f64>,
    commits: Vec<Commit>,
    reprs: BTreeMap<usize, ValueId>,
    touched: Vec<usize>,
    infer_ms: f64,
}

/// Outcome of one fully applied batch.
pub struct BatchResult {
    pub loss: f64,
    pub pos_probs: Vec<f64>,
    pub neg_probs: Vec<f64>,
    pub node_scores: Vec<f64>,
    pub node_labels: Vec<bool>,
    pub infer_ms: f64,
}

/// Everything `fit` needs to roll back to its best epoch.
struct BestState<T: Scalar> {
    tensors: Vec<Tensor<T>>,
    memory: MemorySnapshot<T>,
    index: NeighborIndex,
}

pub struct FitResult {
    pub history: Vec<RunMetrics>,
    pub best_epoch: usize,
    pub test: RunMetrics,
}

/// Stream state frozen at the best epoch, kept for checkpointing. The
/// parameters are not duplicated here: after `fit` returns, the store still
/// holds the best-epoch tensors (evaluation never writes parameters).
pub struct SavedPoint<T: Scalar> {
    pub memory: MemorySnapshot<T>,
    /// Events consumed when the state was captured (the train split end);
    /// the neighbor index is rebuilt by replaying this prefix.
    pub cursor: usize,
    pub best_epoch: usize,
}

pub struct Engine<T: Scalar> {
    pub model: Model<T>,
    pub settings: TrainSettings,
    memory: MemoryStore<T>,
    index: NeighborIndex,
    adam: Adam<T>,
    node_adam: Adam<T>,
    num_nodes: usize,
    dst_range: Range<usize>,
    saved: Option<SavedPoint<T>>,
}

impl<T: Scalar> Engine<T> {
    pub fn new(model: Model<T>, log: &EventLog, settings: TrainSettings) -> Result<Self> {
        if model.dims.edge_dim != log.feat_dim() {
            return Err(Error::usage(format!(
                "model expects edge features of width {}, log provides {}",
                model.dims.edge_dim,
                log.feat_dim()
            )));
        }
        for e in log.events() {
            if let Some(l) = e.label {
                if usize::from(l) >= model.dims.classes {
                    return Err(Error::usage(format!(
                        "label {l} outside the {}-class node task",
                        model.dims.classes
                    )));
                }
            }
        }
        let num_nodes = log.num_nodes();
        let memory = MemoryStore::new(num_nodes, model.dims.hops, model.dims.dim, model.dims.msg_dim());
        let index = NeighborIndex::new(num_nodes);
        let adam = Adam::new(settings.lr, &model.store.sizes());
        let nd = &model.node_decoder;
        let node_sizes: Vec<usize> = [nd.w1, nd.b1, nd.w2, nd.b2]
            .iter()
            .map(|&id| model.store.get(id).numel())
            .collect();
        let node_adam = Adam::new(settings.lr, &node_sizes);
        Ok(Engine {
            memory,
            index,
            adam,
            node_adam,
            num_nodes,
            dst_range: log.dst_range(),
            model,
            settings,
            saved: None,
        })
    }

    pub fn memory(&self) -> &MemoryStore<T> {
        &self.memory
    }

    pub fn index(&self) -> &NeighborIndex {
        &self.index
    }

    pub(crate) fn state_mut(&mut self) -> (&mut MemoryStore<T>, &mut NeighborIndex) {
        (&mut self.memory, &mut self.index)
    }

    /// Best-epoch stream state captured by the latest `fit` call.
    pub fn saved_point(&self) -> Option<&SavedPoint<T>> {
        self.saved.as_ref()
    }

    /// Drops all memories, cached representations, mailboxes, and indexed
    /// edges, as at the start of an epoch replay.
    pub fn reset_state(&mut self) {
        let d = self.model.dims;
        self.memory = MemoryStore::new(self.num_nodes, d.hops, d.dim, d.msg_dim());
        self.index = NeighborIndex::new(self.num_nodes);
    }

    /// Point-in-time copy of the mutable stream state (not the parameters).
    pub fn snapshot(&self) -> (MemorySnapshot<T>, IndexMark) {
        (self.memory.snapshot(), self.index.mark())
    }

    pub fn restore(&mut self, snap: &(MemorySnapshot<T>, IndexMark)) {
        self.memory.restore(&snap.0);
        self.index.truncate(&snap.1);
    }

    /// Builds the batch tape up to the loss without writing any state back,
    /// except that touched mailboxes are drained (snapshot first to replay).
    pub fn forward_batch(
        &mut self,
        events: &[Event],
        negatives: &[usize],
        mode: BatchMode,
        tape_seed: u64,
    ) -> Result<BatchForward<T>> {
        if events.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let dims = self.model.dims;
        let (k, dim, msg_dim) = (dims.hops, dims.dim, dims.msg_dim());

        let mut touched: BTreeSet<usize> = BTreeSet::new();
        for e in events {
            touched.insert(e.src);
            touched.insert(e.dst);
        }
        touched.extend(negatives.iter().copied());
        let touched: Vec<usize> = touched.into_iter().collect();

        let mut tape = Tape::with_seed(tape_seed);
        let bound = self.model.store.bind(&mut tape);

        // (1) drain mailboxes, batch the recurrent update per layer
        let mut drained = Vec::new();
        for &node in &touched {
            for slot in self.memory.drain(node) {
                drained.push((node, slot));
            }
        }
        let mut commits = Vec::new();
        for hop in 1..=k {
            let members: Vec<&(usize, crate::memory::DrainedSlot<T>)> =
                drained.iter().filter(|(_, s)| s.hop == hop).collect();
            if members.is_empty() {
                continue;
            }
            let mut msg_data = Vec::with_capacity(members.len() * msg_dim);
            let mut mem_data = Vec::with_capacity(members.len() * dim);
            for (node, slot) in &members {
                msg_data.extend_from_slice(slot.mean.data());
                mem_data.extend_from_slice(self.memory.state(*node).memories[hop - 1].data());
            }
            let msgs = tape.leaf(Tensor::from_rows(members.len(), msg_dim, msg_data)?);
            let mems = tape.leaf(Tensor::from_rows(members.len(), dim, mem_data)?);
            let out = gru_update(&mut tape, &bound, &self.model.grus[hop - 1], msgs, mems)?;
            for (row, (node, slot)) in members.into_iter().enumerate() {
                commits.push(Commit { node: *node, hop, batch: out, row, latest_t: slot.latest_t });
            }
        }
        let commit_lookup: BTreeMap<(usize, usize), (ValueId, usize)> =
            commits.iter().map(|c| ((c.node, c.hop), (c.batch, c.row))).collect();

        // (2) encode each touched node once from its pre-batch state plus
        // this batch's memory updates
        let opts = EncodeOptions {
            train: matches!(mode, BatchMode::TrainLink),
            dropout: self.settings.dropout,
            hop_bias: self.settings.hop_bias,
        };
        let mut reprs = BTreeMap::new();
        for &node in &touched {
            let mut token_ids = Vec::with_capacity(k + 1);
            let prev = self.memory.state(node).prev_repr.clone();
            token_ids.push(tape.leaf(prev));
            for hop in 1..=k {
                if let Some(&(batch, row)) = commit_lookup.get(&(node, hop)) {
                    token_ids.push(tape.row(batch, row)?);
                } else {
                    token_ids.push(tape.leaf(self.memory.state(node).memories[hop - 1].clone()));
                }
            }
            let tokens = tape.stack_rows(&token_ids)?;
            let z = encode(&mut tape, &bound, &self.model.encoder, tokens, &opts)?;
            reprs.insert(node, z);
        }

        // (3) candidate-pair scoring and loss
        let mut pos_probs = Vec::new();
        let mut neg_probs = Vec::new();
        let mut loss = None;
        let mut infer_ms = 0.0;
        if mode.link() {
            let b = events.len();
            let infer_t0 = Instant::now();
            let mut rows = Vec::with_capacity(2 * b);
            let mut feat_ids = Vec::with_capacity(b);
            for e in events {
                let feat = tape.leaf(feat_tensor::<T>(e));
                feat_ids.push(feat);
                rows.push(tape.concat(&[reprs[&e.src], feat, reprs[&e.dst]])?);
            }
            for (e, (&n, &feat)) in events.iter().zip(negatives.iter().zip(&feat_ids)) {
                let nf = match self.settings.neg_features {
                    NegFeatures::Reuse => feat,
                    NegFeatures::Zeros => tape.leaf(Tensor::zeros(&[dims.edge_dim])),
                };
                rows.push(tape.concat(&[reprs[&e.src], nf, reprs[&n]])?);
            }
            let stacked = tape.stack_rows(&rows)?;
            let logits = mlp_forward(&mut tape, &bound, &self.model.link_decoder, stacked)?;
            let probs = tape.sigmoid(logits);
            let clamped = tape.clamp(probs, c::<T>(CLAMP_EPS), c::<T>(1.0 - CLAMP_EPS));
            {
                let vals = tape.value(clamped).data();
                pos_probs = vals[..b].iter().map(|&p| p.into_f64()).collect();
                neg_probs = vals[b..].iter().map(|&p| p.into_f64()).collect();
            }
            infer_ms = infer_t0.elapsed().as_secs_f64() * 1e3;

            // per pair: -(log p_pos + log(1 - p_neg)), averaged over pairs
            let logp = tape.log(clamped);
            let flipped = tape.affine(clamped, -T::one(), T::one());
            let logq = tape.log(flipped);
            let mut mask = vec![T::one(); b];
            mask.extend(vec![T::zero(); b]);
            let inv: Vec<T> = mask.iter().map(|&m| T::one() - m).collect();
            let mask = tape.leaf(Tensor::from_rows(2 * b, 1, mask)?);
            let inv = tape.leaf(Tensor::from_rows(2 * b, 1, inv)?);
            let pos_term = tape.mul(mask, logp)?;
            let neg_term = tape.mul(inv, logq)?;
            let both = tape.add(pos_term, neg_term)?;
            let mean = tape.mean_all(both);
            let mut total = tape.affine(mean, c::<T>(-2.0), T::zero());

            if matches!(mode, BatchMode::Probe) {
                if let Some((ce, _, _)) = self.node_loss_on(&mut tape, &bound, events, &reprs)? {
                    total = tape.add(total, ce)?;
                }
            }
            loss = Some(total);
        }

        Ok(BatchForward {
            tape,
            bound,
            loss,
            pos_probs,
            neg_probs,
            commits,
            reprs,
            touched,
            infer_ms,
        })
    }

    /// Node-decoder loss over this batch's labeled events, on the main tape.
    fn node_loss_on(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        events: &[Event],
        reprs: &BTreeMap<usize, ValueId>,
    ) -> Result<Option<(ValueId, Vec<f64>, Vec<bool>)>> {
        let labeled: Vec<(usize, bool)> = events
            .iter()
            .filter_map(|e| e.label.map(|l| (e.src, l != 0)))
            .collect();
        if labeled.is_empty() {
            return Ok(None);
        }
        let rows: Vec<ValueId> = labeled.iter().map(|&(src, _)| reprs[&src]).collect();
        let x = tape.stack_rows(&rows)?;
        let logits = mlp_forward(tape, bound, &self.model.node_decoder, x)?;
        let labels: Vec<bool> = labeled.iter().map(|&(_, l)| l).collect();
        let (loss, scores) = cross_entropy(tape, logits, &labels, self.model.dims.classes)?;
        Ok(Some((loss, scores, labels)))
    }

    /// Writes the batch back into the stores: commit updated memories, cache
    /// representations, index the new edges, then disseminate each event's
    /// messages from both endpoints through the k-hop temporal neighborhood.
    fn apply_batch(&mut self, fwd: &BatchForward<T>, events: &[Event]) -> Result<()> {
        let dims = self.model.dims;
        for cm in &fwd.commits {
            let batch = fwd.tape.value(cm.batch);
            let row = batch.data()[cm.row * dims.dim..(cm.row + 1) * dims.dim].to_vec();
            self.memory.commit(cm.node, cm.hop, Tensor::vector(row), cm.latest_t)?;
        }
        for (&node, &z) in &fwd.reprs {
            self.memory.cache_repr(node, fwd.tape.value(z).clone())?;
        }
        for e in events {
            self.index.insert_edge(e.src, e.dst, e.t)?;
        }

        let mut anchor_msgs: BTreeMap<usize, Vec<(Tensor<T>, f64)>> = BTreeMap::new();
        let mut anchor_time: BTreeMap<usize, f64> = BTreeMap::new();
        for e in events {
            let zi = fwd.tape.value(fwd.reprs[&e.src]);
            let zj = fwd.tape.value(fwd.reprs[&e.dst]);
            let feat = feat_tensor::<T>(e);
            let (mi, mj) = generate_messages(zi, &feat, zj);
            anchor_msgs.entry(e.src).or_default().push((mi, e.t));
            anchor_msgs.entry(e.dst).or_default().push((mj, e.t));
            for node in [e.src, e.dst] {
                let at = anchor_time.entry(node).or_insert(f64::NEG_INFINITY);
                *at = at.max(e.t);
            }
        }
        for (&anchor, msgs) in &anchor_msgs {
            let deliveries = disseminate(
                &self.index,
                anchor,
                anchor_time[&anchor],
                self.settings.n_neighbors,
                dims.hops,
            );
            for d in &deliveries {
                for (payload, t) in msgs {
                    self.memory.stage_message(d.node, d.hop, payload, *t, d.paths)?;
                }
            }
        }
        Ok(())
    }

    /// Runs one batch end to end and returns its scores and loss.
    pub fn process_batch(
        &mut self,
        events: &[Event],
        mode: BatchMode,
        rng: &mut StdRng,
        tape_seed: u64,
        batch_id: usize,
    ) -> Result<BatchResult> {
        let negatives = if mode.link() {
            sample_negatives(events, &self.dst_range, rng)?
        } else {
            Vec::new()
        };
        let fwd = self.forward_batch(events, &negatives, mode, tape_seed)?;

        let mut loss_value = match fwd.loss {
            Some(id) => fwd.tape.value(id).item().into_f64(),
            None => 0.0,
        };
        if !loss_value.is_finite() {
            return Err(Error::usage(format!(
                "non-finite loss {loss_value} in batch {batch_id}; touched nodes {:?}",
                fwd.touched
            )));
        }
        if matches!(mode, BatchMode::TrainLink) {
            let grads = fwd.tape.backprop(fwd.loss.expect("link loss"))?;
            let g = fwd.bound.gradients(&grads);
            self.adam.step(self.model.store.tensors_mut(), &g)?;
        }

        let mut node_scores = Vec::new();
        let mut node_labels = Vec::new();
        let mut infer_ms = fwd.infer_ms;
        if matches!(mode, BatchMode::TrainNode | BatchMode::EvalNode) {
            let labeled: Vec<(usize, bool)> = events
                .iter()
                .filter_map(|e| e.label.map(|l| (e.src, l != 0)))
                .collect();
            if !labeled.is_empty() {
                let dims = self.model.dims;
                let infer_t0 = Instant::now();
                // decoder-only tape over detached representations
                let mut dt = Tape::new();
                let nd = &self.model.node_decoder;
                let wb = [nd.w1, nd.b1, nd.w2, nd.b2]
                    .map(|id| dt.leaf(self.model.store.get(id).clone()));
                let mut rows = Vec::with_capacity(labeled.len() * dims.dim);
                for &(src, _) in &labeled {
                    rows.extend_from_slice(fwd.tape.value(fwd.reprs[&src]).data());
                }
                let x = dt.leaf(Tensor::from_rows(labeled.len(), dims.dim, rows)?);
                let logits = mlp_apply(&mut dt, wb[0], wb[1], wb[2], wb[3], x)?;
                node_labels = labeled.iter().map(|&(_, l)| l).collect();
                let (ce, scores) = cross_entropy(&mut dt, logits, &node_labels, dims.classes)?;
                infer_ms = infer_t0.elapsed().as_secs_f64() * 1e3;
                node_scores = scores;
                loss_value = dt.value(ce).item().into_f64();
                if !loss_value.is_finite() {
                    return Err(Error::usage(format!(
                        "non-finite node loss in batch {batch_id}; touched nodes {:?}",
                        fwd.touched
                    )));
                }
                if matches!(mode, BatchMode::TrainNode) {
                    let grads = dt.backprop(ce)?;
                    let g: Vec<Tensor<T>> = wb.iter().map(|&id| grads.wrt(id)).collect();
                    let ids = [nd.w1, nd.b1, nd.w2, nd.b2];
                    let mut subset: Vec<Tensor<T>> =
                        ids.iter().map(|&id| self.model.store.get(id).clone()).collect();
                    self.node_adam.step(&mut subset, &g)?;
                    for (&id, t) in ids.iter().zip(subset) {
                        self.model.store.set(id, t);
                    }
                }
            }
        }

        self.apply_batch(&fwd, events)?;
        Ok(BatchResult {
            loss: loss_value,
            pos_probs: fwd.pos_probs,
            neg_probs: fwd.neg_probs,
            node_scores,
            node_labels,
            infer_ms,
        })
    }

    /// One pass over `range` with learning, returning training-stream
    /// metrics (scores are taken before each batch's optimizer step).
    pub fn train_epoch(
        &mut self,
        log: &EventLog,
        range: Range<usize>,
        epoch: usize,
    ) -> Result<RunMetrics> {
        self.run_epoch(log, range, epoch, "train", BatchMode::TrainLink)
    }

    /// Streams `range` without parameter updates. Snapshot and restore
    /// around this call to keep the training state; the stream state is
    /// advanced by design so scores stay causal.
    pub fn evaluate(
        &mut self,
        log: &EventLog,
        range: Range<usize>,
        epoch: usize,
        split: &str,
        task: Task,
    ) -> Result<RunMetrics> {
        let mode = match task {
            Task::Link => BatchMode::EvalLink,
            Task::Node => BatchMode::EvalNode,
        };
        self.run_epoch(log, range, epoch, split, mode)
    }

    fn run_epoch(
        &mut self,
        log: &EventLog,
        range: Range<usize>,
        epoch: usize,
        split: &str,
        mode: BatchMode,
    ) -> Result<RunMetrics> {
        let start = Instant::now();
        let purpose = match (split, mode) {
            ("train", _) => 1u64,
            ("val", _) => 2,
            ("test", _) => 3,
            _ => 4,
        };
        let mut rng =
            StdRng::seed_from_u64(derive(self.settings.seed, purpose * 1_000_003 + epoch as u64));
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut node_scores = Vec::new();
        let mut node_labels = Vec::new();
        let mut loss_sum = 0.0;
        let mut weight = 0usize;
        let mut infer_sum = 0.0;
        let mut batches = 0usize;
        let chunk = match mode {
            BatchMode::TrainLink | BatchMode::TrainNode => self.settings.batch_size,
            _ => self.settings.eval_batch.unwrap_or(self.settings.batch_size),
        };
        let batch_list: Vec<&[Event]> = log.batches(range, chunk).collect();
        for (bi, batch) in batch_list.into_iter().enumerate() {
            let tape_seed = derive(
                self.settings.seed,
                (purpose * 131 + 7) * 1_000_003 + (epoch as u64) * 4_099 + bi as u64,
            );
            let r = self.process_batch(batch, mode, &mut rng, tape_seed, bi)?;
            loss_sum += r.loss * batch.len() as f64;
            weight += batch.len();
            pos.extend(r.pos_probs);
            neg.extend(r.neg_probs);
            node_scores.extend(r.node_scores);
            node_labels.extend(r.node_labels);
            infer_sum += r.infer_ms;
            batches += 1;
        }
        let loss = loss_sum / weight as f64;
        let (acc, ap, auc) = match mode {
            BatchMode::TrainNode | BatchMode::EvalNode => {
                if node_scores.is_empty() {
                    return Err(Error::usage(format!("no labeled events in the {split} split")));
                }
                (
                    accuracy(&node_scores, &node_labels),
                    average_precision(&node_scores, &node_labels)?,
                    roc_auc(&node_scores, &node_labels)?,
                )
            }
            _ => link_metrics(&pos, &neg)?,
        };
        Ok(RunMetrics {
            epoch,
            split: split.to_string(),
            loss,
            acc,
            ap,
            auc,
            train_s: if matches!(mode, BatchMode::TrainLink | BatchMode::TrainNode) {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            infer_ms_per_batch: infer_sum / batches.max(1) as f64,
        })
    }

    /// Full link-prediction protocol: epoch replays with per-epoch
    /// validation, early stopping on validation AP, best-checkpoint restore,
    /// then a single causal test evaluation.
    pub fn fit(&mut self, log: &EventLog) -> Result<FitResult> {
        self.fit_inner(log, Task::Link)
    }

    /// Node-classification phase over an already link-trained model: only
    /// the node decoder learns; early stopping watches validation ROC-AUC.
    pub fn fit_node(&mut self, log: &EventLog) -> Result<FitResult> {
        self.fit_inner(log, Task::Node)
    }

    fn fit_inner(&mut self, log: &EventLog, task: Task) -> Result<FitResult> {
        let (tr, va, te) = log.chronological_split();
        if tr.is_empty() || va.is_empty() || te.is_empty() {
            return Err(Error::usage(format!(
                "chronological split produced an empty part over {} events",
                log.len()
            )));
        }
        let train_mode = match task {
            Task::Link => BatchMode::TrainLink,
            Task::Node => BatchMode::TrainNode,
        };
        let mut stopper = EarlyStopper::new(self.settings.patience);
        let mut best: Option<BestState<T>> = None;
        let mut history = Vec::new();
        for epoch in 1..=self.settings.max_epochs {
            self.reset_state();
            let tr_rec = self.run_epoch(log, tr.clone(), epoch, "train", train_mode)?;
            let snap = self.snapshot();
            let va_rec = self.evaluate(log, va.clone(), epoch, "val", task)?;
            self.restore(&snap);
            // the node task is judged on ROC-AUC, the link task on AP
            let val_score = match task {
                Task::Link => va_rec.ap,
                Task::Node => va_rec.auc,
            };
            history.push(tr_rec);
            history.push(va_rec);
            if val_score > stopper.best_value() {
                best = Some(BestState {
                    tensors: self.model.store.tensors().to_vec(),
                    memory: self.memory.snapshot(),
                    index: self.index.clone(),
                });
            }
            if stopper.observe(epoch, val_score) {
                break;
            }
        }
        let best = best.expect("at least one epoch ran");
        for (slot, t) in self.model.store.tensors_mut().iter_mut().zip(best.tensors) {
            *slot = t;
        }
        self.memory.restore(&best.memory);
        self.index = best.index;
        self.saved = Some(SavedPoint {
            memory: best.memory,
            cursor: tr.end,
            best_epoch: stopper.best_epoch(),
        });
        // stream validation events to advance state causally into the test
        // period, then report test metrics exactly once
        let _ = self.evaluate(log, va, stopper.best_epoch(), "val", task)?;
        let test = self.evaluate(log, te, stopper.best_epoch(), "test", task)?;
        history.push(test.clone());
        Ok(FitResult { history, best_epoch: stopper.best_epoch(), test })
    }
}

/// Accuracy, AP, and ROC-AUC over pooled positive and negative scores.
pub fn link_metrics(pos: &[f64], neg: &[f64]) -> Result<(f64, f64, f64)> {
    let mut scores = Vec::with_capacity(pos.len() + neg.len());
    scores.extend_from_slice(pos);
    scores.extend_from_slice(neg);
    let mut labels = vec![true; pos.len()];
    labels.extend(vec![false; neg.len()]);
    Ok((
        accuracy(&scores, &labels),
        average_precision(&scores, &labels)?,
        roc_auc(&scores, &labels)?,
    ))
}

/// Softmax cross-entropy with clamped probabilities; returns the loss id and
/// the class-1 probability per row for metric streams.
fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: ValueId,
    labels: &[bool],
    classes: usize,
) -> Result<(ValueId, Vec<f64>)> {
    let probs = tape.softmax_rows(logits);
    let scores: Vec<f64> = tape
        .value(probs)
        .data()
        .chunks(classes)
        .map(|row| row[1].into_f64())
        .collect();
    let clamped = tape.clamp(probs, c::<T>(CLAMP_EPS), c::<T>(1.0 - CLAMP_EPS));
    let logp = tape.log(clamped);
    let mut onehot = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + usize::from(l)] = T::one();
    }
    let mask = tape.leaf(Tensor::from_rows(labels.len(), classes, onehot)?);
    let picked = tape.mul(mask, logp)?;
    let mean = tape.mean_all(picked);
    let loss = tape.affine(mean, -c::<T>(classes as f64), T::zero());
    Ok((loss, scores))
}

fn feat_tensor<T: Scalar>(e: &Event) -> Tensor<T> {
    Tensor::vector(e.features.iter().map(|&f| c::<T>(f as f64)).collect())
}
