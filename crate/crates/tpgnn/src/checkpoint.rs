//! Binary checkpoints: best-epoch parameters plus the frozen stream state.
//!
//! A checkpoint captures everything needed to re-evaluate a trained run on
//! the same event log: architecture dims, the run seed, every parameter
//! tensor, the per-node memory state at the best epoch, and the number of
//! events that had been consumed at that point. The neighbor index is not
//! serialized; it is a pure function of the event prefix and is rebuilt by
//! replaying the first `cursor` events at load time.
//!
//! All floats are stored as f64 bit patterns, so an f32 run round-trips
//! exactly (every f32 is representable in f64). Loading requires the same
//! precision the checkpoint was written with.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::ctdg::EventLog;
use crate::error::{Error, Result};
use crate::memory::{MailboxSlot, MemorySnapshot, NodeState};
use crate::model::{Model, ModelDims};
use crate::neighbors::NeighborIndex;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;
use crate::training::{Engine, TrainSettings};

const MAGIC: &[u8; 4] = b"TPGN";
const VERSION: u32 = 1;

/// Contents of a checkpoint file, decoded but not yet bound to a log.
pub struct Loaded<T: Scalar> {
    pub model: Model<T>,
    pub memory: MemorySnapshot<T>,
    pub cursor: usize,
    pub best_epoch: usize,
    pub seed: u64,
}

/// Writes `model` and the given stream state to `path`.
pub fn save<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    memory: &MemorySnapshot<T>,
    cursor: usize,
    best_epoch: usize,
    seed: u64,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[std::mem::size_of::<T>() as u8, 0, 0, 0])?;

    let d = model.dims;
    for v in [d.dim, d.edge_dim, d.hops, d.heads, d.blocks, d.bias_hidden, d.classes] {
        put_u64(&mut w, v as u64)?;
    }
    put_u64(&mut w, seed)?;
    put_u64(&mut w, best_epoch as u64)?;
    put_u64(&mut w, cursor as u64)?;

    let store = &model.store;
    put_u64(&mut w, store.tensors().len() as u64)?;
    for (name, tensor) in store.names().iter().zip(store.tensors()) {
        put_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        put_u64(&mut w, tensor.shape().len() as u64)?;
        for &s in tensor.shape() {
            put_u64(&mut w, s as u64)?;
        }
        for x in tensor.to_f64_vec() {
            put_f64(&mut w, x)?;
        }
    }

    let states = memory.states();
    put_u64(&mut w, states.len() as u64)?;
    for st in states {
        for mem in &st.memories {
            for x in mem.to_f64_vec() {
                put_f64(&mut w, x)?;
            }
        }
        for x in st.prev_repr.to_f64_vec() {
            put_f64(&mut w, x)?;
        }
        for &t in &st.last_update {
            put_f64(&mut w, t)?;
        }
        for mb in &st.mailboxes {
            put_u64(&mut w, mb.count)?;
            put_f64(&mut w, mb.latest_t)?;
            for x in mb.mean.to_f64_vec() {
                put_f64(&mut w, x)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save`] with the same scalar type.
pub fn load<T: Scalar>(path: &Path) -> Result<Loaded<T>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(4)? != MAGIC {
        return Err(Error::usage("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::usage(format!("unsupported checkpoint version {version}")));
    }
    let prec = cur.take(4)?[0] as usize;
    if prec != std::mem::size_of::<T>() {
        return Err(Error::usage(format!(
            "checkpoint holds {}-bit floats, run requested {}-bit; pass the matching precision",
            prec * 8,
            std::mem::size_of::<T>() * 8
        )));
    }

    let mut dim7 = [0usize; 7];
    for v in dim7.iter_mut() {
        *v = cur.u64()? as usize;
    }
    let dims = ModelDims {
        dim: dim7[0],
        edge_dim: dim7[1],
        hops: dim7[2],
        heads: dim7[3],
        blocks: dim7[4],
        bias_hidden: dim7[5],
        classes: dim7[6],
    };
    let seed = cur.u64()?;
    let best_epoch = cur.u64()? as usize;
    let cursor = cur.u64()? as usize;

    let mut model: Model<T> = Model::init(dims, seed)?;
    let n_tensors = cur.u64()? as usize;
    if n_tensors != model.store.tensors().len() {
        return Err(Error::usage(format!(
            "checkpoint holds {n_tensors} tensors, architecture registers {}",
            model.store.tensors().len()
        )));
    }
    for i in 0..n_tensors {
        let name_len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::usage("checkpoint tensor name is not utf-8"))?
            .to_string();
        if name != model.store.names()[i] {
            return Err(Error::usage(format!(
                "tensor {i} is {:?} in the checkpoint but {:?} in the architecture",
                name,
                model.store.names()[i]
            )));
        }
        let rank = cur.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        if shape != model.store.tensors()[i].shape() {
            return Err(Error::usage(format!(
                "tensor {name:?} has shape {shape:?} in the checkpoint, expected {:?}",
                model.store.tensors()[i].shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let slot = &mut model.store.tensors_mut()[i];
        for j in 0..numel {
            slot.data_mut()[j] = c::<T>(cur.f64()?);
        }
    }

    let num_nodes = cur.u64()? as usize;
    let (hops, dim, msg_dim) = (dims.hops, dims.dim, dims.msg_dim());
    let mut states = Vec::with_capacity(num_nodes);
    for _ in 0..num_nodes {
        let mut memories = Vec::with_capacity(hops);
        for _ in 0..hops {
            memories.push(cur.tensor::<T>(dim)?);
        }
        let prev_repr = cur.tensor::<T>(dim)?;
        let mut last_update = Vec::with_capacity(hops);
        for _ in 0..hops {
            last_update.push(cur.f64()?);
        }
        let mut mailboxes = Vec::with_capacity(hops);
        for _ in 0..hops {
            let count = cur.u64()?;
            let latest_t = cur.f64()?;
            let mean = cur.tensor::<T>(msg_dim)?;
            mailboxes.push(MailboxSlot { mean, count, latest_t });
        }
        states.push(NodeState { memories, prev_repr, last_update, mailboxes });
    }
    if cur.pos != bytes.len() {
        return Err(Error::usage(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(Loaded {
        model,
        memory: MemorySnapshot::from_states(states),
        cursor,
        best_epoch,
        seed,
    })
}

/// Binds a loaded checkpoint to its event log: builds an engine, restores
/// the per-node memories, and replays the first `cursor` events into a
/// fresh neighbor index. Evaluating the remaining splits from this engine
/// reproduces the training run's reported metrics.
pub fn resume_engine<T: Scalar>(
    loaded: Loaded<T>,
    log: &EventLog,
    settings: TrainSettings,
) -> Result<Engine<T>> {
    if loaded.cursor > log.len() {
        return Err(Error::usage(format!(
            "checkpoint cursor {} exceeds the {}-event log",
            loaded.cursor,
            log.len()
        )));
    }
    if loaded.memory.states().len() != log.num_nodes() {
        return Err(Error::usage(format!(
            "checkpoint covers {} nodes, log has {}",
            loaded.memory.states().len(),
            log.num_nodes()
        )));
    }
    let mut engine = Engine::new(loaded.model, log, settings)?;
    let (mem, idx) = engine.state_mut();
    mem.restore(&loaded.memory);
    *idx = NeighborIndex::new(log.num_nodes());
    for e in &log.events()[..loaded.cursor] {
        idx.insert_edge(e.src, e.dst, e.t)?;
    }
    Ok(engine)
}

fn put_u64(w: &mut impl Write, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, x: f64) -> Result<()> {
    put_u64(w, x.to_bits())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::usage("checkpoint file is truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn tensor<T: Scalar>(&mut self, len: usize) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(c::<T>(self.f64()?));
        }
        Ok(Tensor::vector(data))
    }
}
