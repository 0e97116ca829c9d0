//! Binary checkpoints of the engine's serving state: magic, format
//! version, architecture, the main net, temporary nets, memories, and the
//! status dictionary. All integers and float bit patterns are little
//! endian, maps are written in key order, so saving the same state twice
//! yields identical bytes.

use crate::nn::{Arch, NetParams};
use crate::protocol::{
    EngineState, EpisodicMemory, Instruction, ModelRegistry, Request, TaskId, TaskStatusMap,
};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CLPU";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic in {path}")]
    BadMagic { path: String },
    #[error("unsupported checkpoint version {found} in {path}, expected {VERSION}")]
    Version { path: String, found: u32 },
    #[error("truncated checkpoint {path}")]
    Truncated { path: String },
    #[error("trailing bytes in checkpoint {path}")]
    Trailing { path: String },
    #[error("malformed checkpoint {path}: {msg}")]
    Malformed { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a checkpoint holds: everything the agent would serve requests
/// from, without run bookkeeping like seeds or observers.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub registry: ModelRegistry,
    pub status: TaskStatusMap,
}

impl CheckpointState {
    pub fn arch(&self) -> &Arch {
        self.registry.main.arch()
    }

    /// Same scan as the live engine's: every stored component keyed by the
    /// task. Must be empty for a forgotten task.
    pub fn records_keyed_by(&self, task: TaskId) -> Vec<String> {
        let mut found = Vec::new();
        if self.status.contains(task) {
            found.push(format!("status[{task}]"));
        }
        if self.registry.temp.contains_key(&task) {
            found.push(format!("temp[{task}]"));
        }
        if self.registry.memories.contains_key(&task) {
            found.push(format!("memory[{task}]"));
        }
        found
    }

    /// The net that answers queries about a task, temp first, main as the
    /// fallback, mirroring the live engine.
    pub fn serving_model(&self, task: TaskId) -> &NetParams {
        self.registry.temp.get(&task).unwrap_or(&self.registry.main)
    }
}

// ── encoding ──────────────────────────────────────────────────────────────

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_params(out: &mut Vec<u8>, p: &NetParams) {
    for l in 0..p.arch().n_layers() {
        put_f32s(out, &p.weights()[l]);
        put_f32s(out, &p.biases()[l]);
    }
}

fn put_memory(out: &mut Vec<u8>, mem: &EpisodicMemory) {
    put_u32(out, mem.len() as u32);
    put_u32(out, mem.d_in as u32);
    put_u32(out, mem.n_classes as u32);
    put_u32(out, mem.mask.len() as u32);
    for &m in &mem.mask {
        put_u32(out, m as u32);
    }
    put_f32s(out, &mem.x);
    for &y in &mem.y {
        put_u32(out, y as u32);
    }
    put_f32s(out, &mem.h);
}

/// Serializes the serving state to the checkpoint wire format.
pub fn encode_checkpoint(registry: &ModelRegistry, status: &TaskStatusMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let dims = registry.main.arch().dims();
    put_u32(&mut out, dims.len() as u32);
    for &d in dims {
        put_u32(&mut out, d as u32);
    }
    put_params(&mut out, &registry.main);
    put_u32(&mut out, registry.temp.len() as u32);
    for (task, net) in &registry.temp {
        put_u64(&mut out, *task as u64);
        put_params(&mut out, net);
    }
    put_u32(&mut out, registry.memories.len() as u32);
    for (task, mem) in &registry.memories {
        put_u64(&mut out, *task as u64);
        put_memory(&mut out, mem);
    }
    put_u32(&mut out, status.len() as u32);
    for (task, entry) in status.iter() {
        put_u64(&mut out, task as u64);
        out.push(match entry.instruction {
            Instruction::R => 0,
            Instruction::T => 1,
            Instruction::F => unreachable!("status never holds F"),
        });
        put_u64(&mut out, entry.first_learned_at as u64);
    }
    out
}

// ── decoding ──────────────────────────────────────────────────────────────

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { path: self.path.to_owned() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn malformed(&self, msg: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed { path: self.path.to_owned(), msg: msg.into() }
    }
}

fn read_params(cur: &mut Cursor<'_>, arch: &Arch) -> Result<NetParams, CheckpointError> {
    let dims = arch.dims();
    let mut w = Vec::with_capacity(arch.n_layers());
    let mut b = Vec::with_capacity(arch.n_layers());
    for l in 0..arch.n_layers() {
        w.push(cur.f32s(dims[l + 1] * dims[l])?);
        b.push(cur.f32s(dims[l + 1])?);
    }
    NetParams::from_parts(arch.clone(), w, b).map_err(|e| cur.malformed(e.to_string()))
}

fn read_memory(cur: &mut Cursor<'_>) -> Result<EpisodicMemory, CheckpointError> {
    let n = cur.u32()? as usize;
    let d_in = cur.u32()? as usize;
    let n_classes = cur.u32()? as usize;
    let mask_len = cur.u32()? as usize;
    if n_classes == 0 || d_in == 0 || mask_len == 0 || mask_len > n_classes {
        return Err(cur.malformed("memory header out of range"));
    }
    let mut mask = Vec::with_capacity(mask_len);
    for _ in 0..mask_len {
        let m = cur.u32()? as usize;
        if m >= n_classes {
            return Err(cur.malformed(format!("mask label {m} outside {n_classes} classes")));
        }
        mask.push(m);
    }
    let x = cur.f32s(n * d_in)?;
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let label = cur.u32()? as usize;
        if label >= n_classes {
            return Err(cur.malformed(format!("label {label} outside {n_classes} classes")));
        }
        y.push(label);
    }
    let h = cur.f32s(n * n_classes)?;
    Ok(EpisodicMemory { x, y, h, d_in, n_classes, mask })
}

/// Parses checkpoint bytes; `path` only labels error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<CheckpointState, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.to_owned() });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { path: path.to_owned(), found: version });
    }
    let n_dims = cur.u32()? as usize;
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(cur.u32()? as usize);
    }
    let arch = Arch::new(dims).map_err(|e| cur.malformed(e.to_string()))?;
    let main = read_params(&mut cur, &arch)?;

    let n_temp = cur.u32()? as usize;
    let mut temp = BTreeMap::new();
    for _ in 0..n_temp {
        let task = cur.u64()? as TaskId;
        temp.insert(task, read_params(&mut cur, &arch)?);
    }

    let n_mem = cur.u32()? as usize;
    let mut memories = BTreeMap::new();
    for _ in 0..n_mem {
        let task = cur.u64()? as TaskId;
        memories.insert(task, read_memory(&mut cur)?);
    }

    let n_status = cur.u32()? as usize;
    let mut status = TaskStatusMap::new();
    for _ in 0..n_status {
        let task = cur.u64()? as TaskId;
        let instruction = match cur.u8()? {
            0 => Instruction::R,
            1 => Instruction::T,
            other => return Err(cur.malformed(format!("instruction byte {other}"))),
        };
        let first = cur.u64()? as usize;
        status
            .update_status(&Request::new(task, None, instruction), first)
            .map_err(|e| cur.malformed(e.to_string()))?;
    }

    if cur.pos != bytes.len() {
        return Err(CheckpointError::Trailing { path: path.to_owned() });
    }
    Ok(CheckpointState { registry: ModelRegistry { main, temp, memories }, status })
}

/// Writes the engine's serving state to disk.
pub fn save_checkpoint(state: &EngineState, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(&state.registry, &state.status))?;
    Ok(())
}

/// Reads a checkpoint back.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointState, CheckpointError> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
