//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//! `"MOCL"`, u32 version, variant string, u8 precision (bytes per real),
//! u64 schedule step, u64 task cursor, metadata JSON string, RNG table,
//! counter table, tensor table. Strings are u32-length-prefixed UTF-8.
//! RNG entries hold the ChaCha seed, stream and word position; tensor
//! entries hold name, rank, u64 extents, precision byte and raw values.

use std::path::Path;

use mocl_autodiff::{BatchStats, Real, Tensor, REAL_BYTES};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::layers::{Backbone, BackboneKind};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::trainer::{Snapshot, TrainerState};

pub const MAGIC: &[u8; 4] = b"MOCL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RngEntry {
    pub name: String,
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngEntry {
    pub fn capture(name: &str, rng: &ChaCha8Rng) -> Self {
        Self {
            name: name.to_string(),
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub variant: String,
    pub precision: u8,
    pub schedule_step: u64,
    pub task_cursor: u64,
    pub metadata: serde_json::Value,
    pub rngs: Vec<RngEntry>,
    pub counters: Vec<(String, u64)>,
    pub tensors: Vec<(String, Tensor)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| CoreError::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CoreError::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn new(variant: &str) -> Self {
        Self {
            variant: variant.to_string(),
            precision: REAL_BYTES,
            schedule_step: 0,
            task_cursor: 0,
            metadata: serde_json::Value::Null,
            rngs: Vec::new(),
            counters: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (n, t) in params.iter() {
            self.tensors.push((format!("{prefix}{n}"), t.clone()));
        }
    }

    pub fn params(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in &self.tensors {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CoreError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| CoreError::Checkpoint(format!("missing counter `{name}`")))
    }

    pub fn rng(&self, name: &str) -> Result<ChaCha8Rng> {
        self.rngs
            .iter()
            .find(|r| r.name == name)
            .map(RngEntry::restore)
            .ok_or_else(|| CoreError::Checkpoint(format!("missing RNG stream `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.variant);
        w.u8(self.precision);
        w.u64(self.schedule_step);
        w.u64(self.task_cursor);
        w.str(&serde_json::to_string(&self.metadata).expect("JSON value serializes"));
        w.u32(self.rngs.len() as u32);
        for r in &self.rngs {
            w.str(&r.name);
            w.0.extend_from_slice(&r.seed);
            w.u64(r.stream);
            w.0.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        w.u32(self.counters.len() as u32);
        for (n, v) in &self.counters {
            w.str(n);
            w.u64(*v);
        }
        w.u32(self.tensors.len() as u32);
        for (n, t) in &self.tensors {
            w.str(n);
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.u8(REAL_BYTES);
            for v in t.data() {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(CoreError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let variant = r.str()?;
        let precision = r.u8()?;
        if precision != REAL_BYTES {
            return Err(CoreError::Checkpoint(format!(
                "checkpoint stores {}-byte reals, this build uses {REAL_BYTES}",
                precision
            )));
        }
        let schedule_step = r.u64()?;
        let task_cursor = r.u64()?;
        let metadata =
            serde_json::from_str(&r.str()?).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        let mut rngs = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            rngs.push(RngEntry {
                name,
                seed,
                stream,
                word_pos,
            });
        }
        let mut counters = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            counters.push((name, r.u64()?));
        }
        let mut tensors = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let p = r.u8()?;
            if p != REAL_BYTES {
                return Err(CoreError::Checkpoint(format!(
                    "tensor `{name}` stores {p}-byte reals"
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * REAL_BYTES as usize)?;
            let data = raw
                .chunks_exact(REAL_BYTES as usize)
                .map(|c| Real::from_le_bytes(c.try_into().expect("real width")))
                .collect();
            tensors.push((
                name.clone(),
                Tensor::new(shape, data)
                    .map_err(|e| CoreError::Checkpoint(format!("{name}: {e}")))?,
            ));
        }
        if r.at != bytes.len() {
            return Err(CoreError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(Self {
            variant,
            precision,
            schedule_step,
            task_cursor,
            metadata,
            rngs,
            counters,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn push_stats(ck: &mut Checkpoint, stats: &[BatchStats]) {
    for (i, s) in stats.iter().enumerate() {
        ck.tensors.push((
            format!("bn{i}.running_mean"),
            Tensor::vector(s.mean.clone()),
        ));
        ck.tensors
            .push((format!("bn{i}.running_var"), Tensor::vector(s.var.clone())));
    }
}

fn read_stats(ck: &Checkpoint) -> Vec<BatchStats> {
    let mut out = Vec::new();
    while let (Ok(m), Ok(v)) = (
        ck.tensor(&format!("bn{}.running_mean", out.len())),
        ck.tensor(&format!("bn{}.running_var", out.len())),
    ) {
        out.push(BatchStats {
            mean: m.data().to_vec(),
            var: v.data().to_vec(),
        });
    }
    out
}

fn push_w(ck: &mut Checkpoint, w: &[Real]) {
    if !w.is_empty() {
        ck.tensors.push(("w".into(), Tensor::vector(w.to_vec())));
    }
}

fn read_w(ck: &Checkpoint) -> Vec<Real> {
    ck.tensor("w")
        .map(|t| t.data().to_vec())
        .unwrap_or_default()
}

fn push_adam(ck: &mut Checkpoint, prefix: &str, opt: &Adam) {
    ck.push_params(&format!("{prefix}.m."), &opt.m);
    ck.push_params(&format!("{prefix}.v."), &opt.v);
    ck.counters.push((format!("{prefix}.step"), opt.step));
}

fn read_adam(ck: &Checkpoint, prefix: &str, like: &ParamSet, weight_decay: Real) -> Result<Adam> {
    let mut opt = Adam::new(like, weight_decay);
    opt.m = ck.params(&format!("{prefix}.m."));
    opt.v = ck.params(&format!("{prefix}.v."));
    opt.step = ck.counter(&format!("{prefix}.step"))?;
    if opt.m.len() != like.len() || opt.v.len() != like.len() {
        return Err(CoreError::Checkpoint(format!(
            "optimizer `{prefix}` does not match its parameters"
        )));
    }
    Ok(opt)
}

/// Full training state, resumable.
pub fn state_to_checkpoint(
    variant: &str,
    state: &TrainerState,
    metadata: serde_json::Value,
) -> Checkpoint {
    let mut ck = Checkpoint::new(variant);
    ck.schedule_step = state.schedule_step;
    ck.task_cursor = state.task_cursor as u64;
    ck.metadata = metadata;
    ck.rngs
        .push(RngEntry::capture("episode", &state.episode_rng));
    ck.counters
        .push(("dropout.seed".into(), state.dropout_seed));
    ck.counters
        .push(("dropout.counter".into(), state.dropout_counter));
    ck.counters.push(("w_writes".into(), state.w_writes));
    ck.push_params("mu.", &state.mu);
    ck.push_params("psi.", &state.psi);
    push_w(&mut ck, &state.w);
    push_stats(&mut ck, &state.running);
    push_adam(&mut ck, "adam_mu", &state.opt_mu);
    push_adam(&mut ck, "adam_psi", &state.opt_psi);
    if let Some(opt) = &state.opt_w {
        push_adam(&mut ck, "adam_w", opt);
    }
    ck
}

pub fn state_from_checkpoint(ck: &Checkpoint, weight_decay: Real) -> Result<TrainerState> {
    let mu = ck.params("mu.");
    let psi = ck.params("psi.");
    let w = read_w(ck);
    let opt_w = if ck.counter("adam_w.step").is_ok() {
        let mut like = ParamSet::new();
        like.push("w", Tensor::vector(w.clone()));
        Some(read_adam(ck, "adam_w", &like, weight_decay)?)
    } else {
        None
    };
    Ok(TrainerState {
        opt_mu: read_adam(ck, "adam_mu", &mu, weight_decay)?,
        opt_psi: read_adam(ck, "adam_psi", &psi, weight_decay)?,
        opt_w,
        running: read_stats(ck),
        mu,
        psi,
        w,
        schedule_step: ck.schedule_step,
        episode_rng: ck.rng("episode")?,
        dropout_seed: ck.counter("dropout.seed")?,
        dropout_counter: ck.counter("dropout.counter")?,
        task_cursor: ck.task_cursor as usize,
        w_writes: ck.counter("w_writes")?,
    })
}

pub fn snapshot_to_checkpoint(variant: &str, snap: &Snapshot) -> Checkpoint {
    let mut ck = Checkpoint::new(variant);
    ck.task_cursor = snap.task as u64;
    ck.push_params("mu.", &snap.mu);
    ck.push_params("psi.", &snap.psi);
    push_w(&mut ck, &snap.w);
    push_stats(&mut ck, &snap.running);
    ck
}

pub fn snapshot_from_checkpoint(ck: &Checkpoint) -> Snapshot {
    Snapshot {
        task: ck.task_cursor as usize,
        mu: ck.params("mu."),
        psi: ck.params("psi."),
        w: read_w(ck),
        running: read_stats(ck),
    }
}

pub const ENCODER_VARIANT: &str = "task_encoder";

pub fn encoder_to_checkpoint(backbone: &Backbone, metadata: serde_json::Value) -> Checkpoint {
    let mut ck = Checkpoint::new(ENCODER_VARIANT);
    ck.metadata = serde_json::json!({
        "backbone": backbone.kind,
        "input_shape": backbone.input_shape,
        "pretraining": metadata,
    });
    ck.push_params("encoder.", &backbone.params);
    ck
}

pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<Backbone> {
    if ck.variant != ENCODER_VARIANT {
        return Err(CoreError::Checkpoint(format!(
            "`{}` checkpoint is not a task encoder",
            ck.variant
        )));
    }
    let kind: BackboneKind = serde_json::from_value(ck.metadata["backbone"].clone())
        .map_err(|e| CoreError::Checkpoint(format!("backbone kind: {e}")))?;
    let input_shape: [usize; 3] = serde_json::from_value(ck.metadata["input_shape"].clone())
        .map_err(|e| CoreError::Checkpoint(format!("input shape: {e}")))?;
    Ok(Backbone {
        kind,
        input_shape,
        params: ck.params("encoder."),
    })
}
