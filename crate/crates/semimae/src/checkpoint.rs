//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! tag      12 bytes "SEMIMAE-CKPT" + u32 format version
//! config   u64 length + UTF-8 TOML (rendered flat keys)
//! layout   u64 count, then per parameter: name, u64 rank, dims, u64 offset,
//!          u8 group, u8 decay
//! values   u64 count + f64 array
//! adamw    beta1, beta2, eps, weight_decay (f64), u64 step, m, v
//! run      epoch, global_step, step_in_epoch (u64), best_metric (f64),
//!          rng streams, data cursor
//! trailer  SHA-256 of every preceding byte
//! ```

use std::fs;
use std::io;
use std::path::Path;

use semimae_core::data::DataCursor;
use semimae_core::nn::{ParamGroup, ParamSpec, ParamStore};
use semimae_core::optim::AdamW;
use semimae_core::rng::StreamState;
use semimae_core::{Error as CoreError, RngStreams, RunState, TrainConfig, Trainer};
use sha2::{Digest, Sha256};

use crate::config_io::{self, ConfigError};

pub const MAGIC: &[u8; 12] = b"SEMIMAE-CKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("corrupt checkpoint: {0}")]
    Integrity(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub state: RunState,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config: t.config.clone(),
            params: t.model.params.clone(),
            optimizer: t.optimizer.clone(),
            state: t.state.clone(),
        }
    }

    /// Rebuilds a trainer whose next step continues exactly where the saved
    /// one stopped.
    pub fn into_trainer(self, steps_per_epoch: usize) -> Result<Trainer> {
        let mut t = Trainer::new(self.config, steps_per_epoch)?;
        if t.model.params.specs() != self.params.specs() {
            return Err(CheckpointError::Incompatible(
                "parameter layout does not match the config".into(),
            ));
        }
        if self.optimizer.m.len() != self.params.len()
            || self.optimizer.v.len() != self.params.len()
        {
            return Err(CheckpointError::Incompatible(
                "optimizer state size does not match parameters".into(),
            ));
        }
        t.model.params = self.params;
        t.optimizer = self.optimizer;
        t.state = self.state;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_bytes(&mut w, config_io::render_config(&self.config).as_bytes());

        put_u64(&mut w, self.params.specs().len() as u64);
        for s in self.params.specs() {
            put_bytes(&mut w, s.name.as_bytes());
            put_u64(&mut w, s.shape.len() as u64);
            s.shape.iter().for_each(|&d| put_u64(&mut w, d as u64));
            put_u64(&mut w, s.offset as u64);
            w.push(group_code(s.group));
            w.push(s.decay as u8);
        }
        put_f64s(&mut w, self.params.values());

        let o = &self.optimizer;
        [o.beta1, o.beta2, o.eps, o.weight_decay]
            .iter()
            .for_each(|&x| put_f64(&mut w, x));
        put_u64(&mut w, o.step);
        put_f64s(&mut w, &o.m);
        put_f64s(&mut w, &o.v);

        let s = &self.state;
        put_u64(&mut w, s.epoch);
        put_u64(&mut w, s.global_step);
        put_u64(&mut w, s.step_in_epoch);
        put_f64(&mut w, s.best_metric);
        let streams = s.streams.snapshot();
        put_u64(&mut w, streams.len() as u64);
        for st in &streams {
            put_bytes(&mut w, st.name.as_bytes());
            w.extend_from_slice(&st.seed);
            put_u64(&mut w, st.stream);
            w.extend_from_slice(&st.word_pos.to_le_bytes());
        }
        put_usizes(&mut w, &s.cursor.unlabeled_order);
        put_u64(&mut w, s.cursor.unlabeled_pos as u64);
        put_usizes(&mut w, &s.cursor.labeled_order);
        put_u64(&mut w, s.cursor.labeled_pos as u64);

        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let tag_len = MAGIC.len() + 4;
        if bytes.len() < tag_len || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::Incompatible(
                "missing checkpoint tag".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[MAGIC.len()..tag_len].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Incompatible(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        if bytes.len() < tag_len + DIGEST_LEN {
            return Err(CheckpointError::Integrity("file is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Integrity("checksum mismatch".into()));
        }

        let mut r = Reader {
            buf: body,
            pos: tag_len,
        };
        let text =
            String::from_utf8(r.bytes()?.to_vec()).map_err(|_| integrity("config is not UTF-8"))?;
        let config = config_io::parse_config(&text)?;

        let n = r.len()?;
        let mut specs = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| integrity("parameter name is not UTF-8"))?;
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let offset = r.len()?;
            let group = group_from(r.u8()?)?;
            let decay = r.u8()? != 0;
            specs.push(ParamSpec {
                name,
                shape,
                offset,
                group,
                decay,
            });
        }
        let values = r.f64s()?;
        let params =
            ParamStore::from_parts(specs, values).map_err(|e| integrity(&e.to_string()))?;

        let (beta1, beta2, eps, weight_decay) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let step = r.u64()?;
        let (m, v) = (r.f64s()?, r.f64s()?);
        let optimizer = AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step,
            m,
            v,
        };

        let epoch = r.u64()?;
        let global_step = r.u64()?;
        let step_in_epoch = r.u64()?;
        let best_metric = r.f64()?;
        let count = r.len()?;
        let mut states = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| integrity("stream name is not UTF-8"))?;
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            states.push(StreamState {
                name,
                seed,
                stream,
                word_pos,
            });
        }
        let streams = RngStreams::restore(&states).map_err(|e| integrity(&e.to_string()))?;
        let cursor = DataCursor {
            unlabeled_order: r.usizes()?,
            unlabeled_pos: r.len()?,
            labeled_order: r.usizes()?,
            labeled_pos: r.len()?,
        };
        if r.pos != body.len() {
            return Err(integrity("trailing bytes after run state"));
        }
        let state = RunState {
            epoch,
            global_step,
            step_in_epoch,
            streams,
            best_metric,
            cursor,
        };
        Ok(Self {
            config,
            params,
            optimizer,
            state,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn integrity(msg: &str) -> CheckpointError {
    CheckpointError::Integrity(msg.to_string())
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Encoder => 0,
        ParamGroup::Head => 1,
        ParamGroup::Decoder => 2,
    }
}

fn group_from(code: u8) -> Result<ParamGroup> {
    match code {
        0 => Ok(ParamGroup::Encoder),
        1 => Ok(ParamGroup::Head),
        2 => Ok(ParamGroup::Decoder),
        c => Err(integrity(&format!("unknown parameter group {c}"))),
    }
}

fn put_u64(w: &mut Vec<u8>, x: u64) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, x: f64) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u64(w, b.len() as u64);
    w.extend_from_slice(b);
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    put_u64(w, xs.len() as u64);
    xs.iter().for_each(|&x| put_f64(w, x));
}

fn put_usizes(w: &mut Vec<u8>, xs: &[usize]) {
    put_u64(w, xs.len() as u64);
    xs.iter().for_each(|&x| put_u64(w, x as u64));
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| integrity("unexpected end of data"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| integrity("length overflows usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| integrity("length overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| integrity("length overflow"))?,
        )?;
        raw.chunks_exact(8)
            .map(|c| {
                usize::try_from(u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .map_err(|_| integrity("index overflows usize"))
            })
            .collect()
    }
}
