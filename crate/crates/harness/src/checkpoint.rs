//! Little-endian binary checkpoints.
//!
//! ```text
//! magic      8 bytes  "CATCKPT1"
//! version    u32
//! config     u32 length + UTF-8 run config text
//! step       u64
//! rng        32-byte seed, u64 stream, u128 word position
//! adam step  u64
//! weights    tensor table
//! adam m     tensor table (same names and order as weights)
//! adam v     tensor table
//! ```
//!
//! A tensor table is a `u32` count followed by entries of `u32` name
//! length, name, `u32` rank, `u64` dims and `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cat_core::model::{CatModel, ParamStore};
use cat_core::tensor::{AdamState, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"CATCKPT1";
pub const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub adam: AdamState,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(w, self.config.to_text().as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        w.write_all(&self.adam.step.to_le_bytes())?;
        let names: Vec<&str> = self.params.names().collect();
        write_table(w, names.iter().copied().zip(self.params.iter().map(|(_, t)| t)))?;
        write_table(w, names.iter().copied().zip(&self.adam.m))?;
        write_table(w, names.iter().copied().zip(&self.adam.v))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short for header"))?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version} (expected {VERSION})")));
        }
        let text = String::from_utf8(read_bytes(r)?).map_err(|_| bad("config is not UTF-8"))?;
        let config = RunConfig::parse(&text)?;
        let step = read_u64(r)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(truncated)?;
        let stream = read_u64(r)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp).map_err(truncated)?;
        let adam_step = read_u64(r)?;
        let weights = read_table(r)?;
        let m = read_table(r)?;
        let v = read_table(r)?;
        for (label, table) in [("adam m", &m), ("adam v", &v)] {
            let same = table.len() == weights.len()
                && table.iter().zip(&weights).all(|(a, b)| a.0 == b.0 && a.1.shape() == b.1.shape());
            if !same {
                return Err(bad(format!("{label} table does not match the weight table")));
            }
        }
        let params = ParamStore::from_tensors(weights);
        // Names and shapes must match the architecture in the snapshot.
        let model = CatModel::from_params(config.model.clone(), params)?;
        Ok(Self {
            adam: AdamState {
                config: config.train.adam,
                step: adam_step,
                m: m.into_iter().map(|x| x.1).collect(),
                v: v.into_iter().map(|x| x.1).collect(),
            },
            config,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos: u128::from_le_bytes(wp),
            },
            params: model.params,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let io = |e| HarnessError::io(path, e);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        self.write_to(&mut w).map_err(io)?;
        w.into_inner().map_err(|e| io(e.into_error()))?.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }

    pub fn model(&self) -> Result<CatModel> {
        Ok(CatModel::from_params(self.config.model.clone(), self.params.clone())?)
    }
}

fn truncated(_: std::io::Error) -> HarnessError {
    bad("unexpected end of file")
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

/// Upper bound on any length field, to fail fast on corrupt files.
const MAX_LEN: u64 = 1 << 32;

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

fn write_table<'a>(w: &mut impl Write, items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> std::io::Result<()> {
    let items: Vec<_> = items.collect();
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for (name, t) in items {
        write_bytes(w, name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * t.numel());
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_table(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let n = read_u32(r)?;
    let mut out = Vec::with_capacity(n.min(4096) as usize);
    for _ in 0..n {
        let name = String::from_utf8(read_bytes(r)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_u32(r)?;
        if rank > 8 {
            return Err(bad(format!("{name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(r)?;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_LEN {
            return Err(bad(format!("{name}: {numel} elements is implausible")));
        }
        let mut raw = vec![0u8; 8 * numel as usize];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name.clone(), Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?));
    }
    Ok(out)
}
