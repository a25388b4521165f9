//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HDVK" | version u32 | step u64 | rng seed [u8; 32] | rng stream u64
//!        | rng word position u128 | tensor count u32
//! per tensor: name length u32 | name utf-8 | rank u32 | dims u64 * rank
//!             | f32 payload * prod(dims)
//! ```
//!
//! Optimizer moments are stored as ordinary tensors named
//! `adamw.m/<param>` and `adamw.v/<param>`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use hdvila_core::optim::Moments;
use hdvila_core::{ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HDVK";
pub const FORMAT_VERSION: u32 = 1;
const MOMENT_M: &str = "adamw.m/";
const MOMENT_V: &str = "adamw.v/";

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng: RngState,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(
        store: &ParamStore<f32>,
        moments: Option<&BTreeMap<String, Moments<f32>>>,
        step: u64,
        rng: &ChaCha8Rng,
    ) -> Self {
        let mut tensors: BTreeMap<String, Tensor<f32>> = store
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("same shape")))
            .collect();
        for (name, m) in moments.into_iter().flatten() {
            let shape = store.get(name).map(|t| t.shape().to_vec()).unwrap_or_else(|_| vec![m.m.len()]);
            tensors.insert(format!("{MOMENT_M}{name}"), Tensor::new(shape.clone(), m.m.clone()).expect("moment shape"));
            tensors.insert(format!("{MOMENT_V}{name}"), Tensor::new(shape, m.v.clone()).expect("moment shape"));
        }
        Checkpoint {
            step,
            rng: RngState::capture(rng),
            tensors,
        }
    }

    /// Model parameters, without optimizer state.
    pub fn params(&self) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (n, t) in &self.tensors {
            if !n.starts_with(MOMENT_M) && !n.starts_with(MOMENT_V) {
                store.insert(n.clone(), t.clone());
            }
        }
        store
    }

    pub fn moments(&self) -> BTreeMap<String, Moments<f32>> {
        self.tensors
            .iter()
            .filter_map(|(n, m)| {
                let name = n.strip_prefix(MOMENT_M)?;
                let v = self.tensors.get(&format!("{MOMENT_V}{name}"))?;
                Some((
                    name.to_string(),
                    Moments {
                        m: m.data().to_vec(),
                        v: v.data().to_vec(),
                    },
                ))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.fail("bad magic, not an HDVK checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.fail("tensor name is not utf-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| r.fail(format!("tensor `{name}` dims {dims:?} exceed the file")))?;
            let payload = r.take(numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| r.fail(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(r.fail(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            step,
            rng: RngState { seed, stream, word_pos },
            tensors,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// crash never leaves a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = tmp_path(path);
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
