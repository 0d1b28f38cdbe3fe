//! Binary model checkpoints.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "FSAA" | version
//! config: input_channels | input_size | feature_channels
//!         | level count | levels... | combine | classifier | map activation
//! entry count | entries: name length | name (UTF-8) | rank | dims... | f32 LE payload
//! CRC-32 (IEEE) of all payload bytes, in entry order
//! ```
//!
//! Entries cover every trainable tensor and the normalization running
//! statistics, named as in `ModelParams::named_tensors`.

use std::fs;
use std::path::Path;

use fsaa_core::model::{CombineMode, MapActivation, ModelConfig, ModelParams};
use fsaa_core::Model32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"FSAA";
pub const VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize) -> u32 {
    u32::try_from(v).expect("checkpoint field exceeds u32")
}

pub fn encode(model: &Model32) -> Vec<u8> {
    let c = &model.config;
    let mut out = MAGIC.to_vec();
    put(&mut out, VERSION);
    for v in [c.input_channels, c.input_size, c.feature_channels, c.spp_levels.len()] {
        put(&mut out, to_u32(v));
    }
    for &l in &c.spp_levels {
        put(&mut out, to_u32(l));
    }
    put(
        &mut out,
        match c.combine {
            CombineMode::Reweight => 0,
            CombineMode::Concatenate => 1,
        },
    );
    put(&mut out, c.classifier_enabled as u32);
    put(
        &mut out,
        match c.map_activation {
            MapActivation::Sigmoid => 0,
            MapActivation::Relu => 1,
            MapActivation::Identity => 2,
        },
    );
    let tensors = model.params.named_tensors();
    put(&mut out, to_u32(tensors.len()));
    let mut crc = crc32fast::Hasher::new();
    for (name, t) in tensors {
        put(&mut out, to_u32(name.len()));
        out.extend_from_slice(name.as_bytes());
        put(&mut out, to_u32(t.rank()));
        for &d in t.shape() {
            put(&mut out, to_u32(d));
        }
        let start = out.len();
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        crc.update(&out[start..]);
    }
    put(&mut out, crc.finalize());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> CliError {
        CliError::Checkpoint {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model32> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("format version {version}, expected {VERSION}")));
    }
    let (input_channels, input_size, feature_channels) = (r.usize()?, r.usize()?, r.usize()?);
    let levels = r.usize()?;
    if levels > 16 {
        return Err(r.fail(format!("{levels} pyramid levels")));
    }
    let spp_levels = (0..levels).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let combine = match r.u32()? {
        0 => CombineMode::Reweight,
        1 => CombineMode::Concatenate,
        v => return Err(r.fail(format!("unknown combine mode {v}"))),
    };
    let classifier_enabled = match r.u32()? {
        0 => false,
        1 => true,
        v => return Err(r.fail(format!("bad classifier flag {v}"))),
    };
    let map_activation = match r.u32()? {
        0 => MapActivation::Sigmoid,
        1 => MapActivation::Relu,
        2 => MapActivation::Identity,
        v => return Err(r.fail(format!("unknown map activation {v}"))),
    };
    let config = ModelConfig {
        input_channels,
        input_size,
        feature_channels,
        spp_levels,
        combine,
        classifier_enabled,
        map_activation,
    };
    config.validate().map_err(|e| r.fail(e.to_string()))?;
    // Values are overwritten below; initialization only fixes the layout.
    let mut params = ModelParams::<f32>::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.usize()?;
    if count != expected.len() {
        return Err(r.fail(format!("{count} tensors, configuration needs {}", expected.len())));
    }
    let mut crc = crc32fast::Hasher::new();
    for ((name, shape), target) in expected.iter().zip(params.tensors_mut()) {
        let len = r.usize()?;
        let got = std::str::from_utf8(r.take(len)?).map_err(|_| r.fail("non-UTF-8 tensor name"))?;
        if got != name {
            return Err(r.fail(format!("found tensor '{got}' where '{name}' belongs")));
        }
        let rank = r.usize()?;
        if rank > 8 {
            return Err(r.fail(format!("tensor '{name}' has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(r.fail(format!("tensor '{name}' has shape {dims:?}, expected {shape:?}")));
        }
        let payload = r.take(4 * target.numel())?;
        crc.update(payload);
        for (v, b) in target.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    let stored = r.u32()?;
    if stored != crc.finalize() {
        return Err(r.fail("payload checksum mismatch"));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Model32 { config, params })
}

pub fn save(path: &Path, model: &Model32) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model32> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, path)
}
