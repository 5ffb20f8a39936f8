//! Versioned checkpoint files.
//!
//! A checkpoint is a short UTF-8 header followed by a little-endian binary
//! payload:
//!
//! ```text
//! OLOR-CHECKPOINT
//! format_version = 1
//! step = 300
//! rng_seed = 1
//! n = 3
//! layers = 8
//! optimizer_state = true
//! ---
//! <payload>
//! ```
//!
//! Payload, per layer: `u32` name length, name bytes, `u64` layer index,
//! `u64` length, `f64 x len` values, `u8` pre-trained flag, optional
//! `f64 x len` reference. If an optimizer state is present it follows as
//! `u64` timestep, `u64` layer count, then per layer three length-prefixed
//! `f64` vectors (m, v, d). The payload ends with the 8-byte trailer
//! `OLOR-END`. All floats are stored as raw IEEE-754 bits.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{LayerState, OptimizerState};
use crate::params::{LayerParams, ModelParams};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "OLOR-CHECKPOINT";
const HEADER_END: &str = "---\n";
const TRAILER: &[u8; 8] = b"OLOR-END";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_params: ModelParams,
    pub optimizer_state: Option<OptimizerState>,
    pub rng_seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model_params: ModelParams, rng_seed: u64, step: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_params,
            optimizer_state: None,
            rng_seed,
            step,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.model_params;
        let mut out = format!(
            "{MAGIC}\nformat_version = {}\nstep = {}\nrng_seed = {}\nn = {}\nlayers = {}\noptimizer_state = {}\n{HEADER_END}",
            self.format_version,
            self.step,
            self.rng_seed,
            model.n,
            model.layers.len(),
            self.optimizer_state.is_some()
        )
        .into_bytes();

        for layer in &model.layers {
            let name = layer.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(layer.layer_index as u64).to_le_bytes());
            out.extend_from_slice(&(layer.values.len() as u64).to_le_bytes());
            put_floats(&mut out, &layer.values);
            match &layer.pretrained {
                Some(anchor) => {
                    out.push(1);
                    put_floats(&mut out, anchor);
                }
                None => out.push(0),
            }
        }

        if let Some(state) = &self.optimizer_state {
            out.extend_from_slice(&state.t.to_le_bytes());
            out.extend_from_slice(&(state.layers.len() as u64).to_le_bytes());
            for ls in &state.layers {
                for v in [&ls.m, &ls.v, &ls.d] {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    put_floats(&mut out, v);
                }
            }
        }
        out.extend_from_slice(TRAILER);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header_end = find(bytes, HEADER_END.as_bytes())
            .ok_or_else(|| Error::CheckpointCorrupt("header terminator not found".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::CheckpointCorrupt("header is not UTF-8".into()))?;
        let header = Header::parse(header)?;

        let mut r = Reader {
            buf: &bytes[header_end + HEADER_END.len()..],
        };
        let mut layers = Vec::with_capacity(header.layers.min(1 << 16));
        for _ in 0..header.layers {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::CheckpointCorrupt("layer name is not UTF-8".into()))?;
            let layer_index = r.u64()? as usize;
            let len = r.u64()? as usize;
            let values = r.floats(len)?;
            let pretrained = match r.u8()? {
                0 => None,
                1 => Some(r.floats(len)?),
                flag => {
                    return Err(Error::CheckpointCorrupt(format!(
                        "bad pre-trained flag {flag} in layer `{name}`"
                    )))
                }
            };
            let finite = values.iter().all(|x| x.is_finite())
                && pretrained
                    .as_ref()
                    .is_none_or(|a| a.iter().all(|x| x.is_finite()));
            if !finite {
                return Err(Error::CheckpointNonFinite(name));
            }
            layers.push(LayerParams {
                name,
                layer_index,
                values,
                pretrained,
            });
        }

        let optimizer_state = if header.optimizer_state {
            let t = r.u64()?;
            let count = r.u64()? as usize;
            let mut states = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let mut vs = [Vec::new(), Vec::new(), Vec::new()];
                for v in &mut vs {
                    let len = r.u64()? as usize;
                    *v = r.floats(len)?;
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::CheckpointNonFinite("optimizer state".into()));
                    }
                }
                let [m, v, d] = vs;
                states.push(LayerState { m, v, d });
            }
            Some(OptimizerState { t, layers: states })
        } else {
            None
        };

        if r.take(TRAILER.len())? != TRAILER {
            return Err(Error::CheckpointCorrupt("bad trailer".into()));
        }
        if !r.buf.is_empty() {
            return Err(Error::CheckpointCorrupt(format!(
                "{} trailing bytes",
                r.buf.len()
            )));
        }

        let model_params = ModelParams {
            layers,
            n: header.n,
        };
        model_params
            .validate()
            .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        Ok(Self {
            format_version: header.format_version,
            model_params,
            optimizer_state,
            rng_seed: header.rng_seed,
            step: header.step,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&checkpoint.to_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

struct Header {
    format_version: u32,
    step: u64,
    rng_seed: u64,
    n: usize,
    layers: usize,
    optimizer_state: bool,
}

impl Header {
    fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::CheckpointCorrupt("missing magic line".into()));
        }
        let mut fields = std::collections::BTreeMap::new();
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::CheckpointCorrupt(format!("bad header line `{line}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |key: &str| -> Result<&str> {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| Error::CheckpointCorrupt(format!("header lacks `{key}`")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::CheckpointCorrupt(format!("bad `{key}` value `{v}`")))
        }

        let format_version: u32 = num("format_version", get("format_version")?)?;
        if format_version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: format_version,
                supported: FORMAT_VERSION,
            });
        }
        Ok(Self {
            format_version,
            step: num("step", get("step")?)?,
            rng_seed: num("rng_seed", get("rng_seed")?)?,
            n: num("n", get("n")?)?,
            layers: num("layers", get("layers")?)?,
            optimizer_state: num("optimizer_state", get("optimizer_state")?)?,
        })
    }
}

fn put_floats(out: &mut Vec<u8>, xs: &[f64]) {
    out.reserve(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_bits().to_le_bytes());
    }
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::CheckpointCorrupt(format!(
                "truncated payload: wanted {n} bytes, {} left",
                self.buf.len()
            )));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, len: usize) -> Result<Vec<f64>> {
        let bytes = self.take(len.checked_mul(8).ok_or_else(|| {
            Error::CheckpointCorrupt(format!("vector length {len} overflows"))
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}
