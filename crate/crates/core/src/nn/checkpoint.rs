//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "OFFPOCKP"
//! version      u32
//! meta_len     u64, then meta_len bytes of UTF-8 JSON metadata
//! net_count    u32
//! per network:
//!   name_len u32, name bytes
//!   activation u8 (0 relu, 1 tanh)
//!   head u8 (0 identity, 1 tanh-scaled, 2 gaussian)
//!     tanh-scaled: n u32, n f64 low, n f64 high
//!     gaussian:    f64 log_std_min, f64 log_std_max
//!   layer_count u32
//!   per layer: rows u32, cols u32, rows*cols f64 weights (row-major), rows f64 bias
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so a save/load cycle is bit-exact.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, Layer, Mlp, NnError, OutputHead};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OFFPOCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub networks: Vec<(String, Mlp)>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self { metadata, networks: Vec::new() }
    }

    pub fn with_network(mut self, name: &str, net: &Mlp) -> Self {
        self.networks.push((name.to_string(), net.clone()));
        self
    }

    pub fn network(&self, name: &str) -> Option<&Mlp> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("json values always serialize");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.networks.len() as u32).to_le_bytes());
        for (name, net) in &self.networks {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            out.push(match net.activation() {
                Activation::Relu => 0,
                Activation::Tanh => 1,
            });
            match net.head() {
                OutputHead::Identity => out.push(0),
                OutputHead::TanhScaled { low, high } => {
                    out.push(1);
                    put_u32(&mut out, low.len() as u32);
                    low.iter().chain(high).for_each(|v| put_f64(&mut out, *v));
                }
                OutputHead::Gaussian { log_std_min, log_std_max } => {
                    out.push(2);
                    put_f64(&mut out, *log_std_min);
                    put_f64(&mut out, *log_std_max);
                }
            }
            put_u32(&mut out, net.layers().len() as u32);
            for l in net.layers() {
                put_u32(&mut out, l.weight.nrows() as u32);
                put_u32(&mut out, l.weight.ncols() as u32);
                l.weight.iter().chain(l.bias.iter()).for_each(|v| put_f64(&mut out, *v));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let count = r.u32()?;
        let mut networks = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| NnError::Checkpoint(e.to_string()))?;
            let activation = match r.u8()? {
                0 => Activation::Relu,
                1 => Activation::Tanh,
                t => return Err(NnError::Checkpoint(format!("unknown activation tag {t}"))),
            };
            let head = match r.u8()? {
                0 => OutputHead::Identity,
                1 => {
                    let n = r.u32()? as usize;
                    let low = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
                    let high = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
                    OutputHead::TanhScaled { low, high }
                }
                2 => OutputHead::Gaussian { log_std_min: r.f64()?, log_std_max: r.f64()? },
                t => return Err(NnError::Checkpoint(format!("unknown head tag {t}"))),
            };
            let layer_count = r.u32()?;
            let mut layers = Vec::new();
            for _ in 0..layer_count {
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let w = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
                let b = (0..rows).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
                layers.push(Layer {
                    weight: Array2::from_shape_vec((rows, cols), w).map_err(|e| NnError::Checkpoint(e.to_string()))?,
                    bias: Array1::from(b),
                });
            }
            networks.push((name, Mlp::from_layers(layers, activation, head)?));
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, networks })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_bits(self.u64()?))
    }
}
