//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        4 bytes  "TDFN"
//! version      u32      1
//! config       u32 num_blocks, u32 max_dilation, u32 channels,
//!              u32 input_channels, u8 fusion_mode, u64 seed
//! tensors      u32 count, then per tensor:
//!                u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
//!                f32 values in row-major order
//! optimizer    u8 present; if 1: u64 step, f64 beta1, f64 beta2, f64 eps,
//!              then per tensor (same order) its first moment as f32 values
//!              followed by its second moment as f32 values
//! checksum     u32 CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! fusion_mode codes: 0 tree, 1 sum, 2 within_only, 3 across_only. Each
//! layer contributes `<layer>.weight` (rank 4) and `<layer>.bias` (rank 1).
//! Values are stored in single precision regardless of the compute scalar.

use crate::error::{CheckpointError, Result};
use crate::net::{FusionMode, Network, NetworkConfig};
use crate::tensor::Scalar;
use crate::train::{AdamHyper, AdamState};

pub const MAGIC: &[u8; 4] = b"TDFN";
pub const VERSION: u32 = 1;

/// A named parameter tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

fn stored_tensors<T: Scalar>(net: &Network<T>) -> Vec<StoredTensor> {
    let to_f32 = |v: &T| v.to_f64_lossy() as f32;
    net.layers()
        .into_iter()
        .flat_map(|(name, p)| {
            let s = p.weight.shape();
            [
                StoredTensor {
                    name: format!("{name}.weight"),
                    dims: [s.n, s.c, s.h, s.w].iter().map(|&d| d as u32).collect(),
                    values: p.weight.data().iter().map(to_f32).collect(),
                },
                StoredTensor {
                    name: format!("{name}.bias"),
                    dims: vec![p.bias.len() as u32],
                    values: p.bias.iter().map(to_f32).collect(),
                },
            ]
        })
        .collect()
}

/// Serializes a network and, optionally, its optimizer state.
pub fn encode<T: Scalar>(net: &Network<T>, adam: Option<&AdamState<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = &net.config;
    for v in [c.num_blocks, c.max_dilation, c.channels, c.input_channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(c.fusion_mode.code());
    out.extend_from_slice(&c.seed.to_le_bytes());

    let tensors = stored_tensors(net);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    match adam {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.extend_from_slice(&st.step.to_le_bytes());
            for h in [st.hyper.beta1, st.hyper.beta2, st.hyper.eps] {
                out.extend_from_slice(&h.to_le_bytes());
            }
            for (m, v) in st.m.iter().zip(&st.v) {
                for x in m.iter().chain(v) {
                    out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        self.array().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        self.array().map(f64::from_le_bytes)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
            .collect())
    }
}

/// Everything stored in a checkpoint, before it is turned into a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub config: NetworkConfig,
    pub tensors: Vec<StoredTensor>,
    pub adam: Option<(u64, AdamHyper, Vec<Vec<f32>>, Vec<Vec<f32>>)>,
}

impl Decoded {
    /// Number of stored parameter scalars.
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }
}

/// Parses and verifies a checkpoint without building the network.
pub fn decode_raw(bytes: &[u8]) -> Result<Decoded, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let num_blocks = r.u32()? as usize;
    let max_dilation = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let input_channels = r.u32()? as usize;
    let code = r.u8()?;
    let fusion_mode = FusionMode::from_code(code)
        .ok_or_else(|| CheckpointError::Malformed(format!("fusion mode code {code}")))?;
    let seed = r.u64()?;
    let config = NetworkConfig {
        num_blocks,
        max_dilation,
        channels,
        fusion_mode,
        input_channels,
        seed,
    };

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let n = n.ok_or_else(|| CheckpointError::Malformed(format!("{name}: dims overflow")))?;
        let values = r.f32s(n)?;
        tensors.push(StoredTensor { name, dims, values });
    }

    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let hyper = AdamHyper {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let mut m = Vec::with_capacity(tensors.len());
            let mut v = Vec::with_capacity(tensors.len());
            for t in &tensors {
                m.push(r.f32s(t.values.len())?);
                v.push(r.f32s(t.values.len())?);
            }
            Some((step, hyper, m, v))
        }
        other => return Err(CheckpointError::Malformed(format!("optimizer flag {other}"))),
    };
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(Decoded {
        config,
        tensors,
        adam,
    })
}

/// Restores a network (and optimizer state, if present). Values widen from
/// single precision to `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Network<T>, Option<AdamState<T>>)> {
    let raw = decode_raw(bytes)?;
    let mut net = Network::<T>::new(raw.config)?;
    let expected = stored_tensors(&net);
    if expected.len() != raw.tensors.len() {
        return Err(CheckpointError::Malformed(format!(
            "expected {} tensors, found {}",
            expected.len(),
            raw.tensors.len()
        ))
        .into());
    }
    for (want, got) in expected.iter().zip(&raw.tensors) {
        if want.name != got.name || want.dims != got.dims {
            return Err(CheckpointError::Malformed(format!(
                "tensor {} {:?} where {} {:?} was expected",
                got.name, got.dims, want.name, want.dims
            ))
            .into());
        }
    }
    let widen = |v: &f32| T::from_f64_lossy(f64::from(*v));
    for (layer, pair) in net.layers_mut().into_iter().zip(raw.tensors.chunks_exact(2)) {
        for (dst, src) in layer.weight.data_mut().iter_mut().zip(&pair[0].values) {
            *dst = widen(src);
        }
        for (dst, src) in layer.bias.iter_mut().zip(&pair[1].values) {
            *dst = widen(src);
        }
    }
    let adam = raw.adam.map(|(step, hyper, m, v)| {
        let conv = |x: Vec<Vec<f32>>| x.iter().map(|s| s.iter().map(widen).collect()).collect();
        AdamState {
            hyper,
            step,
            m: conv(m),
            v: conv(v),
        }
    });
    Ok((net, adam))
}
