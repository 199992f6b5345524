use std::fmt;

use crate::error::{BitstreamError, Result};
use crate::peft::Mode;
use crate::tensor_io::Reader;

pub const MAGIC: [u8; 4] = *b"CNRF";
pub const VERSION: u8 = 1;

/// Per-stream coding side information for one delta matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamInfo {
    pub min: i32,
    pub max: i32,
    /// Coded byte length inside the feature section.
    pub len: u32,
    /// Density model parameters.
    pub params: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub mode: Mode,
    pub channels: u16,
    pub resolutions: [u16; 3],
    pub code_dim: u16,
    pub code_res: u16,
    pub codebook_size: u32,
    pub delta_rank: u8,
    pub lora_rank: u8,
    pub profile_id: u8,
    pub streams: Vec<StreamInfo>,
}

impl Header {
    pub fn index_bits(&self) -> u32 {
        u32::BITS - (self.codebook_size.max(2) - 1).leading_zeros()
    }
}

/// Header plus the four payload sections: packed code indices, delta
/// matrices (or full planes), delta vectors, and decoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    pub indices: Vec<u8>,
    pub features: Vec<u8>,
    pub vectors: Vec<u8>,
    pub network: Vec<u8>,
}

fn need<'a, V>(r: &mut Reader<'a>, n: usize, f: impl FnOnce(&mut Reader<'a>) -> Option<V>) -> Result<V> {
    let offset = r.pos;
    f(r).ok_or_else(|| BitstreamError::Truncated { offset, needed: n }.into())
}

impl Bitstream {
    fn sections(&self) -> [&[u8]; 4] {
        [&self.indices, &self.features, &self.vectors, &self.network]
    }

    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for s in self.sections() {
            h.update(s);
        }
        h.finalize()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(h.mode.code());
        out.extend_from_slice(&h.channels.to_le_bytes());
        for v in h.resolutions {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.code_dim.to_le_bytes());
        out.extend_from_slice(&h.code_res.to_le_bytes());
        out.extend_from_slice(&h.codebook_size.to_le_bytes());
        out.extend_from_slice(&[h.delta_rank, h.lora_rank, h.profile_id]);
        out.extend_from_slice(&(h.streams.len() as u16).to_le_bytes());
        for s in &h.streams {
            out.extend_from_slice(&s.min.to_le_bytes());
            out.extend_from_slice(&s.max.to_le_bytes());
            out.extend_from_slice(&s.len.to_le_bytes());
            out.extend_from_slice(&(s.params.len() as u16).to_le_bytes());
            for p in &s.params {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        for s in self.sections() {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.checksum().to_le_bytes());
        for s in self.sections() {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = need(&mut r, 4, |r| r.take(4))?;
        if magic != MAGIC {
            return Err(BitstreamError::BadMagic(magic.try_into().expect("four bytes")).into());
        }
        let version = need(&mut r, 1, |r| r.u8())?;
        if version != VERSION {
            return Err(BitstreamError::Version(version).into());
        }
        let mode_code = need(&mut r, 1, |r| r.u8())?;
        let mode = Mode::from_code(mode_code).ok_or_else(|| BitstreamError::Corrupt(format!("unknown mode byte {mode_code}")))?;
        let channels = need(&mut r, 2, |r| r.u16())?;
        let mut resolutions = [0u16; 3];
        for v in &mut resolutions {
            *v = need(&mut r, 2, |r| r.u16())?;
        }
        let code_dim = need(&mut r, 2, |r| r.u16())?;
        let code_res = need(&mut r, 2, |r| r.u16())?;
        let codebook_size = need(&mut r, 4, |r| r.u32())?;
        let delta_rank = need(&mut r, 1, |r| r.u8())?;
        let lora_rank = need(&mut r, 1, |r| r.u8())?;
        let profile_id = need(&mut r, 1, |r| r.u8())?;
        let n_streams = need(&mut r, 2, |r| r.u16())?;
        let mut streams = Vec::with_capacity(n_streams as usize);
        for _ in 0..n_streams {
            let min = need(&mut r, 4, |r| r.i32())?;
            let max = need(&mut r, 4, |r| r.i32())?;
            let len = need(&mut r, 4, |r| r.u32())?;
            let n = need(&mut r, 2, |r| r.u16())? as usize;
            if min > max {
                return Err(BitstreamError::Corrupt(format!("stream bounds [{min}, {max}]")).into());
            }
            let mut params = Vec::with_capacity(n);
            for _ in 0..n {
                params.push(need(&mut r, 4, |r| r.f32())?);
            }
            streams.push(StreamInfo { min, max, len, params });
        }
        let mut lens = [0usize; 4];
        for l in &mut lens {
            *l = need(&mut r, 4, |r| r.u32())? as usize;
        }
        let expected = need(&mut r, 4, |r| r.u32())?;
        let mut sections = Vec::with_capacity(4);
        for l in lens {
            sections.push(need(&mut r, l, |r| r.take(l))?.to_vec());
        }
        if r.remaining() != 0 {
            return Err(BitstreamError::Corrupt(format!("{} trailing bytes", r.remaining())).into());
        }
        let [indices, features, vectors, network]: [Vec<u8>; 4] = sections.try_into().expect("four sections");
        let coded: u64 = streams.iter().map(|s| s.len as u64).sum();
        if mode == Mode::PeftPlus && coded != features.len() as u64 {
            return Err(BitstreamError::Corrupt(format!(
                "stream lengths sum to {coded}, feature section holds {}",
                features.len()
            ))
            .into());
        }
        let bs = Self {
            header: Header {
                mode,
                channels,
                resolutions,
                code_dim,
                code_res,
                codebook_size,
                delta_rank,
                lora_rank,
                profile_id,
                streams,
            },
            indices,
            features,
            vectors,
            network,
        };
        let actual = bs.checksum();
        if actual != expected {
            return Err(BitstreamError::Checksum { expected, actual }.into());
        }
        Ok(bs)
    }

    /// Byte counts per component; `total` equals the serialized length.
    pub fn size_report(&self) -> SizeReport {
        let total = self.to_bytes().len();
        let density: usize = self.header.streams.iter().map(|s| 4 * s.params.len()).sum();
        let feature = self.features.len() + self.vectors.len() + density;
        SizeReport {
            mode: self.header.mode,
            codes: self.indices.len(),
            feature,
            mlp: self.network.len(),
            header: total - self.indices.len() - feature - self.network.len(),
            total,
        }
    }
}

/// Component sizes in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct SizeReport {
    pub mode: Mode,
    /// Packed code indices.
    pub codes: usize,
    /// Delta matrices, delta vectors and density parameters, or full planes.
    pub feature: usize,
    /// Adapters, or dense decoder weights.
    pub mlp: usize,
    pub header: usize,
    pub total: usize,
}

pub fn megabytes(bytes: usize) -> f64 {
    bytes as f64 / 1e6
}

impl fmt::Display for SizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "| component | bytes | MB |")?;
        writeln!(f, "|---|---:|---:|")?;
        for (name, b) in [
            ("codes (indices)", self.codes),
            ("feature", self.feature),
            ("MLP", self.mlp),
            ("header", self.header),
            ("total", self.total),
        ] {
            writeln!(f, "| {name} | {b} | {:.3} |", megabytes(b))?;
        }
        Ok(())
    }
}

/// Packs indices at `bits` each, most significant bit first.
pub fn pack_indices(indices: &[usize], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; (indices.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &v in indices {
        for b in (0..bits).rev() {
            if (v >> b) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_indices(bytes: &[u8], bits: u32, n: usize) -> Result<Vec<usize>> {
    let need_bytes = (n * bits as usize).div_ceil(8);
    if bytes.len() != need_bytes {
        return Err(BitstreamError::Corrupt(format!("{} index bytes, expected {need_bytes}", bytes.len())).into());
    }
    let mut pos = 0usize;
    Ok((0..n)
        .map(|_| {
            let mut v = 0usize;
            for _ in 0..bits {
                v = (v << 1) | ((bytes[pos / 8] >> (7 - pos % 8)) & 1) as usize;
                pos += 1;
            }
            v
        })
        .collect())
}
