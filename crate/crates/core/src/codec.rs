//! Sender-side packing and receiver-side reconstruction of a scene.

use nerfcodec_autodiff::Tensor;

use crate::entropy::{
    decode_stream, encode_stream, pack_indices, quantize_round, unpack_indices, Bitstream, DensityModel, Header, StreamInfo,
    MAX_SUPPORT,
};
use crate::error::{BitstreamError, CodecError, Result};
use crate::model::Pretrained;
use crate::param::{Module, Param};
use crate::peft::{DeltaFactors, Mode};
use crate::profile::Profile;
use crate::render::{AdapterParams, DenseParams, SceneModel};

fn write_floats(m: &dyn Module, out: &mut Vec<u8>) {
    m.visit(&mut |p| {
        for v in p.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
}

/// Fills the parameters of `m`, in visiting order, from little-endian f32s
/// that must match their total size exactly.
fn read_floats(m: &mut dyn Module, bytes: &[u8], what: &str) -> Result<()> {
    let need = 4 * m.param_count();
    if bytes.len() != need {
        return Err(BitstreamError::Corrupt(format!("{what}: {} bytes, expected {need}", bytes.len())).into());
    }
    let mut pos = 0;
    m.visit_mut(&mut |p: &mut Param| {
        let n = p.len();
        let vals = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        p.set(Tensor::new(p.shape().to_vec(), vals).expect("sized")).expect("same shape");
        pos += 4 * n;
    });
    Ok(())
}

fn header(profile: &Profile, mode: Mode, delta_rank: usize, lora_rank: usize) -> Header {
    let [v1, v2, v3] = profile.resolutions;
    Header {
        mode,
        channels: profile.channels as u16,
        resolutions: [v1 as u16, v2 as u16, v3 as u16],
        code_dim: profile.code_dim as u16,
        code_res: profile.code_res() as u16,
        codebook_size: profile.codebook_size as u32,
        delta_rank: delta_rank as u8,
        lora_rank: lora_rank as u8,
        profile_id: profile.id,
        streams: Vec::new(),
    }
}

fn lora_rank(scene: &SceneModel) -> usize {
    scene.decoder.coarse.trunk[0].lora.as_ref().map_or(0, |l| l.up.shape()[1])
}

/// Serializes what the receiver needs for `mode`. In entropy-coded mode the
/// delta matrices are rounded to integers first; pass `models` with one
/// density model per matrix.
pub fn pack(
    profile: &Profile,
    mode: Mode,
    indices: &[Vec<usize>; 3],
    scene: &SceneModel,
    models: Option<&[DensityModel]>,
) -> Result<Bitstream> {
    let n_codes = profile.code_res() * profile.code_res();
    if indices.iter().any(|i| i.len() != n_codes) {
        return Err(CodecError::Shape(format!("each plane needs {n_codes} code indices")));
    }
    let all: Vec<usize> = indices.iter().flatten().copied().collect();
    if let Some(&bad) = all.iter().find(|&&i| i >= profile.codebook_size) {
        return Err(CodecError::Shape(format!("index {bad} outside codebook of {}", profile.codebook_size)));
    }
    let delta = scene.delta.as_ref();
    let mut h = header(profile, mode, delta.map_or(0, |d| d.rank), lora_rank(scene));
    let mut bs = Bitstream {
        indices: pack_indices(&all, h.index_bits()),
        features: Vec::new(),
        vectors: Vec::new(),
        network: Vec::new(),
        header: h.clone(),
    };
    match mode {
        Mode::WoFt => {}
        Mode::FullFt => {
            write_floats(&scene.planes, &mut bs.features);
            write_floats(&DenseParams(&scene.decoder.coarse), &mut bs.network);
            write_floats(&DenseParams(&scene.decoder.fine), &mut bs.network);
        }
        Mode::Peft | Mode::PeftPlus => {
            let d = delta.ok_or_else(|| CodecError::Config(format!("{mode} needs delta factors")))?;
            if !scene.decoder.coarse.is_wrapped() || !scene.decoder.fine.is_wrapped() {
                return Err(CodecError::Config(format!("{mode} needs decoder adapters")));
            }
            if mode == Mode::Peft {
                write_floats(&d.matrix_params(), &mut bs.features);
            } else {
                let models = models.ok_or_else(|| CodecError::Config("entropy-coded mode needs density models".into()))?;
                if models.len() != d.matrices.len() {
                    return Err(CodecError::Shape(format!("{} density models for {} matrices", models.len(), d.matrices.len())));
                }
                for (m, model) in d.matrices.iter().zip(models) {
                    let (q, min, max) = quantize_round(m.value().data());
                    if (max as i64 - min as i64) as usize >= MAX_SUPPORT {
                        return Err(CodecError::Config(format!("{} spans [{min}, {max}], too wide to code", m.name())));
                    }
                    let bytes = encode_stream(&q, &model.table(min, max)?, min, max)?;
                    h.streams.push(StreamInfo {
                        min,
                        max,
                        len: bytes.len() as u32,
                        params: model.to_vec(),
                    });
                    bs.features.extend(bytes);
                }
                bs.header = h;
            }
            write_floats(&d.vectors, &mut bs.vectors);
            write_floats(&AdapterParams(&scene.decoder.coarse), &mut bs.network);
            write_floats(&AdapterParams(&scene.decoder.fine), &mut bs.network);
        }
    }
    Ok(bs)
}

/// What the receiver reconstructs.
pub struct Decoded {
    pub indices: [Vec<usize>; 3],
    pub scene: SceneModel,
    /// Density models carried in the header (entropy-coded mode only).
    pub models: Vec<DensityModel>,
}

fn check_profile(p: &Profile, h: &Header) -> Result<()> {
    let expected = header(p, h.mode, 0, 0);
    let key = |h: &Header| {
        format!(
            "profile {} (C {}, V {:?}, codes {}x{} of {} over {})",
            h.profile_id, h.channels, h.resolutions, h.code_res, h.code_res, h.code_dim, h.codebook_size
        )
    };
    if key(&expected) != key(h) {
        return Err(BitstreamError::ModelMismatch {
            expected: key(&expected),
            found: key(h),
        }
        .into());
    }
    Ok(())
}

/// Rebuilds the scene representation from a bitstream and the shared
/// pretrained networks alone.
pub fn unpack(model: &Pretrained, bs: &Bitstream) -> Result<Decoded> {
    let p = &model.profile;
    let h = &bs.header;
    check_profile(p, h)?;
    let n = (h.code_res as usize).pow(2);
    let all = unpack_indices(&bs.indices, h.index_bits(), 3 * n)?;
    if let Some(&bad) = all.iter().find(|&&i| i >= p.codebook_size) {
        return Err(BitstreamError::Corrupt(format!("code index {bad} outside codebook")).into());
    }
    let indices = [all[..n].to_vec(), all[n..2 * n].to_vec(), all[2 * n..].to_vec()];
    let mut scene = model.scene_from_indices(&indices)?;
    let mut models = Vec::new();
    let empty = |s: &[u8], what: &str| -> Result<()> {
        if s.is_empty() {
            Ok(())
        } else {
            Err(BitstreamError::Corrupt(format!("{what} section should be empty in {} mode", h.mode)).into())
        }
    };
    match h.mode {
        Mode::WoFt => {
            empty(&bs.features, "feature")?;
            empty(&bs.vectors, "vector")?;
            empty(&bs.network, "network")?;
        }
        Mode::FullFt => {
            empty(&bs.vectors, "vector")?;
            read_floats(&mut scene.planes, &bs.features, "planes")?;
            let mut dense: Vec<Param> = Vec::new();
            DenseParams(&scene.decoder.coarse).visit(&mut |p| dense.push(p.clone()));
            DenseParams(&scene.decoder.fine).visit(&mut |p| dense.push(p.clone()));
            read_floats(&mut dense, &bs.network, "decoder weights")?;
            let mut it = dense.into_iter();
            for l in scene.decoder.coarse.layers_mut().chain(scene.decoder.fine.layers_mut()) {
                l.weight = it.next().expect("counted");
                l.bias = it.next().expect("counted");
            }
        }
        Mode::Peft | Mode::PeftPlus => {
            if h.delta_rank == 0 || h.lora_rank == 0 {
                return Err(BitstreamError::Corrupt("zero rank in finetuned mode".into()).into());
            }
            let mut d = DeltaFactors::init(p.channels, p.resolutions, h.delta_rank as usize, 0)?;
            if h.mode == Mode::Peft {
                read_floats(&mut d.matrices, &bs.features, "delta matrices")?;
            } else {
                if h.streams.len() != d.matrices.len() {
                    return Err(BitstreamError::Corrupt(format!(
                        "{} coded streams for {} matrices",
                        h.streams.len(),
                        d.matrices.len()
                    ))
                    .into());
                }
                let mut pos = 0usize;
                for (i, (m, s)) in d.matrices.iter_mut().zip(&h.streams).enumerate() {
                    let model = DensityModel::from_vec(&format!("entropy.{i}"), &s.params)?;
                    if (s.max as i64 - s.min as i64) as usize >= MAX_SUPPORT {
                        return Err(BitstreamError::Corrupt(format!("stream {i} support too wide")).into());
                    }
                    let bytes = &bs.features[pos..pos + s.len as usize];
                    pos += s.len as usize;
                    let q = decode_stream(bytes, &model.table(s.min, s.max)?, s.min, m.len())?;
                    let t = Tensor::new(m.shape().to_vec(), q.into_iter().map(|v| v as f32).collect()).expect("sized");
                    m.set(t)?;
                    models.push(model);
                }
            }
            read_floats(&mut d.vectors, &bs.vectors, "delta vectors")?;
            scene.delta = Some(d);
            scene.decoder.wrap(h.lora_rank as usize, 0);
            let mut adapters: Vec<Param> = Vec::new();
            AdapterParams(&scene.decoder.coarse).visit(&mut |p| adapters.push(p.clone()));
            AdapterParams(&scene.decoder.fine).visit(&mut |p| adapters.push(p.clone()));
            read_floats(&mut adapters, &bs.network, "adapters")?;
            let mut it = adapters.into_iter();
            for l in scene.decoder.coarse.layers_mut().chain(scene.decoder.fine.layers_mut()) {
                let lora = l.lora.as_mut().expect("wrapped");
                lora.up = it.next().expect("counted");
                lora.down = it.next().expect("counted");
            }
        }
    }
    Ok(Decoded { indices, scene, models })
}
