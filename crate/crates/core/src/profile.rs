use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};

/// Architecture and size settings shared by sender and receiver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    /// Written into bitstream headers so a decoder can reject foreign streams.
    pub id: u8,
    pub channels: usize,
    pub resolutions: [usize; 3],
    pub volume_res: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub pyramid: [usize; 3],
    pub mlp_width: usize,
    pub mlp_depth: usize,
    pub pe_freqs: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub delta_rank: usize,
    pub lora_rank: usize,
}

impl Profile {
    /// Small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            id: 0,
            channels: 8,
            resolutions: [16, 32, 64],
            volume_res: 16,
            code_dim: 4,
            codebook_size: 64,
            pyramid: [8, 16, 16],
            mlp_width: 32,
            mlp_depth: 4,
            pe_freqs: 4,
            n_coarse: 16,
            n_fine: 16,
            delta_rank: 1,
            lora_rank: 4,
        }
    }

    /// Category-agnostic setting with the large decoder.
    pub fn objaverse() -> Self {
        Self {
            name: "objaverse".into(),
            id: 1,
            channels: 32,
            resolutions: [64, 128, 256],
            volume_res: 64,
            code_dim: 16,
            codebook_size: 4096,
            pyramid: [16, 32, 32],
            mlp_width: 512,
            mlp_depth: 8,
            pe_freqs: 4,
            n_coarse: 64,
            n_fine: 64,
            delta_rank: 1,
            lora_rank: 4,
        }
    }

    /// Category-specific setting with the smaller decoder.
    pub fn shapenet() -> Self {
        Self {
            name: "shapenet".into(),
            id: 2,
            codebook_size: 1024,
            mlp_width: 256,
            mlp_depth: 6,
            ..Self::objaverse()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "objaverse" => Ok(Self::objaverse()),
            "shapenet" => Ok(Self::shapenet()),
            other => Err(CodecError::Config(format!(
                "unknown profile {other:?} (expected desk, objaverse or shapenet)"
            ))),
        }
    }

    /// Side length of the low-resolution code grid.
    pub fn code_res(&self) -> usize {
        self.volume_res / 4
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.channels
    }

    pub fn pe_dim(&self) -> usize {
        3 + 6 * self.pe_freqs
    }

    pub fn index_bits(&self) -> u32 {
        usize::BITS - (self.codebook_size - 1).leading_zeros()
    }

    /// Number of triplane entries across all planes and scales.
    pub fn plane_entries(&self) -> usize {
        3 * self.channels * self.resolutions.iter().map(|v| v * v).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CodecError::Config(format!("profile {}: {m}", self.name)));
        let [v1, v2, v3] = self.resolutions;
        if v1 == 0 || v2 != 2 * v1 || v3 != 2 * v2 {
            return bad(format!("resolutions {:?} must double per scale", self.resolutions));
        }
        if self.volume_res != v1 {
            return bad(format!("volume resolution {} must equal the first plane resolution {v1}", self.volume_res));
        }
        if self.volume_res % 4 != 0 || self.volume_res < 4 {
            return bad(format!("volume resolution {} must be a multiple of 4", self.volume_res));
        }
        if self.codebook_size < 2 || self.codebook_size > 1 << 16 {
            return bad(format!("codebook size {} outside [2, 65536]", self.codebook_size));
        }
        if self.mlp_depth < 3 || self.mlp_width < 2 {
            return bad(format!("decoder {}x{} too small", self.mlp_width, self.mlp_depth));
        }
        if self.channels == 0 || self.code_dim == 0 || self.pyramid.contains(&0) {
            return bad("zero channel count".into());
        }
        if self.n_coarse == 0 || self.n_fine == 0 {
            return bad("sample counts must be positive".into());
        }
        if self.delta_rank == 0 || self.lora_rank == 0 {
            return bad("ranks must be positive".into());
        }
        Ok(())
    }
}
