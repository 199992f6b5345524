#![allow(dead_code)]

use nerfcodec::entropy::{Bitstream, Header, StreamInfo};
use nerfcodec::peft::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Geometric-ish integers centred near zero, the shape quantized deltas take.
pub fn random_symbols(r: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<i32> {
    (0..n)
        .map(|_| {
            let u: f64 = r.random_range(-1.0..1.0);
            (u * u * u * spread).round() as i32
        })
        .collect()
}

fn bytes(r: &mut ChaCha8Rng, max: usize) -> Vec<u8> {
    let n = r.random_range(0..=max);
    (0..n).map(|_| r.random()).collect()
}

pub fn random_bitstream(r: &mut ChaCha8Rng) -> Bitstream {
    let mode = Mode::ALL[r.random_range(0..4)];
    let streams = if mode == Mode::PeftPlus {
        (0..r.random_range(1..10))
            .map(|_| StreamInfo {
                min: r.random_range(-40..1),
                max: r.random_range(0..40),
                len: 0,
                params: (0..43).map(|_| r.random_range(-3.0..3.0)).collect(),
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut features = Vec::new();
    let mut streams = streams;
    for s in &mut streams {
        let chunk = bytes(r, 40);
        s.len = chunk.len() as u32;
        features.extend(chunk);
    }
    if mode != Mode::PeftPlus {
        features = bytes(r, 200);
    }
    Bitstream {
        header: Header {
            mode,
            channels: r.random_range(1..64),
            resolutions: [r.random_range(1..300), r.random_range(1..300), r.random_range(1..300)],
            code_dim: r.random_range(1..32),
            code_res: r.random_range(1..64),
            codebook_size: r.random_range(2..5000),
            delta_rank: r.random_range(1..4),
            lora_rank: r.random_range(1..8),
            profile_id: r.random_range(0..3),
            streams,
        },
        indices: bytes(r, 300),
        features,
        vectors: bytes(r, 100),
        network: bytes(r, 300),
    }
}
