//! Feed-forward triplane radiance fields with parameter-efficient
//! finetuning and entropy-coded transmission.
//!
//! A sender encodes posed images into code indices, optionally finetunes a
//! small set of deltas and adapters, and packs everything into a
//! [`entropy::Bitstream`]. A receiver holding the same [`model::Pretrained`]
//! networks rebuilds the radiance field with [`codec::unpack`] and renders it.

pub mod codec;
pub mod encoder;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param;
pub mod peft;
pub mod precision;
pub mod profile;
pub mod render;
pub mod rng;
pub mod scene;
pub mod tensor_io;
pub mod train;
pub mod triplane;
pub mod vq;

pub use error::{BitstreamError, CodecError, Result};
pub use nerfcodec_autodiff as autodiff;
pub use profile::Profile;

static POOL: std::sync::OnceLock<rayon::ThreadPool> = std::sync::OnceLock::new();

/// Worker pool sized by `CODEC_THREADS` (default: all cores). Results never
/// depend on its size; work is split into fixed chunks merged in order.
pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let n = std::env::var("CODEC_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
    })
}
