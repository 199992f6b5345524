use std::path::PathBuf;

use nerfcodec_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bitstream: {0}")]
    Bitstream(#[from] BitstreamError),
    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f32 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BitstreamError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("checksum mismatch: header {expected:08x}, payload {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("symbol {symbol} outside support [{min}, {max}]")]
    OutOfSupport { symbol: i32, min: i32, max: i32 },
    #[error("bitstream was made for {found}, decoder holds {expected}")]
    ModelMismatch { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, CodecError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CodecError {
    let path = path.into();
    move |source| CodecError::Io { path, source }
}
