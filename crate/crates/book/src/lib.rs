//! Each chapter of `book/src` becomes a module so its listings run as doc
//! tests and a failure names the chapter.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/scenes.md")]
pub mod scenes {}
#[doc = include_str!("../../../book/src/triplanes.md")]
pub mod triplanes {}
#[doc = include_str!("../../../book/src/rendering.md")]
pub mod rendering {}
#[doc = include_str!("../../../book/src/encoding.md")]
pub mod encoding {}
#[doc = include_str!("../../../book/src/finetuning.md")]
pub mod finetuning {}
#[doc = include_str!("../../../book/src/entropy.md")]
pub mod entropy {}
#[doc = include_str!("../../../book/src/bitstream.md")]
pub mod bitstream {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
