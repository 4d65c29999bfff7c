//! The guide's chapters, one module each, so `cargo test --doc` runs every
//! listing against the current library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/classifier.md")]
pub mod classifier {}
#[doc = include_str!("../../../book/src/latent-space.md")]
pub mod latent_space {}
#[doc = include_str!("../../../book/src/interpretation.md")]
pub mod interpretation {}
#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}
