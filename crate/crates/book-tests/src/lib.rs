//! Compiles the guide's Rust snippets as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/system.md")]
pub mod system {}
#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}
#[doc = include_str!("../../../book/src/truncation.md")]
pub mod truncation {}
#[doc = include_str!("../../../book/src/optimization.md")]
pub mod optimization {}
#[doc = include_str!("../../../book/src/validation.md")]
pub mod validation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/caveats.md")]
pub mod caveats {}
