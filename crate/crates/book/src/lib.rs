//! The guide in `book/src`, compiled so its snippets run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/getting-started.md")]
pub mod getting_started {}
#[doc = include_str!("../../../book/src/arm.md")]
pub mod arm {}
#[doc = include_str!("../../../book/src/tasks.md")]
pub mod tasks {}
#[doc = include_str!("../../../book/src/sessions.md")]
pub mod sessions {}
#[doc = include_str!("../../../book/src/protocol.md")]
pub mod protocol {}
#[doc = include_str!("../../../book/src/streaming.md")]
pub mod streaming {}
#[doc = include_str!("../../../book/src/dataset.md")]
pub mod dataset {}
#[doc = include_str!("../../../book/src/progression.md")]
pub mod progression {}
#[doc = include_str!("../../../book/src/acceptance.md")]
pub mod acceptance {}
