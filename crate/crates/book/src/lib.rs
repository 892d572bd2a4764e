//! Compiles every Rust snippet of the guide in `book/src` as a doc-test, so
//! the book cannot drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/language.md")]
pub mod language {}
#[doc = include_str!("../../../book/src/effects.md")]
pub mod effects {}
#[doc = include_str!("../../../book/src/failures.md")]
pub mod failures {}
#[doc = include_str!("../../../book/src/concurrency.md")]
pub mod concurrency {}
#[doc = include_str!("../../../book/src/memory.md")]
pub mod memory {}
#[doc = include_str!("../../../book/src/replay.md")]
pub mod replay {}
#[doc = include_str!("../../../book/src/snapshots.md")]
pub mod snapshots {}
#[doc = include_str!("../../../book/src/bindings.md")]
pub mod bindings {}
#[doc = include_str!("../../../book/src/distributed.md")]
pub mod distributed {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
