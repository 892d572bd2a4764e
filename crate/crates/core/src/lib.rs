//! A deterministic runtime for small effect-typed programs.
//!
//! Programs are written in a compact language ([`lang`]) whose pure
//! functions cannot touch the environment; `action`s and `api`s reach it
//! only through capability packages registered with a [`bapi::Registry`].
//! The [`runtime`] evaluates programs over a generational [`heap`] with
//! bounded collection pauses, and every choice it makes that is not a
//! function of the program text is written to a [`trace`], so a run can be
//! replayed byte for byte or resumed from a heap snapshot. [`distsim`]
//! connects several such nodes over a simulated network.

pub mod bapi;
pub mod canon;
pub mod distsim;
pub mod heap;
pub mod lang;
pub mod runtime;
pub mod trace;
