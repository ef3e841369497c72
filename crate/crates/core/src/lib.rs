//! Deterministic out-of-order core simulator with runahead execution.

pub mod isa;
pub mod branch_pred;
pub mod mem_hier;
pub mod config;
pub mod runahead;
pub mod sl_defense;
pub mod uarch;
pub mod attacks;
