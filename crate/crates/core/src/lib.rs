//! Exact event-driven simulation of two-type annihilating random walks
//! (A + B -> 0) on reflective graphs, with the couplings used to study
//! site recurrence and density decay: shared-instruction evolutions,
//! signed discrepancy tracers, a-priori dragged tracers with bounding
//! walks, and entangled tracer pairs built from reflections.
//!
//! Everything is deterministic given a root seed: per-label counter-based
//! instruction streams make "two systems with the same instructions" a
//! construction, not a convention.

pub mod coupling;
pub mod error;
pub mod graph;
pub mod init;
pub mod oracle;
pub mod rng;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use graph::{Automorphism, KernelSpec, ReflectiveGraph, SiteId};
pub use init::{sample_initial, truncate, Configuration, InitialLaw};
pub use sim::{evolve, AnnihilationTime, Event, EventLog, Label, MassLedger, SimParams};
