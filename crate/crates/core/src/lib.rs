//! Minimal homeomorphisms of the Cantor space with a prescribed simplex of invariant measures,
//! built as explicit refining sequences of Kakutani–Rokhlin partitions and checked exactly at
//! every finite stage.

pub mod builder;
pub mod cli;
pub mod clopen;
pub mod measure;
pub mod oracles;
pub mod rational;
pub mod tower;
pub mod verify;

pub use clopen::{ClopenSet, CylinderWord};
pub use measure::{MeasureFamily, MeasureVec, TreeMeasure};
