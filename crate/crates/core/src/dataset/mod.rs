//! Annotated scenes: the action registry, the JSON annotation format and a
//! synthetic scene generator.

mod annotations;
mod registry;
pub mod synthetic;

pub use annotations::*;
pub use registry::{ActionRegistry, ActionSpec, Role, VerbDef};
pub use synthetic::{generate_synthetic, SynthConfig};
