//! Minimal differentiable numeric core: parameter storage, the few layers the
//! pipeline needs with hand-written backward rules, Adam, finite-difference
//! gradient verification, and a named-array checkpoint container.
//!
//! Everything is `f64`.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod ops;
mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, NamedArray, MAGIC as CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckReport, REL_ERR_FLOOR};
pub use params::{Grads, ParamId, ParamMeta, ParamStore, Values};
