//! Differentiable compute core and embedding trunks.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;
pub mod trunk;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, grad_check_fn, GradCheckOptions, GradCheckReport, GradTarget};
pub use graph::{BatchStats, ConvGeom, Gradients, Graph, MarginKind, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
pub use trunk::{build_trunk, Family, Mode, Model, Pooling, TrunkConfig};
