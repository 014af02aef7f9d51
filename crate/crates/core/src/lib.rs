//! VoxResNet on the CPU: volumetric residual segmentation networks with deep
//! supervision, auto-context refinement, and the surrounding
//! preprocess → train → tiled predict → evaluate workflow.

pub mod autocontext;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod infer;
pub mod kernels;
pub mod kv;
pub mod loss;
pub mod metrics;
pub mod netspec;
pub mod phantom;
pub mod preprocess;
pub mod tensor;
pub mod train;
pub mod volio;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Real, Tensor};
pub use volume::{LabelVolume, Volume};
