pub mod data;
pub mod degradation;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod params;
pub mod sequence;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Branches, FusionMode, ModelConfig, QkvMode, Vtudc};
pub use params::{Bindings, ParamStore};
pub use sequence::FrameSequence;
pub use tensor::{Gradients, Padding, Tape, Tensor, Var};
pub use training::{TrainConfig, Trainer};
