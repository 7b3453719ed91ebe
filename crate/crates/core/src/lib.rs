pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod graph;
pub mod io;
pub mod metaops;
pub mod model;
pub mod ops;
pub mod params;
pub mod refine;
pub mod resample;
pub mod synth;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use tensor::{FlowField, Frame, Tensor, TimeStep};
