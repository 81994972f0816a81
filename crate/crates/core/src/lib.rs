pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod dumps;
pub mod efa;
pub mod error;
pub mod experiment;
pub mod fm;
pub mod heads;
pub mod model;
pub mod params;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
