pub mod analysis;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};

pub type Tensor = numerics::Tensor<f64>;
pub type Tape = numerics::Tape<f64>;
pub type Model = model::TemProxRec<f64>;
pub type AdamState = training::AdamState<f64>;
pub type TrainOutcome = training::TrainOutcome<f64>;
