//! ST-MLP: a channel-independent cascaded-MLP traffic forecaster.
//!
//! The crate bundles everything the model needs to run on CPU from scratch:
//! a small dense-tensor engine with reverse-mode differentiation, graph
//! preprocessing (thresholded Gaussian adjacency, scaled normalized
//! Laplacian), the traffic data pipeline (calendars, z-score, windowing,
//! chronological splits), the model with its ablation variants, an Adam
//! training loop with multistep learning-rate decay, and the evaluation
//! protocol (masked MAE/RMSE/MAPE at horizons 3/6/12 plus the 12-step
//! average).

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Mode, Tape, TensorId};
pub use tensor::{Scalar, Tensor};
