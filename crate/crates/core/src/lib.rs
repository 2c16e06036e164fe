//! Dual-query spatial grounding on a small decoder-only transformer, with a
//! reverse-mode tape, task-decoupled attention masks and expert-guided
//! feature alignment.

pub mod autodiff;
pub mod backbone;
mod binio;
pub mod checkpoint;
pub mod diag;
pub mod config;
pub mod error;
pub mod eval;
pub mod evg;
pub mod expert_file;
pub mod gradcheck;
pub mod mask;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::GamsiModel<f32>;
pub type Model64 = model::GamsiModel<f64>;
