//! Scene text recognition with a three-stage transformer backbone over
//! character components, trained with CTC. Everything is implemented on a
//! small reverse-mode autodiff core.

pub mod autodiff;
pub mod ctc;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Result, SvtrError};
pub use tensor::Tensor;
