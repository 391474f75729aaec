#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod model;
pub mod train;
pub mod transfer;
pub mod variants;

pub use error::{Error, Result};
