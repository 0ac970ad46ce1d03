pub mod bench;
pub mod codec;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod frontend;
pub mod layout;
pub mod lm;
pub mod model;
pub mod train;

pub use error::{Error, Result};
