pub mod binhash;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod hierarchy;
pub mod lbt;
pub mod mjpf;
pub mod ocsvm;
pub mod simulator;
pub mod som;
pub mod swdbn;
pub mod tcp;

pub use error::{Error, ErrorKind, Result};
