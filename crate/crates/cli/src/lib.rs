//! Front end for the enclave broker: argument grammar, the state journal
//! that carries broker state between invocations, and the line-oriented
//! service protocol.

pub mod args;
pub mod journal;
pub mod protocol;
pub mod server;

pub use journal::{CliError, Header, Journal};
