//! Std side of the property-inference toolkit: dataset files, the HTTP
//! completions client, shadow-model factories, a rayon executor, and the
//! experiment harness behind the `propinfer` command.

pub mod endpoint;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod jsonl;
pub mod par;
pub mod remote;

pub use error::{Error, Result};
