//! Wire types for the session service and, with the `http` feature, an
//! async client for it.

pub mod api;

#[cfg(feature = "http")]
mod http;

#[cfg(feature = "http")]
pub use http::{Client, ClientError};
