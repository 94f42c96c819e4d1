//! Persistence, HTTP API and configuration around the memory engine.

pub mod config;
pub mod http;
pub mod snapshot;

pub use config::{ConfigError, ServiceConfig};
pub use http::{router, AppState, UserStore};
pub use snapshot::SnapshotError;
