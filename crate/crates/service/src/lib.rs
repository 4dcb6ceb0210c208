//! Ghost-text completion service: sessions bound to a blinded model, live
//! typing-effort tracking, ratings and an append-only event log.

pub mod config;
pub mod error;
pub mod http;
pub mod service;
pub mod session;
pub mod store;

pub use config::{build_service, ServiceConfig};
pub use error::{Result, ServiceError};
pub use http::{router, serve};
pub use service::{Assignment, Options, Service};
