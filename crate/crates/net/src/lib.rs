//! HTTP/JSON bindings for the qsafe services.
//!
//! [`server`] exposes a KMS, a vKMS or the controller on a loopback port;
//! [`client`] provides a [`qsafe_core::transport::Directory`] whose handles
//! speak to those servers. Errors travel as the JSON form of the service's
//! own error type, so a remote failure surfaces to the caller unchanged.

pub mod client;
pub mod server;
pub mod wire;

pub use axum::Router;
pub use client::HttpDirectory;
pub use server::{controller_router, kms_router, vkms_router, Server};
