//! Hybrid QKD/PQC key establishment: crypto primitives, a pseudo-QKD link
//! simulator, the per-node KMS and vKMS services, and the security
//! controller that assigns levels and programs sessions.

pub mod crypto;
pub mod encoding;
pub mod ids;
pub mod kms;
pub mod level;
pub mod qkd_sim;
pub mod qusec;
pub mod transport;
pub mod vkms;
