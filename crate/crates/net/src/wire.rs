//! Request and response bodies that only exist on the wire.

use qsafe_core::ids::KeyId;
use qsafe_core::kms::DeliveredKey;
use qsafe_core::level::SecurityLevel;
use serde::{Deserialize, Serialize};

/// Identifies the calling SAE on `enc_keys` and `status`.
pub const SAE_HEADER: &str = "x-sae-id";
/// Identifies the sending node on the vKMS peer channel.
pub const FROM_HEADER: &str = "x-node-id";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncKeysRequest {
    #[serde(default = "one")]
    pub number: usize,
    pub size: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyIdEntry {
    #[serde(rename = "key_ID")]
    pub key_id: KeyId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecKeysRequest {
    #[serde(rename = "key_IDs")]
    pub key_ids: Vec<KeyIdEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyContainer {
    pub keys: Vec<DeliveredKey>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelResponse {
    pub level: SecurityLevel,
}
