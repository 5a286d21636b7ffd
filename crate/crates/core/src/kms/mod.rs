//! Key manager for the QKD modules of one QN.
//!
//! Each attached link has its own store; stores hand keys out once per side.
//! The KMS also executes relay rules: an entry node pads the injected key
//! with a fresh link key, intermediate nodes strip the inbound pad and apply
//! a fresh outbound one, and the terminal node parks the recovered key in
//! its relayed-key store.

mod service;
mod store;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::KeyMaterial;
use crate::ids::{KeyId, KmsId, LinkId, NodeId, SessionId};

pub use service::Kms;

/// Upper bound on keys served by one `get_key` call.
pub const MAX_KEYS_PER_REQUEST: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KeySource {
    Qkd,
    Relayed,
}

#[derive(Clone, Debug)]
pub struct KeyBlock {
    pub key_id: KeyId,
    pub key: KeyMaterial,
    pub link_id: LinkId,
    pub consumed: bool,
    pub source: KeySource,
    /// Set for relayed keys.
    pub session_id: Option<SessionId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayRule {
    pub session_id: SessionId,
    pub upstream: Option<NodeId>,
    pub downstream: Option<NodeId>,
    pub link_in: Option<LinkId>,
    pub link_out: Option<LinkId>,
}

impl RelayRule {
    pub fn is_entry(&self) -> bool {
        self.upstream.is_none()
    }

    pub fn is_terminal(&self) -> bool {
        self.downstream.is_none()
    }
}

/// Hop-to-hop relay message.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelayEnvelope {
    pub session_id: SessionId,
    pub key_id: KeyId,
    #[serde(rename = "payload_b64")]
    pub payload: KeyMaterial,
    /// Link key used as pad on the inbound hop; `None` at the entry node.
    pub pad_key_id: Option<KeyId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredKey {
    #[serde(rename = "key_ID")]
    pub key_id: KeyId,
    pub key: KeyMaterial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LinkHealth {
    Up,
    Down,
}

/// Shape follows the ETSI GS QKD 014 status container, plus link health.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmsStatus {
    #[serde(rename = "source_KME_ID")]
    pub source_kms_id: KmsId,
    #[serde(rename = "target_KME_ID")]
    pub target_node: NodeId,
    pub link_id: LinkId,
    pub key_size: usize,
    pub stored_key_count: usize,
    pub max_key_per_request: usize,
    pub link_health: LinkHealth,
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum KmsError {
    #[error("keys exhausted on link {link_id}: requested {requested}, available {available}")]
    KeysExhausted {
        link_id: LinkId,
        requested: usize,
        available: usize,
    },
    #[error("requested key size {requested} bits, store holds {stored}-bit keys")]
    SizeUnavailable { requested: usize, stored: usize },
    #[error("unknown key id {0}")]
    UnknownKeyId(KeyId),
    #[error("key {0} already consumed")]
    AlreadyConsumed(KeyId),
    #[error("unknown link or peer `{0}`")]
    UnknownLink(String),
    #[error("link {0} is down")]
    LinkDown(LinkId),
    #[error("relay rule for session {0} already installed")]
    DuplicateSession(SessionId),
    #[error("no relay rule for session {0}")]
    NoRule(SessionId),
    #[error("link {0} has no keys left for relay padding")]
    LinkKeysExhausted(LinkId),
    #[error("invalid relay rule: {0}")]
    InvalidRule(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("relay payload length {payload} bits does not match pad length {pad} bits")]
    PadLengthMismatch { payload: usize, pad: usize },
    #[error("duplicate relayed key id {0}")]
    DuplicateKeyId(KeyId),
    #[error("KMS unavailable: {0}")]
    Unavailable(String),
    #[error("KMS at {0} unreachable")]
    Unreachable(String),
}

/// ETSI GS QKD 014 delivery calls plus relay control.
pub trait KmsApi: Send + Sync {
    fn get_key(
        &self,
        caller: &str,
        peer: &str,
        number: usize,
        size_bits: usize,
    ) -> Result<Vec<DeliveredKey>, KmsError>;

    fn get_key_with_id(&self, caller: &str, key_ids: &[KeyId]) -> Result<Vec<DeliveredKey>, KmsError>;

    fn status(&self, peer: &str) -> Result<KmsStatus, KmsError>;

    fn install_relay_rule(&self, rule: RelayRule) -> Result<(), KmsError>;

    /// Idempotent; also drops relayed keys parked for the session.
    fn remove_relay_rule(&self, session_id: &SessionId) -> Result<(), KmsError>;

    fn forward_relayed_key(&self, envelope: RelayEnvelope) -> Result<(), KmsError>;
}
