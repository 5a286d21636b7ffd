//! Per-node key service for applications.
//!
//! An initiator asks its vKMS for a key to share with a target app. The vKMS
//! obtains a level and a session policy from the controller, runs the
//! level's establishment protocol with the other participants and reports
//! the result. The target's vKMS later hands the same key to the target app
//! against the key id, without any configuration traffic of its own.

mod messages;
mod service;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoError, KeyMaterial};
use crate::ids::{AppId, KeyId, NodeId, SessionId};
use crate::kms::KmsError;
use crate::level::SecurityLevel;
use crate::qusec::{NodeKind, QusecError, Role, RoleAssignment};

pub use messages::{PeerMessage, PublicKeyEntry};
pub use service::{Vkms, VkmsFaults};
#[cfg(any(test, feature = "transcript"))]
pub use service::TranscriptEntry;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: NodeId,
    pub kind: NodeKind,
    pub apps: Vec<AppId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppKeyRequest {
    pub initiator_app: AppId,
    pub target_app: AppId,
    pub size_bits: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyWithIdRequest {
    pub target_app: AppId,
    pub key_id: KeyId,
}

/// Wall-clock split of one request, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub assignment_ms: f64,
    pub configuration_ms: f64,
    pub derivation_ms: f64,
    pub delivery_ms: f64,
}

impl StepTimings {
    pub fn sum_ms(&self) -> f64 {
        self.assignment_ms + self.configuration_ms + self.derivation_ms + self.delivery_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppKey {
    pub key_id: KeyId,
    pub key: KeyMaterial,
    pub level: SecurityLevel,
    pub session_id: SessionId,
    pub timings: StepTimings,
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum VkmsError {
    #[error("application {0} is not hosted here")]
    UnknownApplication(AppId),
    #[error("controller unreachable: {0}")]
    ControllerUnreachable(String),
    #[error("controller: {0}")]
    Controller(QusecError),
    #[error("{level} derivation failed: {cause}")]
    DerivationFailed {
        level: SecurityLevel,
        cause: Box<VkmsError>,
    },
    #[error("kms: {0}")]
    Kms(KmsError),
    #[error("crypto: {0}")]
    Crypto(CryptoError),
    #[error("peer {0} unreachable")]
    PeerUnreachable(NodeId),
    #[error("peer {node}: {error}")]
    Peer { node: NodeId, error: Box<VkmsError> },
    #[error("role {role:?} cannot run on a {kind} node")]
    RoleKindMismatch { role: Role, kind: NodeKind },
    #[error("local KMS unavailable: {0}")]
    LocalKmsUnavailable(String),
    #[error("no role installed for session {0}")]
    NoRole(SessionId),
    #[error("role for session {0} already installed")]
    DuplicateSession(SessionId),
    #[error("invalid role: {0}")]
    InvalidRole(String),
    #[error("unexpected message: {0}")]
    UnexpectedMessage(String),
    #[error("key confirmation failed")]
    KeyConfirmationFailed,
    #[error("relayed payload failed integrity check")]
    IntegrityFailure,
    #[error("no confirmed key held for session {0}")]
    KeyNotAvailable(SessionId),
    #[error("key has {actual} bits, expected {expected}")]
    KeySizeMismatch { expected: usize, actual: usize },
    #[error("vKMS unreachable: {0}")]
    Unreachable(String),
}

impl VkmsError {
    pub fn is_unreachable(&self) -> bool {
        matches!(self, Self::Unreachable(_))
    }

    /// Innermost cause, looking through derivation and peer wrappers.
    pub fn root_cause(&self) -> &VkmsError {
        match self {
            Self::DerivationFailed { cause, .. } => cause.root_cause(),
            Self::Peer { error, .. } => error.root_cause(),
            other => other,
        }
    }
}

impl From<CryptoError> for VkmsError {
    fn from(e: CryptoError) -> Self {
        Self::Crypto(e)
    }
}

impl From<KmsError> for VkmsError {
    fn from(e: KmsError) -> Self {
        Self::Kms(e)
    }
}

impl From<QusecError> for VkmsError {
    fn from(e: QusecError) -> Self {
        match e {
            QusecError::Unreachable(s) => Self::ControllerUnreachable(s),
            other => Self::Controller(other),
        }
    }
}

/// Calls served by a vKMS: app-facing key delivery, role installation by
/// the controller and session traffic from other vKMS instances.
pub trait VkmsApi: Send + Sync {
    fn app_get_key(&self, req: &AppKeyRequest) -> Result<AppKey, VkmsError>;
    fn app_get_key_with_id(&self, req: &KeyWithIdRequest) -> Result<AppKey, VkmsError>;
    fn install_role(&self, assignment: RoleAssignment) -> Result<(), VkmsError>;
    fn remove_role(&self, session_id: &SessionId) -> Result<(), VkmsError>;
    fn peer_message(&self, from: &NodeId, msg: PeerMessage) -> Result<PeerMessage, VkmsError>;
}
