//! Central security controller.
//!
//! Holds the topology, assigns the strongest feasible level to an app pair,
//! programs the participating vKMS and KMS instances for each session and
//! tracks sessions until both sides have taken delivery.

mod assign;
mod policy;
mod topology;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};
use uuid::Uuid;

use crate::ids::{AppId, KeyId, LinkId, NodeId, SessionId};
use crate::level::SecurityLevel;
use crate::qkd_sim::QkdLink;
use crate::transport::Directory;

pub use assign::{assign_level, choose_relay, shortest_path, Assignment, PathMetric};
pub use policy::{
    compute_policy, kem_label, ConfigurationRequest, PeerRef, PolicyBlock, PolicyConfig, Role, RoleAssignment,
    SessionPolicy, SessionRequirements, LABEL_QKD, POLICY_SCHEMA_VERSION,
};
pub use topology::{Node, NodeKind, Topology};

/// Directory identity of the controller itself.
pub const CONTROLLER_NODE: &str = "QUSEC";

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum QusecError {
    #[error("unknown application {0}")]
    UnknownApplication(AppId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} already registered")]
    DuplicateNode(NodeId),
    #[error("application {0} already registered")]
    DuplicateApplication(AppId),
    #[error("link {0} already registered")]
    DuplicateLink(LinkId),
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("both applications are hosted on node {0}")]
    SameNode(NodeId),
    #[error("level {requested} is infeasible, topology supports {assigned}")]
    InfeasibleLevel {
        requested: SecurityLevel,
        assigned: SecurityLevel,
    },
    #[error("session requires at least {required}, topology supports {assigned}")]
    RequirementNotMet {
        required: SecurityLevel,
        assigned: SecurityLevel,
    },
    #[error("key size {requested} bits not supported (link keys: {available:?})")]
    UnsupportedKeySize {
        requested: usize,
        available: Option<usize>,
    },
    #[error("no relay path")]
    NoRelayPath,
    #[error("participant {0} unreachable")]
    ParticipantUnreachable(NodeId),
    #[error("participant {node} rejected its role: {reason}")]
    ParticipantRejected { node: NodeId, reason: String },
    #[error("key id {0} already bound to a session")]
    DuplicateKeyId(KeyId),
    #[error("unknown session")]
    UnknownSession,
    #[error("session key not yet derived")]
    NotYetDerived,
    #[error("caller is not the session target")]
    WrongCaller,
    #[error("key already delivered")]
    AlreadyDelivered,
    #[error("invalid session state: {0}")]
    InvalidState(String),
    #[error("controller unreachable: {0}")]
    Unreachable(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Configured,
    Derived,
    DeliveredBoth,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: SessionId,
    pub initiator_app: AppId,
    pub target_app: AppId,
    pub initiator_node: NodeId,
    pub target_node: NodeId,
    pub level: SecurityLevel,
    pub key_size_bits: usize,
    pub derived_key_id: KeyId,
    /// KMS key ids the target must redeem; level 1 and 2 only.
    pub kms_key_ids: Vec<KeyId>,
    pub state: SessionState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelRequest {
    pub src_app: AppId,
    pub dst_app: AppId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedReport {
    pub session_id: SessionId,
    pub app: AppId,
    #[serde(default)]
    pub kms_key_ids: Vec<KeyId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupRequest {
    pub app: AppId,
    pub key_id: KeyId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryConfirmation {
    pub session_id: SessionId,
    pub app: AppId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortRequest {
    pub session_id: SessionId,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub node_id: NodeId,
    pub role: Role,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerStats {
    pub security_level_requests: u64,
    pub configuration_requests: u64,
    pub derived_reports: u64,
    pub session_lookups: u64,
    pub delivery_confirmations: u64,
    pub aborts: u64,
}

impl ControllerStats {
    pub fn total(&self) -> u64 {
        self.security_level_requests
            + self.configuration_requests
            + self.derived_reports
            + self.session_lookups
            + self.delivery_confirmations
            + self.aborts
    }

    pub fn since(&self, earlier: &ControllerStats) -> ControllerStats {
        ControllerStats {
            security_level_requests: self.security_level_requests - earlier.security_level_requests,
            configuration_requests: self.configuration_requests - earlier.configuration_requests,
            derived_reports: self.derived_reports - earlier.derived_reports,
            session_lookups: self.session_lookups - earlier.session_lookups,
            delivery_confirmations: self.delivery_confirmations - earlier.delivery_confirmations,
            aborts: self.aborts - earlier.aborts,
        }
    }
}

/// Requests a vKMS makes of the controller.
pub trait ControllerApi: Send + Sync {
    fn security_level_request(&self, req: &LevelRequest) -> Result<SecurityLevel, QusecError>;
    fn configuration_request(&self, req: &ConfigurationRequest) -> Result<SessionPolicy, QusecError>;
    fn report_derived(&self, report: &DerivedReport) -> Result<(), QusecError>;
    fn session_lookup(&self, req: &LookupRequest) -> Result<SessionRecord, QusecError>;
    fn confirm_delivery(&self, req: &DeliveryConfirmation) -> Result<(), QusecError>;
    fn abort_session(&self, req: &AbortRequest) -> Result<(), QusecError>;
}

struct SessionEntry {
    record: SessionRecord,
    policy: SessionPolicy,
    touched: Instant,
}

#[derive(Default)]
struct Sessions {
    by_id: HashMap<SessionId, SessionEntry>,
    by_key: HashMap<KeyId, SessionId>,
}

impl Sessions {
    fn remove(&mut self, session_id: &SessionId) -> Option<SessionEntry> {
        let entry = self.by_id.remove(session_id)?;
        self.by_key.remove(&entry.record.derived_key_id);
        Some(entry)
    }
}

#[derive(Default)]
struct Counters {
    level: AtomicU64,
    configuration: AtomicU64,
    derived: AtomicU64,
    lookup: AtomicU64,
    delivery: AtomicU64,
    abort: AtomicU64,
}

pub struct Qusec {
    topology: RwLock<Arc<Topology>>,
    version: AtomicU64,
    directory: Arc<dyn Directory>,
    config: PolicyConfig,
    sessions: Mutex<Sessions>,
    idle_timeout: RwLock<Duration>,
    counters: Counters,
}

impl Qusec {
    pub fn new(directory: Arc<dyn Directory>, config: PolicyConfig) -> Self {
        Self {
            topology: RwLock::new(Arc::new(Topology::new())),
            version: AtomicU64::new(0),
            directory,
            config,
            sessions: Mutex::new(Sessions::default()),
            idle_timeout: RwLock::new(DEFAULT_IDLE_TIMEOUT),
            counters: Counters::default(),
        }
    }

    pub fn with_idle_timeout(self, timeout: Duration) -> Self {
        self.set_idle_timeout(timeout);
        self
    }

    pub fn set_idle_timeout(&self, timeout: Duration) {
        *self.idle_timeout.write().unwrap() = timeout;
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn topology(&self) -> Arc<Topology> {
        self.topology.read().unwrap().clone()
    }

    pub fn topology_version(&self) -> u64 {
        self.version.load(Ordering::SeqCst)
    }

    fn mutate_topology<T>(&self, f: impl FnOnce(&mut Topology) -> Result<T, QusecError>) -> Result<T, QusecError> {
        let mut guard = self.topology.write().unwrap();
        let mut next = (**guard).clone();
        let out = f(&mut next)?;
        *guard = Arc::new(next);
        self.version.fetch_add(1, Ordering::SeqCst);
        Ok(out)
    }

    pub fn register_node(&self, node: Node) -> Result<(), QusecError> {
        self.mutate_topology(|t| t.add_node(node))
    }

    pub fn register_link(&self, link: QkdLink) -> Result<(), QusecError> {
        self.mutate_topology(|t| t.add_link(link))
    }

    pub fn remove_link(&self, link_id: &LinkId) -> Result<QkdLink, QusecError> {
        self.mutate_topology(|t| t.remove_link(link_id))
    }

    pub fn stats(&self) -> ControllerStats {
        let c = &self.counters;
        ControllerStats {
            security_level_requests: c.level.load(Ordering::SeqCst),
            configuration_requests: c.configuration.load(Ordering::SeqCst),
            derived_reports: c.derived.load(Ordering::SeqCst),
            session_lookups: c.lookup.load(Ordering::SeqCst),
            delivery_confirmations: c.delivery.load(Ordering::SeqCst),
            aborts: c.abort.load(Ordering::SeqCst),
        }
    }

    pub fn session(&self, session_id: &SessionId) -> Option<SessionRecord> {
        self.sessions
            .lock()
            .unwrap()
            .by_id
            .get(session_id)
            .map(|e| e.record.clone())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().by_id.len()
    }

    /// Sessions not yet delivered to both sides.
    pub fn open_session_count(&self) -> usize {
        self.sessions
            .lock()
            .unwrap()
            .by_id
            .values()
            .filter(|e| e.record.state != SessionState::DeliveredBoth)
            .count()
    }

    /// Drops sessions idle for longer than the timeout; returns how many.
    pub fn expire_idle_sessions(&self) -> usize {
        let timeout = *self.idle_timeout.read().unwrap();
        let expired: Vec<SessionEntry> = {
            let mut sessions = self.sessions.lock().unwrap();
            let stale: Vec<SessionId> = sessions
                .by_id
                .iter()
                .filter(|(_, e)| e.touched.elapsed() > timeout)
                .map(|(id, _)| id.clone())
                .collect();
            stale.iter().filter_map(|id| sessions.remove(id)).collect()
        };
        for entry in &expired {
            debug!(session = %entry.record.session_id, "expiring idle session");
            self.teardown(&entry.policy, entry.policy.participants.len());
        }
        expired.len()
    }

    /// Installs every block of the policy; on the first failure the blocks
    /// already installed are removed again.
    pub fn distribute_policy(&self, policy: &SessionPolicy) -> Result<Vec<Ack>, QusecError> {
        let me = NodeId::from(CONTROLLER_NODE);
        let mut acks = Vec::with_capacity(policy.participants.len());
        for (i, block) in policy.participants.iter().enumerate() {
            let result = if block.role.targets_kms() {
                let rule = block.relay_rule.clone().ok_or_else(|| QusecError::ParticipantRejected {
                    node: block.node_id.clone(),
                    reason: "relay hop without rule".into(),
                })?;
                match self.directory.kms(&me, &block.node_id) {
                    None => Err(QusecError::ParticipantUnreachable(block.node_id.clone())),
                    Some(kms) => kms.install_relay_rule(rule).map_err(|e| classify(&block.node_id, e.to_string(), matches!(e, crate::kms::KmsError::Unreachable(_)))),
                }
            } else {
                match self.directory.vkms(&me, &block.node_id) {
                    None => Err(QusecError::ParticipantUnreachable(block.node_id.clone())),
                    Some(vkms) => vkms
                        .install_role(policy.assignment_for(block))
                        .map_err(|e| classify(&block.node_id, e.to_string(), e.is_unreachable())),
                }
            };
            match result {
                Ok(()) => acks.push(Ack {
                    node_id: block.node_id.clone(),
                    role: block.role,
                }),
                Err(e) => {
                    warn!(session = %policy.session_id, node = %block.node_id, error = %e, "policy distribution failed");
                    self.teardown(policy, i);
                    return Err(e);
                }
            }
        }
        Ok(acks)
    }

    /// Best-effort removal of the first `installed` blocks.
    fn teardown(&self, policy: &SessionPolicy, installed: usize) {
        let me = NodeId::from(CONTROLLER_NODE);
        for block in &policy.participants[..installed] {
            if block.role.targets_kms() {
                if let Some(kms) = self.directory.kms(&me, &block.node_id) {
                    let _ = kms.remove_relay_rule(&policy.session_id);
                }
            } else if let Some(vkms) = self.directory.vkms(&me, &block.node_id) {
                let _ = vkms.remove_role(&policy.session_id);
            }
        }
    }
}

fn classify(node: &NodeId, reason: String, unreachable: bool) -> QusecError {
    if unreachable {
        QusecError::ParticipantUnreachable(node.clone())
    } else {
        QusecError::ParticipantRejected {
            node: node.clone(),
            reason,
        }
    }
}

impl ControllerApi for Qusec {
    fn security_level_request(&self, req: &LevelRequest) -> Result<SecurityLevel, QusecError> {
        self.counters.level.fetch_add(1, Ordering::SeqCst);
        let topo = self.topology();
        Ok(assign_level(&topo, &req.src_app, &req.dst_app)?.level)
    }

    fn configuration_request(&self, req: &ConfigurationRequest) -> Result<SessionPolicy, QusecError> {
        self.counters.configuration.fetch_add(1, Ordering::SeqCst);
        self.expire_idle_sessions();
        let topo = self.topology();
        let session_id = SessionId::new(Uuid::new_v4().to_string());
        let policy = compute_policy(&topo, req, session_id.clone(), &self.config)?;
        {
            let mut sessions = self.sessions.lock().unwrap();
            if sessions.by_key.contains_key(&req.derived_key_id) {
                return Err(QusecError::DuplicateKeyId(req.derived_key_id.clone()));
            }
            sessions.by_key.insert(req.derived_key_id.clone(), session_id.clone());
            sessions.by_id.insert(
                session_id.clone(),
                SessionEntry {
                    record: SessionRecord {
                        session_id: session_id.clone(),
                        initiator_app: policy.initiator_app.clone(),
                        target_app: policy.target_app.clone(),
                        initiator_node: policy.initiator_node.clone(),
                        target_node: policy.target_node.clone(),
                        level: policy.level,
                        key_size_bits: policy.key_size_bits,
                        derived_key_id: policy.derived_key_id.clone(),
                        kms_key_ids: Vec::new(),
                        state: SessionState::Configured,
                    },
                    policy: policy.clone(),
                    touched: Instant::now(),
                },
            );
        }
        if let Err(e) = self.distribute_policy(&policy) {
            self.sessions.lock().unwrap().remove(&session_id);
            return Err(e);
        }
        debug!(session = %session_id, level = %policy.level, "session configured");
        Ok(policy)
    }

    fn report_derived(&self, report: &DerivedReport) -> Result<(), QusecError> {
        self.counters.derived.fetch_add(1, Ordering::SeqCst);
        let mut sessions = self.sessions.lock().unwrap();
        let entry = sessions
            .by_id
            .get_mut(&report.session_id)
            .ok_or(QusecError::UnknownSession)?;
        if entry.record.initiator_app != report.app {
            return Err(QusecError::WrongCaller);
        }
        if entry.record.state != SessionState::Configured {
            return Err(QusecError::InvalidState(format!("{:?}", entry.record.state)));
        }
        entry.record.kms_key_ids = report.kms_key_ids.clone();
        entry.record.state = SessionState::Derived;
        entry.touched = Instant::now();
        Ok(())
    }

    fn session_lookup(&self, req: &LookupRequest) -> Result<SessionRecord, QusecError> {
        self.counters.lookup.fetch_add(1, Ordering::SeqCst);
        let mut sessions = self.sessions.lock().unwrap();
        let session_id = sessions
            .by_key
            .get(&req.key_id)
            .cloned()
            .ok_or(QusecError::UnknownSession)?;
        let entry = sessions.by_id.get_mut(&session_id).expect("indexes agree");
        if entry.record.target_app != req.app {
            return Err(if entry.record.initiator_app == req.app {
                QusecError::WrongCaller
            } else {
                QusecError::UnknownSession
            });
        }
        match entry.record.state {
            SessionState::Configured => Err(QusecError::NotYetDerived),
            SessionState::DeliveredBoth => Err(QusecError::AlreadyDelivered),
            SessionState::Derived => {
                entry.touched = Instant::now();
                Ok(entry.record.clone())
            }
        }
    }

    fn confirm_delivery(&self, req: &DeliveryConfirmation) -> Result<(), QusecError> {
        self.counters.delivery.fetch_add(1, Ordering::SeqCst);
        let mut sessions = self.sessions.lock().unwrap();
        let entry = sessions
            .by_id
            .get_mut(&req.session_id)
            .ok_or(QusecError::UnknownSession)?;
        if entry.record.target_app != req.app {
            return Err(QusecError::WrongCaller);
        }
        match entry.record.state {
            SessionState::Derived => {
                entry.record.state = SessionState::DeliveredBoth;
                entry.touched = Instant::now();
                Ok(())
            }
            SessionState::DeliveredBoth => Err(QusecError::AlreadyDelivered),
            SessionState::Configured => Err(QusecError::NotYetDerived),
        }
    }

    fn abort_session(&self, req: &AbortRequest) -> Result<(), QusecError> {
        self.counters.abort.fetch_add(1, Ordering::SeqCst);
        let entry = self
            .sessions
            .lock()
            .unwrap()
            .remove(&req.session_id)
            .ok_or(QusecError::UnknownSession)?;
        warn!(session = %req.session_id, reason = %req.reason, "session aborted");
        self.teardown(&entry.policy, entry.policy.participants.len());
        Ok(())
    }
}
