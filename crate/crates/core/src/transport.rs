//! Service lookup and the in-process network.
//!
//! Every cross-node call goes through a [`Directory`]. The in-process
//! implementation wraps each target in a proxy that logs the call, applies
//! fault injection and fails with an `Unreachable` error when the target
//! node is marked down.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock, Weak};

use crate::ids::{KeyId, NodeId, SessionId};
use crate::kms::{DeliveredKey, KmsApi, KmsError, KmsStatus, RelayEnvelope, RelayRule};
use crate::level::SecurityLevel;
use crate::qusec::{
    AbortRequest, ConfigurationRequest, ControllerApi, DeliveryConfirmation, DerivedReport, LevelRequest,
    LookupRequest, QusecError, RoleAssignment, SessionPolicy, SessionRecord, CONTROLLER_NODE,
};
use crate::vkms::{AppKey, AppKeyRequest, KeyWithIdRequest, PeerMessage, VkmsApi, VkmsError};

/// Resolves the service a node talks to. `None` means unreachable.
pub trait Directory: Send + Sync {
    fn kms(&self, from: &NodeId, node: &NodeId) -> Option<Arc<dyn KmsApi>>;
    fn vkms(&self, from: &NodeId, node: &NodeId) -> Option<Arc<dyn VkmsApi>>;
    fn controller(&self, from: &NodeId) -> Option<Arc<dyn ControllerApi>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Service {
    Kms,
    Vkms,
    Controller,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageRecord {
    pub from: NodeId,
    pub to: NodeId,
    pub service: Service,
    pub call: &'static str,
}

/// Rewrites a vKMS peer message in flight. `reply` is set for responses.
pub type PeerTamper = dyn Fn(&NodeId, &NodeId, bool, &mut PeerMessage) + Send + Sync;

#[derive(Default)]
struct NetState {
    kms: RwLock<HashMap<NodeId, Weak<dyn KmsApi>>>,
    vkms: RwLock<HashMap<NodeId, Weak<dyn VkmsApi>>>,
    controller: RwLock<Option<Weak<dyn ControllerApi>>>,
    down: RwLock<HashSet<NodeId>>,
    controller_down: AtomicBool,
    log: Mutex<Vec<MessageRecord>>,
    relay_tap: Mutex<Vec<(NodeId, RelayEnvelope)>>,
    tamper: RwLock<Option<Arc<PeerTamper>>>,
}

impl NetState {
    fn log(&self, from: &NodeId, to: &NodeId, service: Service, call: &'static str) {
        self.log.lock().unwrap().push(MessageRecord {
            from: from.clone(),
            to: to.clone(),
            service,
            call,
        });
    }

    fn is_down(&self, node: &NodeId) -> bool {
        self.down.read().unwrap().contains(node)
    }
}

/// Directory over services living in this process.
#[derive(Clone, Default)]
pub struct InProcNetwork {
    state: Arc<NetState>,
}

impl InProcNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Holds weak references only; the caller keeps the services alive.
    pub fn add_kms(&self, node: NodeId, kms: Arc<dyn KmsApi>) {
        self.state.kms.write().unwrap().insert(node, Arc::downgrade(&kms));
    }

    pub fn add_vkms(&self, node: NodeId, vkms: Arc<dyn VkmsApi>) {
        self.state.vkms.write().unwrap().insert(node, Arc::downgrade(&vkms));
    }

    pub fn set_controller(&self, controller: Arc<dyn ControllerApi>) {
        *self.state.controller.write().unwrap() = Some(Arc::downgrade(&controller));
    }

    /// Marks every service on `node` unreachable (or reachable again).
    pub fn set_node_down(&self, node: &NodeId, down: bool) {
        let mut set = self.state.down.write().unwrap();
        if down {
            set.insert(node.clone());
        } else {
            set.remove(node);
        }
    }

    pub fn set_controller_down(&self, down: bool) {
        self.state.controller_down.store(down, Ordering::SeqCst);
    }

    pub fn set_peer_tamper(&self, tamper: Option<Arc<PeerTamper>>) {
        *self.state.tamper.write().unwrap() = tamper;
    }

    pub fn messages(&self) -> Vec<MessageRecord> {
        self.state.log.lock().unwrap().clone()
    }

    pub fn message_count(&self) -> usize {
        self.state.log.lock().unwrap().len()
    }

    pub fn clear_messages(&self) {
        self.state.log.lock().unwrap().clear();
    }

    /// Relay envelopes as received by each KMS, in arrival order.
    pub fn relay_envelopes(&self) -> Vec<(NodeId, RelayEnvelope)> {
        self.state.relay_tap.lock().unwrap().clone()
    }

    pub fn clear_relay_envelopes(&self) {
        self.state.relay_tap.lock().unwrap().clear();
    }
}

impl Directory for InProcNetwork {
    fn kms(&self, from: &NodeId, node: &NodeId) -> Option<Arc<dyn KmsApi>> {
        let inner = self.state.kms.read().unwrap().get(node)?.upgrade()?;
        Some(Arc::new(KmsProxy {
            state: self.state.clone(),
            from: from.clone(),
            to: node.clone(),
            inner,
        }))
    }

    fn vkms(&self, from: &NodeId, node: &NodeId) -> Option<Arc<dyn VkmsApi>> {
        let inner = self.state.vkms.read().unwrap().get(node)?.upgrade()?;
        Some(Arc::new(VkmsProxy {
            state: self.state.clone(),
            from: from.clone(),
            to: node.clone(),
            inner,
        }))
    }

    fn controller(&self, from: &NodeId) -> Option<Arc<dyn ControllerApi>> {
        let inner = self.state.controller.read().unwrap().as_ref()?.upgrade()?;
        Some(Arc::new(ControllerProxy {
            state: self.state.clone(),
            from: from.clone(),
            inner,
        }))
    }
}

struct KmsProxy {
    state: Arc<NetState>,
    from: NodeId,
    to: NodeId,
    inner: Arc<dyn KmsApi>,
}

impl KmsProxy {
    fn enter(&self, call: &'static str) -> Result<(), KmsError> {
        self.state.log(&self.from, &self.to, Service::Kms, call);
        // A node always reaches its own KMS.
        if self.from != self.to && (self.state.is_down(&self.to) || self.state.is_down(&self.from)) {
            return Err(KmsError::Unreachable(self.to.to_string()));
        }
        Ok(())
    }
}

impl KmsApi for KmsProxy {
    fn get_key(&self, caller: &str, peer: &str, number: usize, size_bits: usize) -> Result<Vec<DeliveredKey>, KmsError> {
        self.enter("get_key")?;
        self.inner.get_key(caller, peer, number, size_bits)
    }

    fn get_key_with_id(&self, caller: &str, key_ids: &[KeyId]) -> Result<Vec<DeliveredKey>, KmsError> {
        self.enter("get_key_with_id")?;
        self.inner.get_key_with_id(caller, key_ids)
    }

    fn status(&self, peer: &str) -> Result<KmsStatus, KmsError> {
        self.enter("status")?;
        self.inner.status(peer)
    }

    fn install_relay_rule(&self, rule: RelayRule) -> Result<(), KmsError> {
        self.enter("install_relay_rule")?;
        self.inner.install_relay_rule(rule)
    }

    fn remove_relay_rule(&self, session_id: &SessionId) -> Result<(), KmsError> {
        self.enter("remove_relay_rule")?;
        self.inner.remove_relay_rule(session_id)
    }

    fn forward_relayed_key(&self, envelope: RelayEnvelope) -> Result<(), KmsError> {
        self.enter("forward_relayed_key")?;
        self.state
            .relay_tap
            .lock()
            .unwrap()
            .push((self.to.clone(), envelope.clone()));
        self.inner.forward_relayed_key(envelope)
    }
}

struct VkmsProxy {
    state: Arc<NetState>,
    from: NodeId,
    to: NodeId,
    inner: Arc<dyn VkmsApi>,
}

impl VkmsProxy {
    fn enter(&self, call: &'static str) -> Result<(), VkmsError> {
        self.state.log(&self.from, &self.to, Service::Vkms, call);
        if self.from != self.to && (self.state.is_down(&self.to) || self.state.is_down(&self.from)) {
            return Err(VkmsError::Unreachable(self.to.to_string()));
        }
        Ok(())
    }

    fn tamper(&self, reply: bool, msg: &mut PeerMessage) {
        let hook = self.state.tamper.read().unwrap().clone();
        if let Some(hook) = hook {
            let (from, to) = if reply { (&self.to, &self.from) } else { (&self.from, &self.to) };
            hook(from, to, reply, msg);
        }
    }
}

impl VkmsApi for VkmsProxy {
    fn app_get_key(&self, req: &AppKeyRequest) -> Result<AppKey, VkmsError> {
        self.enter("app_get_key")?;
        self.inner.app_get_key(req)
    }

    fn app_get_key_with_id(&self, req: &KeyWithIdRequest) -> Result<AppKey, VkmsError> {
        self.enter("app_get_key_with_id")?;
        self.inner.app_get_key_with_id(req)
    }

    fn install_role(&self, assignment: RoleAssignment) -> Result<(), VkmsError> {
        self.enter("install_role")?;
        self.inner.install_role(assignment)
    }

    fn remove_role(&self, session_id: &SessionId) -> Result<(), VkmsError> {
        self.enter("remove_role")?;
        self.inner.remove_role(session_id)
    }

    fn peer_message(&self, from: &NodeId, mut msg: PeerMessage) -> Result<PeerMessage, VkmsError> {
        self.enter(msg.kind())?;
        self.tamper(false, &mut msg);
        let mut reply = self.inner.peer_message(from, msg)?;
        self.tamper(true, &mut reply);
        Ok(reply)
    }
}

struct ControllerProxy {
    state: Arc<NetState>,
    from: NodeId,
    inner: Arc<dyn ControllerApi>,
}

impl ControllerProxy {
    fn enter(&self, call: &'static str) -> Result<(), QusecError> {
        let controller = NodeId::from(CONTROLLER_NODE);
        self.state.log(&self.from, &controller, Service::Controller, call);
        if self.state.controller_down.load(Ordering::SeqCst) || self.state.is_down(&self.from) {
            return Err(QusecError::Unreachable(CONTROLLER_NODE.to_owned()));
        }
        Ok(())
    }
}

impl ControllerApi for ControllerProxy {
    fn security_level_request(&self, req: &LevelRequest) -> Result<SecurityLevel, QusecError> {
        self.enter("security_level_request")?;
        self.inner.security_level_request(req)
    }

    fn configuration_request(&self, req: &ConfigurationRequest) -> Result<SessionPolicy, QusecError> {
        self.enter("configuration_request")?;
        self.inner.configuration_request(req)
    }

    fn report_derived(&self, report: &DerivedReport) -> Result<(), QusecError> {
        self.enter("report_derived")?;
        self.inner.report_derived(report)
    }

    fn session_lookup(&self, req: &LookupRequest) -> Result<SessionRecord, QusecError> {
        self.enter("session_lookup")?;
        self.inner.session_lookup(req)
    }

    fn confirm_delivery(&self, req: &DeliveryConfirmation) -> Result<(), QusecError> {
        self.enter("confirm_delivery")?;
        self.inner.confirm_delivery(req)
    }

    fn abort_session(&self, req: &AbortRequest) -> Result<(), QusecError> {
        self.enter("abort_session")?;
        self.inner.abort_session(req)
    }
}
