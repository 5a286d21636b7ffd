//! Blocking HTTP clients for each service and the directory that hands
//! them out.
//!
//! Transport failures, including unreadable responses, map to the
//! service's `Unreachable` error; anything the server answered with is
//! decoded back into the typed error it sent.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use qsafe_core::ids::{KeyId, NodeId, SessionId};
use qsafe_core::kms::{DeliveredKey, KmsApi, KmsError, KmsStatus, RelayEnvelope, RelayRule};
use qsafe_core::level::SecurityLevel;
use qsafe_core::qusec::{
    AbortRequest, ConfigurationRequest, ControllerApi, DeliveryConfirmation, DerivedReport, LevelRequest,
    LookupRequest, QusecError, RoleAssignment, SessionPolicy, SessionRecord, CONTROLLER_NODE,
};
use qsafe_core::transport::{Directory, MessageRecord, Service};
use qsafe_core::vkms::{AppKey, AppKeyRequest, KeyWithIdRequest, PeerMessage, VkmsApi, VkmsError};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tracing::debug;
use ureq::http::Response;
use ureq::{Agent, Body};

use crate::wire::{DecKeysRequest, EncKeysRequest, KeyContainer, KeyIdEntry, LevelResponse, FROM_HEADER, SAE_HEADER};

const TIMEOUT: Duration = Duration::from_secs(30);

fn agent() -> Agent {
    Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(TIMEOUT))
        .build()
        .into()
}

fn decode<T, E>(target: &str, sent: Result<Response<Body>, ureq::Error>, unreachable: fn(String) -> E) -> Result<T, E>
where
    T: DeserializeOwned,
    E: DeserializeOwned,
{
    let mut resp = sent.map_err(|e| {
        debug!(%target, error = %e, "transport failure");
        unreachable(target.to_owned())
    })?;
    let status = resp.status();
    if status.is_success() {
        return resp.body_mut().read_json::<T>().map_err(|e| {
            debug!(%target, error = %e, "undecodable response");
            unreachable(target.to_owned())
        });
    }
    Err(resp.body_mut().read_json::<E>().unwrap_or_else(|e| {
        debug!(%target, %status, error = %e, "undecodable error body");
        unreachable(target.to_owned())
    }))
}

#[derive(Default)]
struct Registry {
    kms: HashMap<NodeId, String>,
    vkms: HashMap<NodeId, String>,
    controller: Option<String>,
}

/// Resolves services to base URLs. Cheap to clone; clones share the
/// registry, the connection pool and the message log.
#[derive(Clone)]
pub struct HttpDirectory {
    registry: Arc<RwLock<Registry>>,
    agent: Agent,
    log: Arc<Mutex<Vec<MessageRecord>>>,
}

impl Default for HttpDirectory {
    fn default() -> Self {
        Self {
            registry: Arc::default(),
            agent: agent(),
            log: Arc::default(),
        }
    }
}

impl HttpDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_kms(&self, node: NodeId, base_url: String) {
        self.registry.write().unwrap().kms.insert(node, base_url);
    }

    pub fn set_vkms(&self, node: NodeId, base_url: String) {
        self.registry.write().unwrap().vkms.insert(node, base_url);
    }

    pub fn set_controller(&self, base_url: String) {
        self.registry.write().unwrap().controller = Some(base_url);
    }

    /// Calls issued through this directory, in order.
    pub fn messages(&self) -> Vec<MessageRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn clear_messages(&self) {
        self.log.lock().unwrap().clear();
    }

    fn endpoint(&self, from: &NodeId, to: &NodeId, service: Service, base: String) -> Endpoint {
        Endpoint {
            agent: self.agent.clone(),
            log: self.log.clone(),
            from: from.clone(),
            to: to.clone(),
            service,
            base,
        }
    }
}

impl Directory for HttpDirectory {
    fn kms(&self, from: &NodeId, node: &NodeId) -> Option<Arc<dyn KmsApi>> {
        let base = self.registry.read().unwrap().kms.get(node)?.clone();
        Some(Arc::new(KmsClient(self.endpoint(from, node, Service::Kms, base))))
    }

    fn vkms(&self, from: &NodeId, node: &NodeId) -> Option<Arc<dyn VkmsApi>> {
        let base = self.registry.read().unwrap().vkms.get(node)?.clone();
        Some(Arc::new(VkmsClient(self.endpoint(from, node, Service::Vkms, base))))
    }

    fn controller(&self, from: &NodeId) -> Option<Arc<dyn ControllerApi>> {
        let base = self.registry.read().unwrap().controller.clone()?;
        let to = NodeId::from(CONTROLLER_NODE);
        Some(Arc::new(ControllerClient(self.endpoint(from, &to, Service::Controller, base))))
    }
}

struct Endpoint {
    agent: Agent,
    log: Arc<Mutex<Vec<MessageRecord>>>,
    from: NodeId,
    to: NodeId,
    service: Service,
    base: String,
}

impl Endpoint {
    fn record(&self, call: &'static str) {
        self.log.lock().unwrap().push(MessageRecord {
            from: self.from.clone(),
            to: self.to.clone(),
            service: self.service,
            call,
        });
    }

    fn post<B, T, E>(&self, call: &'static str, path: &str, headers: &[(&str, &str)], body: &B, err: fn(String) -> E) -> Result<T, E>
    where
        B: Serialize,
        T: DeserializeOwned,
        E: DeserializeOwned,
    {
        self.record(call);
        let mut req = self.agent.post(format!("{}{path}", self.base));
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        decode(self.to.as_str(), req.send_json(body), err)
    }

    fn get<T, E>(&self, call: &'static str, path: &str, headers: &[(&str, &str)], err: fn(String) -> E) -> Result<T, E>
    where
        T: DeserializeOwned,
        E: DeserializeOwned,
    {
        self.record(call);
        let mut req = self.agent.get(format!("{}{path}", self.base));
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        decode(self.to.as_str(), req.call(), err)
    }

    fn delete<E: DeserializeOwned>(&self, call: &'static str, path: &str, err: fn(String) -> E) -> Result<(), E> {
        self.record(call);
        decode(self.to.as_str(), self.agent.delete(format!("{}{path}", self.base)).call(), err)
    }
}

struct KmsClient(Endpoint);

impl KmsApi for KmsClient {
    fn get_key(&self, caller: &str, peer: &str, number: usize, size_bits: usize) -> Result<Vec<DeliveredKey>, KmsError> {
        let body = EncKeysRequest {
            number,
            size: size_bits,
        };
        self.0
            .post::<_, KeyContainer, _>(
                "get_key",
                &format!("/api/v1/keys/{peer}/enc_keys"),
                &[(SAE_HEADER, caller)],
                &body,
                KmsError::Unreachable,
            )
            .map(|c| c.keys)
    }

    fn get_key_with_id(&self, caller: &str, key_ids: &[KeyId]) -> Result<Vec<DeliveredKey>, KmsError> {
        let body = DecKeysRequest {
            key_ids: key_ids.iter().map(|k| KeyIdEntry { key_id: k.clone() }).collect(),
        };
        self.0
            .post::<_, KeyContainer, _>(
                "get_key_with_id",
                &format!("/api/v1/keys/{caller}/dec_keys"),
                &[],
                &body,
                KmsError::Unreachable,
            )
            .map(|c| c.keys)
    }

    fn status(&self, peer: &str) -> Result<KmsStatus, KmsError> {
        self.0
            .get("status", &format!("/api/v1/keys/{peer}/status"), &[], KmsError::Unreachable)
    }

    fn install_relay_rule(&self, rule: RelayRule) -> Result<(), KmsError> {
        self.0
            .post("install_relay_rule", "/relay/rules", &[], &rule, KmsError::Unreachable)
    }

    fn remove_relay_rule(&self, session_id: &SessionId) -> Result<(), KmsError> {
        self.0.delete(
            "remove_relay_rule",
            &format!("/relay/rules/{session_id}"),
            KmsError::Unreachable,
        )
    }

    fn forward_relayed_key(&self, envelope: RelayEnvelope) -> Result<(), KmsError> {
        self.0
            .post("forward_relayed_key", "/relay/forward", &[], &envelope, KmsError::Unreachable)
    }
}

struct VkmsClient(Endpoint);

impl VkmsApi for VkmsClient {
    fn app_get_key(&self, req: &AppKeyRequest) -> Result<AppKey, VkmsError> {
        self.0
            .post("app_get_key", "/api/v1/apps/enc_keys", &[], req, VkmsError::Unreachable)
    }

    fn app_get_key_with_id(&self, req: &KeyWithIdRequest) -> Result<AppKey, VkmsError> {
        self.0
            .post("app_get_key_with_id", "/api/v1/apps/dec_keys", &[], req, VkmsError::Unreachable)
    }

    fn install_role(&self, assignment: RoleAssignment) -> Result<(), VkmsError> {
        self.0
            .post("install_role", "/vkms/roles", &[], &assignment, VkmsError::Unreachable)
    }

    fn remove_role(&self, session_id: &SessionId) -> Result<(), VkmsError> {
        self.0
            .delete("remove_role", &format!("/vkms/roles/{session_id}"), VkmsError::Unreachable)
    }

    fn peer_message(&self, from: &NodeId, msg: PeerMessage) -> Result<PeerMessage, VkmsError> {
        self.0.post(
            msg.kind(),
            "/vkms/peer",
            &[(FROM_HEADER, from.as_str())],
            &msg,
            VkmsError::Unreachable,
        )
    }
}

struct ControllerClient(Endpoint);

impl ControllerApi for ControllerClient {
    fn security_level_request(&self, req: &LevelRequest) -> Result<SecurityLevel, QusecError> {
        self.0
            .post::<_, LevelResponse, _>(
                "security_level_request",
                "/security_level_request",
                &[],
                req,
                QusecError::Unreachable,
            )
            .map(|r| r.level)
    }

    fn configuration_request(&self, req: &ConfigurationRequest) -> Result<SessionPolicy, QusecError> {
        self.0.post(
            "configuration_request",
            "/configuration_request",
            &[],
            req,
            QusecError::Unreachable,
        )
    }

    fn report_derived(&self, report: &DerivedReport) -> Result<(), QusecError> {
        self.0
            .post("report_derived", "/report_derived", &[], report, QusecError::Unreachable)
    }

    fn session_lookup(&self, req: &LookupRequest) -> Result<SessionRecord, QusecError> {
        self.0
            .post("session_lookup", "/session_lookup", &[], req, QusecError::Unreachable)
    }

    fn confirm_delivery(&self, req: &DeliveryConfirmation) -> Result<(), QusecError> {
        self.0
            .post("confirm_delivery", "/confirm_delivery", &[], req, QusecError::Unreachable)
    }

    fn abort_session(&self, req: &AbortRequest) -> Result<(), QusecError> {
        self.0
            .post("abort_session", "/abort_session", &[], req, QusecError::Unreachable)
    }
}
