//! Routers for each service and a loopback server wrapper.
//!
//! Service calls block (they fan out to other services over HTTP), so every
//! handler runs its call on the blocking pool.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use qsafe_core::ids::{KeyId, NodeId, SessionId};
use qsafe_core::kms::{KmsApi, KmsError, RelayEnvelope, RelayRule};
use qsafe_core::qkd_sim::QkdLink;
use qsafe_core::qusec::{
    AbortRequest, ConfigurationRequest, ControllerApi, DeliveryConfirmation, DerivedReport, LevelRequest,
    LookupRequest, Node, Qusec, QusecError,
};
use qsafe_core::vkms::{AppKeyRequest, KeyWithIdRequest, PeerMessage, VkmsApi, VkmsError};
use serde::Serialize;
use tokio::runtime::Handle;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::wire::{DecKeysRequest, EncKeysRequest, KeyContainer, LevelResponse, FROM_HEADER, SAE_HEADER};

pub(crate) trait HttpStatus {
    fn status(&self) -> StatusCode;
}

impl HttpStatus for KmsError {
    fn status(&self) -> StatusCode {
        match self {
            KmsError::Unavailable(_) | KmsError::Unreachable(_) | KmsError::LinkDown(_) => {
                StatusCode::SERVICE_UNAVAILABLE
            }
            _ => StatusCode::BAD_REQUEST,
        }
    }
}

impl HttpStatus for VkmsError {
    fn status(&self) -> StatusCode {
        if self.is_unreachable() {
            StatusCode::SERVICE_UNAVAILABLE
        } else {
            StatusCode::BAD_REQUEST
        }
    }
}

impl HttpStatus for QusecError {
    fn status(&self) -> StatusCode {
        match self {
            QusecError::Unreachable(_) | QusecError::ParticipantUnreachable { .. } => StatusCode::SERVICE_UNAVAILABLE,
            QusecError::UnknownSession => StatusCode::NOT_FOUND,
            _ => StatusCode::BAD_REQUEST,
        }
    }
}

async fn run<T, E, F>(f: F) -> Response
where
    F: FnOnce() -> Result<T, E> + Send + 'static,
    T: Serialize + Send + 'static,
    E: Serialize + HttpStatus + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(body)) => Json(body).into_response(),
        Ok(Err(e)) => (e.status(), Json(e)).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn header(headers: &HeaderMap, name: &str) -> String {
    headers
        .get(name)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_owned()
}

type KmsState = State<Arc<dyn KmsApi>>;

/// ETSI 014 shaped key delivery plus relay control.
///
/// `enc_keys` and `status` take the peer SAE in the path and the caller in
/// `X-SAE-ID`. `dec_keys` takes the caller in the path; the link is resolved
/// from the key ids.
pub fn kms_router(kms: Arc<dyn KmsApi>) -> Router {
    Router::new()
        .route("/api/v1/keys/{peer}/status", get(kms_status))
        .route("/api/v1/keys/{peer}/enc_keys", post(kms_enc_keys))
        .route("/api/v1/keys/{caller}/dec_keys", post(kms_dec_keys))
        .route("/relay/rules", post(kms_install_rule))
        .route("/relay/rules/{session_id}", delete(kms_remove_rule))
        .route("/relay/forward", post(kms_forward))
        .with_state(kms)
}

async fn kms_status(State(kms): KmsState, Path(peer): Path<String>) -> Response {
    run(move || kms.status(&peer)).await
}

async fn kms_enc_keys(
    State(kms): KmsState,
    Path(peer): Path<String>,
    headers: HeaderMap,
    Json(req): Json<EncKeysRequest>,
) -> Response {
    let caller = header(&headers, SAE_HEADER);
    run(move || {
        kms.get_key(&caller, &peer, req.number, req.size)
            .map(|keys| KeyContainer { keys })
    })
    .await
}

async fn kms_dec_keys(State(kms): KmsState, Path(caller): Path<String>, Json(req): Json<DecKeysRequest>) -> Response {
    let ids: Vec<KeyId> = req.key_ids.into_iter().map(|k| k.key_id).collect();
    run(move || kms.get_key_with_id(&caller, &ids).map(|keys| KeyContainer { keys })).await
}

async fn kms_install_rule(State(kms): KmsState, Json(rule): Json<RelayRule>) -> Response {
    run(move || kms.install_relay_rule(rule)).await
}

async fn kms_remove_rule(State(kms): KmsState, Path(session_id): Path<String>) -> Response {
    run(move || kms.remove_relay_rule(&SessionId::new(session_id))).await
}

async fn kms_forward(State(kms): KmsState, Json(envelope): Json<RelayEnvelope>) -> Response {
    run(move || kms.forward_relayed_key(envelope)).await
}

type VkmsState = State<Arc<dyn VkmsApi>>;

/// Application key requests plus the controller and peer channels.
pub fn vkms_router(vkms: Arc<dyn VkmsApi>) -> Router {
    Router::new()
        .route("/api/v1/apps/enc_keys", post(vkms_enc_keys))
        .route("/api/v1/apps/dec_keys", post(vkms_dec_keys))
        .route("/vkms/roles", post(vkms_install_role))
        .route("/vkms/roles/{session_id}", delete(vkms_remove_role))
        .route("/vkms/peer", post(vkms_peer))
        .with_state(vkms)
}

async fn vkms_enc_keys(State(v): VkmsState, Json(req): Json<AppKeyRequest>) -> Response {
    run(move || v.app_get_key(&req)).await
}

async fn vkms_dec_keys(State(v): VkmsState, Json(req): Json<KeyWithIdRequest>) -> Response {
    run(move || v.app_get_key_with_id(&req)).await
}

async fn vkms_install_role(
    State(v): VkmsState,
    Json(assignment): Json<qsafe_core::qusec::RoleAssignment>,
) -> Response {
    run(move || v.install_role(assignment)).await
}

async fn vkms_remove_role(State(v): VkmsState, Path(session_id): Path<String>) -> Response {
    run(move || v.remove_role(&SessionId::new(session_id))).await
}

async fn vkms_peer(State(v): VkmsState, headers: HeaderMap, Json(msg): Json<PeerMessage>) -> Response {
    let from = NodeId::new(header(&headers, FROM_HEADER));
    run(move || v.peer_message(&from, msg)).await
}

type QusecState = State<Arc<Qusec>>;

/// Controller API plus topology registration.
pub fn controller_router(qusec: Arc<Qusec>) -> Router {
    Router::new()
        .route("/security_level_request", post(security_level_request))
        .route("/configuration_request", post(configuration_request))
        .route("/report_derived", post(report_derived))
        .route("/session_lookup", post(session_lookup))
        .route("/confirm_delivery", post(confirm_delivery))
        .route("/abort_session", post(abort_session))
        .route("/topology", get(topology))
        .route("/topology/nodes", post(register_node))
        .route("/topology/links", post(register_link))
        .route("/stats", get(stats))
        .with_state(qusec)
}

async fn security_level_request(State(q): QusecState, Json(req): Json<LevelRequest>) -> Response {
    run(move || q.security_level_request(&req).map(|level| LevelResponse { level })).await
}

async fn configuration_request(State(q): QusecState, Json(req): Json<ConfigurationRequest>) -> Response {
    run(move || q.configuration_request(&req)).await
}

async fn report_derived(State(q): QusecState, Json(req): Json<DerivedReport>) -> Response {
    run(move || q.report_derived(&req)).await
}

async fn session_lookup(State(q): QusecState, Json(req): Json<LookupRequest>) -> Response {
    run(move || q.session_lookup(&req)).await
}

async fn confirm_delivery(State(q): QusecState, Json(req): Json<DeliveryConfirmation>) -> Response {
    run(move || q.confirm_delivery(&req)).await
}

async fn abort_session(State(q): QusecState, Json(req): Json<AbortRequest>) -> Response {
    run(move || q.abort_session(&req)).await
}

async fn topology(State(q): QusecState) -> Response {
    Json(q.topology().as_ref().clone()).into_response()
}

async fn register_node(State(q): QusecState, Json(node): Json<Node>) -> Response {
    run(move || q.register_node(node)).await
}

async fn register_link(State(q): QusecState, Json(link): Json<QkdLink>) -> Response {
    run(move || q.register_link(link)).await
}

async fn stats(State(q): QusecState) -> Response {
    Json(q.stats()).into_response()
}

/// A router served on an ephemeral loopback port.
pub struct Server {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<io::Result<()>>>,
    runtime: Handle,
}

impl Server {
    /// Binds synchronously so the address is known on return.
    pub fn spawn(runtime: &Handle, router: Router) -> io::Result<Self> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let task = runtime.spawn(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router)
                .with_graceful_shutdown(async move {
                    let _ = rx.await;
                })
                .await
        });
        Ok(Self {
            addr,
            shutdown: Some(tx),
            task: Some(task),
            runtime: runtime.clone(),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting connections and waits for the listener to close.
    /// Must not be called from inside the runtime.
    pub fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = self
                .runtime
                .block_on(async { tokio::time::timeout(Duration::from_secs(5), task).await });
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
