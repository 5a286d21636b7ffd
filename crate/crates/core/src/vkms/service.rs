use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

use super::messages::{PeerMessage, PublicKeyEntry};
use super::{AppKey, AppKeyRequest, KeyWithIdRequest, NodeDescriptor, StepTimings, VkmsApi, VkmsError};
use crate::crypto::{
    kdf_combine, kem_decapsulate, kem_encapsulate, kem_keygen, key_confirmation_tag, open_payload, otp_transform,
    seal_payload, verify_key_confirmation, CryptoError, DerivationContext, KemKeyPair, KemSuite, KeyMaterial,
    SecretInput, PURPOSE_PAD_EXPAND, PURPOSE_PAYLOAD_AUTH,
};
use crate::ids::{AppId, KeyId, NodeId, SessionId};
use crate::kms::{KmsApi, LinkHealth, RelayEnvelope};
use crate::level::SecurityLevel;
use crate::qusec::{
    kem_label, AbortRequest, ConfigurationRequest, ControllerApi, DeliveryConfirmation, DerivedReport,
    LevelRequest, LookupRequest, NodeKind, Role, RoleAssignment, SessionRequirements, LABEL_QKD,
};
use crate::transport::Directory;

const LABEL_AUX: &str = "aux";
const AUTH_KEY_BITS: usize = 256;

/// Fault hooks for tests and the fault-injection harness.
#[derive(Default)]
pub struct VkmsFaults {
    /// Bit of the padded link key the relay flips before sealing it.
    pub flip_relay_otp_bit: Mutex<Option<usize>>,
}

/// Inputs and output of one derivation, kept for oracle checks.
#[cfg(any(test, feature = "transcript"))]
#[derive(Clone, Debug)]
pub struct TranscriptEntry {
    pub session_id: SessionId,
    pub node_id: NodeId,
    pub role: Role,
    pub purpose: String,
    pub inputs: Vec<(String, KeyMaterial)>,
    pub context: Option<DerivationContext>,
    pub output: KeyMaterial,
}

#[derive(Default)]
struct Scratch {
    own_kem: Option<KemKeyPair>,
    kem1: Option<KeyMaterial>,
    session_key: Option<KeyMaterial>,
}

struct HeldKey {
    key: KeyMaterial,
    confirmed: bool,
}

pub struct Vkms {
    node: NodeDescriptor,
    directory: Arc<dyn Directory>,
    roles: Mutex<HashMap<SessionId, RoleAssignment>>,
    scratch: Mutex<HashMap<SessionId, Scratch>>,
    held: Mutex<HashMap<SessionId, HeldKey>>,
    rng: Mutex<ChaCha20Rng>,
    faults: VkmsFaults,
    #[cfg(any(test, feature = "transcript"))]
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl Vkms {
    /// `seed` fixes the node's CSPRNG stream; it is mixed with the node id.
    pub fn new(node: NodeDescriptor, directory: Arc<dyn Directory>, seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"qsafe/vkms-rng/v1");
        h.update(seed.to_le_bytes());
        h.update(node.node_id.as_str().as_bytes());
        Self {
            node,
            directory,
            roles: Mutex::new(HashMap::new()),
            scratch: Mutex::new(HashMap::new()),
            held: Mutex::new(HashMap::new()),
            rng: Mutex::new(ChaCha20Rng::from_seed(h.finalize().into())),
            faults: VkmsFaults::default(),
            #[cfg(any(test, feature = "transcript"))]
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn node(&self) -> &NodeDescriptor {
        &self.node
    }

    pub fn faults(&self) -> &VkmsFaults {
        &self.faults
    }

    pub fn role(&self, session_id: &SessionId) -> Option<RoleAssignment> {
        self.roles.lock().unwrap().get(session_id).cloned()
    }

    /// Sessions with any state held here: roles, in-flight secrets or keys.
    pub fn live_sessions(&self) -> Vec<SessionId> {
        let mut out: Vec<SessionId> = self.roles.lock().unwrap().keys().cloned().collect();
        out.extend(self.scratch.lock().unwrap().keys().cloned());
        out.extend(self.held.lock().unwrap().keys().cloned());
        out.sort();
        out.dedup();
        out
    }

    #[cfg(any(test, feature = "transcript"))]
    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().unwrap().clone()
    }

    #[cfg(any(test, feature = "transcript"))]
    pub fn clear_transcript(&self) {
        self.transcript.lock().unwrap().clear();
    }

    #[allow(unused_variables)]
    fn record(
        &self,
        a: &RoleAssignment,
        purpose: &str,
        inputs: &[(&str, &KeyMaterial)],
        context: Option<&DerivationContext>,
        output: &KeyMaterial,
    ) {
        #[cfg(any(test, feature = "transcript"))]
        self.transcript.lock().unwrap().push(TranscriptEntry {
            session_id: a.session_id.clone(),
            node_id: self.node.node_id.clone(),
            role: a.block.role,
            purpose: purpose.to_owned(),
            inputs: inputs.iter().map(|(l, m)| (l.to_string(), (*m).clone())).collect(),
            context: context.cloned(),
            output: output.clone(),
        });
    }

    fn ensure_hosted(&self, app: &AppId) -> Result<(), VkmsError> {
        if self.node.apps.contains(app) {
            Ok(())
        } else {
            Err(VkmsError::UnknownApplication(app.clone()))
        }
    }

    fn controller(&self) -> Result<Arc<dyn ControllerApi>, VkmsError> {
        self.directory
            .controller(&self.node.node_id)
            .ok_or_else(|| VkmsError::ControllerUnreachable(self.node.node_id.to_string()))
    }

    fn kms(&self) -> Result<Arc<dyn KmsApi>, VkmsError> {
        if !self.node.kind.is_quantum() {
            return Err(VkmsError::LocalKmsUnavailable(format!("{} has no KMS", self.node.node_id)));
        }
        self.directory
            .kms(&self.node.node_id, &self.node.node_id)
            .ok_or_else(|| VkmsError::LocalKmsUnavailable(self.node.node_id.to_string()))
    }

    fn assignment(&self, session_id: &SessionId) -> Result<RoleAssignment, VkmsError> {
        self.role(session_id)
            .ok_or_else(|| VkmsError::NoRole(session_id.clone()))
    }

    fn expect_role(&self, session_id: &SessionId, role: Role) -> Result<RoleAssignment, VkmsError> {
        let a = self.assignment(session_id)?;
        if a.block.role != role {
            return Err(VkmsError::UnexpectedMessage(format!(
                "session {session_id}: holding {:?}, message needs {role:?}",
                a.block.role
            )));
        }
        Ok(a)
    }

    fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha20Rng) -> T) -> T {
        f(&mut self.rng.lock().unwrap())
    }

    fn send(&self, to: &NodeId, msg: PeerMessage) -> Result<PeerMessage, VkmsError> {
        let peer = self
            .directory
            .vkms(&self.node.node_id, to)
            .ok_or_else(|| VkmsError::PeerUnreachable(to.clone()))?;
        debug!(from = %self.node.node_id, %to, kind = msg.kind(), "peer message");
        peer.peer_message(&self.node.node_id, msg).map_err(|e| match e {
            VkmsError::Unreachable(_) => VkmsError::PeerUnreachable(to.clone()),
            other => VkmsError::Peer {
                node: to.clone(),
                error: Box::new(other),
            },
        })
    }

    fn peer_node(a: &RoleAssignment, role: Role) -> Result<NodeId, VkmsError> {
        a.block
            .peer(role)
            .map(|p| p.node_id.clone())
            .ok_or_else(|| VkmsError::InvalidRole(format!("policy names no {role:?} peer")))
    }

    fn first_suite(a: &RoleAssignment) -> Result<KemSuite, VkmsError> {
        a.block
            .kem_suites
            .first()
            .copied()
            .ok_or_else(|| VkmsError::InvalidRole("policy names no KEM suite".into()))
    }

    /// App on this node taking part in the session.
    fn local_app(&self, a: &RoleAssignment) -> AppId {
        if a.initiator_node == self.node.node_id {
            a.initiator_app.clone()
        } else {
            a.target_app.clone()
        }
    }

    fn is_initiator(&self, a: &RoleAssignment) -> bool {
        a.initiator_node == self.node.node_id
    }

    fn session_context(a: &RoleAssignment) -> DerivationContext {
        DerivationContext::session_key(
            a.session_id.clone(),
            a.initiator_app.clone(),
            a.target_app.clone(),
            a.level,
            a.key_size_bits,
        )
    }

    /// Session key from the labelled secrets, combined in recipe order.
    fn derive_session_key(
        &self,
        a: &RoleAssignment,
        secrets: &[(&str, &KeyMaterial)],
    ) -> Result<KeyMaterial, VkmsError> {
        let inputs = a
            .block
            .kdf_recipe
            .iter()
            .map(|label| {
                secrets
                    .iter()
                    .find(|(l, _)| l == label)
                    .map(|(l, m)| SecretInput::new(*l, (*m).clone()))
                    .ok_or_else(|| VkmsError::InvalidRole(format!("recipe input `{label}` unavailable")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let ctx = Self::session_context(a);
        let key = kdf_combine(&inputs, &ctx)?;
        let ordered: Vec<(&str, &KeyMaterial)> = inputs.iter().map(|i| (i.label.as_str(), &i.material)).collect();
        self.record(a, &ctx.purpose, &ordered, Some(&ctx), &key);
        Ok(key)
    }

    /// Pad for the relayed link key and key for the payload AEAD, both from
    /// the relay-to-receiver KEM secret.
    fn relay_keys(
        a: &RoleAssignment,
        aux: &KeyMaterial,
        pad_bits: usize,
    ) -> Result<(KeyMaterial, KeyMaterial), CryptoError> {
        let ctx = Self::session_context(a);
        let input = [SecretInput::new(LABEL_AUX, aux.clone())];
        let pad = if aux.len_bits() == pad_bits {
            aux.clone()
        } else {
            kdf_combine(&input, &ctx.derive_for(PURPOSE_PAD_EXPAND, pad_bits))?
        };
        let auth = kdf_combine(&input, &ctx.derive_for(PURPOSE_PAYLOAD_AUTH, AUTH_KEY_BITS))?;
        Ok((pad, auth))
    }

    fn payload_aad(session_id: &SessionId, key_id: &KeyId) -> Vec<u8> {
        let mut aad = session_id.as_str().as_bytes().to_vec();
        aad.push(0);
        aad.extend_from_slice(key_id.as_str().as_bytes());
        aad
    }

    fn purge(&self, session_id: &SessionId) {
        self.roles.lock().unwrap().remove(session_id);
        self.scratch.lock().unwrap().remove(session_id);
        self.held.lock().unwrap().remove(session_id);
    }

    fn hold(&self, session_id: &SessionId, key: KeyMaterial) {
        self.held
            .lock()
            .unwrap()
            .insert(session_id.clone(), HeldKey { key, confirmed: false });
    }

    fn ack(session_id: &SessionId) -> PeerMessage {
        PeerMessage::Ack {
            session_id: session_id.clone(),
        }
    }

    fn expect_ack(reply: PeerMessage) -> Result<(), VkmsError> {
        match reply {
            PeerMessage::Ack { .. } => Ok(()),
            other => Err(VkmsError::UnexpectedMessage(format!("expected ack, got {}", other.kind()))),
        }
    }

    fn confirm_with(&self, peer: &NodeId, a: &RoleAssignment, key: &KeyMaterial) -> Result<(), VkmsError> {
        let tag = key_confirmation_tag(key, &a.session_id).to_vec();
        Self::expect_ack(self.send(
            peer,
            PeerMessage::KeyConfirm {
                session_id: a.session_id.clone(),
                tag,
            },
        )?)
    }

    // ---- initiator side ------------------------------------------------

    /// Returns the key and the KMS key ids the target must redeem.
    fn run_initiator(&self, a: &RoleAssignment) -> Result<(KeyMaterial, Vec<KeyId>), VkmsError> {
        match a.block.role {
            Role::L1Endpoint => self.run_level1(a),
            Role::L2Endpoint => self.run_level2(a),
            Role::Receiver => self.run_level3_receiver(a).map(|k| (k, Vec::new())),
            Role::Passive => self.run_level3_passive(a).map(|k| (k, Vec::new())),
            Role::Endpoint => self.run_level4(a).map(|k| (k, Vec::new())),
            other => Err(VkmsError::InvalidRole(format!("{other:?} cannot initiate"))),
        }
    }

    fn run_level1(&self, a: &RoleAssignment) -> Result<(KeyMaterial, Vec<KeyId>), VkmsError> {
        let mut keys = self.kms()?.get_key(a.initiator_app.as_str(), a.target_app.as_str(), 1, a.key_size_bits)?;
        let k = keys.pop().ok_or_else(|| VkmsError::UnexpectedMessage("KMS returned no key".into()))?;
        Ok((k.key, vec![k.key_id]))
    }

    fn run_level2(&self, a: &RoleAssignment) -> Result<(KeyMaterial, Vec<KeyId>), VkmsError> {
        let key = self.with_rng(|r| KeyMaterial::random(r, a.key_size_bits))?;
        self.kms()?.forward_relayed_key(RelayEnvelope {
            session_id: a.session_id.clone(),
            key_id: a.derived_key_id.clone(),
            payload: key.clone(),
            pad_key_id: None,
        })?;
        Ok((key, vec![a.derived_key_id.clone()]))
    }

    fn run_level3_receiver(&self, a: &RoleAssignment) -> Result<KeyMaterial, VkmsError> {
        let passive = Self::peer_node(a, Role::Passive)?;
        let suite = Self::first_suite(a)?;
        let sid = &a.session_id;
        let passive_pk = match self.send(&passive, PeerMessage::PublicKeyRequest { session_id: sid.clone() })? {
            PeerMessage::KemPublicKey {
                suite: s, public_key, ..
            } if s == suite => public_key,
            other => return Err(VkmsError::UnexpectedMessage(format!("expected kem_public_key, got {}", other.kind()))),
        };
        let (ct1, kem1, own) = self.with_rng(|r| -> Result<_, CryptoError> {
            let (ct, ss) = kem_encapsulate(suite, &passive_pk, r)?;
            Ok((ct, ss, kem_keygen(suite, r)?))
        })?;
        let own_pk = own.public_key.clone();
        self.scratch.lock().unwrap().insert(
            sid.clone(),
            Scratch {
                own_kem: Some(own),
                kem1: Some(kem1),
                session_key: None,
            },
        );
        Self::expect_ack(self.send(
            &passive,
            PeerMessage::KemCiphertext {
                session_id: sid.clone(),
                ciphertext: ct1,
                receiver_public_key: own_pk,
            },
        )?)?;
        // The relayed payload has been processed by now.
        let key = self
            .scratch
            .lock()
            .unwrap()
            .get_mut(sid)
            .and_then(|s| s.session_key.take())
            .ok_or_else(|| VkmsError::UnexpectedMessage("relayed payload never arrived".into()))?;
        self.confirm_with(&passive, a, &key)?;
        Ok(key)
    }

    fn run_level3_passive(&self, a: &RoleAssignment) -> Result<KeyMaterial, VkmsError> {
        let receiver = Self::peer_node(a, Role::Receiver)?;
        let suite = Self::first_suite(a)?;
        let sid = &a.session_id;
        let own = self.with_rng(|r| kem_keygen(suite, r))?;
        let reply = self.send(
            &receiver,
            PeerMessage::KemPublicKey {
                session_id: sid.clone(),
                suite,
                public_key: own.public_key.clone(),
            },
        )?;
        let (ct1, receiver_pk) = match reply {
            PeerMessage::KemCiphertext {
                ciphertext,
                receiver_public_key,
                ..
            } => (ciphertext, receiver_public_key),
            other => return Err(VkmsError::UnexpectedMessage(format!("expected kem_ciphertext, got {}", other.kind()))),
        };
        let kem1 = kem_decapsulate(suite, &own.secret_key, &ct1)?;
        drop(own);
        let qkd = self.passive_relay_step(a, receiver_pk)?;
        let key = self.derive_session_key(a, &[(kem_label(0).as_str(), &kem1), (LABEL_QKD, &qkd)])?;
        self.confirm_with(&receiver, a, &key)?;
        Ok(key)
    }

    /// Takes a fresh link key shared with the relay and has the relay ship
    /// it to the receiver.
    fn passive_relay_step(&self, a: &RoleAssignment, receiver_pk: Vec<u8>) -> Result<KeyMaterial, VkmsError> {
        let relay = Self::peer_node(a, Role::Relay)?;
        let kms = self.kms()?;
        let status = kms.status(relay.as_str())?;
        let mut keys = kms.get_key(self.local_app(a).as_str(), relay.as_str(), 1, status.key_size)?;
        let qkd = keys.pop().ok_or_else(|| VkmsError::UnexpectedMessage("KMS returned no key".into()))?;
        Self::expect_ack(self.send(
            &relay,
            PeerMessage::RelayKeyId {
                session_id: a.session_id.clone(),
                key_id: qkd.key_id,
                receiver_public_key: receiver_pk,
            },
        )?)?;
        Ok(qkd.key)
    }

    fn run_level4(&self, a: &RoleAssignment) -> Result<KeyMaterial, VkmsError> {
        let target = Self::peer_node(a, Role::Endpoint)?;
        let pairs = self.with_rng(|r| {
            a.block
                .kem_suites
                .iter()
                .map(|s| kem_keygen(*s, r))
                .collect::<Result<Vec<_>, _>>()
        })?;
        if pairs.is_empty() {
            return Err(VkmsError::InvalidRole("policy names no KEM suite".into()));
        }
        let reply = self.send(
            &target,
            PeerMessage::EndpointPublicKeys {
                session_id: a.session_id.clone(),
                public_keys: pairs
                    .iter()
                    .map(|p| PublicKeyEntry {
                        suite: p.suite,
                        public_key: p.public_key.clone(),
                    })
                    .collect(),
            },
        )?;
        let cts = match reply {
            PeerMessage::EndpointCiphertexts { ciphertexts, .. } if ciphertexts.len() == pairs.len() => ciphertexts,
            other => {
                return Err(VkmsError::UnexpectedMessage(format!(
                    "expected {} endpoint ciphertexts, got {}",
                    pairs.len(),
                    other.kind()
                )))
            }
        };
        let secrets = pairs
            .iter()
            .zip(&cts)
            .map(|(p, ct)| kem_decapsulate(p.suite, &p.secret_key, ct))
            .collect::<Result<Vec<_>, _>>()?;
        drop(pairs);
        let labels: Vec<String> = (0..secrets.len()).map(kem_label).collect();
        let named: Vec<(&str, &KeyMaterial)> = labels.iter().map(String::as_str).zip(&secrets).collect();
        let key = self.derive_session_key(a, &named)?;
        self.confirm_with(&target, a, &key)?;
        Ok(key)
    }

    // ---- responder side -----------------------------------------------

    fn handle(&self, msg: PeerMessage) -> Result<PeerMessage, VkmsError> {
        match msg {
            PeerMessage::PublicKeyRequest { session_id } => {
                let a = self.expect_role(&session_id, Role::Passive)?;
                let suite = Self::first_suite(&a)?;
                let own = self.with_rng(|r| kem_keygen(suite, r))?;
                let public_key = own.public_key.clone();
                self.scratch.lock().unwrap().entry(session_id.clone()).or_default().own_kem = Some(own);
                Ok(PeerMessage::KemPublicKey {
                    session_id,
                    suite,
                    public_key,
                })
            }
            PeerMessage::KemPublicKey {
                session_id,
                suite,
                public_key,
            } => {
                let a = self.expect_role(&session_id, Role::Receiver)?;
                if suite != Self::first_suite(&a)? {
                    return Err(VkmsError::UnexpectedMessage(format!("suite {suite} not in policy")));
                }
                let (ct1, kem1, own) = self.with_rng(|r| -> Result<_, CryptoError> {
                    let (ct, ss) = kem_encapsulate(suite, &public_key, r)?;
                    Ok((ct, ss, kem_keygen(suite, r)?))
                })?;
                let receiver_public_key = own.public_key.clone();
                self.scratch.lock().unwrap().insert(
                    session_id.clone(),
                    Scratch {
                        own_kem: Some(own),
                        kem1: Some(kem1),
                        session_key: None,
                    },
                );
                Ok(PeerMessage::KemCiphertext {
                    session_id,
                    ciphertext: ct1,
                    receiver_public_key,
                })
            }
            PeerMessage::KemCiphertext {
                session_id,
                ciphertext,
                receiver_public_key,
            } => {
                let a = self.expect_role(&session_id, Role::Passive)?;
                let own = self
                    .scratch
                    .lock()
                    .unwrap()
                    .get_mut(&session_id)
                    .and_then(|s| s.own_kem.take())
                    .ok_or_else(|| VkmsError::UnexpectedMessage("no public key was issued".into()))?;
                let kem1 = kem_decapsulate(own.suite, &own.secret_key, &ciphertext)?;
                drop(own);
                let qkd = self.passive_relay_step(&a, receiver_public_key)?;
                let key = self.derive_session_key(&a, &[(kem_label(0).as_str(), &kem1), (LABEL_QKD, &qkd)])?;
                self.scratch.lock().unwrap().remove(&session_id);
                self.hold(&session_id, key);
                Ok(Self::ack(&session_id))
            }
            PeerMessage::RelayKeyId {
                session_id,
                key_id,
                receiver_public_key,
            } => {
                let a = self.expect_role(&session_id, Role::Relay)?;
                let receiver = Self::peer_node(&a, Role::Receiver)?;
                let suite = Self::first_suite(&a)?;
                let mut keys = self.kms()?.get_key_with_id(self.node.node_id.as_str(), &[key_id.clone()])?;
                let qkd = keys.pop().ok_or_else(|| VkmsError::UnexpectedMessage("KMS returned no key".into()))?;
                let (ct2, aux) = self.with_rng(|r| kem_encapsulate(suite, &receiver_public_key, r))?;
                let (pad, auth) = Self::relay_keys(&a, &aux, qkd.key.len_bits())?;
                let mut padded = otp_transform(&qkd.key, &pad)?;
                self.record(&a, "relay-otp", &[(LABEL_QKD, &qkd.key), ("pad", &pad)], None, &padded);
                if let Some(bit) = *self.faults.flip_relay_otp_bit.lock().unwrap() {
                    padded = padded.with_bit_flipped(bit % padded.len_bits());
                }
                let sealed = self.with_rng(|r| {
                    seal_payload(&auth, &Self::payload_aad(&session_id, &key_id), padded.as_bytes(), r)
                })?;
                let reply = self.send(
                    &receiver,
                    PeerMessage::RelayedPayload {
                        session_id: session_id.clone(),
                        ciphertext: ct2,
                        encrypted_key: sealed,
                        key_id,
                    },
                );
                // The relay's part is single-use either way.
                self.purge(&session_id);
                Self::expect_ack(reply?)?;
                Ok(Self::ack(&session_id))
            }
            PeerMessage::RelayedPayload {
                session_id,
                ciphertext,
                encrypted_key,
                key_id,
            } => {
                let a = self.expect_role(&session_id, Role::Receiver)?;
                let (own, kem1) = {
                    let mut scratch = self.scratch.lock().unwrap();
                    let s = scratch
                        .get_mut(&session_id)
                        .ok_or_else(|| VkmsError::UnexpectedMessage("no receiver state".into()))?;
                    match (s.own_kem.take(), s.kem1.take()) {
                        (Some(own), Some(kem1)) => (own, kem1),
                        _ => return Err(VkmsError::UnexpectedMessage("receiver state incomplete".into())),
                    }
                };
                let aux = kem_decapsulate(own.suite, &own.secret_key, &ciphertext)?;
                drop(own);
                let padded_len_bits = encrypted_key
                    .len()
                    .checked_sub(crate::crypto::AEAD_OVERHEAD)
                    .filter(|n| *n > 0)
                    .ok_or(VkmsError::IntegrityFailure)?
                    * 8;
                let (pad, auth) = Self::relay_keys(&a, &aux, padded_len_bits)?;
                let padded = open_payload(&auth, &Self::payload_aad(&session_id, &key_id), &encrypted_key)
                    .map_err(|_| VkmsError::IntegrityFailure)?;
                let qkd = otp_transform(&KeyMaterial::new(padded)?, &pad)?;
                let key = self.derive_session_key(&a, &[(kem_label(0).as_str(), &kem1), (LABEL_QKD, &qkd)])?;
                if self.is_initiator(&a) {
                    self.scratch
                        .lock()
                        .unwrap()
                        .entry(session_id.clone())
                        .or_default()
                        .session_key = Some(key);
                } else {
                    self.scratch.lock().unwrap().remove(&session_id);
                    self.hold(&session_id, key);
                }
                Ok(Self::ack(&session_id))
            }
            PeerMessage::EndpointPublicKeys {
                session_id,
                public_keys,
            } => {
                let a = self.expect_role(&session_id, Role::Endpoint)?;
                let offered: Vec<KemSuite> = public_keys.iter().map(|p| p.suite).collect();
                if offered != a.block.kem_suites {
                    return Err(VkmsError::UnexpectedMessage(format!(
                        "offered suites {offered:?} differ from policy {:?}",
                        a.block.kem_suites
                    )));
                }
                let (cts, secrets): (Vec<Vec<u8>>, Vec<KeyMaterial>) = self
                    .with_rng(|r| {
                        public_keys
                            .iter()
                            .map(|p| kem_encapsulate(p.suite, &p.public_key, r))
                            .collect::<Result<Vec<_>, _>>()
                    })?
                    .into_iter()
                    .unzip();
                let labels: Vec<String> = (0..secrets.len()).map(kem_label).collect();
                let named: Vec<(&str, &KeyMaterial)> = labels.iter().map(String::as_str).zip(&secrets).collect();
                let key = self.derive_session_key(&a, &named)?;
                self.hold(&session_id, key);
                Ok(PeerMessage::EndpointCiphertexts {
                    session_id,
                    ciphertexts: cts,
                })
            }
            PeerMessage::KeyConfirm { session_id, tag } => {
                self.assignment(&session_id)?;
                let mut held = self.held.lock().unwrap();
                let entry = held
                    .get_mut(&session_id)
                    .ok_or_else(|| VkmsError::UnexpectedMessage("no key to confirm".into()))?;
                if !verify_key_confirmation(&entry.key, &session_id, &tag) {
                    return Err(VkmsError::KeyConfirmationFailed);
                }
                entry.confirmed = true;
                Ok(Self::ack(&session_id))
            }
            other @ (PeerMessage::EndpointCiphertexts { .. } | PeerMessage::Ack { .. }) => Err(
                VkmsError::UnexpectedMessage(format!("{} is only valid as a reply", other.kind())),
            ),
        }
    }
}

fn ms(from: Instant, to: Instant) -> f64 {
    (to - from).as_secs_f64() * 1e3
}

impl VkmsApi for Vkms {
    fn app_get_key(&self, req: &AppKeyRequest) -> Result<AppKey, VkmsError> {
        self.ensure_hosted(&req.initiator_app)?;
        let ctrl = self.controller()?;
        let t0 = Instant::now();
        let level = ctrl.security_level_request(&LevelRequest {
            src_app: req.initiator_app.clone(),
            dst_app: req.target_app.clone(),
        })?;
        let t1 = Instant::now();
        let key_id = self.with_rng(|r| KeyId::random(r));
        let policy = ctrl.configuration_request(&ConfigurationRequest {
            src_app: req.initiator_app.clone(),
            dst_app: req.target_app.clone(),
            level,
            key_size_bits: req.size_bits,
            derived_key_id: key_id.clone(),
            requirements: SessionRequirements::default(),
        })?;
        let t2 = Instant::now();
        let sid = policy.session_id.clone();

        let fail = |cause: VkmsError| -> VkmsError {
            self.purge(&sid);
            warn!(node = %self.node.node_id, session = %sid, error = %cause, "session failed, aborting");
            let _ = ctrl.abort_session(&AbortRequest {
                session_id: sid.clone(),
                reason: cause.to_string(),
            });
            VkmsError::DerivationFailed {
                level,
                cause: Box::new(cause),
            }
        };

        let (key, kms_key_ids) = match self.assignment(&sid).and_then(|a| self.run_initiator(&a)) {
            Ok(v) => v,
            Err(e) => return Err(fail(e)),
        };
        if key.len_bits() != req.size_bits {
            return Err(fail(VkmsError::KeySizeMismatch {
                expected: req.size_bits,
                actual: key.len_bits(),
            }));
        }
        let t3 = Instant::now();
        if let Err(e) = ctrl.report_derived(&DerivedReport {
            session_id: sid.clone(),
            app: req.initiator_app.clone(),
            kms_key_ids,
        }) {
            return Err(fail(e.into()));
        }
        self.purge(&sid);
        let t4 = Instant::now();
        Ok(AppKey {
            key_id,
            key,
            level,
            session_id: sid,
            timings: StepTimings {
                assignment_ms: ms(t0, t1),
                configuration_ms: ms(t1, t2),
                derivation_ms: ms(t2, t3),
                delivery_ms: ms(t3, t4),
            },
        })
    }

    fn app_get_key_with_id(&self, req: &KeyWithIdRequest) -> Result<AppKey, VkmsError> {
        self.ensure_hosted(&req.target_app)?;
        let ctrl = self.controller()?;
        let t0 = Instant::now();
        let record = ctrl.session_lookup(&LookupRequest {
            app: req.target_app.clone(),
            key_id: req.key_id.clone(),
        })?;
        let t1 = Instant::now();
        let sid = record.session_id.clone();
        let key = match record.level {
            SecurityLevel::L1 | SecurityLevel::L2 => {
                let mut keys = self.kms()?.get_key_with_id(req.target_app.as_str(), &record.kms_key_ids)?;
                keys.pop()
                    .ok_or_else(|| VkmsError::UnexpectedMessage("KMS returned no key".into()))?
                    .key
            }
            SecurityLevel::L3 | SecurityLevel::L4 => {
                let held = self.held.lock().unwrap();
                match held.get(&sid) {
                    Some(h) if h.confirmed => h.key.clone(),
                    _ => return Err(VkmsError::KeyNotAvailable(sid)),
                }
            }
        };
        if key.len_bits() != record.key_size_bits {
            return Err(VkmsError::KeySizeMismatch {
                expected: record.key_size_bits,
                actual: key.len_bits(),
            });
        }
        let t2 = Instant::now();
        ctrl.confirm_delivery(&DeliveryConfirmation {
            session_id: sid.clone(),
            app: req.target_app.clone(),
        })?;
        self.purge(&sid);
        let t3 = Instant::now();
        Ok(AppKey {
            key_id: req.key_id.clone(),
            key,
            level: record.level,
            session_id: sid,
            timings: StepTimings {
                assignment_ms: ms(t0, t1),
                configuration_ms: 0.0,
                derivation_ms: ms(t1, t2),
                delivery_ms: ms(t2, t3),
            },
        })
    }

    fn install_role(&self, assignment: RoleAssignment) -> Result<(), VkmsError> {
        let block = &assignment.block;
        if block.node_id != self.node.node_id {
            return Err(VkmsError::InvalidRole(format!(
                "block for {} delivered to {}",
                block.node_id, self.node.node_id
            )));
        }
        let kind_ok = match block.role {
            Role::KmsRelayHop => false,
            Role::Receiver => self.node.kind == NodeKind::Classical,
            Role::Endpoint => true,
            _ => self.node.kind.is_quantum(),
        };
        if !kind_ok {
            return Err(VkmsError::RoleKindMismatch {
                role: block.role,
                kind: self.node.kind,
            });
        }
        if block.role.needs_quantum_node() {
            let peer = block
                .kms_peer
                .as_ref()
                .ok_or_else(|| VkmsError::InvalidRole("quantum role without kms_peer".into()))?;
            let status = self
                .kms()?
                .status(peer.as_str())
                .map_err(|e| VkmsError::LocalKmsUnavailable(e.to_string()))?;
            if status.link_health != LinkHealth::Up {
                return Err(VkmsError::LocalKmsUnavailable(format!("link {} is down", status.link_id)));
            }
        }
        let mut roles = self.roles.lock().unwrap();
        if roles.contains_key(&assignment.session_id) {
            return Err(VkmsError::DuplicateSession(assignment.session_id));
        }
        roles.insert(assignment.session_id.clone(), assignment);
        Ok(())
    }

    fn remove_role(&self, session_id: &SessionId) -> Result<(), VkmsError> {
        self.purge(session_id);
        Ok(())
    }

    fn peer_message(&self, from: &NodeId, msg: PeerMessage) -> Result<PeerMessage, VkmsError> {
        let session_id = msg.session_id().clone();
        let kind = msg.kind();
        self.handle(msg).map_err(|e| {
            // Fail closed: nothing of a broken session survives here.
            warn!(node = %self.node.node_id, %from, kind, session = %session_id, error = %e, "peer message failed");
            if !matches!(e, VkmsError::NoRole(_)) {
                self.purge(&session_id);
            }
            e
        })
    }
}
