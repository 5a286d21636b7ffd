use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use tracing::debug;

use super::store::LinkStore;
use super::{
    DeliveredKey, KeyBlock, KeySource, KmsApi, KmsError, KmsStatus, LinkHealth, RelayEnvelope, RelayRule,
    MAX_KEYS_PER_REQUEST,
};
use crate::crypto::{otp_transform, KeyMaterial};
use crate::ids::{KeyId, KmsId, LinkId, NodeId, SessionId};
use crate::qkd_sim::KeySink;
use crate::transport::Directory;

/// Link id used for keys parked by relay termination.
pub const RELAYED_LINK: &str = "RELAYED";

pub struct Kms {
    kms_id: KmsId,
    node_id: NodeId,
    directory: Arc<dyn Directory>,
    links: RwLock<BTreeMap<LinkId, Arc<Mutex<LinkStore>>>>,
    /// Neighbour node ids and neighbour SAE ids, resolved to the shared link.
    peers: RwLock<HashMap<String, LinkId>>,
    relayed: Mutex<HashMap<KeyId, KeyBlock>>,
    rules: Mutex<HashMap<SessionId, RelayRule>>,
    available: AtomicBool,
}

impl Kms {
    pub fn new(node_id: NodeId, directory: Arc<dyn Directory>) -> Self {
        Self {
            kms_id: KmsId::new(format!("KMS_{node_id}")),
            node_id,
            directory,
            links: RwLock::new(BTreeMap::new()),
            peers: RwLock::new(HashMap::new()),
            relayed: Mutex::new(HashMap::new()),
            rules: Mutex::new(HashMap::new()),
            available: AtomicBool::new(true),
        }
    }

    pub fn kms_id(&self) -> &KmsId {
        &self.kms_id
    }

    pub fn node_id(&self) -> &NodeId {
        &self.node_id
    }

    pub fn add_link(&self, link_id: LinkId, peer: NodeId, key_size_bits: usize) -> Result<(), KmsError> {
        let mut links = self.links.write().unwrap();
        if links.contains_key(&link_id) {
            return Err(KmsError::InvalidRequest(format!("link {link_id} already attached")));
        }
        self.peers
            .write()
            .unwrap()
            .insert(peer.as_str().to_owned(), link_id.clone());
        links.insert(
            link_id.clone(),
            Arc::new(Mutex::new(LinkStore::new(link_id, peer, key_size_bits))),
        );
        Ok(())
    }

    /// Detaches a link; its unconsumed keys are discarded.
    pub fn remove_link(&self, link_id: &LinkId) -> bool {
        let removed = self.links.write().unwrap().remove(link_id).is_some();
        self.peers.write().unwrap().retain(|_, l| l != link_id);
        removed
    }

    /// Lets `sae` be named as the peer of `get_key` calls over the link to `peer_node`.
    pub fn register_sae(&self, sae: &str, peer_node: &NodeId) -> Result<(), KmsError> {
        let link = self.resolve_peer(peer_node.as_str())?;
        self.peers.write().unwrap().insert(sae.to_owned(), link);
        Ok(())
    }

    pub fn set_link_health(&self, link_id: &LinkId, health: LinkHealth) -> Result<(), KmsError> {
        let store = self.store(link_id)?;
        store.lock().unwrap().health = health;
        Ok(())
    }

    pub fn set_available(&self, available: bool) {
        self.available.store(available, Ordering::SeqCst);
    }

    pub fn link_snapshot(&self, link_id: &LinkId) -> Result<Vec<KeyBlock>, KmsError> {
        Ok(self.store(link_id)?.lock().unwrap().snapshot())
    }

    pub fn relayed_snapshot(&self) -> Vec<KeyBlock> {
        let mut blocks: Vec<KeyBlock> = self.relayed.lock().unwrap().values().cloned().collect();
        blocks.sort_by(|a, b| a.key_id.cmp(&b.key_id));
        blocks
    }

    pub fn relay_rule(&self, session_id: &SessionId) -> Option<RelayRule> {
        self.rules.lock().unwrap().get(session_id).cloned()
    }

    pub fn unconsumed(&self, link_id: &LinkId) -> Result<usize, KmsError> {
        Ok(self.store(link_id)?.lock().unwrap().unconsumed())
    }

    fn ensure_available(&self) -> Result<(), KmsError> {
        if self.available.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(KmsError::Unavailable(self.kms_id.to_string()))
        }
    }

    fn store(&self, link_id: &LinkId) -> Result<Arc<Mutex<LinkStore>>, KmsError> {
        self.links
            .read()
            .unwrap()
            .get(link_id)
            .cloned()
            .ok_or_else(|| KmsError::UnknownLink(link_id.to_string()))
    }

    fn resolve_peer(&self, peer: &str) -> Result<LinkId, KmsError> {
        if let Some(link) = self.peers.read().unwrap().get(peer) {
            return Ok(link.clone());
        }
        let link = LinkId::from(peer);
        if self.links.read().unwrap().contains_key(&link) {
            return Ok(link);
        }
        Err(KmsError::UnknownLink(peer.to_owned()))
    }

    fn take_pad(&self, link_id: &LinkId, size_bits: usize) -> Result<DeliveredKey, KmsError> {
        let store = self.store(link_id)?;
        let mut store = store.lock().unwrap();
        match store.take_fresh(1, size_bits) {
            Ok(mut keys) => Ok(keys.remove(0)),
            Err(KmsError::KeysExhausted { .. }) => Err(KmsError::LinkKeysExhausted(link_id.clone())),
            Err(other) => Err(other),
        }
    }

    fn take_pad_by_id(&self, link_id: &LinkId, key_id: &KeyId) -> Result<DeliveredKey, KmsError> {
        let store = self.store(link_id)?;
        let mut store = store.lock().unwrap();
        store.take_by_id(key_id)
    }

    fn validate_rule(&self, rule: &RelayRule) -> Result<(), KmsError> {
        if rule.upstream.is_some() != rule.link_in.is_some() {
            return Err(KmsError::InvalidRule("upstream and link_in must be set together".into()));
        }
        if rule.downstream.is_some() != rule.link_out.is_some() {
            return Err(KmsError::InvalidRule("downstream and link_out must be set together".into()));
        }
        if rule.upstream.is_none() && rule.downstream.is_none() {
            return Err(KmsError::InvalidRule("rule has neither upstream nor downstream".into()));
        }
        for (neighbour, link) in [(&rule.upstream, &rule.link_in), (&rule.downstream, &rule.link_out)] {
            if let (Some(n), Some(l)) = (neighbour, link) {
                let store = self
                    .store(l)
                    .map_err(|_| KmsError::InvalidRule(format!("link {l} not attached to {}", self.node_id)))?;
                if &store.lock().unwrap().peer != n {
                    return Err(KmsError::InvalidRule(format!("link {l} does not reach {n}")));
                }
            }
        }
        Ok(())
    }
}

impl KmsApi for Kms {
    fn get_key(
        &self,
        caller: &str,
        peer: &str,
        number: usize,
        size_bits: usize,
    ) -> Result<Vec<DeliveredKey>, KmsError> {
        self.ensure_available()?;
        if number == 0 || number > MAX_KEYS_PER_REQUEST {
            return Err(KmsError::InvalidRequest(format!(
                "number must be in 1..={MAX_KEYS_PER_REQUEST}, got {number}"
            )));
        }
        let link = self.resolve_peer(peer)?;
        let store = self.store(&link)?;
        let keys = store.lock().unwrap().take_fresh(number, size_bits)?;
        debug!(kms = %self.kms_id, %caller, %link, number, "get_key");
        Ok(keys)
    }

    fn get_key_with_id(&self, caller: &str, key_ids: &[KeyId]) -> Result<Vec<DeliveredKey>, KmsError> {
        self.ensure_available()?;
        if key_ids.is_empty() {
            return Err(KmsError::InvalidRequest("no key ids given".into()));
        }
        for (i, id) in key_ids.iter().enumerate() {
            if key_ids[..i].contains(id) {
                return Err(KmsError::InvalidRequest(format!("key id {id} requested twice")));
            }
        }
        // All stores stay locked, in link order, until every id is checked.
        let stores: Vec<Arc<Mutex<LinkStore>>> = self.links.read().unwrap().values().cloned().collect();
        let mut guards: Vec<_> = stores.iter().map(|s| s.lock().unwrap()).collect();
        let mut relayed = self.relayed.lock().unwrap();

        enum Slot {
            Link(usize),
            Relayed,
        }
        let mut slots = Vec::with_capacity(key_ids.len());
        for id in key_ids {
            if let Some(block) = relayed.get(id) {
                if block.consumed {
                    return Err(KmsError::AlreadyConsumed(id.clone()));
                }
                slots.push(Slot::Relayed);
                continue;
            }
            let idx = guards
                .iter()
                .position(|g| g.contains(id))
                .ok_or_else(|| KmsError::UnknownKeyId(id.clone()))?;
            guards[idx].check_available(id)?;
            slots.push(Slot::Link(idx));
        }

        let mut out = Vec::with_capacity(key_ids.len());
        for (id, slot) in key_ids.iter().zip(slots) {
            match slot {
                Slot::Link(idx) => out.push(guards[idx].take_by_id(id)?),
                Slot::Relayed => {
                    let block = relayed.get_mut(id).expect("checked above");
                    block.consumed = true;
                    out.push(DeliveredKey {
                        key_id: id.clone(),
                        key: block.key.clone(),
                    });
                }
            }
        }
        debug!(kms = %self.kms_id, %caller, count = out.len(), "get_key_with_id");
        Ok(out)
    }

    fn status(&self, peer: &str) -> Result<KmsStatus, KmsError> {
        self.ensure_available()?;
        let link = self.resolve_peer(peer)?;
        let store = self.store(&link)?;
        let store = store.lock().unwrap();
        Ok(KmsStatus {
            source_kms_id: self.kms_id.clone(),
            target_node: store.peer.clone(),
            link_id: link,
            key_size: store.key_size_bits,
            stored_key_count: store.unconsumed(),
            max_key_per_request: MAX_KEYS_PER_REQUEST,
            link_health: store.health,
        })
    }

    fn install_relay_rule(&self, rule: RelayRule) -> Result<(), KmsError> {
        self.ensure_available()?;
        self.validate_rule(&rule)?;
        let mut rules = self.rules.lock().unwrap();
        if rules.contains_key(&rule.session_id) {
            return Err(KmsError::DuplicateSession(rule.session_id));
        }
        rules.insert(rule.session_id.clone(), rule);
        Ok(())
    }

    fn remove_relay_rule(&self, session_id: &SessionId) -> Result<(), KmsError> {
        self.ensure_available()?;
        self.rules.lock().unwrap().remove(session_id);
        self.relayed
            .lock()
            .unwrap()
            .retain(|_, b| b.session_id.as_ref() != Some(session_id));
        Ok(())
    }

    fn forward_relayed_key(&self, envelope: RelayEnvelope) -> Result<(), KmsError> {
        self.ensure_available()?;
        let rule = self
            .rules
            .lock()
            .unwrap()
            .remove(&envelope.session_id)
            .ok_or_else(|| KmsError::NoRule(envelope.session_id.clone()))?;
        let size_bits = envelope.payload.len_bits();

        let plain = match (&rule.link_in, &envelope.pad_key_id) {
            (None, None) => envelope.payload.clone(),
            (Some(link_in), Some(pad_id)) => {
                let pad = self.take_pad_by_id(link_in, pad_id)?;
                xor(&envelope.payload, &pad.key)?
            }
            (None, Some(_)) => {
                return Err(KmsError::InvalidRequest("entry hop received a padded payload".into()))
            }
            (Some(_), None) => return Err(KmsError::InvalidRequest("relay hop received no pad id".into())),
        };

        match (&rule.downstream, &rule.link_out) {
            (Some(next), Some(link_out)) => {
                let pad = self.take_pad(link_out, size_bits)?;
                let out = RelayEnvelope {
                    session_id: envelope.session_id.clone(),
                    key_id: envelope.key_id.clone(),
                    payload: xor(&plain, &pad.key)?,
                    pad_key_id: Some(pad.key_id),
                };
                let downstream = self
                    .directory
                    .kms(&self.node_id, next)
                    .ok_or_else(|| KmsError::Unreachable(next.to_string()))?;
                debug!(kms = %self.kms_id, session = %envelope.session_id, %next, "relay forward");
                downstream.forward_relayed_key(out)
            }
            _ => {
                let mut relayed = self.relayed.lock().unwrap();
                if relayed.contains_key(&envelope.key_id) {
                    return Err(KmsError::DuplicateKeyId(envelope.key_id));
                }
                debug!(kms = %self.kms_id, session = %envelope.session_id, "relay terminal");
                relayed.insert(
                    envelope.key_id.clone(),
                    KeyBlock {
                        key_id: envelope.key_id,
                        key: plain,
                        link_id: LinkId::from(RELAYED_LINK),
                        consumed: false,
                        source: KeySource::Relayed,
                        session_id: Some(envelope.session_id),
                    },
                );
                Ok(())
            }
        }
    }
}

impl KeySink for Kms {
    fn accepts(&self, link: &LinkId) -> bool {
        self.links.read().unwrap().contains_key(link)
    }

    fn deliver(&self, link: &LinkId, key_id: KeyId, key: KeyMaterial) -> Result<(), String> {
        let store = self.store(link).map_err(|e| e.to_string())?;
        let mut store = store.lock().unwrap();
        store.insert(key_id, key)
    }
}

fn xor(data: &KeyMaterial, pad: &KeyMaterial) -> Result<KeyMaterial, KmsError> {
    otp_transform(data, pad).map_err(|_| KmsError::PadLengthMismatch {
        payload: data.len_bits(),
        pad: pad.len_bits(),
    })
}
