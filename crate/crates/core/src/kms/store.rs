use std::collections::{HashMap, VecDeque};

use super::{DeliveredKey, KeyBlock, KeySource, KmsError, LinkHealth};
use crate::crypto::KeyMaterial;
use crate::ids::{KeyId, LinkId, NodeId};

/// One side of a QKD link.
pub(super) struct LinkStore {
    pub link_id: LinkId,
    pub peer: NodeId,
    pub key_size_bits: usize,
    pub health: LinkHealth,
    keys: HashMap<KeyId, KeyBlock>,
    fresh: VecDeque<KeyId>,
    unconsumed: usize,
}

impl LinkStore {
    pub fn new(link_id: LinkId, peer: NodeId, key_size_bits: usize) -> Self {
        Self {
            link_id,
            peer,
            key_size_bits,
            health: LinkHealth::Up,
            keys: HashMap::new(),
            fresh: VecDeque::new(),
            unconsumed: 0,
        }
    }

    pub fn unconsumed(&self) -> usize {
        self.unconsumed
    }

    pub fn insert(&mut self, key_id: KeyId, key: KeyMaterial) -> Result<(), String> {
        if key.len_bits() != self.key_size_bits {
            return Err(format!(
                "key {key_id} has {} bits, link {} expects {}",
                key.len_bits(),
                self.link_id,
                self.key_size_bits
            ));
        }
        if self.keys.contains_key(&key_id) {
            return Err(format!("duplicate key id {key_id} on link {}", self.link_id));
        }
        self.fresh.push_back(key_id.clone());
        self.keys.insert(
            key_id.clone(),
            KeyBlock {
                key_id,
                key,
                link_id: self.link_id.clone(),
                consumed: false,
                source: KeySource::Qkd,
                session_id: None,
            },
        );
        self.unconsumed += 1;
        Ok(())
    }

    fn ensure_up(&self) -> Result<(), KmsError> {
        match self.health {
            LinkHealth::Up => Ok(()),
            LinkHealth::Down => Err(KmsError::LinkDown(self.link_id.clone())),
        }
    }

    /// Oldest `number` unconsumed keys, marked consumed.
    pub fn take_fresh(&mut self, number: usize, size_bits: usize) -> Result<Vec<DeliveredKey>, KmsError> {
        self.ensure_up()?;
        if size_bits != self.key_size_bits {
            return Err(KmsError::SizeUnavailable {
                requested: size_bits,
                stored: self.key_size_bits,
            });
        }
        if self.unconsumed < number {
            return Err(KmsError::KeysExhausted {
                link_id: self.link_id.clone(),
                requested: number,
                available: self.unconsumed,
            });
        }
        let mut out = Vec::with_capacity(number);
        while out.len() < number {
            let id = self.fresh.pop_front().expect("unconsumed count tracks queue");
            let block = self.keys.get_mut(&id).expect("queued ids are stored");
            if block.consumed {
                continue;
            }
            block.consumed = true;
            self.unconsumed -= 1;
            out.push(DeliveredKey {
                key_id: id,
                key: block.key.clone(),
            });
        }
        Ok(out)
    }

    pub fn contains(&self, key_id: &KeyId) -> bool {
        self.keys.contains_key(key_id)
    }

    pub fn check_available(&self, key_id: &KeyId) -> Result<(), KmsError> {
        self.ensure_up()?;
        match self.keys.get(key_id) {
            None => Err(KmsError::UnknownKeyId(key_id.clone())),
            Some(b) if b.consumed => Err(KmsError::AlreadyConsumed(key_id.clone())),
            Some(_) => Ok(()),
        }
    }

    pub fn take_by_id(&mut self, key_id: &KeyId) -> Result<DeliveredKey, KmsError> {
        self.check_available(key_id)?;
        let block = self.keys.get_mut(key_id).expect("checked above");
        block.consumed = true;
        self.unconsumed -= 1;
        Ok(DeliveredKey {
            key_id: key_id.clone(),
            key: block.key.clone(),
        })
    }

    pub fn snapshot(&self) -> Vec<KeyBlock> {
        let mut blocks: Vec<KeyBlock> = self.keys.values().cloned().collect();
        blocks.sort_by(|a, b| a.key_id.cmp(&b.key_id));
        blocks
    }
}
