//! Deterministic pseudo-QKD source.
//!
//! Each registered link owns a ChaCha20 stream seeded from `(seed, link_id)`.
//! Every generated key is pushed, with the same UUID-shaped id, into the key
//! sinks of both endpoints.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

use crate::crypto::{bytes_for_bits, KeyMaterial};
use crate::ids::{KeyId, LinkId, NodeId};

/// Namespace for link-key ids (`uuid v5` over `"{link_id}/{counter}"`).
const KEY_ID_NAMESPACE: Uuid = Uuid::from_u128(0x6f1e_7c2a_93d4_4b8e_a0c5_2f7d_19e3_b64a);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QkdLink {
    pub link_id: LinkId,
    pub endpoint_a: NodeId,
    pub endpoint_b: NodeId,
    pub key_size_bits: usize,
    pub rate_keys_per_sec: f64,
    pub seed: u64,
}

impl QkdLink {
    pub fn validate(&self) -> Result<(), QkdSimError> {
        if self.endpoint_a == self.endpoint_b {
            return Err(QkdSimError::InvalidLink(format!(
                "link {} connects {} to itself",
                self.link_id, self.endpoint_a
            )));
        }
        if bytes_for_bits(self.key_size_bits).is_err() {
            return Err(QkdSimError::InvalidLink(format!(
                "link {} key size {} is not a positive multiple of 8",
                self.link_id, self.key_size_bits
            )));
        }
        if !(self.rate_keys_per_sec > 0.0) {
            return Err(QkdSimError::InvalidLink(format!(
                "link {} rate must be positive",
                self.link_id
            )));
        }
        Ok(())
    }

    pub fn connects(&self, a: &NodeId, b: &NodeId) -> bool {
        (&self.endpoint_a == a && &self.endpoint_b == b) || (&self.endpoint_a == b && &self.endpoint_b == a)
    }

    pub fn touches(&self, node: &NodeId) -> bool {
        &self.endpoint_a == node || &self.endpoint_b == node
    }

    pub fn other_end(&self, node: &NodeId) -> Option<&NodeId> {
        if &self.endpoint_a == node {
            Some(&self.endpoint_b)
        } else if &self.endpoint_b == node {
            Some(&self.endpoint_a)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum QkdSimError {
    #[error("unknown link {0}")]
    UnknownLink(LinkId),
    #[error("link {0} already registered")]
    DuplicateLink(LinkId),
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("key sink rejected delivery: {0}")]
    SinkRejected(String),
}

/// Receiver of link keys; implemented by the KMS.
pub trait KeySink: Send + Sync {
    /// Checks the sink can accept keys for `link` before anything is delivered.
    fn accepts(&self, link: &LinkId) -> bool;
    fn deliver(&self, link: &LinkId, key_id: KeyId, key: KeyMaterial) -> Result<(), String>;
}

struct LinkGenerator {
    link: QkdLink,
    rng: ChaCha20Rng,
    counter: u64,
    sink_a: Arc<dyn KeySink>,
    sink_b: Arc<dyn KeySink>,
}

impl LinkGenerator {
    fn next(&mut self) -> (KeyId, KeyMaterial) {
        let key_id = KeyId::new(
            Uuid::new_v5(&KEY_ID_NAMESPACE, format!("{}/{}", self.link.link_id, self.counter).as_bytes())
                .to_string(),
        );
        self.counter += 1;
        let key = KeyMaterial::random(&mut self.rng, self.link.key_size_bits)
            .expect("key size validated at registration");
        (key_id, key)
    }
}

#[derive(Default)]
pub struct QkdSimulator {
    links: Mutex<HashMap<LinkId, LinkGenerator>>,
    pacing: bool,
}

impl QkdSimulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sleeps `1 / rate` per generated key.
    pub fn with_pacing(mut self, pacing: bool) -> Self {
        self.pacing = pacing;
        self
    }

    pub fn register_link(
        &self,
        link: QkdLink,
        sink_a: Arc<dyn KeySink>,
        sink_b: Arc<dyn KeySink>,
    ) -> Result<(), QkdSimError> {
        link.validate()?;
        let mut links = self.links.lock().unwrap();
        if links.contains_key(&link.link_id) {
            return Err(QkdSimError::DuplicateLink(link.link_id));
        }
        let rng = ChaCha20Rng::from_seed(stream_seed(link.seed, &link.link_id));
        links.insert(
            link.link_id.clone(),
            LinkGenerator {
                link,
                rng,
                counter: 0,
                sink_a,
                sink_b,
            },
        );
        Ok(())
    }

    pub fn link(&self, link_id: &LinkId) -> Option<QkdLink> {
        self.links.lock().unwrap().get(link_id).map(|g| g.link.clone())
    }

    /// Produces the next key of the link and delivers it to both endpoint sinks.
    pub fn generate_next_key(&self, link_id: &LinkId) -> Result<(KeyId, KeyMaterial), QkdSimError> {
        let mut links = self.links.lock().unwrap();
        let generator = links
            .get_mut(link_id)
            .ok_or_else(|| QkdSimError::UnknownLink(link_id.clone()))?;
        if !generator.sink_a.accepts(link_id) || !generator.sink_b.accepts(link_id) {
            return Err(QkdSimError::SinkRejected(format!("endpoint store missing for {link_id}")));
        }
        if self.pacing {
            thread::sleep(Duration::from_secs_f64(1.0 / generator.link.rate_keys_per_sec));
        }
        let (key_id, key) = generator.next();
        generator
            .sink_a
            .deliver(link_id, key_id.clone(), key.clone())
            .and_then(|_| generator.sink_b.deliver(link_id, key_id.clone(), key.clone()))
            .map_err(QkdSimError::SinkRejected)?;
        Ok((key_id, key))
    }

    /// Delivers `count` fresh key pairs to both endpoints; returns the number delivered.
    pub fn fill_stores(&self, link_id: &LinkId, count: usize) -> Result<usize, QkdSimError> {
        if !self.links.lock().unwrap().contains_key(link_id) {
            return Err(QkdSimError::UnknownLink(link_id.clone()));
        }
        for _ in 0..count {
            self.generate_next_key(link_id)?;
        }
        Ok(count)
    }
}

fn stream_seed(seed: u64, link_id: &LinkId) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"qsafe/qkd-sim/v1");
    h.update(seed.to_le_bytes());
    h.update(link_id.as_str().as_bytes());
    h.finalize().into()
}
