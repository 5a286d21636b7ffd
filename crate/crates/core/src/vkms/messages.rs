use serde::{Deserialize, Serialize};

use crate::crypto::KemSuite;
use crate::ids::{KeyId, SessionId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeyEntry {
    pub suite: KemSuite,
    #[serde(with = "crate::encoding::b64", rename = "public_key_b64")]
    pub public_key: Vec<u8>,
}

/// vKMS-to-vKMS session traffic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PeerMessage {
    /// Receiver asks the passive node for a fresh KEM public key.
    PublicKeyRequest { session_id: SessionId },
    KemPublicKey {
        session_id: SessionId,
        suite: KemSuite,
        #[serde(with = "crate::encoding::b64", rename = "public_key_b64")]
        public_key: Vec<u8>,
    },
    /// First KEM ciphertext plus the receiver's own public key for the relay.
    KemCiphertext {
        session_id: SessionId,
        #[serde(with = "crate::encoding::b64", rename = "ciphertext_b64")]
        ciphertext: Vec<u8>,
        #[serde(with = "crate::encoding::b64", rename = "receiver_public_key_b64")]
        receiver_public_key: Vec<u8>,
    },
    /// Passive node tells the relay which link key to ship.
    RelayKeyId {
        session_id: SessionId,
        key_id: KeyId,
        #[serde(with = "crate::encoding::b64", rename = "receiver_public_key_b64")]
        receiver_public_key: Vec<u8>,
    },
    /// Relay ships the padded link key to the receiver.
    RelayedPayload {
        session_id: SessionId,
        #[serde(with = "crate::encoding::b64", rename = "ciphertext_b64")]
        ciphertext: Vec<u8>,
        #[serde(with = "crate::encoding::b64", rename = "encrypted_key_b64")]
        encrypted_key: Vec<u8>,
        key_id: KeyId,
    },
    EndpointPublicKeys {
        session_id: SessionId,
        public_keys: Vec<PublicKeyEntry>,
    },
    EndpointCiphertexts {
        session_id: SessionId,
        #[serde(with = "b64_list", rename = "ciphertexts_b64")]
        ciphertexts: Vec<Vec<u8>>,
    },
    KeyConfirm {
        session_id: SessionId,
        #[serde(with = "crate::encoding::b64", rename = "tag_b64")]
        tag: Vec<u8>,
    },
    Ack { session_id: SessionId },
}

impl PeerMessage {
    pub fn session_id(&self) -> &SessionId {
        match self {
            Self::PublicKeyRequest { session_id }
            | Self::KemPublicKey { session_id, .. }
            | Self::KemCiphertext { session_id, .. }
            | Self::RelayKeyId { session_id, .. }
            | Self::RelayedPayload { session_id, .. }
            | Self::EndpointPublicKeys { session_id, .. }
            | Self::EndpointCiphertexts { session_id, .. }
            | Self::KeyConfirm { session_id, .. }
            | Self::Ack { session_id } => session_id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::PublicKeyRequest { .. } => "public_key_request",
            Self::KemPublicKey { .. } => "kem_public_key",
            Self::KemCiphertext { .. } => "kem_ciphertext",
            Self::RelayKeyId { .. } => "relay_key_id",
            Self::RelayedPayload { .. } => "relayed_payload",
            Self::EndpointPublicKeys { .. } => "endpoint_public_keys",
            Self::EndpointCiphertexts { .. } => "endpoint_ciphertexts",
            Self::KeyConfirm { .. } => "key_confirm",
            Self::Ack { .. } => "ack",
        }
    }
}

mod b64_list {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::encoding::{decode, encode};

    pub fn serialize<S: Serializer>(items: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(items.iter().map(|i| encode(i)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| decode(s).map_err(serde::de::Error::custom))
            .collect()
    }
}
