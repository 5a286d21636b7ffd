//! Primitives shared by every service: key material, one-time pad, KEMs,
//! the hybrid KDF combiner and the payload AEAD wrapper.

mod aead;
mod kdf;
mod kem;

use std::fmt;

use rand_core::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

pub use aead::{open_payload, seal_payload, AEAD_OVERHEAD};
pub use kdf::{
    kdf_combine, key_confirmation_tag, verify_key_confirmation, DerivationContext, SecretInput, KDF_INFO_PREFIX, KDF_SALT,
    PURPOSE_PAD_EXPAND, PURPOSE_PAYLOAD_AUTH, PURPOSE_SESSION_KEY,
};
pub use kem::{kem_decapsulate, kem_encapsulate, kem_keygen, KemKeyPair, KemSuite};

/// Default session-key length.
pub const DEFAULT_KEY_BITS: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum CryptoError {
    #[error("key material must be non-empty")]
    EmptyKey,
    #[error("bit length {0} is not a positive multiple of 8")]
    InvalidBitLength(usize),
    #[error("length mismatch: {left} vs {right} bits")]
    LengthMismatch { left: usize, right: usize },
    #[error("unsupported KEM suite `{0}`")]
    UnsupportedSuite(String),
    #[error("malformed public key: expected {expected} octets, got {actual}")]
    MalformedPublicKey { expected: usize, actual: usize },
    #[error("malformed secret key: expected {expected} octets, got {actual}")]
    MalformedSecretKey { expected: usize, actual: usize },
    #[error("malformed ciphertext: expected {expected} octets, got {actual}")]
    MalformedCiphertext { expected: usize, actual: usize },
    #[error("KEM operation failed")]
    KemFailure,
    #[error("KDF needs at least one input")]
    EmptyInputs,
    #[error("duplicate KDF input label `{0}`")]
    DuplicateLabel(String),
    #[error("KDF input label must be non-empty")]
    EmptyLabel,
    #[error("requested KDF output of {0} bits exceeds the expand limit")]
    OutputTooLong(usize),
    #[error("payload authentication failed")]
    AuthenticationFailed,
    #[error("invalid encoding: {0}")]
    Encoding(String),
}

/// Raw symmetric key bytes. Zeroized on drop; `Debug` never prints the bytes.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct KeyMaterial {
    bytes: Vec<u8>,
}

impl KeyMaterial {
    pub fn new(bytes: Vec<u8>) -> Result<Self, CryptoError> {
        if bytes.is_empty() {
            return Err(CryptoError::EmptyKey);
        }
        Ok(Self { bytes })
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        Self::new(bytes.to_vec())
    }

    /// Fresh random key of `bits` length.
    pub fn random(rng: &mut impl RngCore, bits: usize) -> Result<Self, CryptoError> {
        let len = bytes_for_bits(bits)?;
        let mut bytes = vec![0u8; len];
        rng.fill_bytes(&mut bytes);
        Ok(Self { bytes })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len_bytes(&self) -> usize {
        self.bytes.len()
    }

    pub fn len_bits(&self) -> usize {
        self.bytes.len() * 8
    }

    pub fn to_base64(&self) -> String {
        crate::encoding::encode(&self.bytes)
    }

    pub fn from_base64(s: &str) -> Result<Self, CryptoError> {
        let bytes = crate::encoding::decode(s).map_err(|e| CryptoError::Encoding(e.to_string()))?;
        Self::new(bytes)
    }

    /// Returns a copy with bit `index` (0 = MSB of the first octet) flipped.
    pub fn with_bit_flipped(&self, index: usize) -> Self {
        let mut bytes = self.bytes.clone();
        bytes[index / 8] ^= 0x80 >> (index % 8);
        Self { bytes }
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyMaterial({} bits)", self.len_bits())
    }
}

impl Serialize for KeyMaterial {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for KeyMaterial {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_base64(&s).map_err(serde::de::Error::custom)
    }
}

/// Converts a bit length into an octet count.
pub fn bytes_for_bits(bits: usize) -> Result<usize, CryptoError> {
    if bits == 0 || bits % 8 != 0 {
        return Err(CryptoError::InvalidBitLength(bits));
    }
    Ok(bits / 8)
}

/// Bitwise XOR of `data` and `pad`. Applying it twice with the same pad is the identity.
pub fn otp_transform(data: &KeyMaterial, pad: &KeyMaterial) -> Result<KeyMaterial, CryptoError> {
    if data.len_bits() != pad.len_bits() {
        return Err(CryptoError::LengthMismatch {
            left: data.len_bits(),
            right: pad.len_bits(),
        });
    }
    let bytes = data
        .bytes
        .iter()
        .zip(&pad.bytes)
        .map(|(d, p)| d ^ p)
        .collect();
    Ok(KeyMaterial { bytes })
}
