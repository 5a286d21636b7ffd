//! ChaCha20-Poly1305 wrapper for payloads sent between vKMS instances.
//! Wire layout: `nonce (12) || ciphertext || tag (16)`.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand_core::RngCore;

use super::{CryptoError, KeyMaterial};

const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;

pub const AEAD_OVERHEAD: usize = NONCE_LEN + TAG_LEN;

fn cipher(key: &KeyMaterial) -> Result<ChaCha20Poly1305, CryptoError> {
    if key.len_bytes() != 32 {
        return Err(CryptoError::LengthMismatch {
            left: key.len_bits(),
            right: 256,
        });
    }
    Ok(ChaCha20Poly1305::new(Key::from_slice(key.as_bytes())))
}

pub fn seal_payload(
    key: &KeyMaterial,
    aad: &[u8],
    plaintext: &[u8],
    rng: &mut impl RngCore,
) -> Result<Vec<u8>, CryptoError> {
    let cipher = cipher(key)?;
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad })
        .map_err(|_| CryptoError::AuthenticationFailed)?;
    let mut out = nonce.to_vec();
    out.extend_from_slice(&ct);
    Ok(out)
}

pub fn open_payload(key: &KeyMaterial, aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < AEAD_OVERHEAD {
        return Err(CryptoError::AuthenticationFailed);
    }
    let cipher = cipher(key)?;
    let (nonce, ct) = sealed.split_at(NONCE_LEN);
    cipher
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad })
        .map_err(|_| CryptoError::AuthenticationFailed)
}
