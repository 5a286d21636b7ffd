//! Hybrid key combiner: HMAC-SHA256 extract-then-expand over length-prefixed
//! `(label, material)` pairs, with the session context bound into `info`.
//!
//! ```text
//! ikm  = for each input, in order: u16be(|label|) || label || u32be(|material|) || material
//! info = "qsafe/kdf-combine/info/v1"
//!        || lp(purpose) || lp(session_id) || lp(initiator_app) || lp(target_app)
//!        || u8(level) || u32be(out_len_bits)          where lp(x) = u32be(|x|) || x
//! prk  = HMAC(salt = "qsafe/kdf-combine/v1", ikm)
//! T(i) = HMAC(prk, T(i-1) || info || u8(i)),  okm = T(1) || T(2) || ... truncated
//! ```

use std::collections::HashSet;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use zeroize::Zeroizing;

use super::{bytes_for_bits, CryptoError, KeyMaterial};
use crate::ids::{AppId, SessionId};
use crate::level::SecurityLevel;

type HmacSha256 = Hmac<Sha256>;

const HASH_LEN: usize = 32;

pub const KDF_SALT: &[u8] = b"qsafe/kdf-combine/v1";
pub const KDF_INFO_PREFIX: &[u8] = b"qsafe/kdf-combine/info/v1";

pub const PURPOSE_SESSION_KEY: &str = "session-key";
pub const PURPOSE_PAD_EXPAND: &str = "pad-expand";
pub const PURPOSE_PAYLOAD_AUTH: &str = "payload-auth";

/// One labelled secret fed to [`kdf_combine`].
#[derive(Clone, Debug)]
pub struct SecretInput {
    pub label: String,
    pub material: KeyMaterial,
}

impl SecretInput {
    pub fn new(label: impl Into<String>, material: KeyMaterial) -> Self {
        Self {
            label: label.into(),
            material,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivationContext {
    pub session_id: SessionId,
    pub initiator_app: AppId,
    pub target_app: AppId,
    pub level: SecurityLevel,
    pub out_len_bits: usize,
    /// Domain-separation tag; session keys use [`PURPOSE_SESSION_KEY`].
    pub purpose: String,
}

impl DerivationContext {
    pub fn session_key(
        session_id: SessionId,
        initiator_app: AppId,
        target_app: AppId,
        level: SecurityLevel,
        out_len_bits: usize,
    ) -> Self {
        Self {
            session_id,
            initiator_app,
            target_app,
            level,
            out_len_bits,
            purpose: PURPOSE_SESSION_KEY.to_owned(),
        }
    }

    /// Same session binding, different purpose and output length.
    pub fn derive_for(&self, purpose: &str, out_len_bits: usize) -> Self {
        Self {
            purpose: purpose.to_owned(),
            out_len_bits,
            ..self.clone()
        }
    }

    fn info(&self) -> Vec<u8> {
        let mut info = KDF_INFO_PREFIX.to_vec();
        for field in [
            self.purpose.as_bytes(),
            self.session_id.as_str().as_bytes(),
            self.initiator_app.as_str().as_bytes(),
            self.target_app.as_str().as_bytes(),
        ] {
            info.extend_from_slice(&(field.len() as u32).to_be_bytes());
            info.extend_from_slice(field);
        }
        info.push(self.level.number());
        info.extend_from_slice(&(self.out_len_bits as u32).to_be_bytes());
        info
    }
}

pub fn kdf_combine(inputs: &[SecretInput], ctx: &DerivationContext) -> Result<KeyMaterial, CryptoError> {
    if inputs.is_empty() {
        return Err(CryptoError::EmptyInputs);
    }
    let out_len = bytes_for_bits(ctx.out_len_bits)?;
    if out_len > 255 * HASH_LEN {
        return Err(CryptoError::OutputTooLong(ctx.out_len_bits));
    }

    let mut seen = HashSet::new();
    let mut ikm = Zeroizing::new(Vec::new());
    for input in inputs {
        if input.label.is_empty() {
            return Err(CryptoError::EmptyLabel);
        }
        if !seen.insert(input.label.as_str()) {
            return Err(CryptoError::DuplicateLabel(input.label.clone()));
        }
        let label = input.label.as_bytes();
        let label_len = u16::try_from(label.len())
            .map_err(|_| CryptoError::Encoding("KDF label longer than 65535 octets".into()))?;
        ikm.extend_from_slice(&label_len.to_be_bytes());
        ikm.extend_from_slice(label);
        ikm.extend_from_slice(&(input.material.len_bytes() as u32).to_be_bytes());
        ikm.extend_from_slice(input.material.as_bytes());
    }

    let prk = Zeroizing::new(hmac(KDF_SALT, &[&ikm]));
    let info = ctx.info();
    let mut okm = Vec::with_capacity(out_len + HASH_LEN);
    let mut previous: Zeroizing<Vec<u8>> = Zeroizing::new(Vec::new());
    let mut counter = 1u8;
    while okm.len() < out_len {
        let block = hmac(prk.as_ref(), &[&previous, &info, &[counter]]);
        okm.extend_from_slice(&block);
        *previous = block.to_vec();
        counter = counter.wrapping_add(1);
    }
    okm.truncate(out_len);
    KeyMaterial::new(okm)
}

/// Tag proving possession of `key` for `session_id`, exchanged after derivation.
pub fn key_confirmation_tag(key: &KeyMaterial, session_id: &SessionId) -> [u8; 32] {
    hmac(key.as_bytes(), &[b"qsafe/key-confirm/v1", session_id.as_str().as_bytes()])
}

/// Constant-time check of a peer's confirmation tag.
pub fn verify_key_confirmation(key: &KeyMaterial, session_id: &SessionId, tag: &[u8]) -> bool {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key.as_bytes()).expect("HMAC accepts any key length");
    mac.update(b"qsafe/key-confirm/v1");
    mac.update(session_id.as_str().as_bytes());
    mac.verify_slice(tag).is_ok()
}

fn hmac(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn ctx(session: &str, bits: usize) -> DerivationContext {
        DerivationContext::session_key(
            SessionId::from(session),
            AppId::from("APP_C"),
            AppId::from("APP_D"),
            SecurityLevel::L3,
            bits,
        )
    }

    fn input(label: &str, bytes: &[u8]) -> SecretInput {
        SecretInput::new(label, KeyMaterial::from_slice(bytes).unwrap())
    }

    #[test]
    fn deterministic() {
        let inputs = [input("qkd", &[1; 32]), input("kem1", &[2; 32])];
        let a = kdf_combine(&inputs, &ctx("s1", 256)).unwrap();
        let b = kdf_combine(&inputs, &ctx("s1", 256)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_output_lengths() {
        let inputs = [input("kem1", &[9; 32])];
        for bits in [128, 256, 512] {
            assert_eq!(kdf_combine(&inputs, &ctx("s", bits)).unwrap().len_bytes(), bits / 8);
        }
        assert_eq!(
            kdf_combine(&inputs, &ctx("s", 255 * 256 + 8)).unwrap_err(),
            CryptoError::OutputTooLong(255 * 256 + 8)
        );
        assert_eq!(
            kdf_combine(&inputs, &ctx("s", 100)).unwrap_err(),
            CryptoError::InvalidBitLength(100)
        );
    }

    #[test]
    fn rejects_bad_input_lists() {
        assert_eq!(kdf_combine(&[], &ctx("s", 256)).unwrap_err(), CryptoError::EmptyInputs);
        let dup = [input("kem1", &[1]), input("kem1", &[2])];
        assert_eq!(
            kdf_combine(&dup, &ctx("s", 256)).unwrap_err(),
            CryptoError::DuplicateLabel("kem1".into())
        );
        assert_eq!(
            kdf_combine(&[input("", &[1])], &ctx("s", 256)).unwrap_err(),
            CryptoError::EmptyLabel
        );
    }

    #[test]
    fn order_binding_over_1000_trials() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = KeyMaterial::random(&mut rng, 256).unwrap();
            let b = KeyMaterial::random(&mut rng, 256).unwrap();
            let fwd = [SecretInput::new("kem1", a.clone()), SecretInput::new("qkd", b.clone())];
            let rev = [SecretInput::new("qkd", b), SecretInput::new("kem1", a)];
            assert_ne!(
                kdf_combine(&fwd, &ctx("s", 256)).unwrap(),
                kdf_combine(&rev, &ctx("s", 256)).unwrap()
            );
        }
    }

    #[test]
    fn single_bit_flips_change_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let a = KeyMaterial::random(&mut rng, 256).unwrap();
        let b = KeyMaterial::random(&mut rng, 256).unwrap();
        let base_ctx = ctx("session-0001", 256);
        let base = kdf_combine(
            &[SecretInput::new("kem1", a.clone()), SecretInput::new("qkd", b.clone())],
            &base_ctx,
        )
        .unwrap();
        for _ in 0..256 {
            let bit = rng.gen_range(0..256);
            let flipped_a = kdf_combine(
                &[SecretInput::new("kem1", a.with_bit_flipped(bit)), SecretInput::new("qkd", b.clone())],
                &base_ctx,
            )
            .unwrap();
            let flipped_b = kdf_combine(
                &[SecretInput::new("kem1", a.clone()), SecretInput::new("qkd", b.with_bit_flipped(bit))],
                &base_ctx,
            )
            .unwrap();
            assert_ne!(flipped_a, base);
            assert_ne!(flipped_b, base);
        }
        let sid = base_ctx.session_id.as_str().as_bytes().to_vec();
        for bit in 0..sid.len() * 8 {
            let mut s = sid.clone();
            s[bit / 8] ^= 0x80 >> (bit % 8);
            let Ok(s) = String::from_utf8(s) else { continue };
            let out = kdf_combine(
                &[SecretInput::new("kem1", a.clone()), SecretInput::new("qkd", b.clone())],
                &ctx(&s, 256),
            )
            .unwrap();
            assert_ne!(out, base);
        }
    }

    #[test]
    fn purpose_separates_domains() {
        let inputs = [input("aux", &[7; 32])];
        let c = ctx("s", 256);
        let a = kdf_combine(&inputs, &c).unwrap();
        let b = kdf_combine(&inputs, &c.derive_for(PURPOSE_PAD_EXPAND, 256)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn confirmation_tags_differ_per_key() {
        let s = SessionId::from("s");
        let k1 = KeyMaterial::from_slice(&[1; 32]).unwrap();
        let k2 = KeyMaterial::from_slice(&[2; 32]).unwrap();
        assert_eq!(key_confirmation_tag(&k1, &s), key_confirmation_tag(&k1, &s));
        assert_ne!(key_confirmation_tag(&k1, &s), key_confirmation_tag(&k2, &s));
    }
}
