//! Checks `kdf_combine` against an extract-then-expand oracle built on the
//! `hkdf` crate, with the input and context encodings assembled by hand here.

use hkdf::Hkdf;
use qsafe_core::crypto::{kdf_combine, DerivationContext, KeyMaterial, SecretInput};
use qsafe_core::ids::{AppId, SessionId};
use qsafe_core::level::SecurityLevel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;

fn lp32(out: &mut Vec<u8>, field: &[u8]) {
    out.extend_from_slice(&(field.len() as u32).to_be_bytes());
    out.extend_from_slice(field);
}

/// Independent oracle: HKDF-SHA256 with the documented ikm/info layout.
fn oracle(
    inputs: &[(&str, &[u8])],
    session: &str,
    initiator: &str,
    target: &str,
    level: u8,
    purpose: &str,
    out_bits: usize,
) -> Vec<u8> {
    let mut ikm = Vec::new();
    for (label, material) in inputs {
        ikm.extend_from_slice(&(label.len() as u16).to_be_bytes());
        ikm.extend_from_slice(label.as_bytes());
        lp32(&mut ikm, material);
    }
    let mut info = b"qsafe/kdf-combine/info/v1".to_vec();
    lp32(&mut info, purpose.as_bytes());
    lp32(&mut info, session.as_bytes());
    lp32(&mut info, initiator.as_bytes());
    lp32(&mut info, target.as_bytes());
    info.push(level);
    info.extend_from_slice(&(out_bits as u32).to_be_bytes());

    let hk = Hkdf::<Sha256>::new(Some(b"qsafe/kdf-combine/v1"), &ikm);
    let mut okm = vec![0u8; out_bits / 8];
    hk.expand(&info, &mut okm).unwrap();
    okm
}

// Frozen output of `oracle` for inputs [("qkd", 32x00), ("kem1", 32xFF)],
// session "s1", APP_C -> APP_D, level 3, 256 bits.
const FIXED_VECTOR: &str = "8e9ef824cced10df6a7123f71c10da983cda632892308ac7e88ccd4835668152";

#[test]
fn fixed_vector_matches_oracle() {
    let qkd = [0x00u8; 32];
    let kem1 = [0xFFu8; 32];
    let expected = oracle(&[("qkd", &qkd), ("kem1", &kem1)], "s1", "APP_C", "APP_D", 3, "session-key", 256);
    assert_eq!(hex::encode(&expected), FIXED_VECTOR);

    let ctx = DerivationContext::session_key(
        SessionId::from("s1"),
        AppId::from("APP_C"),
        AppId::from("APP_D"),
        SecurityLevel::L3,
        256,
    );
    let got = kdf_combine(
        &[
            SecretInput::new("qkd", KeyMaterial::from_slice(&qkd).unwrap()),
            SecretInput::new("kem1", KeyMaterial::from_slice(&kem1).unwrap()),
        ],
        &ctx,
    )
    .unwrap();
    assert_eq!(got.as_bytes(), expected.as_slice());
}

#[test]
fn random_inputs_match_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let levels = SecurityLevel::BY_PREFERENCE;
    for trial in 0..200 {
        let n_inputs = rng.gen_range(1..4);
        let materials: Vec<Vec<u8>> = (0..n_inputs)
            .map(|_| {
                let len = rng.gen_range(1..80);
                (0..len).map(|_| rng.gen()).collect()
            })
            .collect();
        let labels: Vec<String> = (0..n_inputs).map(|i| format!("in{i}")).collect();
        let out_bits = 8 * rng.gen_range(1..200);
        let level = levels[trial % 4];
        let session = format!("sess-{trial}");
        let purpose = if trial % 3 == 0 { "pad-expand" } else { "session-key" };

        let pairs: Vec<(&str, &[u8])> = labels
            .iter()
            .map(String::as_str)
            .zip(materials.iter().map(Vec::as_slice))
            .collect();
        let expected = oracle(&pairs, &session, "APP_X", "APP_Y", level.number(), purpose, out_bits);

        let ctx = DerivationContext::session_key(
            SessionId::from(session.as_str()),
            AppId::from("APP_X"),
            AppId::from("APP_Y"),
            level,
            out_bits,
        )
        .derive_for(purpose, out_bits);
        let inputs: Vec<SecretInput> = labels
            .iter()
            .zip(&materials)
            .map(|(l, m)| SecretInput::new(l.clone(), KeyMaterial::from_slice(m).unwrap()))
            .collect();
        let got = kdf_combine(&inputs, &ctx).unwrap();
        assert_eq!(got.as_bytes(), expected.as_slice(), "trial {trial}");
    }
}
