use std::fmt;
use std::str::FromStr;

use ml_kem::kem::{Decapsulate, Encapsulate};
use ml_kem::{Ciphertext, Encoded, EncodedSizeUser, KemCore, MlKem768};
use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zeroize::Zeroizing;

use super::{CryptoError, KeyMaterial};

type MlKem768Dk = <MlKem768 as KemCore>::DecapsulationKey;
type MlKem768Ek = <MlKem768 as KemCore>::EncapsulationKey;

/// KEM parameter sets understood by the vKMS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KemSuite {
    /// FIPS 203 ML-KEM-768.
    #[serde(rename = "ML_KEM_768")]
    MlKem768,
    /// Deterministic hash-based stand-in with no security. Tests only.
    #[serde(rename = "TOY_KEM")]
    ToyKem,
}

impl KemSuite {
    pub fn name(self) -> &'static str {
        match self {
            Self::MlKem768 => "ML_KEM_768",
            Self::ToyKem => "TOY_KEM",
        }
    }

    pub fn public_key_len(self) -> usize {
        match self {
            Self::MlKem768 => 1184,
            Self::ToyKem => 32,
        }
    }

    pub fn secret_key_len(self) -> usize {
        match self {
            Self::MlKem768 => 2400,
            Self::ToyKem => 32,
        }
    }

    pub fn ciphertext_len(self) -> usize {
        match self {
            Self::MlKem768 => 1088,
            Self::ToyKem => 32,
        }
    }

    pub fn shared_secret_len(self) -> usize {
        32
    }
}

impl fmt::Display for KemSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KemSuite {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ML_KEM_768" => Ok(Self::MlKem768),
            "TOY_KEM" => Ok(Self::ToyKem),
            other => Err(CryptoError::UnsupportedSuite(other.to_owned())),
        }
    }
}

/// A KEM key pair. The secret half is wiped when dropped.
pub struct KemKeyPair {
    pub suite: KemSuite,
    pub public_key: Vec<u8>,
    pub secret_key: Zeroizing<Vec<u8>>,
}

impl fmt::Debug for KemKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KemKeyPair")
            .field("suite", &self.suite)
            .field("public_key_len", &self.public_key.len())
            .finish_non_exhaustive()
    }
}

pub fn kem_keygen(suite: KemSuite, rng: &mut impl CryptoRngCore) -> Result<KemKeyPair, CryptoError> {
    let (public_key, secret_key) = match suite {
        KemSuite::MlKem768 => {
            let (dk, ek) = MlKem768::generate(rng);
            (ek.as_bytes().to_vec(), Zeroizing::new(dk.as_bytes().to_vec()))
        }
        KemSuite::ToyKem => {
            let mut sk = Zeroizing::new(vec![0u8; 32]);
            rng.fill_bytes(&mut sk);
            (toy::public_from_secret(&sk).to_vec(), sk)
        }
    };
    Ok(KemKeyPair {
        suite,
        public_key,
        secret_key,
    })
}

/// Returns `(ciphertext, shared_secret)`.
pub fn kem_encapsulate(
    suite: KemSuite,
    public_key: &[u8],
    rng: &mut impl CryptoRngCore,
) -> Result<(Vec<u8>, KeyMaterial), CryptoError> {
    if public_key.len() != suite.public_key_len() {
        return Err(CryptoError::MalformedPublicKey {
            expected: suite.public_key_len(),
            actual: public_key.len(),
        });
    }
    match suite {
        KemSuite::MlKem768 => {
            let encoded = Encoded::<MlKem768Ek>::try_from(public_key).map_err(|_| {
                CryptoError::MalformedPublicKey {
                    expected: suite.public_key_len(),
                    actual: public_key.len(),
                }
            })?;
            let ek = MlKem768Ek::from_bytes(&encoded);
            let (ct, ss) = ek.encapsulate(rng).map_err(|_| CryptoError::KemFailure)?;
            Ok((ct.to_vec(), KeyMaterial::from_slice(&ss)?))
        }
        KemSuite::ToyKem => {
            let mut r = Zeroizing::new([0u8; 32]);
            rng.fill_bytes(r.as_mut());
            let ct = toy::mask(public_key, r.as_ref());
            let ss = toy::shared(public_key, r.as_ref());
            Ok((ct.to_vec(), KeyMaterial::from_slice(&ss)?))
        }
    }
}

pub fn kem_decapsulate(
    suite: KemSuite,
    secret_key: &[u8],
    ciphertext: &[u8],
) -> Result<KeyMaterial, CryptoError> {
    if secret_key.len() != suite.secret_key_len() {
        return Err(CryptoError::MalformedSecretKey {
            expected: suite.secret_key_len(),
            actual: secret_key.len(),
        });
    }
    if ciphertext.len() != suite.ciphertext_len() {
        return Err(CryptoError::MalformedCiphertext {
            expected: suite.ciphertext_len(),
            actual: ciphertext.len(),
        });
    }
    match suite {
        KemSuite::MlKem768 => {
            let encoded = Encoded::<MlKem768Dk>::try_from(secret_key).map_err(|_| {
                CryptoError::MalformedSecretKey {
                    expected: suite.secret_key_len(),
                    actual: secret_key.len(),
                }
            })?;
            let dk = MlKem768Dk::from_bytes(&encoded);
            let ct = Ciphertext::<MlKem768>::try_from(ciphertext).map_err(|_| {
                CryptoError::MalformedCiphertext {
                    expected: suite.ciphertext_len(),
                    actual: ciphertext.len(),
                }
            })?;
            let ss = dk.decapsulate(&ct).map_err(|_| CryptoError::KemFailure)?;
            KeyMaterial::from_slice(&ss)
        }
        KemSuite::ToyKem => {
            let pk = toy::public_from_secret(secret_key);
            // mask is its own inverse
            let r = Zeroizing::new(toy::mask(&pk, ciphertext));
            KeyMaterial::from_slice(&toy::shared(&pk, r.as_ref()))
        }
    }
}

mod toy {
    use super::*;

    fn h(parts: &[&[u8]]) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in parts {
            hasher.update(p);
        }
        hasher.finalize().into()
    }

    pub(super) fn public_from_secret(sk: &[u8]) -> [u8; 32] {
        h(&[b"toy-kem/pk", sk])
    }

    pub(super) fn mask(pk: &[u8], data: &[u8]) -> [u8; 32] {
        let m = h(&[b"toy-kem/mask", pk]);
        let mut out = [0u8; 32];
        for (o, (a, b)) in out.iter_mut().zip(m.iter().zip(data)) {
            *o = a ^ b;
        }
        out
    }

    pub(super) fn shared(pk: &[u8], r: &[u8]) -> [u8; 32] {
        h(&[b"toy-kem/ss", pk, r])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const SUITES: [KemSuite; 2] = [KemSuite::MlKem768, KemSuite::ToyKem];

    #[test]
    fn ml_kem_768_sizes() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = kem_keygen(KemSuite::MlKem768, &mut rng).unwrap();
        assert_eq!(kp.public_key.len(), 1184);
        assert_eq!(kp.secret_key.len(), 2400);
        let (ct, ss) = kem_encapsulate(KemSuite::MlKem768, &kp.public_key, &mut rng).unwrap();
        assert_eq!(ct.len(), 1088);
        assert_eq!(ss.len_bytes(), 32);
    }

    #[test]
    fn round_trip_100_per_suite() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for suite in SUITES {
            assert!(suite.shared_secret_len() >= 16);
            for _ in 0..100 {
                let kp = kem_keygen(suite, &mut rng).unwrap();
                let (ct, ss) = kem_encapsulate(suite, &kp.public_key, &mut rng).unwrap();
                let back = kem_decapsulate(suite, &kp.secret_key, &ct).unwrap();
                assert_eq!(back, ss, "{suite}");
                assert_eq!(ss.len_bytes(), suite.shared_secret_len());
            }
        }
    }

    // Frozen from a single run of the toy construction with ChaCha20Rng seed 0.
    const TOY_PK_SEED0: &str = "1067d56748d034321b1a1c65c90fe0cefad13260efa391c661ce41d5f77e4dc7";
    const TOY_CT_SEED0: &str = "5b1f9dfab2e43afb23f1c69fff543dcd8653e937ce4340c8668fc10ae5e8ac92";
    const TOY_SS_SEED0: &str = "68d99097ff0d7ac2f6380077ebac8942a12fa0d90a95e4efeb2bd0ac6d37c587";

    #[test]
    fn toy_kem_frozen_vectors() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let kp = kem_keygen(KemSuite::ToyKem, &mut rng).unwrap();
        let (ct, ss) = kem_encapsulate(KemSuite::ToyKem, &kp.public_key, &mut rng).unwrap();
        assert_eq!(hex::encode(&kp.public_key), TOY_PK_SEED0);
        assert_eq!(hex::encode(&ct), TOY_CT_SEED0);
        assert_eq!(hex::encode(ss.as_bytes()), TOY_SS_SEED0);
        let back = kem_decapsulate(KemSuite::ToyKem, &kp.secret_key, &ct).unwrap();
        assert_eq!(back, ss);
    }

    #[test]
    fn toy_kem_is_deterministic_per_seed() {
        let run = |seed| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let kp = kem_keygen(KemSuite::ToyKem, &mut rng).unwrap();
            kp.public_key
        };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0), run(1));
    }

    #[test]
    fn unknown_suite_is_unsupported() {
        assert_eq!(
            "KYBER_9000".parse::<KemSuite>().unwrap_err(),
            CryptoError::UnsupportedSuite("KYBER_9000".into())
        );
        assert_eq!("ML_KEM_768".parse::<KemSuite>().unwrap(), KemSuite::MlKem768);
    }

    #[test]
    fn truncated_public_key() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for suite in SUITES {
            let kp = kem_keygen(suite, &mut rng).unwrap();
            let err = kem_encapsulate(suite, &kp.public_key[..10], &mut rng).unwrap_err();
            assert!(matches!(err, CryptoError::MalformedPublicKey { actual: 10, .. }));
        }
    }

    #[test]
    fn wrong_length_ciphertext() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for suite in SUITES {
            let kp = kem_keygen(suite, &mut rng).unwrap();
            let err = kem_decapsulate(suite, &kp.secret_key, &[0u8; 5]).unwrap_err();
            assert!(matches!(err, CryptoError::MalformedCiphertext { actual: 5, .. }));
        }
    }

    #[test]
    fn corrupted_ciphertext_yields_different_secret() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for suite in SUITES {
            let kp = kem_keygen(suite, &mut rng).unwrap();
            let (mut ct, ss) = kem_encapsulate(suite, &kp.public_key, &mut rng).unwrap();
            ct[0] ^= 1;
            let back = kem_decapsulate(suite, &kp.secret_key, &ct).unwrap();
            assert_ne!(back, ss);
        }
    }
}
