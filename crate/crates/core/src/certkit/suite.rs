//! Classical signature suites used by leaf certificates.

use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use rand::RngCore;
use zeroize::Zeroizing;

pub const ECDSA_P256_SHA256: &str = "ecdsa-p256-sha256";
/// Uncompressed SEC1 point length.
pub const P256_POINT_BYTES: usize = 65;

/// Secret key bytes of a classical suite; wiped on drop.
#[derive(Clone)]
pub struct ClassicalSecret(Zeroizing<Vec<u8>>);

impl ClassicalSecret {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self(Zeroizing::new(bytes.to_vec()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl std::fmt::Debug for ClassicalSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ClassicalSecret(..)")
    }
}

#[derive(Debug, Clone)]
pub struct ClassicalKeyPair {
    pub public: Vec<u8>,
    pub secret: ClassicalSecret,
}

pub trait ClassicalSuite: Send + Sync {
    fn suite_id(&self) -> &'static str;
    fn generate(&self, rng: &mut dyn RngCore) -> ClassicalKeyPair;
    /// `None` if the secret does not belong to this suite.
    fn sign(&self, secret: &ClassicalSecret, message: &[u8]) -> Option<Vec<u8>>;
    fn verify(&self, public: &[u8], message: &[u8], signature: &[u8]) -> bool;
}

/// ECDSA over P-256 with SHA-256, deterministic nonces, DER signatures.
#[derive(Debug, Clone, Copy, Default)]
pub struct EcdsaP256;

impl ClassicalSuite for EcdsaP256 {
    fn suite_id(&self) -> &'static str {
        ECDSA_P256_SHA256
    }

    fn generate(&self, rng: &mut dyn RngCore) -> ClassicalKeyPair {
        let mut seed = Zeroizing::new([0u8; 32]);
        let key = loop {
            rng.fill_bytes(seed.as_mut());
            if let Ok(k) = SigningKey::from_slice(seed.as_ref()) {
                break k;
            }
        };
        let public = key.verifying_key().to_encoded_point(false).as_bytes().to_vec();
        ClassicalKeyPair { public, secret: ClassicalSecret::from_bytes(seed.as_ref()) }
    }

    fn sign(&self, secret: &ClassicalSecret, message: &[u8]) -> Option<Vec<u8>> {
        let key = SigningKey::from_slice(secret.as_bytes()).ok()?;
        let sig: Signature = key.sign(message);
        Some(sig.to_der().as_bytes().to_vec())
    }

    fn verify(&self, public: &[u8], message: &[u8], signature: &[u8]) -> bool {
        let Ok(key) = VerifyingKey::from_sec1_bytes(public) else {
            return false;
        };
        let Ok(sig) = Signature::from_der(signature) else {
            return false;
        };
        key.verify(message, &sig).is_ok()
    }
}
