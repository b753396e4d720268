//! Service handles: the JSON record of who asked for which service, sealed
//! with ChaCha20-Poly1305 under a key that never leaves the Broker.

use ring::aead::{Aad, LessSafeKey, Nonce, UnboundKey, CHACHA20_POLY1305, NONCE_LEN};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ServiceHandle;

const AAD: &[u8] = b"psvc-handle-v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HandleError {
    #[error("handle is not valid base64url")]
    Encoding,
    #[error("handle failed authentication")]
    Forged,
    #[error("handle plaintext is malformed")]
    Malformed,
}

/// What a handle says once opened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlePlaintext {
    /// Authority (`host:port`) of the SP the handle was minted for.
    #[serde(rename = "sp")]
    pub requester_host: String,
    #[serde(rename = "svc")]
    pub descriptor_id: String,
    /// Milliseconds since the Unix epoch.
    #[serde(rename = "t")]
    pub mint_time_ms: u64,
}

pub struct HandleKey(LessSafeKey);

impl HandleKey {
    pub fn generate() -> Self {
        Self::from_bytes(rand::random())
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        let key = UnboundKey::new(&CHACHA20_POLY1305, &bytes).expect("32-byte key");
        Self(LessSafeKey::new(key))
    }

    /// `nonce || ciphertext || tag`, as URL-safe text.
    pub fn mint(&self, plaintext: &HandlePlaintext) -> ServiceHandle {
        let nonce_bytes: [u8; NONCE_LEN] = rand::random();
        let mut sealed = serde_json::to_vec(plaintext).expect("plaintext serializes");
        self.0
            .seal_in_place_append_tag(Nonce::assume_unique_for_key(nonce_bytes), Aad::from(AAD), &mut sealed)
            .expect("sealing cannot fail for in-memory buffers");
        let mut out = Vec::with_capacity(NONCE_LEN + sealed.len());
        out.extend_from_slice(&nonce_bytes);
        out.extend_from_slice(&sealed);
        ServiceHandle::from_bytes(&out)
    }

    pub fn open(&self, handle: &ServiceHandle) -> Result<HandlePlaintext, HandleError> {
        let mut bytes = handle.to_bytes().ok_or(HandleError::Encoding)?;
        if bytes.len() < NONCE_LEN + CHACHA20_POLY1305.tag_len() {
            return Err(HandleError::Forged);
        }
        let nonce = Nonce::try_assume_unique_for_key(&bytes[..NONCE_LEN]).map_err(|_| HandleError::Forged)?;
        let plain = self
            .0
            .open_in_place(nonce, Aad::from(AAD), &mut bytes[NONCE_LEN..])
            .map_err(|_| HandleError::Forged)?;
        serde_json::from_slice(plain).map_err(|_| HandleError::Malformed)
    }
}

impl std::fmt::Debug for HandleKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("HandleKey(..)")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> HandlePlaintext {
        HandlePlaintext {
            requester_host: "127.0.0.1:8080".into(),
            descriptor_id: "CCPersonalService".into(),
            mint_time_ms: 1_700_000_000_000,
        }
    }

    #[test]
    fn wrong_key_fails() {
        let h = HandleKey::generate().mint(&sample());
        assert_eq!(HandleKey::generate().open(&h), Err(HandleError::Forged));
    }

    #[test]
    fn garbage_fails() {
        let key = HandleKey::generate();
        assert_eq!(key.open(&ServiceHandle::from_text("not base64!")), Err(HandleError::Encoding));
        assert_eq!(key.open(&ServiceHandle::from_bytes(b"short")), Err(HandleError::Forged));
    }

    #[test]
    fn handles_are_randomized() {
        let key = HandleKey::generate();
        assert_ne!(key.mint(&sample()), key.mint(&sample()));
    }

    proptest! {
        #[test]
        fn open_inverts_mint(sp in "[a-z0-9.:]{0,30}", id in "[A-Za-z0-9_ -]{0,30}", t in any::<u64>()) {
            let key = HandleKey::generate();
            let p = HandlePlaintext { requester_host: sp, descriptor_id: id, mint_time_ms: t };
            prop_assert_eq!(key.open(&key.mint(&p)).unwrap(), p);
        }

        #[test]
        fn any_byte_flip_is_detected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
            let key = HandleKey::generate();
            let mut bytes = key.mint(&sample()).to_bytes().unwrap();
            let i = pos.index(bytes.len());
            bytes[i] ^= 1 << bit;
            prop_assert!(key.open(&ServiceHandle::from_bytes(&bytes)).is_err());
        }
    }
}
