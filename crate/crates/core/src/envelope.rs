//! Payload sealing with AES-256-GCM under a fresh per-object data key.
//!
//! Wire layout of a sealed payload is `nonce (12) || ciphertext || tag (16)`.
//! No associated data is bound; the ledger record binds the CID to its
//! metadata instead.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    /// Wrong key or modified bytes; the two are deliberately not distinguished.
    #[error("authentication failed")]
    Authentication,
    #[error("sealed payload too short: {0} bytes")]
    Truncated(usize),
    #[error("entropy source failure: {0}")]
    Entropy(String),
}

pub(crate) fn fill_random(buf: &mut [u8]) -> Result<(), EnvelopeError> {
    OsRng
        .try_fill_bytes(buf)
        .map_err(|e| EnvelopeError::Entropy(e.to_string()))
}

/// Symmetric data key `K`.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataKey(#[serde(with = "hex_array")] pub [u8; KEY_LEN]);

impl DataKey {
    pub fn generate() -> Result<Self, EnvelopeError> {
        let mut bytes = [0u8; KEY_LEN];
        fill_random(&mut bytes)?;
        Ok(Self(bytes))
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Self)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for DataKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DataKey(..)")
    }
}

/// AES-GCM output: `CF` when it carries a payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedPayload {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl SealedPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NONCE_LEN + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(EnvelopeError::Truncated(bytes.len()));
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (ciphertext, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(Self {
            nonce: nonce.try_into().expect("nonce length"),
            ciphertext: ciphertext.to_vec(),
            tag: tag.try_into().expect("tag length"),
        })
    }

    pub fn len(&self) -> usize {
        NONCE_LEN + self.ciphertext.len() + TAG_LEN
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Encrypts under an existing key with a fresh random nonce.
pub fn seal_with(key: &[u8; KEY_LEN], plaintext: &[u8]) -> Result<SealedPayload, EnvelopeError> {
    let mut nonce = [0u8; NONCE_LEN];
    fill_random(&mut nonce)?;
    let cipher = Aes256Gcm::new(key.into());
    let mut ct = cipher
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .map_err(|_| EnvelopeError::Authentication)?;
    let tag: [u8; TAG_LEN] = ct.split_off(ct.len() - TAG_LEN).try_into().expect("tag length");
    Ok(SealedPayload {
        nonce,
        ciphertext: ct,
        tag,
    })
}

pub fn open_with(key: &[u8; KEY_LEN], sealed: &SealedPayload) -> Result<Vec<u8>, EnvelopeError> {
    let cipher = Aes256Gcm::new(key.into());
    let mut buf = Vec::with_capacity(sealed.ciphertext.len() + TAG_LEN);
    buf.extend_from_slice(&sealed.ciphertext);
    buf.extend_from_slice(&sealed.tag);
    cipher
        .decrypt(Nonce::from_slice(&sealed.nonce), buf.as_slice())
        .map_err(|_| EnvelopeError::Authentication)
}

/// Generates a fresh data key and seals `plaintext` under it.
pub fn seal(plaintext: &[u8]) -> Result<(DataKey, SealedPayload), EnvelopeError> {
    let key = DataKey::generate()?;
    let sealed = seal_with(&key.0, plaintext)?;
    Ok((key, sealed))
}

pub fn open(key: &DataKey, sealed: &SealedPayload) -> Result<Vec<u8>, EnvelopeError> {
    open_with(&key.0, sealed)
}

pub(crate) mod hex_array {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(bytes: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(text).map_err(D::Error::custom)?;
        raw.try_into()
            .map_err(|v: Vec<u8>| D::Error::custom(format!("expected {N} bytes, got {}", v.len())))
    }
}
