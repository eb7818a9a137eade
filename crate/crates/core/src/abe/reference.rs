use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;

use crate::envelope::{self, fill_random, DataKey, SealedPayload, KEY_LEN};
use crate::policy::{Attribute, GateOp, Policy};

use super::ck::{BackendTag, CiphertextKey, CkBody, ShareNode};
use super::{epoch_of, AbeBackend, AbeError, KeyMaterial, Token, UserAttributeKey};

/// Root secret of the reference backend. Never written to ledger records.
#[derive(Clone, PartialEq, Eq)]
pub struct MasterSecret([u8; 32]);

impl MasterSecret {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(text: &str) -> Option<Self> {
        hex::decode(text.trim()).ok()?.try_into().ok().map(Self)
    }

    /// `HMAC-SHA-256(ms, "attr" || "name=value")`.
    pub fn token(&self, attr: &Attribute) -> Token {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(b"attr");
        mac.update(attr.to_string().as_bytes());
        mac.finalize().into_bytes().into()
    }
}

impl fmt::Debug for MasterSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MasterSecret(..)")
    }
}

/// Random master secret, or a seed-deterministic one for tests and benchmarks.
pub fn setup(seed: Option<u64>) -> Result<MasterSecret, AbeError> {
    let mut bytes = [0u8; 32];
    match seed {
        Some(seed) => ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut bytes),
        None => fill_random(&mut bytes)?,
    }
    Ok(MasterSecret(bytes))
}

pub fn keygen(ms: &MasterSecret, principal: &str, attrs: &BTreeSet<Attribute>) -> Result<UserAttributeKey, AbeError> {
    if attrs.is_empty() {
        return Err(AbeError::EmptyAttributes);
    }
    let tokens = attrs.iter().map(|a| (a.to_string(), ms.token(a))).collect();
    Ok(UserAttributeKey {
        principal: principal.to_string(),
        attributes: attrs.clone(),
        epoch: epoch_of(attrs),
        material: KeyMaterial::Tokens { tokens },
    })
}

fn random_share() -> Result<[u8; 32], AbeError> {
    let mut s = [0u8; 32];
    fill_random(&mut s)?;
    Ok(s)
}

fn xor_into(acc: &mut [u8; 32], other: &[u8; 32]) {
    acc.iter_mut().zip(other).for_each(|(a, b)| *a ^= b);
}

fn share_down(ms: &MasterSecret, node: &Policy, secret: [u8; 32]) -> Result<ShareNode, AbeError> {
    match node {
        Policy::Leaf(attr) => Ok(ShareNode::Leaf {
            attribute: attr.to_string(),
            sealed: envelope::seal_with(&ms.token(attr), &secret)?.to_bytes(),
        }),
        Policy::Gate(GateOp::And, children) => {
            let mut last = secret;
            let mut shares = Vec::with_capacity(children.len());
            for _ in 1..children.len() {
                let s = random_share()?;
                xor_into(&mut last, &s);
                shares.push(s);
            }
            shares.push(last);
            let nodes = children
                .iter()
                .zip(shares)
                .map(|(c, s)| share_down(ms, c, s))
                .collect::<Result<_, _>>()?;
            Ok(ShareNode::Gate(GateOp::And, nodes))
        }
        Policy::Gate(GateOp::Or, children) => {
            let nodes = children
                .iter()
                .map(|c| share_down(ms, c, secret))
                .collect::<Result<_, _>>()?;
            Ok(ShareNode::Gate(GateOp::Or, nodes))
        }
    }
}

/// Encapsulates `key` under `policy`.
///
/// A fresh wrap key `W` is shared down the canonical tree: an AND node with
/// `c` children hands out `c` XOR shares, an OR node hands its secret to
/// every child, and each leaf seals its share under the attribute token.
/// `wrapped_key = AEAD(W, key)`.
pub fn encrypt(ms: &MasterSecret, policy: &Policy, key: &DataKey) -> Result<CiphertextKey, AbeError> {
    let canonical = policy.normalize();
    let wrap = random_share()?;
    let share_tree = share_down(ms, &canonical, wrap)?;
    let wrapped_key = envelope::seal_with(&wrap, key.as_bytes())?.to_bytes();
    Ok(CiphertextKey {
        policy_text: canonical.canonical_text(),
        epoch: canonical.epoch(),
        body: CkBody::Reference {
            share_tree,
            wrapped_key,
        },
    })
}

fn recover(tokens: &BTreeMap<String, Token>, node: &ShareNode) -> Option<[u8; 32]> {
    match node {
        ShareNode::Leaf { attribute, sealed } => {
            let token = tokens.get(attribute)?;
            let sealed = SealedPayload::from_bytes(sealed).ok()?;
            envelope::open_with(token, &sealed).ok()?.try_into().ok()
        }
        ShareNode::Gate(GateOp::And, children) => {
            let mut acc = [0u8; 32];
            for child in children {
                xor_into(&mut acc, &recover(tokens, child)?);
            }
            Some(acc)
        }
        ShareNode::Gate(GateOp::Or, children) => children.iter().find_map(|c| recover(tokens, c)),
    }
}

fn decrypt_with_tokens(tokens: &BTreeMap<String, Token>, ck: &CiphertextKey) -> Result<DataKey, AbeError> {
    let CkBody::Reference { share_tree, wrapped_key } = &ck.body else {
        return Err(AbeError::BackendMismatch(BackendTag::Daemon));
    };
    if !share_tree.matches(&ck.policy()?) {
        return Err(AbeError::Malformed("share tree does not mirror the policy".into()));
    }
    let wrap = recover(tokens, share_tree).ok_or(AbeError::NotSatisfied)?;
    let sealed = SealedPayload::from_bytes(wrapped_key)?;
    let key = envelope::open_with(&wrap, &sealed)
        .map_err(|_| AbeError::Malformed("wrapped key failed authentication".into()))?;
    DataKey::from_slice(&key).ok_or_else(|| AbeError::Malformed("wrapped key has wrong length".into()))
}

pub fn decrypt(uk: &UserAttributeKey, ck: &CiphertextKey) -> Result<DataKey, AbeError> {
    let tokens = uk.tokens().ok_or(AbeError::BackendMismatch(BackendTag::Reference))?;
    decrypt_with_tokens(tokens, ck)
}

/// Gateway-scoped copy of a user's tokens.
#[derive(Clone, PartialEq, Eq)]
pub struct TransformKey {
    pub principal: String,
    tokens: BTreeMap<String, Token>,
}

impl TransformKey {
    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.tokens.keys().map(String::as_str)
    }
}

impl fmt::Debug for TransformKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransformKey")
            .field("principal", &self.principal)
            .field("attributes", &self.tokens.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Client-held secret `ek`.
#[derive(Clone, PartialEq, Eq)]
pub struct RetrievalSecret(pub [u8; KEY_LEN]);

impl fmt::Debug for RetrievalSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RetrievalSecret(..)")
    }
}

/// `AEAD(ek, K)` returned by the gateway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialCiphertext(pub Vec<u8>);

pub fn transform_keygen(uk: &UserAttributeKey) -> Result<(TransformKey, RetrievalSecret), AbeError> {
    let tokens = uk.tokens().ok_or(AbeError::BackendMismatch(BackendTag::Reference))?;
    let mut ek = [0u8; KEY_LEN];
    fill_random(&mut ek)?;
    Ok((
        TransformKey {
            principal: uk.principal.clone(),
            tokens: tokens.clone(),
        },
        RetrievalSecret(ek),
    ))
}

/// Gateway side: performs the full tree reconstruction.
pub fn transform(tk: &TransformKey, ck: &CiphertextKey, ek: &RetrievalSecret) -> Result<PartialCiphertext, AbeError> {
    let key = decrypt_with_tokens(&tk.tokens, ck)?;
    Ok(PartialCiphertext(envelope::seal_with(&ek.0, key.as_bytes())?.to_bytes()))
}

/// Client side: one AEAD open, independent of policy size.
pub fn finish(ek: &RetrievalSecret, pc: &PartialCiphertext) -> Result<DataKey, AbeError> {
    let sealed = SealedPayload::from_bytes(&pc.0)?;
    let key = envelope::open_with(&ek.0, &sealed)?;
    DataKey::from_slice(&key).ok_or_else(|| AbeError::Malformed("partial ciphertext has wrong length".into()))
}

/// In-process backend holding the master secret.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    master: MasterSecret,
}

impl ReferenceBackend {
    pub fn new(master: MasterSecret) -> Self {
        Self { master }
    }

    pub fn master(&self) -> &MasterSecret {
        &self.master
    }
}

impl AbeBackend for ReferenceBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Reference
    }

    fn keygen(&self, principal: &str, attrs: &BTreeSet<Attribute>) -> Result<UserAttributeKey, AbeError> {
        keygen(&self.master, principal, attrs)
    }

    fn encrypt(&self, policy: &Policy, key: &DataKey) -> Result<CiphertextKey, AbeError> {
        encrypt(&self.master, policy, key)
    }

    fn decrypt(&self, uk: &UserAttributeKey, ck: &CiphertextKey) -> Result<DataKey, AbeError> {
        decrypt(uk, ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::attribute_set;

    fn ms() -> MasterSecret {
        setup(Some(7)).unwrap()
    }

    fn key_for(ms: &MasterSecret, attrs: &[&str]) -> UserAttributeKey {
        keygen(ms, "p", &attribute_set(attrs).unwrap()).unwrap()
    }

    #[test]
    fn setup_modes() {
        assert_eq!(setup(Some(7)).unwrap(), setup(Some(7)).unwrap());
        assert_ne!(setup(None).unwrap(), setup(None).unwrap());
        let a = "role=admin".parse().unwrap();
        assert_ne!(setup(Some(1)).unwrap().token(&a), setup(Some(2)).unwrap().token(&a));
    }

    #[test]
    fn keygen_tokens() {
        let ms = ms();
        let uk = key_for(&ms, &["role=maintainer"]);
        assert_eq!(uk.tokens().unwrap().len(), 1);
        let other = keygen(&ms, "q", &attribute_set(["role=maintainer"]).unwrap()).unwrap();
        assert_eq!(uk.tokens(), other.tokens());
        assert!(matches!(keygen(&ms, "p", &BTreeSet::new()), Err(AbeError::EmptyAttributes)));
    }

    #[test]
    fn single_leaf_share_is_the_wrap_key() {
        let ms = ms();
        let k = DataKey::generate().unwrap();
        let ck = encrypt(&ms, &Policy::parse("a=1").unwrap(), &k).unwrap();
        let CkBody::Reference { share_tree, wrapped_key } = &ck.body else { panic!() };
        let ShareNode::Leaf { sealed, .. } = share_tree else { panic!() };
        let a = "a=1".parse().unwrap();
        let share = envelope::open_with(&ms.token(&a), &SealedPayload::from_bytes(sealed).unwrap()).unwrap();
        let w: [u8; 32] = share.try_into().unwrap();
        let opened = envelope::open_with(&w, &SealedPayload::from_bytes(wrapped_key).unwrap()).unwrap();
        assert_eq!(opened, k.as_bytes());
        assert_eq!(decrypt(&key_for(&ms, &["a=1"]), &ck).unwrap(), k);
    }

    #[test]
    fn and_shares_alone_do_not_open_the_wrap() {
        let ms = ms();
        let k = DataKey::generate().unwrap();
        let ck = encrypt(&ms, &Policy::parse("a=1 AND b=2").unwrap(), &k).unwrap();
        let CkBody::Reference { share_tree, wrapped_key } = &ck.body else { panic!() };
        let ShareNode::Gate(GateOp::And, leaves) = share_tree else { panic!() };
        let wrapped = SealedPayload::from_bytes(wrapped_key).unwrap();
        let mut all = [0u8; 32];
        for leaf in leaves {
            let ShareNode::Leaf { attribute, sealed } = leaf else { panic!() };
            let token = ms.token(&attribute.parse().unwrap());
            let share: [u8; 32] = envelope::open_with(&token, &SealedPayload::from_bytes(sealed).unwrap())
                .unwrap()
                .try_into()
                .unwrap();
            assert!(envelope::open_with(&share, &wrapped).is_err());
            xor_into(&mut all, &share);
        }
        assert_eq!(envelope::open_with(&all, &wrapped).unwrap(), k.as_bytes());
        assert!(matches!(decrypt(&key_for(&ms, &["a=1"]), &ck), Err(AbeError::NotSatisfied)));
        assert_eq!(decrypt(&key_for(&ms, &["a=1", "b=2"]), &ck).unwrap(), k);
    }

    #[test]
    fn or_duplicates_the_secret() {
        let ms = ms();
        let k = DataKey::generate().unwrap();
        let ck = encrypt(&ms, &Policy::parse("a=1 OR b=2").unwrap(), &k).unwrap();
        assert_eq!(decrypt(&key_for(&ms, &["a=1"]), &ck).unwrap(), k);
        assert_eq!(decrypt(&key_for(&ms, &["b=2"]), &ck).unwrap(), k);
        assert!(matches!(decrypt(&key_for(&ms, &["c=3"]), &ck), Err(AbeError::NotSatisfied)));
    }

    #[test]
    fn forged_token_does_not_decrypt() {
        let ms = ms();
        let k = DataKey::generate().unwrap();
        let ck = encrypt(&ms, &Policy::parse("a=1").unwrap(), &k).unwrap();
        let other = setup(Some(99)).unwrap();
        assert!(matches!(decrypt(&key_for(&other, &["a=1"]), &ck), Err(AbeError::NotSatisfied)));
    }

    #[test]
    fn epoch_gated_ck() {
        let ms = ms();
        let k = DataKey::generate().unwrap();
        let base = Policy::parse("role=maintainer AND site=hq").unwrap();
        let ck_t = encrypt(&ms, &base.attach_epoch(4).unwrap(), &k).unwrap();
        let ck_next = encrypt(&ms, &base.attach_epoch(5).unwrap(), &k).unwrap();
        assert_eq!(ck_t.epoch, Some(4));
        let uk = key_for(&ms, &["role=maintainer", "site=hq", "epoch=4"]);
        assert_eq!(decrypt(&uk, &ck_t).unwrap(), k);
        assert!(matches!(decrypt(&uk, &ck_next), Err(AbeError::NotSatisfied)));
    }

    #[test]
    fn transform_path() {
        let ms = ms();
        let k = DataKey::generate().unwrap();
        let ck = encrypt(&ms, &Policy::parse("(a=1 OR a=2) AND b=3").unwrap(), &k).unwrap();
        let uk = key_for(&ms, &["a=2", "b=3"]);
        let (tk, ek) = transform_keygen(&uk).unwrap();
        let (_, ek2) = transform_keygen(&uk).unwrap();
        assert_ne!(ek, ek2);
        assert_eq!(tk.principal, uk.principal);
        assert!(uk.tokens().unwrap().values().all(|t| *t != ek.0));
        let pc = transform(&tk, &ck, &ek).unwrap();
        assert_eq!(finish(&ek, &pc).unwrap(), decrypt(&uk, &ck).unwrap());
        assert!(finish(&ek2, &pc).is_err());
        assert!(finish(&ek, &PartialCiphertext(pc.0[..20].to_vec())).is_err());
        let (tk_bad, ek_bad) = transform_keygen(&key_for(&ms, &["a=1"])).unwrap();
        assert!(matches!(transform(&tk_bad, &ck, &ek_bad), Err(AbeError::NotSatisfied)));
    }

    #[test]
    fn partial_ciphertext_size_is_policy_independent() {
        let ms = ms();
        let k = DataKey::generate().unwrap();
        let small = crate::policy::gen_policy(3, crate::policy::PolicyForm::And, 1).unwrap();
        let large = crate::policy::gen_policy(6, crate::policy::PolicyForm::And, 1).unwrap();
        let mut sizes = Vec::new();
        for p in [small, large] {
            let uk = keygen(&ms, "p", &p.minimal_satisfying_set()).unwrap();
            let (tk, ek) = transform_keygen(&uk).unwrap();
            let pc = transform(&tk, &encrypt(&ms, &p, &k).unwrap(), &ek).unwrap();
            sizes.push(pc.0.len());
        }
        assert_eq!(sizes[0], sizes[1]);
    }

    #[test]
    fn ck_encoding_round_trips_and_rejects_damage() {
        let ms = ms();
        let k = DataKey::generate().unwrap();
        let p = Policy::parse("(x=1 OR y=2) AND z=3").unwrap().attach_epoch(2).unwrap();
        let ck = encrypt(&ms, &p, &k).unwrap();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"CKEY");
        assert_eq!(CiphertextKey::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(CiphertextKey::peek_epoch(&bytes).unwrap(), Some(2));
        assert!(CiphertextKey::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CiphertextKey::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(CiphertextKey::from_bytes(&extra).is_err());
    }
}
