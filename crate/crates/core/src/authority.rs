//! Attribute authority: enrollment, revocation set, epoch rollover.
//!
//! Every issued key carries exactly one `epoch=t` attribute. Revocation only
//! marks a principal; it bites at the next [`Authority::rollover`], which
//! reissues keys for the new epoch to everyone not revoked. Keys already in a
//! revoked principal's hands keep working for CKs of their epoch.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abe::{AbeBackend, AbeError, UserAttributeKey};
use crate::policy::Attribute;

#[derive(Debug, Error)]
pub enum AuthorityError {
    #[error("principal {0:?} is already enrolled")]
    AlreadyEnrolled(String),
    #[error("unknown principal {0:?}")]
    UnknownPrincipal(String),
    #[error("principal {0:?} is revoked")]
    Revoked(String),
    #[error("granted attributes may not include the reserved epoch attribute")]
    EpochAttributeGranted,
    #[error("principal {0:?} has no attributes")]
    NoAttributes(String),
    #[error(transparent)]
    Abe(#[from] AbeError),
    #[error("state snapshot: {0}")]
    Snapshot(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochState {
    pub current_epoch: u64,
    pub revoked: BTreeSet<String>,
    pub enrolled: BTreeMap<String, BTreeSet<Attribute>>,
}

impl EpochState {
    pub fn is_revoked(&self, principal: &str) -> bool {
        self.revoked.contains(principal)
    }

    /// Enrolled principals that are not revoked.
    pub fn active(&self) -> impl Iterator<Item = (&String, &BTreeSet<Attribute>)> {
        self.enrolled.iter().filter(|(p, _)| !self.revoked.contains(*p))
    }
}

#[derive(Debug, Clone)]
pub struct Rollover {
    pub epoch: u64,
    pub keys: BTreeMap<String, UserAttributeKey>,
}

pub struct Authority {
    backend: Arc<dyn AbeBackend>,
    state: EpochState,
}

impl std::fmt::Debug for Authority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Authority")
            .field("backend", &self.backend.tag())
            .field("state", &self.state)
            .finish()
    }
}

impl Authority {
    pub fn new(backend: Arc<dyn AbeBackend>) -> Self {
        Self::with_state(backend, EpochState::default())
    }

    pub fn with_state(backend: Arc<dyn AbeBackend>, state: EpochState) -> Self {
        Self { backend, state }
    }

    pub fn from_snapshot(backend: Arc<dyn AbeBackend>, json: &str) -> Result<Self, AuthorityError> {
        Ok(Self::with_state(backend, serde_json::from_str(json)?))
    }

    pub fn snapshot(&self) -> Result<String, AuthorityError> {
        Ok(serde_json::to_string_pretty(&self.state)?)
    }

    pub fn state(&self) -> &EpochState {
        &self.state
    }

    pub fn current_epoch(&self) -> u64 {
        self.state.current_epoch
    }

    pub fn backend(&self) -> &Arc<dyn AbeBackend> {
        &self.backend
    }

    fn issue(&self, principal: &str, granted: &BTreeSet<Attribute>) -> Result<UserAttributeKey, AuthorityError> {
        let mut attrs = granted.clone();
        attrs.insert(Attribute::epoch(self.state.current_epoch));
        Ok(self.backend.keygen(principal, &attrs)?)
    }

    pub fn enroll(&mut self, principal: &str, attrs: BTreeSet<Attribute>) -> Result<UserAttributeKey, AuthorityError> {
        if self.state.enrolled.contains_key(principal) {
            return Err(AuthorityError::AlreadyEnrolled(principal.to_string()));
        }
        if attrs.iter().any(Attribute::is_epoch) {
            return Err(AuthorityError::EpochAttributeGranted);
        }
        if attrs.is_empty() {
            return Err(AuthorityError::NoAttributes(principal.to_string()));
        }
        let key = self.issue(principal, &attrs)?;
        self.state.enrolled.insert(principal.to_string(), attrs);
        Ok(key)
    }

    /// Marks `principal` revoked. Takes effect at the next rollover.
    pub fn revoke(&mut self, principal: &str) -> Result<&EpochState, AuthorityError> {
        if !self.state.enrolled.contains_key(principal) {
            return Err(AuthorityError::UnknownPrincipal(principal.to_string()));
        }
        self.state.revoked.insert(principal.to_string());
        Ok(&self.state)
    }

    /// Undoes a revocation; the principal is reissued keys from the next rollover on.
    pub fn reinstate(&mut self, principal: &str) -> Result<&EpochState, AuthorityError> {
        if !self.state.enrolled.contains_key(principal) {
            return Err(AuthorityError::UnknownPrincipal(principal.to_string()));
        }
        self.state.revoked.remove(principal);
        Ok(&self.state)
    }

    /// Current-epoch key for a non-revoked principal.
    pub fn key_for(&self, principal: &str) -> Result<UserAttributeKey, AuthorityError> {
        let attrs = self
            .state
            .enrolled
            .get(principal)
            .ok_or_else(|| AuthorityError::UnknownPrincipal(principal.to_string()))?;
        if self.state.is_revoked(principal) {
            return Err(AuthorityError::Revoked(principal.to_string()));
        }
        self.issue(principal, attrs)
    }

    pub fn rollover(&mut self) -> Result<Rollover, AuthorityError> {
        self.state.current_epoch += 1;
        let keys = self
            .state
            .active()
            .map(|(p, attrs)| Ok((p.clone(), self.issue(p, attrs)?)))
            .collect::<Result<_, AuthorityError>>()?;
        Ok(Rollover {
            epoch: self.state.current_epoch,
            keys,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abe::{setup, ReferenceBackend};
    use crate::envelope::DataKey;
    use crate::policy::{attribute_set, Policy};

    fn authority() -> Authority {
        Authority::new(Arc::new(ReferenceBackend::new(setup(Some(3)).unwrap())))
    }

    fn attrs(items: &[&str]) -> BTreeSet<Attribute> {
        attribute_set(items).unwrap()
    }

    fn maintenance() -> Policy {
        Policy::parse("(role=admin OR role=maintainer OR role=contractor) AND site=hq").unwrap()
    }

    fn exp7_authority() -> Authority {
        let mut a = authority();
        a.enroll("alice_admin", attrs(&["role=admin", "site=hq"])).unwrap();
        a.enroll("bob_maint", attrs(&["role=maintainer", "site=hq"])).unwrap();
        a.enroll("carl_r_contract", attrs(&["role=contractor", "site=hq"])).unwrap();
        a.enroll("dana_other", attrs(&["role=visitor", "site=plantB"])).unwrap();
        a
    }

    #[test]
    fn enroll_adds_epoch_token() {
        let mut a = authority();
        let key = a.enroll("alice", attrs(&["role=admin", "site=hq"])).unwrap();
        assert_eq!(key.tokens().unwrap().len(), 3);
        assert!(key.attributes.contains(&Attribute::epoch(0)));
        assert_eq!(key.epoch, Some(0));
        assert!(matches!(
            a.enroll("alice", attrs(&["role=admin"])),
            Err(AuthorityError::AlreadyEnrolled(_))
        ));
        assert!(matches!(
            a.enroll("eve", attrs(&["epoch=5"])),
            Err(AuthorityError::EpochAttributeGranted)
        ));
    }

    #[test]
    fn exp7_principals_at_epoch_zero() {
        let a = exp7_authority();
        let p = maintenance().attach_epoch(0).unwrap();
        let ok: Vec<bool> = ["alice_admin", "bob_maint", "carl_r_contract", "dana_other"]
            .iter()
            .map(|n| a.key_for(n).unwrap().satisfies(&p))
            .collect();
        assert_eq!(ok, [true, true, true, false]);
    }

    #[test]
    fn revoke_requires_enrollment() {
        let mut a = authority();
        assert!(matches!(a.revoke("ghost"), Err(AuthorityError::UnknownPrincipal(_))));
    }

    #[test]
    fn rollover_skips_revoked() {
        let mut a = exp7_authority();
        let carl_old = a.key_for("carl_r_contract").unwrap();
        a.revoke("carl_r_contract").unwrap();
        let r = a.rollover().unwrap();
        assert_eq!(r.epoch, 1);
        assert_eq!(r.keys.len(), 3);
        assert!(!r.keys.contains_key("carl_r_contract"));
        assert!(matches!(a.key_for("carl_r_contract"), Err(AuthorityError::Revoked(_))));

        let backend = a.backend().clone();
        let k = DataKey([5u8; 32]);
        let old_ck = backend.encrypt(&maintenance().attach_epoch(0).unwrap(), &k).unwrap();
        let new_ck = backend.encrypt(&maintenance().attach_epoch(1).unwrap(), &k).unwrap();
        // revocation does not reach back
        assert_eq!(backend.decrypt(&carl_old, &old_ck).unwrap(), k);
        assert!(matches!(backend.decrypt(&carl_old, &new_ck), Err(AbeError::NotSatisfied)));
        let bob = &r.keys["bob_maint"];
        assert_eq!(backend.decrypt(bob, &new_ck).unwrap(), k);
    }

    #[test]
    fn keys_hold_only_newest_epoch() {
        let mut a = exp7_authority();
        a.rollover().unwrap();
        let r = a.rollover().unwrap();
        assert_eq!(r.epoch, 2);
        let key = &r.keys["alice_admin"];
        let epochs: Vec<_> = key.attributes.iter().filter(|x| x.is_epoch()).collect();
        assert_eq!(epochs, [&Attribute::epoch(2)]);
    }

    #[test]
    fn reinstate_restores_reissue() {
        let mut a = exp7_authority();
        a.revoke("carl_r_contract").unwrap();
        a.reinstate("carl_r_contract").unwrap();
        assert!(a.rollover().unwrap().keys.contains_key("carl_r_contract"));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut a = exp7_authority();
        a.revoke("dana_other").unwrap();
        a.rollover().unwrap();
        let json = a.snapshot().unwrap();
        let b = Authority::from_snapshot(a.backend().clone(), &json).unwrap();
        assert_eq!(b.state(), a.state());
        assert_eq!(b.current_epoch(), 1);
    }
}
