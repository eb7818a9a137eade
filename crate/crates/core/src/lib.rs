//! Key management for ledger-published ciphertext keys.
//!
//! Bulk data is sealed with AES-GCM under a fresh data key, the data key is
//! encapsulated under an attribute policy, the sealed payload goes to a
//! content-addressed store, and a metadata record lands on a hash-chained
//! append-only log. Forward revocation works by binding every policy to an
//! `epoch=t` attribute and rotating only the small ciphertext keys.

pub mod abe;
pub mod authority;
pub mod cas;
pub mod envelope;
pub mod ledger;
pub mod policy;
pub mod workflow;

pub use cas::ContentId;
pub use envelope::DataKey;
pub use policy::{Attribute, Policy, PolicyForm, PolicyId};
