//! Ciphertext key (`CK`) structure and its binary encoding.
//!
//! ```text
//! magic "CKEY" | version u8 | backend u8 | policy_len u32 | policy utf8
//! | has_epoch u8 | epoch u64
//! reference: leaf_count u32 | (len u32 | sealed share)* | len u32 | wrapped key
//! daemon:    len u32 | opaque blob
//! ```
//!
//! Integers are little-endian. Leaf shares appear in preorder of the
//! canonical policy tree, so the tree shape is rebuilt from the policy text.

use std::fmt;

use crate::policy::{GateOp, Policy};

use super::AbeError;

pub const CK_MAGIC: &[u8; 4] = b"CKEY";
pub const CK_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendTag {
    Reference,
    Daemon,
}

impl BackendTag {
    fn byte(self) -> u8 {
        match self {
            BackendTag::Reference => 0,
            BackendTag::Daemon => 1,
        }
    }
}

impl fmt::Display for BackendTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendTag::Reference => "reference",
            BackendTag::Daemon => "daemon",
        })
    }
}

/// Share structure mirroring the policy tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShareNode {
    /// Share sealed under the token of `attribute` (nonce || ct || tag).
    Leaf { attribute: String, sealed: Vec<u8> },
    Gate(GateOp, Vec<ShareNode>),
}

impl ShareNode {
    fn push_leaves(&self, out: &mut Vec<Vec<u8>>) {
        match self {
            ShareNode::Leaf { sealed, .. } => out.push(sealed.clone()),
            ShareNode::Gate(_, children) => children.iter().for_each(|c| c.push_leaves(out)),
        }
    }

    fn rebuild(policy: &Policy, blobs: &mut std::vec::IntoIter<Vec<u8>>) -> Result<Self, AbeError> {
        match policy {
            Policy::Leaf(a) => Ok(ShareNode::Leaf {
                attribute: a.to_string(),
                sealed: blobs
                    .next()
                    .ok_or_else(|| AbeError::Malformed("fewer shares than policy leaves".into()))?,
            }),
            Policy::Gate(op, children) => Ok(ShareNode::Gate(
                *op,
                children
                    .iter()
                    .map(|c| ShareNode::rebuild(c, blobs))
                    .collect::<Result<_, _>>()?,
            )),
        }
    }

    /// True when the share tree has the same shape and leaf labels as `policy`.
    pub fn matches(&self, policy: &Policy) -> bool {
        match (self, policy) {
            (ShareNode::Leaf { attribute, .. }, Policy::Leaf(a)) => *attribute == a.to_string(),
            (ShareNode::Gate(op, shares), Policy::Gate(pop, children)) => {
                op == pop
                    && shares.len() == children.len()
                    && shares.iter().zip(children).all(|(s, c)| s.matches(c))
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CkBody {
    Reference { share_tree: ShareNode, wrapped_key: Vec<u8> },
    Daemon(Vec<u8>),
}

/// Policy-encapsulated wrapping of a data key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CiphertextKey {
    pub policy_text: String,
    pub epoch: Option<u64>,
    pub body: CkBody,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AbeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| AbeError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, AbeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, AbeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, AbeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self) -> Result<Vec<u8>, AbeError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob);
}

impl CiphertextKey {
    pub fn backend(&self) -> BackendTag {
        match self.body {
            CkBody::Reference { .. } => BackendTag::Reference,
            CkBody::Daemon(_) => BackendTag::Daemon,
        }
    }

    pub fn policy(&self) -> Result<Policy, AbeError> {
        Ok(Policy::parse(&self.policy_text)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CK_MAGIC);
        out.push(CK_VERSION);
        out.push(self.backend().byte());
        put_blob(&mut out, self.policy_text.as_bytes());
        out.push(self.epoch.is_some() as u8);
        out.extend_from_slice(&self.epoch.unwrap_or(0).to_le_bytes());
        match &self.body {
            CkBody::Reference { share_tree, wrapped_key } => {
                let mut leaves = Vec::new();
                share_tree.push_leaves(&mut leaves);
                out.extend_from_slice(&(leaves.len() as u32).to_le_bytes());
                for leaf in &leaves {
                    put_blob(&mut out, leaf);
                }
                put_blob(&mut out, wrapped_key);
            }
            CkBody::Daemon(blob) => put_blob(&mut out, blob),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AbeError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CK_MAGIC {
            return Err(AbeError::Malformed("bad magic".into()));
        }
        let version = r.u8()?;
        if version != CK_VERSION {
            return Err(AbeError::Malformed(format!("unsupported version {version}")));
        }
        let tag = r.u8()?;
        let policy_text = String::from_utf8(r.blob()?)
            .map_err(|_| AbeError::Malformed("policy text is not UTF-8".into()))?;
        let has_epoch = r.u8()?;
        let raw_epoch = r.u64()?;
        let epoch = match has_epoch {
            0 => None,
            1 => Some(raw_epoch),
            other => return Err(AbeError::Malformed(format!("bad epoch flag {other}"))),
        };
        let policy = Policy::parse(&policy_text).map_err(|e| AbeError::Malformed(e.to_string()))?;
        if policy.canonical_text() != policy_text {
            return Err(AbeError::Malformed("policy text is not canonical".into()));
        }
        if policy.epoch() != epoch {
            return Err(AbeError::Malformed("epoch field disagrees with policy".into()));
        }
        let body = match tag {
            0 => {
                let count = r.u32()? as usize;
                if count != policy.leaf_count() {
                    return Err(AbeError::Malformed(format!(
                        "{count} shares for {} policy leaves",
                        policy.leaf_count()
                    )));
                }
                let mut blobs = Vec::with_capacity(count);
                for _ in 0..count {
                    blobs.push(r.blob()?);
                }
                let share_tree = ShareNode::rebuild(&policy, &mut blobs.into_iter())?;
                CkBody::Reference {
                    share_tree,
                    wrapped_key: r.blob()?,
                }
            }
            1 => CkBody::Daemon(r.blob()?),
            other => return Err(AbeError::Malformed(format!("unknown backend tag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(AbeError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            policy_text,
            epoch,
            body,
        })
    }

    /// Reads the epoch field from an encoded CK without decoding the body.
    pub fn peek_epoch(bytes: &[u8]) -> Result<Option<u64>, AbeError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CK_MAGIC {
            return Err(AbeError::Malformed("bad magic".into()));
        }
        r.take(2)?;
        let len = r.u32()? as usize;
        r.take(len)?;
        let has_epoch = r.u8()?;
        let epoch = r.u64()?;
        Ok((has_epoch == 1).then_some(epoch))
    }
}
