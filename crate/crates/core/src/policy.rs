//! Boolean attribute policies: parsing, canonical form, identifiers,
//! evaluation, epoch gating and synthetic generation.
//!
//! Grammar (AND binds tighter than OR, keywords case-insensitive):
//!
//! ```text
//! expr   := term (OR term)*
//! term   := factor (AND factor)*
//! factor := attr | '(' expr ')'
//! attr   := name '=' value        name, value: [A-Za-z0-9_]+
//! ```
//!
//! Gates are n-ary. Adjacent gates with the same operator are flattened by
//! the parser, and [`Policy::normalize`] additionally sorts children by
//! canonical text and drops duplicates, which is what the canonical text and
//! the [`PolicyId`] are computed from.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Name of the synthetic attribute that binds a policy to an epoch.
pub const EPOCH_ATTRIBUTE: &str = "epoch";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("empty policy expression")]
    Empty,
    /// `position` is 1-based; errors at end of input report `len + 1`.
    #[error("syntax error at offset {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("invalid attribute token {0:?}: expected [A-Za-z0-9_]+")]
    InvalidAttribute(String),
    #[error("policy already carries an epoch attribute")]
    EpochAlreadyAttached,
    #[error("invalid leaf count {k} for {form} policy")]
    InvalidLeafCount { k: usize, form: PolicyForm },
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// A `name=value` attribute.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Attribute {
    name: String,
    value: String,
}

impl Attribute {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Result<Self, PolicyError> {
        let name = name.into();
        let value = value.into();
        for part in [&name, &value] {
            if !is_token(part) {
                return Err(PolicyError::InvalidAttribute(part.clone()));
            }
        }
        Ok(Self { name, value })
    }

    pub fn epoch(epoch: u64) -> Self {
        Self {
            name: EPOCH_ATTRIBUTE.to_string(),
            value: epoch.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn is_epoch(&self) -> bool {
        self.name == EPOCH_ATTRIBUTE
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.name, self.value)
    }
}

impl FromStr for Attribute {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('=') {
            Some((name, value)) => Attribute::new(name, value),
            None => Err(PolicyError::InvalidAttribute(s.to_string())),
        }
    }
}

impl TryFrom<String> for Attribute {
    type Error = PolicyError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Attribute> for String {
    fn from(a: Attribute) -> String {
        a.to_string()
    }
}

/// Parses a list of `name=value` strings into an attribute set.
pub fn attribute_set<I, S>(items: I) -> Result<BTreeSet<Attribute>, PolicyError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    items.into_iter().map(|s| s.as_ref().parse()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GateOp {
    And,
    Or,
}

impl GateOp {
    fn keyword(self) -> &'static str {
        match self {
            GateOp::And => "AND",
            GateOp::Or => "OR",
        }
    }
}

/// Policy tree. Gates always hold at least two children.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Policy {
    Leaf(Attribute),
    Gate(GateOp, Vec<Policy>),
}

impl Policy {
    pub fn leaf(attr: Attribute) -> Self {
        Policy::Leaf(attr)
    }

    /// Builds a gate, flattening same-op children and collapsing a single
    /// child to itself.
    pub fn gate(op: GateOp, children: Vec<Policy>) -> Self {
        let mut flat = Vec::with_capacity(children.len());
        for child in children {
            match child {
                Policy::Gate(child_op, grand) if child_op == op => flat.extend(grand),
                other => flat.push(other),
            }
        }
        if flat.len() == 1 {
            flat.pop().expect("one child")
        } else {
            Policy::Gate(op, flat)
        }
    }

    pub fn and(children: Vec<Policy>) -> Self {
        Policy::gate(GateOp::And, children)
    }

    pub fn or(children: Vec<Policy>) -> Self {
        Policy::gate(GateOp::Or, children)
    }

    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        Parser::new(text).parse()
    }

    /// Number of leaves, `|P|`.
    pub fn leaf_count(&self) -> usize {
        match self {
            Policy::Leaf(_) => 1,
            Policy::Gate(_, children) => children.iter().map(Policy::leaf_count).sum(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Policy::Leaf(_) => 1,
            Policy::Gate(_, children) => 1 + children.iter().map(Policy::depth).max().unwrap_or(0),
        }
    }

    /// Leaves in preorder.
    pub fn leaves(&self) -> Vec<&Attribute> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a Attribute>) {
        match self {
            Policy::Leaf(a) => out.push(a),
            Policy::Gate(_, children) => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    /// Sorted, deduplicated, flattened form. Canonical text and policy ids
    /// are computed from this.
    pub fn normalize(&self) -> Policy {
        match self {
            Policy::Leaf(a) => Policy::Leaf(a.clone()),
            Policy::Gate(op, children) => {
                let mut keyed: Vec<(String, Policy)> = Vec::new();
                for child in children {
                    match child.normalize() {
                        Policy::Gate(child_op, grand) if child_op == *op => {
                            keyed.extend(grand.into_iter().map(|g| (g.render(), g)))
                        }
                        other => keyed.push((other.render(), other)),
                    }
                }
                keyed.sort_by(|a, b| a.0.cmp(&b.0));
                keyed.dedup_by(|a, b| a.0 == b.0);
                let mut normalized: Vec<Policy> = keyed.into_iter().map(|(_, p)| p).collect();
                if normalized.len() == 1 {
                    normalized.pop().expect("one child")
                } else {
                    Policy::Gate(*op, normalized)
                }
            }
        }
    }

    /// Renders without reordering.
    fn render(&self) -> String {
        match self {
            Policy::Leaf(a) => a.to_string(),
            Policy::Gate(op, children) => {
                let sep = format!(" {} ", op.keyword());
                let parts: Vec<String> = children.iter().map(Policy::render).collect();
                format!("({})", parts.join(&sep))
            }
        }
    }

    pub fn canonical_text(&self) -> String {
        self.normalize().render()
    }

    pub fn id(&self) -> PolicyId {
        PolicyId(Sha256::digest(self.canonical_text().as_bytes()).into())
    }

    pub fn satisfied_by(&self, attrs: &BTreeSet<Attribute>) -> bool {
        match self {
            Policy::Leaf(a) => attrs.contains(a),
            Policy::Gate(GateOp::And, children) => children.iter().all(|c| c.satisfied_by(attrs)),
            Policy::Gate(GateOp::Or, children) => children.iter().any(|c| c.satisfied_by(attrs)),
        }
    }

    /// A small attribute set that satisfies the policy: all children of an
    /// AND, the first child of an OR.
    pub fn minimal_satisfying_set(&self) -> BTreeSet<Attribute> {
        let mut out = BTreeSet::new();
        self.collect_minimal(&mut out);
        out
    }

    fn collect_minimal(&self, out: &mut BTreeSet<Attribute>) {
        match self {
            Policy::Leaf(a) => {
                out.insert(a.clone());
            }
            Policy::Gate(GateOp::And, children) => children.iter().for_each(|c| c.collect_minimal(out)),
            Policy::Gate(GateOp::Or, children) => children[0].collect_minimal(out),
        }
    }

    pub fn contains_epoch(&self) -> bool {
        self.leaves().iter().any(|a| a.is_epoch())
    }

    /// Epoch bound by a top-level `epoch=t` conjunct, if any.
    pub fn epoch(&self) -> Option<u64> {
        let conjuncts: &[Policy] = match self {
            Policy::Gate(GateOp::And, children) => children,
            leaf @ Policy::Leaf(_) => std::slice::from_ref(leaf),
            Policy::Gate(GateOp::Or, _) => return None,
        };
        conjuncts.iter().find_map(|c| match c {
            Policy::Leaf(a) if a.is_epoch() => a.value().parse().ok(),
            _ => None,
        })
    }

    /// Conjoins `epoch=t` to the policy.
    pub fn attach_epoch(&self, epoch: u64) -> Result<Policy, PolicyError> {
        if self.contains_epoch() {
            return Err(PolicyError::EpochAlreadyAttached);
        }
        Ok(Policy::and(vec![self.clone(), Policy::Leaf(Attribute::epoch(epoch))]))
    }

    /// Removes top-level `epoch=*` conjuncts. Inverse of [`attach_epoch`](Self::attach_epoch).
    pub fn without_epoch(&self) -> Policy {
        match self {
            Policy::Gate(GateOp::And, children) => Policy::and(
                children
                    .iter()
                    .filter(|c| !matches!(c, Policy::Leaf(a) if a.is_epoch()))
                    .cloned()
                    .collect(),
            ),
            other => other.clone(),
        }
    }

    /// Classifies the tree: a conjunction of leaves is AND; a conjunction
    /// mixing leaves and OR groups of leaves is AND_OF_OR.
    pub fn form(&self) -> Option<PolicyForm> {
        match self {
            Policy::Leaf(_) => Some(PolicyForm::And),
            Policy::Gate(GateOp::And, children) => {
                if children.iter().all(|c| matches!(c, Policy::Leaf(_))) {
                    Some(PolicyForm::And)
                } else if children.iter().all(|c| match c {
                    Policy::Leaf(_) => true,
                    Policy::Gate(GateOp::Or, g) => g.iter().all(|l| matches!(l, Policy::Leaf(_))),
                    Policy::Gate(GateOp::And, _) => false,
                }) {
                    Some(PolicyForm::AndOfOr)
                } else {
                    None
                }
            }
            Policy::Gate(GateOp::Or, _) => None,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

impl FromStr for Policy {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::parse(s)
    }
}

/// SHA-256 of the canonical policy text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PolicyId(pub [u8; 32]);

impl PolicyId {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyForm {
    And,
    AndOfOr,
}

impl fmt::Display for PolicyForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyForm::And => "AND",
            PolicyForm::AndOfOr => "AND_OF_OR",
        })
    }
}

impl FromStr for PolicyForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "AND" => Ok(PolicyForm::And),
            "AND_OF_OR" => Ok(PolicyForm::AndOfOr),
            other => Err(format!("unknown policy form {other:?}")),
        }
    }
}

/// Number of distinct values a synthetic attribute may take.
pub const SYNTHETIC_VALUES: u32 = 4;

/// Generates a synthetic policy with `k` leaves.
///
/// `AND` yields `attr0=vX AND ... AND attr{k-1}=vY`; `AND_OF_OR` yields
/// `k/2` groups `(attrJ=vX OR attrJ=vY)` with `X != Y`, joined by AND.
pub fn gen_policy(k: usize, form: PolicyForm, seed: u64) -> Result<Policy, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth = |name: usize, value: u32| Attribute {
        name: format!("attr{name}"),
        value: format!("v{value}"),
    };
    match form {
        PolicyForm::And => {
            if k == 0 {
                return Err(PolicyError::InvalidLeafCount { k, form });
            }
            let leaves = (0..k)
                .map(|i| Policy::Leaf(synth(i, rng.gen_range(0..SYNTHETIC_VALUES))))
                .collect();
            Ok(Policy::and(leaves))
        }
        PolicyForm::AndOfOr => {
            if k < 2 || !k.is_multiple_of(2) {
                return Err(PolicyError::InvalidLeafCount { k, form });
            }
            let values: Vec<u32> = (0..SYNTHETIC_VALUES).collect();
            let groups = (0..k / 2)
                .map(|g| {
                    let pair: Vec<&u32> = values.choose_multiple(&mut rng, 2).collect();
                    Policy::Gate(
                        GateOp::Or,
                        vec![Policy::Leaf(synth(g, *pair[0])), Policy::Leaf(synth(g, *pair[1]))],
                    )
                })
                .collect();
            Ok(Policy::and(groups))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token<'a> {
    Ident(&'a str),
    Eq,
    LParen,
    RParen,
}

struct Parser<'a> {
    tokens: Vec<(usize, Token<'a>)>,
    pos: usize,
    text: &'a str,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            tokens: Vec::new(),
            pos: 0,
            text,
        }
    }

    fn syntax(position: usize, message: impl Into<String>) -> PolicyError {
        PolicyError::Syntax {
            position,
            message: message.into(),
        }
    }

    fn lex(&mut self) -> Result<(), PolicyError> {
        let bytes = self.text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let b = bytes[i];
            match b {
                b' ' | b'\t' | b'\n' | b'\r' => i += 1,
                b'=' => {
                    self.tokens.push((i, Token::Eq));
                    i += 1;
                }
                b'(' => {
                    self.tokens.push((i, Token::LParen));
                    i += 1;
                }
                b')' => {
                    self.tokens.push((i, Token::RParen));
                    i += 1;
                }
                _ if b.is_ascii_alphanumeric() || b == b'_' => {
                    let start = i;
                    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                        i += 1;
                    }
                    self.tokens.push((start, Token::Ident(&self.text[start..i])));
                }
                _ => return Err(Self::syntax(i + 1, "unexpected character")),
            }
        }
        Ok(())
    }

    fn parse(mut self) -> Result<Policy, PolicyError> {
        if self.text.trim().is_empty() {
            return Err(PolicyError::Empty);
        }
        self.lex()?;
        let policy = self.expr()?;
        if let Some((offset, _)) = self.tokens.get(self.pos) {
            return Err(Self::syntax(offset + 1, "expected AND, OR or end of input"));
        }
        Ok(policy)
    }

    fn here(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(offset, _)| offset + 1)
            .unwrap_or(self.text.len() + 1)
    }

    fn peek(&self) -> Option<&Token<'a>> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn keyword(&mut self, op: GateOp) -> bool {
        match self.peek() {
            Some(Token::Ident(word)) if word.eq_ignore_ascii_case(op.keyword()) => {
                self.pos += 1;
                true
            }
            _ => false,
        }
    }

    fn expr(&mut self) -> Result<Policy, PolicyError> {
        let mut terms = vec![self.term()?];
        while self.keyword(GateOp::Or) {
            terms.push(self.term()?);
        }
        Ok(Policy::or(terms))
    }

    fn term(&mut self) -> Result<Policy, PolicyError> {
        let mut factors = vec![self.factor()?];
        while self.keyword(GateOp::And) {
            factors.push(self.factor()?);
        }
        Ok(Policy::and(factors))
    }

    fn factor(&mut self) -> Result<Policy, PolicyError> {
        match self.peek().cloned() {
            Some(Token::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                match self.peek() {
                    Some(Token::RParen) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(Self::syntax(self.here(), "expected ')'")),
                }
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                if self.peek() != Some(&Token::Eq) {
                    return Err(Self::syntax(self.here(), "expected '='"));
                }
                self.pos += 1;
                match self.peek().cloned() {
                    Some(Token::Ident(value)) => {
                        self.pos += 1;
                        Ok(Policy::Leaf(Attribute {
                            name: name.to_string(),
                            value: value.to_string(),
                        }))
                    }
                    _ => Err(Self::syntax(self.here(), "expected attribute value")),
                }
            }
            _ => Err(Self::syntax(self.here(), "expected attribute or '('")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn attr(s: &str) -> Attribute {
        s.parse().unwrap()
    }

    fn leaf(s: &str) -> Policy {
        Policy::Leaf(attr(s))
    }

    #[test]
    fn parses_two_leaf_conjunction() {
        let p = Policy::parse("role=maintainer AND site=plantA").unwrap();
        assert_eq!(p, Policy::Gate(GateOp::And, vec![leaf("role=maintainer"), leaf("site=plantA")]));
    }

    #[test]
    fn and_binds_tighter_than_or() {
        let p = Policy::parse("(a=1 OR b=2) AND c=3").unwrap();
        assert_eq!(
            p,
            Policy::Gate(
                GateOp::And,
                vec![Policy::Gate(GateOp::Or, vec![leaf("a=1"), leaf("b=2")]), leaf("c=3")]
            )
        );
        let q = Policy::parse("a=1 OR b=2 and c=3").unwrap();
        assert_eq!(
            q,
            Policy::Gate(
                GateOp::Or,
                vec![leaf("a=1"), Policy::Gate(GateOp::And, vec![leaf("b=2"), leaf("c=3")])]
            )
        );
    }

    #[test]
    fn dangling_operator_reports_offset() {
        assert_eq!(
            Policy::parse("a=1 AND").unwrap_err(),
            PolicyError::Syntax {
                position: 8,
                message: "expected attribute or '('".into()
            }
        );
    }

    #[test]
    fn rejects_empty_and_garbage() {
        assert_eq!(Policy::parse("   ").unwrap_err(), PolicyError::Empty);
        assert!(matches!(Policy::parse("a=1 b=2"), Err(PolicyError::Syntax { position: 5, .. })));
        assert!(matches!(Policy::parse("(a=1"), Err(PolicyError::Syntax { position: 5, .. })));
        assert!(matches!(Policy::parse("a=1 & b=2"), Err(PolicyError::Syntax { position: 5, .. })));
        assert!(matches!(Policy::parse("a AND b=2"), Err(PolicyError::Syntax { .. })));
    }

    #[test]
    fn keywords_case_insensitive_and_usable_as_values() {
        let p = Policy::parse("mode=and aNd x=OR").unwrap();
        assert_eq!(p.canonical_text(), "(mode=and AND x=OR)");
    }

    #[test]
    fn flattens_same_op_gates() {
        let p = Policy::parse("(a=1 AND b=2) AND (c=3 AND d=4)").unwrap();
        assert_eq!(p.leaf_count(), 4);
        assert_eq!(p.depth(), 2);
    }

    #[test]
    fn canonical_sorts_children() {
        let p = Policy::Gate(GateOp::And, vec![leaf("site=plantA"), leaf("role=maintainer")]);
        assert_eq!(p.canonical_text(), "(role=maintainer AND site=plantA)");
        assert_eq!(leaf("a=1").canonical_text(), "a=1");
    }

    #[test]
    fn canonical_dedups_and_collapses() {
        let p = Policy::parse("(a=1 AND b=2) OR (b=2 AND a=1)").unwrap();
        assert_eq!(p.canonical_text(), "(a=1 AND b=2)");
        let q = Policy::parse("x=1 AND ((a=1 AND b=2) OR (b=2 AND a=1))").unwrap();
        assert_eq!(q.canonical_text(), "(a=1 AND b=2 AND x=1)");
    }

    #[test]
    fn policy_id_ignores_child_order() {
        let a = Policy::parse("a=1 AND b=2 AND c=3").unwrap();
        let b = Policy::parse("c=3 AND a=1 AND b=2").unwrap();
        let c = Policy::parse("c=3 AND a=1 AND b=9").unwrap();
        assert_eq!(a.id(), b.id());
        assert_ne!(a.id(), c.id());
    }

    #[test]
    fn policy_id_is_sha256_of_canonical_text() {
        // printf 'a=1' | sha256sum
        assert_eq!(
            leaf("a=1").id().to_string(),
            "c22fea5d7428e5cf47ef6354c97c9223c95d6dcdc3e0d2300ff79056b1ff3d85"
        );
    }

    #[test]
    fn satisfaction_examples() {
        let p = Policy::parse("role=maintainer AND site=plantA").unwrap();
        let full = attribute_set(["role=maintainer", "site=plantA", "extra=x"]).unwrap();
        let partial = attribute_set(["role=maintainer"]).unwrap();
        assert!(p.satisfied_by(&full));
        assert!(!p.satisfied_by(&partial));
    }

    #[test]
    fn attach_epoch_gates_on_epoch() {
        assert_eq!(leaf("a=1").attach_epoch(3).unwrap().canonical_text(), "(a=1 AND epoch=3)");
        let p = Policy::parse("a=1 AND b=2").unwrap().attach_epoch(0).unwrap();
        assert_eq!(p.epoch(), Some(0));
        assert!(p.satisfied_by(&attribute_set(["a=1", "b=2", "epoch=0"]).unwrap()));
        assert!(!p.satisfied_by(&attribute_set(["a=1", "b=2", "epoch=1"]).unwrap()));
        assert_eq!(p.attach_epoch(2).unwrap_err(), PolicyError::EpochAlreadyAttached);
        assert_eq!(p.without_epoch().canonical_text(), "(a=1 AND b=2)");
    }

    #[test]
    fn gen_policy_shapes() {
        let p = gen_policy(3, PolicyForm::And, 1).unwrap();
        assert_eq!(p.leaf_count(), 3);
        assert_eq!(p.form(), Some(PolicyForm::And));
        let q = gen_policy(6, PolicyForm::AndOfOr, 1).unwrap();
        assert_eq!(q.leaf_count(), 6);
        assert_eq!(q.form(), Some(PolicyForm::AndOfOr));
        match &q {
            Policy::Gate(GateOp::And, groups) => assert_eq!(groups.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(gen_policy(6, PolicyForm::AndOfOr, 9), gen_policy(6, PolicyForm::AndOfOr, 9));
        assert!(gen_policy(1, PolicyForm::AndOfOr, 1).is_err());
        let mixed = Policy::parse("(a=1 OR a=2) AND b=1").unwrap();
        assert_eq!(mixed.form(), Some(PolicyForm::AndOfOr));
        assert_eq!(Policy::parse("a=1 OR b=1").unwrap().form(), None);
        assert!(gen_policy(0, PolicyForm::And, 1).is_err());
        assert!(gen_policy(5, PolicyForm::AndOfOr, 1).is_err());
    }

    #[test]
    fn attribute_validation() {
        assert!(Attribute::new("", "x").is_err());
        assert!(Attribute::new("a-b", "x").is_err());
        assert!("noequals".parse::<Attribute>().is_err());
        assert_eq!(attr("role=admin").to_string(), "role=admin");
    }

    pub(crate) fn arb_policy() -> impl Strategy<Value = Policy> {
        let leaf = (0u8..6, 0u8..3).prop_map(|(n, v)| Policy::Leaf(Attribute::new(format!("n{n}"), format!("v{v}")).unwrap()));
        leaf.prop_recursive(4, 24, 4, |inner| {
            (prop::bool::ANY, prop::collection::vec(inner, 2..4)).prop_map(|(and, children)| {
                Policy::Gate(if and { GateOp::And } else { GateOp::Or }, children)
            })
        })
    }

    proptest! {
        #[test]
        fn canonical_is_a_fixpoint(p in arb_policy()) {
            let text = p.canonical_text();
            let reparsed = Policy::parse(&text).unwrap();
            prop_assert_eq!(reparsed.canonical_text(), text);
        }

        #[test]
        fn normalize_preserves_semantics(p in arb_policy(), mask in 0u32..(1 << 18)) {
            let universe: Vec<Attribute> = (0..6)
                .flat_map(|n| (0..3).map(move |v| Attribute::new(format!("n{n}"), format!("v{v}")).unwrap()))
                .collect();
            let attrs: BTreeSet<Attribute> = universe
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, a)| a.clone())
                .collect();
            prop_assert_eq!(p.satisfied_by(&attrs), p.normalize().satisfied_by(&attrs));
        }

        #[test]
        fn satisfaction_is_monotone(p in arb_policy(), mask in 0u32..(1 << 18), extra in 0u32..(1 << 18)) {
            let universe: Vec<Attribute> = (0..6)
                .flat_map(|n| (0..3).map(move |v| Attribute::new(format!("n{n}"), format!("v{v}")).unwrap()))
                .collect();
            let pick = |m: u32| -> BTreeSet<Attribute> {
                universe.iter().enumerate().filter(|(i, _)| m & (1 << i) != 0).map(|(_, a)| a.clone()).collect()
            };
            let small = pick(mask);
            let large = pick(mask | extra);
            if p.satisfied_by(&small) {
                prop_assert!(p.satisfied_by(&large));
            }
        }

        #[test]
        fn attach_epoch_restricts(p in arb_policy(), mask in 0u32..(1 << 18), t in 0u64..3, held in 0u64..3) {
            let universe: Vec<Attribute> = (0..6)
                .flat_map(|n| (0..3).map(move |v| Attribute::new(format!("n{n}"), format!("v{v}")).unwrap()))
                .collect();
            let mut attrs: BTreeSet<Attribute> =
                universe.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, a)| a.clone()).collect();
            attrs.insert(Attribute::epoch(held));
            let gated = p.attach_epoch(t).unwrap();
            prop_assert_eq!(gated.satisfied_by(&attrs), p.satisfied_by(&attrs) && held == t);
        }
    }
}
