//! Clopen subsets of the Cantor space `{0,1}^ω` as canonical finite unions of cylinders.
//!
//! The metric is fixed to `d(x, y) = 2^-|common prefix of x and y|`, so the diameter of a
//! nonempty clopen set is `2^-k` where `k` is the length of its longest common prefix.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use thiserror::Error;

/// Longest word we can store.
pub const MAX_WORD_LEN: usize = 63;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClopenError {
    #[error("refinement depth {depth} is smaller than the deepest leaf ({max_leaf})")]
    DepthTooSmall { depth: usize, max_leaf: usize },
    #[error("invalid cylinder word {0:?}: only '0' and '1' are allowed")]
    InvalidWord(String),
    #[error("cylinder word longer than {MAX_WORD_LEN} symbols")]
    WordTooLong,
}

/// A finite binary word `w`; the cylinder `[w]` is the set of sequences extending it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CylinderWord {
    len: u8,
    // first symbol is the most significant of the `len` low bits
    bits: u64,
}

impl CylinderWord {
    /// The empty word, whose cylinder is the whole space.
    pub const ROOT: CylinderWord = CylinderWord { len: 0, bits: 0 };

    pub fn from_bits(len: usize, bits: u64) -> Self {
        assert!(len <= MAX_WORD_LEN, "cylinder word too long");
        let mask = if len == 0 { 0 } else { u64::MAX >> (64 - len) };
        CylinderWord { len: len as u8, bits: bits & mask }
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The word read as a binary number, first symbol most significant.
    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn bit(&self, i: usize) -> u8 {
        debug_assert!(i < self.len());
        ((self.bits >> (self.len() - 1 - i)) & 1) as u8
    }

    pub fn child(&self, b: u8) -> Self {
        assert!(self.len() < MAX_WORD_LEN, "cylinder word too long");
        CylinderWord { len: self.len + 1, bits: (self.bits << 1) | (b as u64 & 1) }
    }

    pub fn prefix(&self, n: usize) -> Self {
        debug_assert!(n <= self.len());
        CylinderWord { len: n as u8, bits: self.bits >> (self.len() - n) }
    }

    pub fn is_prefix_of(&self, other: &CylinderWord) -> bool {
        self.len <= other.len && other.prefix(self.len()) == *self
    }

    pub fn common_prefix(&self, other: &CylinderWord) -> Self {
        let m = self.len().min(other.len());
        let (a, b) = (self.prefix(m), other.prefix(m));
        let diff = a.bits ^ b.bits;
        let keep = if diff == 0 { m } else { m - (64 - diff.leading_zeros() as usize) };
        self.prefix(keep)
    }

    /// All extensions of this word of length `depth`, in lexicographic order.
    pub fn extensions(&self, depth: usize) -> impl Iterator<Item = CylinderWord> + '_ {
        assert!(depth >= self.len() && depth <= MAX_WORD_LEN);
        let extra = depth - self.len();
        let base = self.bits << extra;
        (0..(1u64 << extra)).map(move |i| CylinderWord::from_bits(depth, base | i))
    }
}

impl Ord for CylinderWord {
    fn cmp(&self, other: &Self) -> Ordering {
        let m = self.len().min(other.len());
        self.prefix(m)
            .bits
            .cmp(&other.prefix(m).bits)
            .then(self.len.cmp(&other.len))
    }
}

impl PartialOrd for CylinderWord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for CylinderWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len() {
            write!(f, "{}", self.bit(i))?;
        }
        Ok(())
    }
}

impl fmt::Debug for CylinderWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "\"{self}\"")
    }
}

impl FromStr for CylinderWord {
    type Err = ClopenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.len() > MAX_WORD_LEN {
            return Err(ClopenError::WordTooLong);
        }
        let mut w = CylinderWord::ROOT;
        for c in s.chars() {
            w = match c {
                '0' => w.child(0),
                '1' => w.child(1),
                _ => return Err(ClopenError::InvalidWord(s.to_string())),
            };
        }
        Ok(w)
    }
}

// Binary trie used to run the Boolean operations.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Node {
    Empty,
    Full,
    Split(Box<Node>, Box<Node>),
}

impl Node {
    fn split(a: Node, b: Node) -> Node {
        match (&a, &b) {
            (Node::Empty, Node::Empty) => Node::Empty,
            (Node::Full, Node::Full) => Node::Full,
            _ => Node::Split(Box::new(a), Box::new(b)),
        }
    }

    fn insert(self, w: &CylinderWord, at: usize) -> Node {
        match self {
            Node::Full => Node::Full,
            _ if at == w.len() => Node::Full,
            Node::Empty => Node::Empty.expand().insert(w, at),
            Node::Split(l, r) => {
                if w.bit(at) == 0 {
                    Node::split(l.insert(w, at + 1), *r)
                } else {
                    Node::split(*l, r.insert(w, at + 1))
                }
            }
        }
    }

    fn expand(self) -> Node {
        match self {
            Node::Empty => Node::Split(Box::new(Node::Empty), Box::new(Node::Empty)),
            Node::Full => Node::Split(Box::new(Node::Full), Box::new(Node::Full)),
            n => n,
        }
    }

    fn combine(a: &Node, b: &Node, op: &impl Fn(bool, bool) -> bool) -> Node {
        match (a, b) {
            (Node::Split(al, ar), Node::Split(bl, br)) => {
                Node::split(Node::combine(al, bl, op), Node::combine(ar, br, op))
            }
            (Node::Split(al, ar), leaf) => {
                Node::split(Node::combine(al, leaf, op), Node::combine(ar, leaf, op))
            }
            (leaf, Node::Split(bl, br)) => {
                Node::split(Node::combine(leaf, bl, op), Node::combine(leaf, br, op))
            }
            (x, y) => {
                if op(*x == Node::Full, *y == Node::Full) {
                    Node::Full
                } else {
                    Node::Empty
                }
            }
        }
    }

    fn collect(&self, prefix: CylinderWord, out: &mut Vec<CylinderWord>) {
        match self {
            Node::Empty => {}
            Node::Full => out.push(prefix),
            Node::Split(l, r) => {
                l.collect(prefix.child(0), out);
                r.collect(prefix.child(1), out);
            }
        }
    }
}

/// A clopen subset of the Cantor space in canonical form.
///
/// Leaves are pairwise prefix-free, no two siblings are both present and the list is sorted,
/// so two values are equal iff they denote the same point set.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ClopenSet {
    leaves: Vec<CylinderWord>,
}

impl ClopenSet {
    pub fn empty() -> Self {
        ClopenSet { leaves: Vec::new() }
    }

    pub fn full() -> Self {
        ClopenSet { leaves: vec![CylinderWord::ROOT] }
    }

    pub fn cylinder(w: CylinderWord) -> Self {
        ClopenSet { leaves: vec![w] }
    }

    /// Canonical form of the union of the given cylinders.
    pub fn normalize<I: IntoIterator<Item = CylinderWord>>(leaves: I) -> Self {
        let mut node = Node::Empty;
        for w in leaves {
            node = node.insert(&w, 0);
        }
        Self::from_node(&node)
    }

    fn from_node(node: &Node) -> Self {
        let mut leaves = Vec::new();
        node.collect(CylinderWord::ROOT, &mut leaves);
        ClopenSet { leaves }
    }

    fn to_node(&self) -> Node {
        let mut node = Node::Empty;
        for w in &self.leaves {
            node = node.insert(w, 0);
        }
        node
    }

    pub fn leaves(&self) -> &[CylinderWord] {
        &self.leaves
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.leaves.len() == 1 && self.leaves[0].is_empty()
    }

    /// Length of the longest leaf (0 for the empty set).
    pub fn depth(&self) -> usize {
        self.leaves.iter().map(CylinderWord::len).max().unwrap_or(0)
    }

    fn binary(&self, other: &ClopenSet, op: impl Fn(bool, bool) -> bool) -> ClopenSet {
        Self::from_node(&Node::combine(&self.to_node(), &other.to_node(), &op))
    }

    pub fn union(&self, other: &ClopenSet) -> ClopenSet {
        if self.is_empty() {
            return other.clone();
        }
        if other.is_empty() {
            return self.clone();
        }
        ClopenSet::normalize(self.leaves.iter().chain(other.leaves.iter()).copied())
    }

    pub fn intersect(&self, other: &ClopenSet) -> ClopenSet {
        if self.is_empty() || other.is_empty() {
            return ClopenSet::empty();
        }
        self.binary(other, |a, b| a && b)
    }

    pub fn minus(&self, other: &ClopenSet) -> ClopenSet {
        if self.is_empty() || other.is_empty() {
            return self.clone();
        }
        self.binary(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> ClopenSet {
        ClopenSet::full().minus(self)
    }

    pub fn is_subset(&self, other: &ClopenSet) -> bool {
        self.minus(other).is_empty()
    }

    pub fn is_disjoint(&self, other: &ClopenSet) -> bool {
        self.intersect(other).is_empty()
    }

    /// Longest word `w` with `self ⊆ [w]`; `None` for the empty set.
    pub fn common_prefix(&self) -> Option<CylinderWord> {
        let first = self.leaves.first()?;
        let last = self.leaves.last()?;
        Some(first.common_prefix(last))
    }

    /// `2^-k` for the longest `k` with `self` inside a depth-`k` cylinder, 0 for ∅.
    pub fn diameter(&self) -> BigRational {
        match self.common_prefix() {
            None => BigRational::zero(),
            Some(w) => BigRational::new(BigInt::one(), BigInt::one() << w.len()),
        }
    }

    /// Every length-`depth` word whose cylinder lies in the set, in lexicographic order.
    pub fn refine_to_depth(&self, depth: usize) -> Result<Vec<CylinderWord>, ClopenError> {
        let max_leaf = self.depth();
        if depth < max_leaf {
            return Err(ClopenError::DepthTooSmall { depth, max_leaf });
        }
        Ok(self.leaves.iter().flat_map(|w| w.extensions(depth)).collect())
    }

    /// Number of length-`depth` words below the set.
    pub fn count_at_depth(&self, depth: usize) -> u128 {
        self.leaves
            .iter()
            .map(|w| {
                assert!(w.len() <= depth);
                1u128 << (depth - w.len())
            })
            .sum()
    }

    /// The part of the set inside the cylinder `[w]`.
    pub fn restrict(&self, w: &CylinderWord) -> ClopenSet {
        if w.is_empty() {
            return self.clone();
        }
        let mut out = Vec::new();
        for leaf in &self.leaves {
            if w.is_prefix_of(leaf) {
                out.push(*leaf);
            } else if leaf.is_prefix_of(w) {
                return ClopenSet::cylinder(*w);
            }
        }
        ClopenSet { leaves: out }
    }

    pub fn contains_cylinder(&self, w: &CylinderWord) -> bool {
        self.leaves.iter().any(|l| l.is_prefix_of(w))
    }

    pub fn meets_cylinder(&self, w: &CylinderWord) -> bool {
        self.leaves.iter().any(|l| l.is_prefix_of(w) || w.is_prefix_of(l))
    }
}

impl fmt::Display for ClopenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return write!(f, "∅");
        }
        if self.is_full() {
            return write!(f, "X");
        }
        for (i, w) in self.leaves.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{w}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for ClopenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{self}}}")
    }
}

impl FromStr for ClopenSet {
    type Err = ClopenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "X" => return Ok(ClopenSet::full()),
            "∅" | "empty" | "" => return Ok(ClopenSet::empty()),
            _ => {}
        }
        let words = s
            .split(',')
            .map(str::parse::<CylinderWord>)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ClopenSet::normalize(words))
    }
}

impl serde::Serialize for ClopenSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for ClopenSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The canonical enumeration of clopen sets of depth at most `depth_cap`: by exact depth, then
/// by the lexicographic order of the indicator vector over the length-`depth` words.
pub fn canonical_enumeration(depth_cap: usize) -> impl Iterator<Item = ClopenSet> {
    assert!(depth_cap <= 5, "canonical enumeration is only tractable up to depth 5");
    (0..=depth_cap).flat_map(|d| {
        let words: Vec<CylinderWord> = CylinderWord::ROOT.extensions(d).collect();
        let n = words.len();
        (0..(1u64 << n)).filter_map(move |v| {
            let set = ClopenSet::normalize(
                words.iter().enumerate().filter(|(i, _)| (v >> (n - 1 - i)) & 1 == 1).map(|(_, w)| *w),
            );
            (set.depth() == d).then_some(set)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(s: &str) -> ClopenSet {
        s.parse().unwrap()
    }

    fn w(s: &str) -> CylinderWord {
        s.parse().unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(ClopenSet::normalize([w("00"), w("01")]), set("0"));
        assert_eq!(ClopenSet::normalize([w("0"), w("01")]), set("0"));
        assert_eq!(ClopenSet::normalize([w("0"), w("1")]), ClopenSet::full());
        assert_eq!(ClopenSet::normalize([]), ClopenSet::empty());
    }

    #[test]
    fn boolean_examples() {
        assert_eq!(set("0").union(&set("1")), ClopenSet::full());
        assert_eq!(set("0").intersect(&set("01")), set("01"));
        assert_eq!(set("00").complement(), set("01,1"));
        assert_eq!(set("0,11").minus(&set("01,1")), set("00"));
    }

    #[test]
    fn subset_examples() {
        assert!(set("01").is_subset(&set("0")));
        assert!(!set("0").is_subset(&set("01")));
        assert!(ClopenSet::empty().is_subset(&set("110")));
        assert!(ClopenSet::empty().is_subset(&ClopenSet::empty()));
    }

    #[test]
    fn diameter_examples() {
        let q = |n: i64, d: i64| BigRational::new(n.into(), d.into());
        assert_eq!(set("01").diameter(), q(1, 4));
        assert_eq!(set("00,01").diameter(), q(1, 2));
        assert_eq!(set("0,1").diameter(), q(1, 1));
        assert_eq!(ClopenSet::empty().diameter(), q(0, 1));
        assert_eq!(set("0100,0111").diameter(), q(1, 4));
    }

    #[test]
    fn refine_examples() {
        assert_eq!(set("0").refine_to_depth(2).unwrap(), vec![w("00"), w("01")]);
        assert_eq!(ClopenSet::full().refine_to_depth(1).unwrap(), vec![w("0"), w("1")]);
        assert!(ClopenSet::empty().refine_to_depth(3).unwrap().is_empty());
        assert_eq!(
            set("001").refine_to_depth(2),
            Err(ClopenError::DepthTooSmall { depth: 2, max_leaf: 3 })
        );
    }

    #[test]
    fn text_form() {
        assert_eq!(set("X").to_string(), "X");
        assert_eq!(set("empty").to_string(), "∅");
        assert_eq!(set("∅"), ClopenSet::empty());
        assert_eq!(set("1, 00").to_string(), "00,1");
        assert!("0a1".parse::<ClopenSet>().is_err());
    }

    #[test]
    fn word_order_is_lexicographic() {
        let mut v = vec![w("1"), w("01"), w("0"), w(""), w("001")];
        v.sort();
        assert_eq!(v, vec![w(""), w("0"), w("001"), w("01"), w("1")]);
        assert_eq!(w("0110").common_prefix(&w("0101")), w("01"));
    }

    #[test]
    fn restrict_to_cylinder() {
        assert_eq!(set("00,011,1").restrict(&w("01")), set("011"));
        assert_eq!(set("0").restrict(&w("01")), set("01"));
        assert_eq!(set("1").restrict(&w("01")), ClopenSet::empty());
    }

    #[test]
    fn enumeration_order() {
        let first: Vec<String> = canonical_enumeration(2).take(6).map(|s| s.to_string()).collect();
        assert_eq!(first, vec!["∅", "X", "1", "0", "11", "10"]);
        // 2 sets of depth 0, 2 of depth 1, 16 - 4 of depth 2
        assert_eq!(canonical_enumeration(2).count(), 2 + 2 + 12);
    }
}
