//! Constructive witnesses for the axioms of a dynamical simplex: exact selection of clopen
//! subsets with prescribed masses (goodness), approximate division, disjoint copies, the
//! back-and-forth `K`-preserving automorphism and clopen approximation of step functions.
//!
//! Every selection runs the same search. The host set is refined to a depth `d`; inside a
//! block all length-`d` words carry the same mass vector, so a candidate is described by how
//! many words it takes in each block. Blocks are scanned in lexicographic order taking as many
//! words as possible (leftmost first), with exact interval pruning, and the depth is increased
//! only when no solution exists. The result is the lexicographically greatest admissible leaf
//! subset at the smallest admissible depth.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use thiserror::Error;

use crate::clopen::{canonical_enumeration, ClopenSet, CylinderWord};
use crate::measure::{render_vec, vec_le, vec_sub, MeasureFamily, MeasureVec};
use crate::rational::{self, ceil, floor, from_u128};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("goodness failure: no clopen subset of {host} with masses {target} up to depth {max_depth}")]
    GoodnessFailure { max_depth: usize, target: String, host: String },
    #[error("divisibility failure: cannot divide {set} into {n} parts within {eps} up to depth {max_depth}")]
    DivisibilityFailure { max_depth: usize, set: String, n: u64, eps: String },
    #[error("{0} and {1} are not K-equivalent")]
    NotEquivalent(String, String),
    #[error("invalid oracle argument: {0}")]
    InvalidArgument(String),
}

struct Group {
    word: CylinderWord,
    cap: u128,
    unit: MeasureVec,
}

/// Lexicographically greatest per-block word counts `m` with `lo ≤ Σ m_g·unit_g ≤ hi`.
fn search(groups: &[Group], lo: &[BigRational], hi: &[BigRational]) -> Option<Vec<u128>> {
    let dims = lo.len();
    // suffix[i] = mass of taking every word of groups i..
    let mut suffix = vec![vec![BigRational::zero(); dims]; groups.len() + 1];
    for i in (0..groups.len()).rev() {
        let cap = from_u128(groups[i].cap);
        suffix[i] = (0..dims).map(|j| &suffix[i + 1][j] + &groups[i].unit[j] * &cap).collect();
    }
    if !vec_le(lo, &suffix[0]) {
        return None;
    }
    let mut chosen = Vec::with_capacity(groups.len());
    let mut partial = vec![BigRational::zero(); dims];
    if dfs(groups, &suffix, lo, hi, 0, &mut partial, &mut chosen) {
        Some(chosen)
    } else {
        None
    }
}

fn dfs(
    groups: &[Group],
    suffix: &[MeasureVec],
    lo: &[BigRational],
    hi: &[BigRational],
    i: usize,
    partial: &mut MeasureVec,
    chosen: &mut Vec<u128>,
) -> bool {
    if i == groups.len() {
        return vec_le(lo, partial) && vec_le(partial, hi);
    }
    let g = &groups[i];
    let mut upper = BigInt::from(g.cap);
    let mut lower = BigInt::zero();
    for j in 0..lo.len() {
        upper = upper.min(floor(&((&hi[j] - &partial[j]) / &g.unit[j])));
        lower = lower.max(ceil(&((&lo[j] - &partial[j] - &suffix[i + 1][j]) / &g.unit[j])));
    }
    if upper < lower {
        return false;
    }
    let mut m = upper;
    loop {
        let count = m.to_u128().expect("nonnegative count");
        let add: MeasureVec = g.unit.iter().map(|u| u * from_u128(count)).collect();
        for (p, a) in partial.iter_mut().zip(&add) {
            *p += a;
        }
        chosen.push(count);
        if dfs(groups, suffix, lo, hi, i + 1, partial, chosen) {
            return true;
        }
        chosen.pop();
        for (p, a) in partial.iter_mut().zip(&add) {
            *p -= a;
        }
        if m == lower {
            return false;
        }
        m -= 1;
    }
}

/// The leftmost `count` length-`depth` words of `host` below `block`.
fn take_leftmost(host: &ClopenSet, block: &CylinderWord, depth: usize, mut count: u128, out: &mut Vec<CylinderWord>) {
    for leaf in host.restrict(block).leaves() {
        if count == 0 {
            return;
        }
        let cap = 1u128 << (depth - leaf.len());
        if count >= cap {
            out.push(*leaf);
            count -= cap;
            continue;
        }
        let mut w = *leaf;
        let mut level = depth - leaf.len();
        while count > 0 {
            level -= 1;
            let half = 1u128 << level;
            if count >= half {
                out.push(w.child(0));
                count -= half;
                w = w.child(1);
            } else {
                w = w.child(0);
            }
        }
        return;
    }
}

fn solve_at_depth(
    k: &MeasureFamily,
    host: &ClopenSet,
    lo: &[BigRational],
    hi: &[BigRational],
    depth: usize,
) -> Option<ClopenSet> {
    let profile = k.profile(host, depth);
    let groups: Vec<Group> = profile
        .counts
        .iter()
        .map(|(b, c)| Group {
            word: CylinderWord::from_bits(k.block_depth(), *b),
            cap: *c,
            unit: k.unit_mass(*b, depth),
        })
        .collect();
    let counts = search(&groups, lo, hi)?;
    let mut words = Vec::new();
    for (g, m) in groups.iter().zip(counts) {
        take_leftmost(host, &g.word, depth, m, &mut words);
    }
    Some(ClopenSet::normalize(words))
}

/// Canonical clopen `C ⊆ host` with `lo ≤ μ(C) ≤ hi` for every generator, or `None` if there is
/// none at any depth up to `max_depth`.
pub fn select_between(
    k: &MeasureFamily,
    host: &ClopenSet,
    lo: &[BigRational],
    hi: &[BigRational],
    max_depth: usize,
) -> Option<ClopenSet> {
    let start = host.depth().max(k.block_depth());
    let zero = vec![BigRational::zero(); k.len()];
    if vec_le(lo, &zero) && vec_le(&zero, hi) && host.is_empty() {
        return Some(ClopenSet::empty());
    }
    (start..=max_depth.max(start)).find_map(|d| solve_at_depth(k, host, lo, hi, d))
}

/// Canonical clopen `C ⊆ host` with `μ_i(C) = target_i` for every generator.
pub fn select_measure(
    k: &MeasureFamily,
    target: &[BigRational],
    host: &ClopenSet,
    max_depth: usize,
) -> Result<ClopenSet, OracleError> {
    if target.iter().all(Zero::is_zero) {
        return Ok(ClopenSet::empty());
    }
    if k.eval(host) == target {
        return Ok(host.clone());
    }
    select_between(k, host, target, target, max_depth).ok_or_else(|| OracleError::GoodnessFailure {
        max_depth,
        target: render_vec(target),
        host: host.to_string(),
    })
}

/// Canonical subset of `host` with mass at most `hi` for every generator, packed leftmost. The
/// depth is increased until the packing reaches `hi` exactly (or takes all of `host`), falling
/// back to the packing at `max_depth`.
pub fn pack_below(k: &MeasureFamily, host: &ClopenSet, hi: &[BigRational], max_depth: usize) -> ClopenSet {
    if vec_le(&k.eval(host), hi) {
        return host.clone();
    }
    let zero = vec![BigRational::zero(); k.len()];
    let start = host.depth().max(k.block_depth());
    let mut best = ClopenSet::empty();
    for d in start..=max_depth.max(start) {
        best = solve_at_depth(k, host, &zero, hi, d).expect("the empty set always fits");
        if k.eval(&best) == hi {
            break;
        }
    }
    best
}

/// Goodness witness: `C ⊆ b` with `C ~_K a`.
pub fn goodness_select(
    k: &MeasureFamily,
    a: &ClopenSet,
    b: &ClopenSet,
    max_depth: usize,
) -> Result<ClopenSet, OracleError> {
    select_measure(k, &k.eval(a), b, max_depth)
}

/// Approximate-division witness: `B ⊆ a` with `n·μ(B) ∈ [μ(a) − eps, μ(a)]` for every generator.
pub fn approx_divide(
    k: &MeasureFamily,
    a: &ClopenSet,
    n: u64,
    eps: &BigRational,
    max_depth: usize,
) -> Result<ClopenSet, OracleError> {
    if n == 0 {
        return Err(OracleError::InvalidArgument("n must be at least 1".into()));
    }
    if a.is_empty() {
        return Err(OracleError::InvalidArgument("cannot divide the empty set".into()));
    }
    if n == 1 {
        return Ok(a.clone());
    }
    let mass = k.eval(a);
    let n_q = BigRational::from_integer(BigInt::from(n));
    let hi: MeasureVec = mass.iter().map(|m| m / &n_q).collect();
    let lo: MeasureVec = mass.iter().map(|m| (m - eps) / &n_q).collect();
    select_between(k, a, &lo, &hi, max_depth).ok_or_else(|| OracleError::DivisibilityFailure {
        max_depth,
        set: a.to_string(),
        n,
        eps: rational::render(eps),
    })
}

/// `n` pairwise disjoint subsets of `host`, each `~_K a`, chosen one after the other.
pub fn n_copies(
    k: &MeasureFamily,
    a: &ClopenSet,
    host: &ClopenSet,
    n: usize,
    max_depth: usize,
) -> Result<Vec<ClopenSet>, OracleError> {
    let target = k.eval(a);
    let mut rest = host.clone();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let c = select_measure(k, &target, &rest, max_depth)?;
        rest = rest.minus(&c);
        out.push(c);
    }
    Ok(out)
}

/// Cut `target` into pieces `~_K` the given pieces (which partition a set `~_K target`). The
/// last piece is whatever remains. If the pieces already partition `target` they are reused.
pub fn transport_partition(
    k: &MeasureFamily,
    pieces: &[ClopenSet],
    target: &ClopenSet,
    max_depth: usize,
) -> Result<Vec<ClopenSet>, OracleError> {
    match pieces.len() {
        0 => return Ok(Vec::new()),
        1 => return Ok(vec![target.clone()]),
        _ => {}
    }
    let union = pieces.iter().fold(ClopenSet::empty(), |acc, p| acc.union(p));
    if &union == target {
        return Ok(pieces.to_vec());
    }
    let mut rest = target.clone();
    let mut out = Vec::with_capacity(pieces.len());
    for p in &pieces[..pieces.len() - 1] {
        let c = select_measure(k, &k.eval(p), &rest, max_depth)?;
        rest = rest.minus(&c);
        out.push(c);
    }
    let last = pieces.last().expect("at least two pieces");
    if k.eval(&rest) != k.eval(last) {
        return Err(OracleError::NotEquivalent(union.to_string(), target.to_string()));
    }
    out.push(rest);
    Ok(out)
}

/// Finite stages of a `K`-preserving automorphism of the clopen algebra mapping `u` to `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionBijection {
    /// `stages[s]` lists matched pairs (source atom, target atom).
    pub stages: Vec<Vec<(ClopenSet, ClopenSet)>>,
    /// Sets absorbed into the source (resp. target) algebra, in order.
    pub source_sets: Vec<ClopenSet>,
    pub target_sets: Vec<ClopenSet>,
}

fn split_pairs(pairs: Vec<(ClopenSet, ClopenSet)>) -> Vec<(ClopenSet, ClopenSet)> {
    pairs.into_iter().filter(|(a, _)| !a.is_empty()).collect()
}

impl PartitionBijection {
    /// Image of a set in the algebra generated by the last stage's source atoms.
    pub fn image(&self, set: &ClopenSet) -> Option<ClopenSet> {
        let last = self.stages.last()?;
        let mut image = ClopenSet::empty();
        let mut covered = ClopenSet::empty();
        for (a, b) in last {
            if a.is_subset(set) {
                image = image.union(b);
                covered = covered.union(a);
            }
        }
        (covered == *set).then_some(image)
    }

    /// Exact check of the stage invariants; returns a description of the first violation.
    pub fn check(&self, k: &MeasureFamily) -> Result<(), String> {
        for (s, stage) in self.stages.iter().enumerate() {
            for side in 0..2 {
                let atoms: Vec<&ClopenSet> =
                    stage.iter().map(|p| if side == 0 { &p.0 } else { &p.1 }).collect();
                check_partition(&atoms).map_err(|e| format!("stage {s}: {e}"))?;
            }
            for (a, b) in stage {
                if !k.sim(a, b) {
                    return Err(format!("stage {s}: {a} and {b} are not K-equivalent"));
                }
            }
            if s > 0 {
                for (a, b) in stage {
                    let parent = self.stages[s - 1]
                        .iter()
                        .any(|(pa, pb)| a.is_subset(pa) && b.is_subset(pb));
                    if !parent {
                        return Err(format!("stage {s}: pair ({a}, {b}) refines no earlier pair"));
                    }
                }
            }
            let atoms_src: Vec<&ClopenSet> = stage.iter().map(|p| &p.0).collect();
            let atoms_tgt: Vec<&ClopenSet> = stage.iter().map(|p| &p.1).collect();
            for set in &self.source_sets[..=s.min(self.source_sets.len() - 1)] {
                if !in_algebra(&atoms_src, set) {
                    return Err(format!("stage {s}: source algebra misses {set}"));
                }
            }
            for set in &self.target_sets[..=s.min(self.target_sets.len() - 1)] {
                if !in_algebra(&atoms_tgt, set) {
                    return Err(format!("stage {s}: target algebra misses {set}"));
                }
            }
        }
        Ok(())
    }
}

/// Atoms are nonempty, pairwise disjoint and cover the whole space.
pub fn check_partition(atoms: &[&ClopenSet]) -> Result<(), String> {
    let mut union = ClopenSet::empty();
    for a in atoms {
        if a.is_empty() {
            return Err("empty atom".into());
        }
        if !union.is_disjoint(a) {
            return Err(format!("atom {a} overlaps another atom"));
        }
        union = union.union(a);
    }
    if !union.is_full() {
        return Err(format!("atoms miss {}", union.complement()));
    }
    Ok(())
}

fn in_algebra(atoms: &[&ClopenSet], set: &ClopenSet) -> bool {
    atoms.iter().all(|a| a.is_subset(set) || a.is_disjoint(set))
}

/// Back-and-forth construction of a `K`-preserving automorphism with `u ↦ v`, materialized to
/// `stages` stages. Stage 0 matches `u → v` and the complements; stage `s ≥ 1` absorbs the
/// `(s-1)`-th set of the canonical clopen enumeration into the source algebra and then into
/// the target algebra.
pub fn build_k_automorphism(
    k: &MeasureFamily,
    u: &ClopenSet,
    v: &ClopenSet,
    stages: usize,
    max_depth: usize,
) -> Result<PartitionBijection, OracleError> {
    if !k.sim(u, v) {
        return Err(OracleError::NotEquivalent(u.to_string(), v.to_string()));
    }
    let mut current = split_pairs(vec![(u.clone(), v.clone()), (u.complement(), v.complement())]);
    let mut out = PartitionBijection {
        stages: Vec::new(),
        source_sets: vec![u.clone()],
        target_sets: vec![v.clone()],
    };
    let mut enumeration = canonical_enumeration(5);
    if stages > 0 {
        out.stages.push(current.clone());
    }
    for _ in 1..stages {
        let next_set = enumeration.next().expect("enumeration is long enough");
        let (a_s, b_s) = (next_set.clone(), next_set);
        let mut refined = Vec::new();
        for (c, d) in &current {
            // forth: split c by a_s, find matching split of d
            let c0 = c.intersect(&a_s);
            let c1 = c.minus(&a_s);
            let d0 = if c == d { c0.clone() } else { select_measure(k, &k.eval(&c0), d, max_depth)? };
            let d1 = d.minus(&d0);
            for (cj, dj) in [(c0, d0), (c1, d1)] {
                if cj.is_empty() {
                    continue;
                }
                // back: split dj by b_s, find matching split of cj
                let e0 = dj.intersect(&b_s);
                let e1 = dj.minus(&b_s);
                let f0 = if cj == dj { e0.clone() } else { select_measure(k, &k.eval(&e0), &cj, max_depth)? };
                let f1 = cj.minus(&f0);
                refined.push((f0, e0));
                refined.push((f1, e1));
            }
        }
        current = split_pairs(refined);
        out.source_sets.push(a_s);
        out.target_sets.push(b_s);
        out.stages.push(current.clone());
    }
    Ok(out)
}

/// Clopen `B` whose masses approximate `Σ value_j·μ(A_j)` within `eps` for every generator,
/// for a step function given by `(A_j, value_j)` over a clopen partition with values in `[0,1]`.
pub fn affine_approx(
    k: &MeasureFamily,
    f: &[(ClopenSet, BigRational)],
    eps: &BigRational,
    max_depth: usize,
) -> Result<ClopenSet, OracleError> {
    let atoms: Vec<&ClopenSet> = f.iter().map(|(a, _)| a).collect();
    check_partition(&atoms).map_err(OracleError::InvalidArgument)?;
    let one = BigRational::from_integer(1.into());
    if f.iter().any(|(_, v)| *v < BigRational::zero() || *v > one) {
        return Err(OracleError::InvalidArgument("step values must lie in [0,1]".into()));
    }
    let scale = f
        .iter()
        .fold(BigInt::from(1), |acc, (_, v)| num_integer::Integer::lcm(&acc, v.denom()));
    let scale_u = scale
        .to_u64()
        .ok_or_else(|| OracleError::InvalidArgument("common denominator too large".into()))?;
    let fractional = f
        .iter()
        .filter(|(_, v)| !v.is_zero() && *v != one)
        .count()
        .max(1);
    let part_eps = eps / BigRational::from_integer(BigInt::from(fractional));
    let mut out = ClopenSet::empty();
    for (a, v) in f {
        let weight = (v * BigRational::from_integer(scale.clone())).to_integer();
        let weight = weight.to_usize().expect("weight bounded by the scale");
        if weight == 0 {
            continue;
        }
        if weight as u64 == scale_u {
            out = out.union(a);
            continue;
        }
        let piece = approx_divide(k, a, scale_u, &part_eps, max_depth)?;
        for c in n_copies(k, &piece, a, weight, max_depth)? {
            out = out.union(&c);
        }
    }
    Ok(out)
}

/// `μ(target) - μ(taken)`, used by callers that fill up a mass budget piece by piece.
pub fn remaining_mass(k: &MeasureFamily, target: &[BigRational], taken: &ClopenSet) -> MeasureVec {
    vec_sub(target, &k.eval(taken))
}
