//! Exact probability measures on the Cantor space given by rational branching weights, and
//! finitely generated measure families `K`.
//!
//! A [`TreeMeasure`] stores, for finitely many words `w`, the fraction `p_w` of the mass of
//! `[w]` that lies in `[w0]`. Every word of length at least `depth_bound` splits evenly, so
//! below that depth every measure is a multiple of the uniform one. [`MeasureFamily`] exploits
//! this: the mass of any clopen set only depends on how many deep words it contains inside each
//! *block* (cylinder of length equal to the family's block depth).

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::Deserialize;
use thiserror::Error;

use crate::clopen::{ClopenSet, CylinderWord};
use crate::rational::{self, dyadic};

/// Block depths past this are rejected; block tables have `2^depth` entries.
pub const MAX_BLOCK_DEPTH: usize = 16;

/// Measures of one set under every generator, in generator order.
pub type MeasureVec = Vec<BigRational>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MeasureError {
    #[error("invalid weight {value} at word {word:?}: weights must lie strictly between 0 and 1")]
    InvalidWeights { word: String, value: String },
    #[error("weight at word {word:?} lies at or below depth bound {depth_bound}")]
    WeightBelowDepthBound { word: String, depth_bound: usize },
    #[error("depth bound {0} exceeds the supported maximum {MAX_BLOCK_DEPTH}")]
    DepthBoundTooLarge(usize),
    #[error("a measure family needs at least one generator")]
    EmptyFamily,
    #[error("generators {0} and {1} are identical")]
    DuplicateGenerator(usize, usize),
}

/// Atomless, fully supported probability measure given by branching weights.
#[derive(Clone, PartialEq, Eq)]
pub struct TreeMeasure {
    weights: BTreeMap<CylinderWord, BigRational>,
    depth_bound: usize,
}

impl TreeMeasure {
    pub fn new(
        weights: BTreeMap<CylinderWord, BigRational>,
        depth_bound: usize,
    ) -> Result<Self, MeasureError> {
        if depth_bound > MAX_BLOCK_DEPTH {
            return Err(MeasureError::DepthBoundTooLarge(depth_bound));
        }
        let half = rational::half();
        let mut kept = BTreeMap::new();
        for (w, p) in weights {
            if !p.is_positive() || p >= BigRational::one() {
                return Err(MeasureError::InvalidWeights {
                    word: w.to_string(),
                    value: rational::render(&p),
                });
            }
            if p == half {
                continue;
            }
            if w.len() >= depth_bound {
                return Err(MeasureError::WeightBelowDepthBound {
                    word: w.to_string(),
                    depth_bound,
                });
            }
            kept.insert(w, p);
        }
        Ok(TreeMeasure { weights: kept, depth_bound })
    }

    /// The uniform dyadic (Bernoulli 1/2) measure.
    pub fn uniform() -> Self {
        TreeMeasure { weights: BTreeMap::new(), depth_bound: 0 }
    }

    /// Uniform except at the root, where `[0]` gets mass `p`.
    pub fn with_root_weight(p: BigRational) -> Result<Self, MeasureError> {
        TreeMeasure::new(BTreeMap::from([(CylinderWord::ROOT, p)]), 1)
    }

    pub fn depth_bound(&self) -> usize {
        self.depth_bound
    }

    pub fn weights(&self) -> &BTreeMap<CylinderWord, BigRational> {
        &self.weights
    }

    pub fn weight(&self, w: &CylinderWord) -> BigRational {
        self.weights.get(w).cloned().unwrap_or_else(rational::half)
    }

    /// Mass of the cylinder `[w]`.
    pub fn eval_cylinder(&self, w: &CylinderWord) -> BigRational {
        let mut m = BigRational::one();
        let shallow = w.len().min(self.depth_bound);
        for i in 0..shallow {
            let p = self.weight(&w.prefix(i));
            m *= if w.bit(i) == 0 { p } else { BigRational::one() - p };
        }
        m * dyadic(w.len() - shallow)
    }

    pub fn eval(&self, a: &ClopenSet) -> BigRational {
        a.leaves().iter().map(|w| self.eval_cylinder(w)).sum()
    }

    /// Smallest branching probability `min(p_w, 1 - p_w)` over all words.
    pub fn min_branch(&self) -> BigRational {
        self.weights
            .values()
            .map(|p| p.clone().min(BigRational::one() - p))
            .fold(rational::half(), |a, b| a.min(b))
    }
}

impl fmt::Debug for TreeMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (w, p) in &self.weights {
            m.entry(&w.to_string(), &rational::render(p));
        }
        m.finish()?;
        write!(f, " (uniform from depth {})", self.depth_bound)
    }
}

/// How many length-`depth` words of a set fall in each block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockProfile {
    pub depth: usize,
    /// block index (bits of the block word) -> count of depth-`depth` words
    pub counts: BTreeMap<u64, u128>,
}

/// The simplex `K`, presented by its generating measures.
#[derive(Clone, Debug)]
pub struct MeasureFamily {
    generators: Vec<TreeMeasure>,
    block_depth: usize,
    // block_mass[i][b] = mass of block b under generator i
    block_mass: Vec<Vec<BigRational>>,
}

impl PartialEq for MeasureFamily {
    fn eq(&self, other: &Self) -> bool {
        self.generators == other.generators
    }
}

impl MeasureFamily {
    pub fn new(generators: Vec<TreeMeasure>) -> Result<Self, MeasureError> {
        if generators.is_empty() {
            return Err(MeasureError::EmptyFamily);
        }
        for i in 0..generators.len() {
            for j in i + 1..generators.len() {
                if generators[i] == generators[j] {
                    return Err(MeasureError::DuplicateGenerator(i, j));
                }
            }
        }
        let block_depth = generators.iter().map(TreeMeasure::depth_bound).max().unwrap_or(0);
        let block_mass = generators
            .iter()
            .map(|mu| {
                CylinderWord::ROOT
                    .extensions(block_depth)
                    .map(|w| mu.eval_cylinder(&w))
                    .collect()
            })
            .collect();
        Ok(MeasureFamily { generators, block_depth, block_mass })
    }

    pub fn uniform() -> Self {
        MeasureFamily::new(vec![TreeMeasure::uniform()]).expect("uniform family is valid")
    }

    pub fn generators(&self) -> &[TreeMeasure] {
        &self.generators
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    /// Depth below which every generator splits evenly.
    pub fn block_depth(&self) -> usize {
        self.block_depth
    }

    pub fn block_mass(&self, generator: usize, block: u64) -> &BigRational {
        &self.block_mass[generator][block as usize]
    }

    /// Per-block counts of the length-`depth` words of `a`; needs `depth ≥ max(a.depth(), block depth)`.
    pub fn profile(&self, a: &ClopenSet, depth: usize) -> BlockProfile {
        assert!(depth >= a.depth() && depth >= self.block_depth);
        let mut counts = BTreeMap::new();
        for w in a.leaves() {
            if w.len() >= self.block_depth {
                *counts.entry(w.prefix(self.block_depth).bits()).or_insert(0) +=
                    1u128 << (depth - w.len());
            } else {
                for b in w.extensions(self.block_depth) {
                    *counts.entry(b.bits()).or_insert(0) += 1u128 << (depth - self.block_depth);
                }
            }
        }
        BlockProfile { depth, counts }
    }

    /// Mass of one length-`depth` word inside block `b`, for every generator.
    pub fn unit_mass(&self, block: u64, depth: usize) -> MeasureVec {
        let scale = dyadic(depth - self.block_depth);
        (0..self.len()).map(|i| self.block_mass(i, block) * &scale).collect()
    }

    /// `μ_i(a)` for every generator.
    pub fn eval(&self, a: &ClopenSet) -> MeasureVec {
        if a.is_empty() {
            return vec![BigRational::zero(); self.len()];
        }
        let depth = a.depth().max(self.block_depth);
        let profile = self.profile(a, depth);
        let scale = dyadic(depth - self.block_depth);
        (0..self.len())
            .map(|i| {
                let total: BigRational = profile
                    .counts
                    .iter()
                    .map(|(b, c)| self.block_mass(i, *b) * BigRational::from_integer(BigInt::from(*c)))
                    .sum();
                total * &scale
            })
            .collect()
    }

    /// `a ~_K b`: equal mass under every generator.
    pub fn sim(&self, a: &ClopenSet, b: &ClopenSet) -> bool {
        a == b || self.eval(a) == self.eval(b)
    }

    /// `μ(a) < μ(b)` strictly for every generator.
    pub fn dominated(&self, a: &ClopenSet, b: &ClopenSet) -> bool {
        vec_lt(&self.eval(a), &self.eval(b))
    }

    /// Structural check of the family: full support, atomlessness and, for `ε = 2^-1..2^-8`, a
    /// `δ` such that every clopen set of diameter below `δ` has mass at most `ε`.
    pub fn validate(&self) -> ValidationReport {
        let min_branch = self
            .generators
            .iter()
            .map(TreeMeasure::min_branch)
            .fold(rational::half(), |a, b| a.min(b));
        let deltas = (1..=8)
            .map(|j| {
                let eps = dyadic(j);
                let k = (0..)
                    .find(|&k| self.max_cylinder_mass(k) <= eps)
                    .expect("cylinder masses vanish");
                DeltaWitness { eps, delta: dyadic(k) }
            })
            .collect();
        ValidationReport {
            generators: self.len(),
            block_depth: self.block_depth,
            min_branch,
            deltas,
        }
    }

    /// Largest mass of a depth-`k` cylinder over all generators.
    pub fn max_cylinder_mass(&self, k: usize) -> BigRational {
        let d = k.min(self.block_depth);
        let mut best = BigRational::zero();
        for i in 0..self.len() {
            for w in CylinderWord::ROOT.extensions(d) {
                let m = self.generators[i].eval_cylinder(&w);
                if m > best {
                    best = m;
                }
            }
        }
        best * dyadic(k - d)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct DeltaWitness {
    #[serde(with = "crate::rational::serde_q")]
    pub eps: BigRational,
    #[serde(with = "crate::rational::serde_q")]
    pub delta: BigRational,
}

/// Result of [`MeasureFamily::validate`]. Invalid weights are rejected on construction, so a
/// constructed family always validates.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ValidationReport {
    pub generators: usize,
    pub block_depth: usize,
    /// Every nonempty clopen set of depth `d` has mass at least `min_branch^d`.
    #[serde(with = "crate::rational::serde_q")]
    pub min_branch: BigRational,
    pub deltas: Vec<DeltaWitness>,
}

pub fn vec_lt(a: &[BigRational], b: &[BigRational]) -> bool {
    a.iter().zip(b).all(|(x, y)| x < y)
}

pub fn vec_le(a: &[BigRational], b: &[BigRational]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

pub fn vec_sub(a: &[BigRational], b: &[BigRational]) -> MeasureVec {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn vec_add(a: &[BigRational], b: &[BigRational]) -> MeasureVec {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn render_vec(v: &[BigRational]) -> String {
    let parts: Vec<String> = v.iter().map(rational::render).collect();
    format!("({})", parts.join(", "))
}

// ---------------------------------------------------------------------------------------------
// Family config files.
//
// ```toml
// [[measure]]
// depth_bound = 1
// weights = { "" = "1/3" }
// ```

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyFile {
    measure: Vec<MeasureEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasureEntry {
    #[serde(default)]
    depth_bound: Option<usize>,
    #[serde(default)]
    weights: BTreeMap<toml::Spanned<String>, toml::Spanned<toml::Value>>,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Parse a measure-family config. Weights must be strings `"num/den"`; floats are rejected.
pub fn parse_family(src: &str) -> Result<MeasureFamily, ConfigError> {
    let parse_err = |span: Option<std::ops::Range<usize>>, message: String| {
        let (line, column) = span.map_or((1, 1), |s| line_col(src, s.start));
        ConfigError::Parse { line, column, message }
    };
    let file: FamilyFile =
        toml::from_str(src).map_err(|e| parse_err(e.span(), e.message().to_string()))?;
    let mut generators = Vec::new();
    for entry in file.measure {
        let mut weights = BTreeMap::new();
        let mut deepest = 0;
        for (key, value) in entry.weights {
            let word: CylinderWord = key
                .get_ref()
                .parse()
                .map_err(|e: crate::clopen::ClopenError| parse_err(Some(key.span()), e.to_string()))?;
            let text = match value.get_ref() {
                toml::Value::String(s) => s.clone(),
                other => {
                    return Err(parse_err(
                        Some(value.span()),
                        format!("weight must be a string \"num/den\", found {}", other.type_str()),
                    ))
                }
            };
            let p = rational::parse(&text).map_err(|m| parse_err(Some(value.span()), m))?;
            deepest = deepest.max(word.len() + 1);
            weights.insert(word, p);
        }
        let depth_bound = entry.depth_bound.unwrap_or(deepest);
        generators.push(TreeMeasure::new(weights, depth_bound)?);
    }
    Ok(MeasureFamily::new(generators)?)
}

/// Render a family in the config format accepted by [`parse_family`].
pub fn render_family(k: &MeasureFamily) -> String {
    let mut out = String::new();
    for mu in k.generators() {
        out.push_str("[[measure]]\n");
        out.push_str(&format!("depth_bound = {}\n", mu.depth_bound()));
        let entries: Vec<String> = mu
            .weights()
            .iter()
            .map(|(w, p)| format!("\"{w}\" = \"{}\"", rational::render(p)))
            .collect();
        out.push_str(&format!("weights = {{ {} }}\n\n", entries.join(", ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::q;

    fn set(s: &str) -> ClopenSet {
        s.parse().unwrap()
    }

    fn two() -> MeasureFamily {
        MeasureFamily::new(vec![
            TreeMeasure::uniform(),
            TreeMeasure::with_root_weight(q(1, 3)).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn eval_examples() {
        let u = TreeMeasure::uniform();
        assert_eq!(u.eval(&set("01")), q(1, 4));
        let third = TreeMeasure::with_root_weight(q(1, 3)).unwrap();
        assert_eq!(third.eval(&set("0")), q(1, 3));
        assert_eq!(third.eval(&set("10")), q(1, 3));
        assert_eq!(third.eval(&ClopenSet::full()), q(1, 1));
        assert_eq!(two().eval(&set("00,1")), vec![q(3, 4), q(5, 6)]);
    }

    #[test]
    fn family_eval_agrees_with_direct_eval() {
        let k = two();
        for s in ["X", "0", "001,11", "0110,1", "∅"] {
            let a = set(s);
            let direct: MeasureVec = k.generators().iter().map(|m| m.eval(&a)).collect();
            assert_eq!(k.eval(&a), direct, "{s}");
        }
    }

    #[test]
    fn sim_examples() {
        let u = MeasureFamily::uniform();
        assert!(u.sim(&set("0"), &set("1")));
        assert!(!u.sim(&set("0"), &set("01")));
        assert!(!two().sim(&set("0"), &set("1")));
    }

    #[test]
    fn dominated_examples() {
        let u = MeasureFamily::uniform();
        assert!(u.dominated(&set("00"), &set("1")));
        assert!(!u.dominated(&set("0"), &set("1")));
        assert!(!two().dominated(&set("0"), &set("1")));
        assert!(two().dominated(&set("00"), &set("1")));
    }

    #[test]
    fn validate_examples() {
        let r = MeasureFamily::uniform().validate();
        for d in &r.deltas {
            assert_eq!(d.delta, d.eps);
        }
        let r = two().validate();
        assert_eq!(r.min_branch, q(1, 3));
        assert_eq!(r.deltas[0].eps, q(1, 2));
        assert!(matches!(
            TreeMeasure::with_root_weight(q(0, 1)),
            Err(MeasureError::InvalidWeights { .. })
        ));
        assert!(TreeMeasure::with_root_weight(q(3, 2)).is_err());
    }

    #[test]
    fn family_errors() {
        assert_eq!(MeasureFamily::new(vec![]).unwrap_err(), MeasureError::EmptyFamily);
        assert_eq!(
            MeasureFamily::new(vec![TreeMeasure::uniform(), TreeMeasure::uniform()]).unwrap_err(),
            MeasureError::DuplicateGenerator(0, 1)
        );
    }

    #[test]
    fn config_round_trip() {
        let src = "[[measure]]\n\n[[measure]]\ndepth_bound = 1\nweights = { \"\" = \"1/3\" }\n";
        let k = parse_family(src).unwrap();
        assert_eq!(k, two());
        assert_eq!(parse_family(&render_family(&k)).unwrap(), k);
    }

    #[test]
    fn config_rejects_floats_and_bad_weights() {
        let err = parse_family("[[measure]]\nweights = { \"\" = 0.5 }\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err}");
        let err = parse_family("[[measure]]\nweights = { \"\" = \"3/2\" }\n").unwrap_err();
        assert!(matches!(err, ConfigError::Measure(MeasureError::InvalidWeights { .. })));
        let err = parse_family("[[measure]]\nweights = { \"\" = \"0.5\" }\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
        let err = parse_family("[[measure]\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
    }

    #[test]
    fn deep_cylinders_vanish() {
        let k = two();
        for len in 2..10 {
            let w = CylinderWord::from_bits(len, 0);
            for mu in k.generators() {
                assert!(mu.eval_cylinder(&w) <= dyadic(len - 1));
            }
        }
    }
}
