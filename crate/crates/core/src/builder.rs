//! The staged construction: a refining sequence of KR-partitions alternating pair balancing and
//! base/top shrinking, its invariant checker, and a point-level evaluation of the stage maps.

use std::collections::BTreeMap;

use log::info;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clopen::{canonical_enumeration, ClopenSet, CylinderWord};
use crate::measure::{MeasureFamily, MeasureVec};
use crate::rational::{dyadic, render, serde_qvec};
use crate::tower::{
    balance_columns, refine_small_base_top, refines, KRPartition, PartialAutomorphism, TowerError,
};

#[derive(Debug, Error)]
#[error("stage {stage}: {step} failed: {source} [pair ({u}, {v}), eps {eps}, max_depth {max_depth}]")]
pub struct BuildError {
    pub stage: usize,
    pub step: &'static str,
    pub u: String,
    pub v: String,
    pub eps: String,
    pub max_depth: usize,
    #[source]
    pub source: TowerError,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error("HitsTop: iterate {0} lands in the top of the last stage")]
    HitsTop(usize),
    #[error("cylinder {0} is not inside a single atom of the last stage")]
    NotInSingleAtom(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("stage {stage}: {invariant} violated: {detail}")]
pub struct InvariantViolation {
    pub stage: usize,
    pub invariant: &'static str,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TowerSequence {
    pub stages: Vec<KRPartition>,
    pub pairs: Vec<(ClopenSet, ClopenSet)>,
    pub partials: Vec<PartialAutomorphism>,
}

/// The first `count` pairs `U ~_K V` of sets of depth at most `depth_cap`, ordered by
/// `(max(i, j), i, j)` over the canonical enumeration.
pub fn enumerate_pairs(k: &MeasureFamily, count: usize, depth_cap: usize) -> Vec<(ClopenSet, ClopenSet)> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    let mut sets: Vec<(ClopenSet, MeasureVec)> = Vec::new();
    for s in canonical_enumeration(depth_cap) {
        let m = k.eval(&s);
        sets.push((s, m));
        let top = sets.len() - 1;
        let order = (0..top).map(|i| (i, top)).chain((0..=top).map(|j| (top, j)));
        for (i, j) in order {
            if sets[i].1 == sets[j].1 {
                out.push((sets[i].0.clone(), sets[j].0.clone()));
                if out.len() == count {
                    return out;
                }
            }
        }
    }
    out
}

/// Build `n_stages` stages from `{X}`: stage `n` balances the `n`-th enumerated pair and then
/// shrinks base and top below `2^-n`.
pub fn build_saturated(
    k: &MeasureFamily,
    n_stages: usize,
    depth_cap: usize,
    max_depth: usize,
) -> Result<TowerSequence, BuildError> {
    let pairs = enumerate_pairs(k, n_stages, depth_cap);
    let mut stages = Vec::with_capacity(n_stages);
    let mut current = KRPartition::trivial();
    for n in 1..=n_stages {
        let (u, v) = pairs
            .get(n - 1)
            .cloned()
            .unwrap_or_else(|| (ClopenSet::empty(), ClopenSet::empty()));
        let eps = dyadic(n);
        let annotate = |step, source| BuildError {
            stage: n,
            step,
            u: u.to_string(),
            v: v.to_string(),
            eps: render(&eps),
            max_depth,
            source,
        };
        let balanced =
            balance_columns(k, &current, &u, &v, max_depth).map_err(|e| annotate("balance_columns", e))?;
        current = refine_small_base_top(k, &balanced, &eps, max_depth)
            .map_err(|e| annotate("refine_small_base_top", e))?;
        info!(
            "stage {n}: {} columns, {} atoms, pair ({u}, {v})",
            current.columns().len(),
            current.atom_count()
        );
        stages.push(current.clone());
    }
    let pairs = pairs.into_iter().chain(std::iter::repeat((ClopenSet::empty(), ClopenSet::empty())));
    Ok(TowerSequence::new(stages, pairs.take(n_stages).collect()))
}

impl TowerSequence {
    pub fn new(stages: Vec<KRPartition>, pairs: Vec<(ClopenSet, ClopenSet)>) -> Self {
        let partials = stages.iter().map(KRPartition::partial_automorphism).collect();
        TowerSequence { stages, pairs, partials }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Stage `n`, 1-based.
    pub fn stage(&self, n: usize) -> &KRPartition {
        &self.stages[n - 1]
    }

    pub fn last(&self) -> &KRPartition {
        self.stages.last().expect("at least one stage")
    }

    /// Check every sequence invariant exactly; the first violation found is returned.
    pub fn check(&self, k: &MeasureFamily) -> Result<(), InvariantViolation> {
        let fail = |stage, invariant, detail: String| Err(InvariantViolation { stage, invariant, detail });
        if self.stages.is_empty() || self.pairs.len() != self.stages.len() {
            return fail(0, "shape", "stage and pair counts differ or are zero".into());
        }
        let mut prev_diams: Option<(BigRational, BigRational)> = None;
        for (idx, s) in self.stages.iter().enumerate() {
            let n = idx + 1;
            if let Some(v) = s.violations(k).first() {
                return fail(n, "measure preservation", v.to_string());
            }
            if idx > 0 && !refines(s, &self.stages[idx - 1]) {
                return fail(n, "refinement", format!("stage {n} does not refine stage {idx}"));
            }
            let (u, v) = &self.pairs[idx];
            if !s.is_compatible(u) || !s.is_compatible(v) {
                return fail(n, "compatibility", format!("pair ({u}, {v}) is not a union of atoms"));
            }
            if let Some(c) = s.imbalance(u, v).iter().position(|x| *x != 0) {
                return fail(n, "compatibility", format!("column {c} has unequal counts for ({u}, {v})"));
            }
            let diams = (s.base().diameter(), s.top().diameter());
            let budget = dyadic(n);
            if diams.0 > budget || diams.1 > budget {
                return fail(n, "diameter schedule", format!("base {} / top {}", render(&diams.0), render(&diams.1)));
            }
            if let Some(p) = &prev_diams {
                if diams.0 > p.0 || diams.1 > p.1 {
                    return fail(n, "diameter schedule", "diameters increased".into());
                }
            }
            prev_diams = Some(diams);
            if self.partials.get(idx) != Some(&s.partial_automorphism()) {
                return fail(n, "partial automorphism", "stored map differs from the stage's".into());
            }
        }
        self.check_chain_extension()
    }

    /// Every non-top atom's image at stage `n` is the union of the last stage's images of the
    /// atoms inside it.
    fn check_chain_extension(&self) -> Result<(), InvariantViolation> {
        let last = self.last();
        for (idx, s) in self.stages.iter().enumerate().take(self.stages.len() - 1) {
            let index = s.index();
            let mut images: BTreeMap<(usize, usize), Vec<CylinderWord>> = BTreeMap::new();
            for col in last.columns() {
                for pair in col.windows(2) {
                    let Some((i, r)) = index.locate(s, &pair[0]) else {
                        return Err(InvariantViolation {
                            stage: idx + 1,
                            invariant: "chain extension",
                            detail: format!("atom {} of the last stage straddles atoms", pair[0]),
                        });
                    };
                    images.entry((i, r)).or_default().extend(pair[1].leaves().iter().copied());
                }
            }
            for (i, col) in s.columns().iter().enumerate() {
                for r in 0..col.len() - 1 {
                    let got = ClopenSet::normalize(images.remove(&(i, r)).unwrap_or_default());
                    if got != col[r + 1] {
                        return Err(InvariantViolation {
                            stage: idx + 1,
                            invariant: "chain extension",
                            detail: format!("image of {} is {} at stage {} but {got} later", col[r], col[r + 1], idx + 1),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Follow `[x]` through `steps` applications of the last stage's atom map and return the
    /// common prefix of the atom reached.
    pub fn apply(&self, x: CylinderWord, steps: usize) -> Result<CylinderWord, ApplyError> {
        if steps == 0 {
            return Ok(x);
        }
        let s = self.last();
        let (i, r) = s
            .index()
            .locate(s, &ClopenSet::cylinder(x))
            .ok_or_else(|| ApplyError::NotInSingleAtom(x.to_string()))?;
        let col = &s.columns()[i];
        if r + steps >= col.len() {
            return Err(ApplyError::HitsTop(col.len() - 1 - r));
        }
        Ok(col[r + steps].common_prefix().expect("atoms are nonempty"))
    }
}

// ---- serialization ----

#[derive(Serialize, Deserialize)]
struct AtomRecord {
    set: ClopenSet,
    #[serde(with = "serde_qvec")]
    measure: MeasureVec,
}

#[derive(Serialize, Deserialize)]
struct StageRecord {
    stage: usize,
    columns: Vec<Vec<AtomRecord>>,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    u: ClopenSet,
    v: ClopenSet,
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    pairs: Vec<PairRecord>,
    stages: Vec<StageRecord>,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("corrupt tower file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("stage {stage}: recorded measure of atom {atom} does not match the family")]
    MeasureMismatch { stage: usize, atom: String },
}

impl TowerSequence {
    /// Pretty JSON with per-atom generator measures; ordering follows the stages, so the output
    /// is stable across runs.
    pub fn to_json(&self, k: &MeasureFamily) -> String {
        let record = SequenceRecord {
            pairs: self.pairs.iter().map(|(u, v)| PairRecord { u: u.clone(), v: v.clone() }).collect(),
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| StageRecord {
                    stage: i + 1,
                    columns: s
                        .columns()
                        .iter()
                        .map(|c| c.iter().map(|a| AtomRecord { set: a.clone(), measure: k.eval(a) }).collect())
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&record).expect("serializable") + "\n"
    }

    /// Parse a serialized sequence. Structure is not validated here (see [`TowerSequence::check`]),
    /// but recorded measures must agree with `k`.
    pub fn from_json(src: &str, k: &MeasureFamily) -> Result<Self, LoadError> {
        let record: SequenceRecord = serde_json::from_str(src)?;
        let mut stages = Vec::with_capacity(record.stages.len());
        for st in record.stages {
            let mut cols = Vec::with_capacity(st.columns.len());
            for col in st.columns {
                let mut atoms = Vec::with_capacity(col.len());
                for a in col {
                    if k.eval(&a.set) != a.measure {
                        return Err(LoadError::MeasureMismatch { stage: st.stage, atom: a.set.to_string() });
                    }
                    atoms.push(a.set);
                }
                cols.push(atoms);
            }
            stages.push(KRPartition::from_columns_unchecked(cols));
        }
        let pairs = record.pairs.into_iter().map(|p| (p.u, p.v)).collect();
        Ok(TowerSequence::new(stages, pairs))
    }
}
