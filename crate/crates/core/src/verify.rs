//! Finite-stage checks on a built sequence: the invariant cone, minimality, saturation
//! witnesses in the full group, and division by first return.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::builder::TowerSequence;
use crate::clopen::{ClopenSet, CylinderWord};
use crate::measure::{render_vec, MeasureFamily};
use crate::rational::{render, serde_q};
use crate::tower::{run_decomposition, KRPartition};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("PairNotScheduled: ({0}, {1}) was not consumed by any stage")]
    PairNotScheduled(String, String),
    #[error("StageTooShallow: remainder {remainder} exceeds the bound for generator {generator}")]
    StageTooShallow { generator: usize, remainder: String },
    #[error("{0} is not a union of atoms of the last stage")]
    NotCompatible(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

// ---- exact double description ----

/// Extreme rays of `{x >= 0 : a·x = 0 for every row a}`, each row given sparsely.
pub fn extreme_rays(dim: usize, rows: &[Vec<(usize, BigRational)>]) -> Vec<Vec<BigRational>> {
    struct Ray {
        coords: BTreeMap<usize, BigRational>,
        support: BTreeSet<usize>,
    }
    let make = |coords: BTreeMap<usize, BigRational>| Ray { support: coords.keys().copied().collect(), coords };
    let mut rays: Vec<Ray> = (0..dim)
        .map(|i| make(BTreeMap::from([(i, BigRational::one())])))
        .collect();
    for row in rows {
        let dot = |r: &Ray| -> BigRational {
            row.iter()
                .filter_map(|(i, a)| r.coords.get(i).map(|x| a * x))
                .fold(BigRational::zero(), |s, x| s + x)
        };
        let values: Vec<BigRational> = rays.iter().map(dot).collect();
        let (mut pos, mut neg, mut zero) = (Vec::new(), Vec::new(), Vec::new());
        for (idx, v) in values.iter().enumerate() {
            if v.is_positive() {
                pos.push(idx);
            } else if v.is_negative() {
                neg.push(idx);
            } else {
                zero.push(idx);
            }
        }
        let mut next: Vec<Ray> = Vec::new();
        for &p in &pos {
            for &q in &neg {
                let joint: BTreeSet<usize> = rays[p].support.union(&rays[q].support).copied().collect();
                let adjacent = (0..rays.len())
                    .filter(|&r| r != p && r != q)
                    .all(|r| !rays[r].support.is_subset(&joint));
                if !adjacent {
                    continue;
                }
                let (vp, vq) = (&values[p], &values[q]);
                let mut coords = BTreeMap::new();
                for i in &joint {
                    let x = rays[q].coords.get(i).map(|x| x * vp).unwrap_or_default()
                        - rays[p].coords.get(i).map(|x| x * vq).unwrap_or_default();
                    if !x.is_zero() {
                        coords.insert(*i, x);
                    }
                }
                next.push(make(coords));
            }
        }
        let mut kept: Vec<Ray> = Vec::with_capacity(zero.len() + next.len());
        let mut old: Vec<Option<Ray>> = rays.into_iter().map(Some).collect();
        for z in zero {
            kept.push(old[z].take().expect("each ray kept once"));
        }
        kept.extend(next);
        rays = kept;
    }
    rays.into_iter()
        .map(|r| {
            let mut v = vec![BigRational::zero(); dim];
            for (i, x) in r.coords {
                v[i] = x;
            }
            v
        })
        .collect()
}

// ---- invariant cone ----

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InvariantCone {
    pub stage: usize,
    /// Atoms in column order, matching the coordinates of the vertices.
    pub atoms: Vec<ClopenSet>,
    pub vertices: Vec<Vec<BigRational>>,
    column_of: Vec<usize>,
}

/// Vertices of the polytope of probability assignments on the atoms of stage `n` that are
/// constant along columns.
pub fn invariant_cone(g: &TowerSequence, n: usize) -> InvariantCone {
    let s = g.stage(n);
    let mut atoms = Vec::new();
    let mut column_of = Vec::new();
    let mut rows = Vec::new();
    for (i, col) in s.columns().iter().enumerate() {
        for (r, a) in col.iter().enumerate() {
            if r > 0 {
                let idx = atoms.len();
                rows.push(vec![(idx - 1, BigRational::one()), (idx, -BigRational::one())]);
            }
            atoms.push(a.clone());
            column_of.push(i);
        }
    }
    let vertices = extreme_rays(atoms.len(), &rows)
        .into_iter()
        .map(|ray| {
            let total: BigRational = ray.iter().sum();
            ray.into_iter().map(|x| x / &total).collect()
        })
        .collect();
    InvariantCone { stage: n, atoms, vertices, column_of }
}

impl InvariantCone {
    /// Exact membership of an assignment of masses to the atoms.
    pub fn contains(&self, point: &[BigRational]) -> bool {
        point.len() == self.atoms.len()
            && point.iter().all(|x| !x.is_negative())
            && point.iter().sum::<BigRational>().is_one()
            && (1..point.len()).all(|j| self.column_of[j] != self.column_of[j - 1] || point[j] == point[j - 1])
    }

    /// Whether every generator of `k`, restricted to the atoms, lies in the cone.
    pub fn contains_generators(&self, k: &MeasureFamily) -> bool {
        k.generators().iter().all(|mu| {
            let point: Vec<BigRational> = self.atoms.iter().map(|a| mu.eval(a)).collect();
            self.contains(&point)
        })
    }

    /// Sup over cylinders of length `depth` of the spread of their possible mass over the
    /// cone: largest mass of atoms meeting the cylinder minus smallest mass of atoms inside it.
    pub fn collapse_metric(&self, depth: usize) -> BigRational {
        let mut worst = BigRational::zero();
        for w in CylinderWord::ROOT.extensions(depth) {
            let meets: Vec<bool> = self.atoms.iter().map(|a| a.meets_cylinder(&w)).collect();
            let cyl = ClopenSet::cylinder(w);
            let inside: Vec<bool> = self.atoms.iter().map(|a| a.is_subset(&cyl)).collect();
            let mass = |v: &Vec<BigRational>, mask: &[bool]| -> BigRational {
                v.iter().zip(mask).filter(|(_, m)| **m).map(|(x, _)| x.clone()).sum()
            };
            let upper = self.vertices.iter().map(|v| mass(v, &meets)).max().unwrap_or_default();
            let lower = self.vertices.iter().map(|v| mass(v, &inside)).min().unwrap_or_default();
            let spread = upper - lower;
            if spread > worst {
                worst = spread;
            }
        }
        worst
    }
}

// ---- minimality ----

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum MinimalityCertificate {
    /// Breadth-first trees from column 0 along the edges and against them.
    StronglyConnected { out_tree: Vec<(usize, usize)>, in_tree: Vec<(usize, usize)> },
    /// A union of columns closed under the column graph.
    InvariantSet { columns: Vec<usize>, set: ClopenSet },
    /// A first-stage atom missing every atom of one column.
    MissedColumn { atom: ClopenSet, column: usize, set: ClopenSet },
}

impl MinimalityCertificate {
    pub fn is_minimal(&self) -> bool {
        matches!(self, MinimalityCertificate::StronglyConnected { .. })
    }
}

/// Column graph of stage `n`: `C -> C'` when some column of the next stage passes from a run
/// through `C` to a run through `C'`, each next-stage column closing from its last run back to
/// its first one. At the last stage every column closes onto itself.
pub fn column_graph(g: &TowerSequence, n: usize) -> Vec<BTreeSet<usize>> {
    let s = g.stage(n);
    let mut edges = vec![BTreeSet::new(); s.columns().len()];
    if n == g.len() {
        for (i, e) in edges.iter_mut().enumerate() {
            e.insert(i);
        }
        return edges;
    }
    let index = s.index();
    for col in g.stage(n + 1).columns() {
        let runs = run_decomposition(&index, s, col).expect("stages refine");
        for w in runs.windows(2) {
            edges[w[0]].insert(w[1]);
        }
        edges[*runs.last().expect("nonempty")].insert(runs[0]);
    }
    edges
}

fn bfs_tree(edges: &[BTreeSet<usize>], start: usize) -> (Vec<bool>, Vec<(usize, usize)>) {
    let mut seen = vec![false; edges.len()];
    let mut tree = Vec::new();
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(c) = queue.pop_front() {
        for &d in &edges[c] {
            if !seen[d] {
                seen[d] = true;
                tree.push((c, d));
                queue.push_back(d);
            }
        }
    }
    (seen, tree)
}

fn union_of_columns(s: &KRPartition, cols: &[usize]) -> ClopenSet {
    ClopenSet::normalize(cols.iter().flat_map(|&i| s.columns()[i].iter().flat_map(|a| a.leaves().iter().copied())))
}

pub fn minimality_check(g: &TowerSequence, n: usize) -> MinimalityCertificate {
    let s = g.stage(n);
    let edges = column_graph(g, n);
    let (reach, out_tree) = bfs_tree(&edges, 0);
    let mut reverse = vec![BTreeSet::new(); edges.len()];
    for (c, e) in edges.iter().enumerate() {
        for &d in e {
            reverse[d].insert(c);
        }
    }
    let (coreach, in_tree) = bfs_tree(&reverse, 0);
    if reach.iter().any(|x| !x) || coreach.iter().any(|x| !x) {
        // the set reachable from a column is closed under the graph; pick a proper one
        let start = if reach.iter().any(|x| !x) {
            0
        } else {
            coreach.iter().position(|x| !x).expect("some column cannot reach column 0")
        };
        let (closed, _) = bfs_tree(&edges, start);
        let columns: Vec<usize> = (0..edges.len()).filter(|&c| closed[c]).collect();
        let set = union_of_columns(s, &columns);
        return MinimalityCertificate::InvariantSet { columns, set };
    }
    for (_, _, atom) in g.stage(1).atoms() {
        let mut hit = vec![false; s.columns().len()];
        for (i, _, a) in s.atoms() {
            if a.is_subset(atom) {
                hit[i] = true;
            }
        }
        if let Some(column) = hit.iter().position(|h| !h) {
            return MinimalityCertificate::MissedColumn {
                atom: atom.clone(),
                column,
                set: union_of_columns(s, &[column]),
            };
        }
    }
    MinimalityCertificate::StronglyConnected { out_tree, in_tree }
}

// ---- saturation witnesses ----

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FullGroupWitness {
    pub stage: usize,
    pub pieces: Vec<ClopenSet>,
    pub exponents: Vec<i64>,
}

/// Powers of a stage's atom map applied to unions of atoms.
struct StageMap<'a> {
    forward: BTreeMap<&'a ClopenSet, &'a ClopenSet>,
    backward: BTreeMap<&'a ClopenSet, &'a ClopenSet>,
    s: &'a KRPartition,
}

impl<'a> StageMap<'a> {
    fn new(s: &'a KRPartition) -> Self {
        let mut forward = BTreeMap::new();
        let mut backward = BTreeMap::new();
        for col in s.columns() {
            for w in col.windows(2) {
                forward.insert(&w[0], &w[1]);
                backward.insert(&w[1], &w[0]);
            }
        }
        StageMap { forward, backward, s }
    }

    /// `g^e(set)` for a union of atoms, if defined.
    fn power(&self, set: &ClopenSet, e: i64) -> Option<ClopenSet> {
        let map = if e >= 0 { &self.forward } else { &self.backward };
        let mut atoms: Vec<&ClopenSet> = self.s.atoms().map(|(_, _, a)| a).filter(|a| a.is_subset(set)).collect();
        if ClopenSet::normalize(atoms.iter().flat_map(|a| a.leaves().iter().copied())) != *set {
            return None;
        }
        for _ in 0..e.unsigned_abs() {
            atoms = atoms.into_iter().map(|a| map.get(a).copied()).collect::<Option<_>>()?;
        }
        Some(ClopenSet::normalize(atoms.iter().flat_map(|a| a.leaves().iter().copied())))
    }
}

/// An element of the full group mapping `u` onto `v`, read off the stage at which the pair was
/// balanced: inside each column the atoms of `u` go to the atoms of `v` in level order, the
/// remaining atoms to the remaining atoms.
pub fn saturation_witness(g: &TowerSequence, u: &ClopenSet, v: &ClopenSet) -> Result<FullGroupWitness, VerifyError> {
    let idx = g
        .pairs
        .iter()
        .position(|(a, b)| a == u && b == v)
        .ok_or_else(|| VerifyError::PairNotScheduled(u.to_string(), v.to_string()))?;
    let s = &g.stages[idx];
    let mut by_exponent: BTreeMap<i64, Vec<CylinderWord>> = BTreeMap::new();
    for col in s.columns() {
        let levels = |pred: &dyn Fn(&ClopenSet) -> bool| -> Vec<usize> {
            (0..col.len()).filter(|&r| pred(&col[r])).collect()
        };
        let src_in = levels(&|a| a.is_subset(u));
        let dst_in = levels(&|a| a.is_subset(v));
        let src_out = levels(&|a| !a.is_subset(u));
        let dst_out = levels(&|a| !a.is_subset(v));
        for (src, dst) in [(src_in, dst_in), (src_out, dst_out)] {
            for (a, b) in src.into_iter().zip(dst) {
                by_exponent
                    .entry(b as i64 - a as i64)
                    .or_default()
                    .extend(col[a].leaves().iter().copied());
            }
        }
    }
    let (exponents, pieces) = by_exponent.into_iter().map(|(e, w)| (e, ClopenSet::normalize(w))).unzip();
    Ok(FullGroupWitness { stage: idx + 1, pieces, exponents })
}

impl FullGroupWitness {
    /// Image of `set` (a union of pieces' atoms) by applying each piece's power of the stage map.
    pub fn image(&self, g: &TowerSequence, set: &ClopenSet) -> Option<ClopenSet> {
        let map = StageMap::new(g.stage(self.stage));
        let mut out = ClopenSet::empty();
        for (p, e) in self.pieces.iter().zip(&self.exponents) {
            let part = p.intersect(set);
            if !part.is_empty() {
                out = out.union(&map.power(&part, *e)?);
            }
        }
        Some(out)
    }

    /// Pieces partition X, their images partition X, and the image of `u` is `v`, both by
    /// piecewise powers and by matching atoms directly.
    pub fn check(&self, g: &TowerSequence, u: &ClopenSet, v: &ClopenSet) -> Result<(), String> {
        let map = StageMap::new(g.stage(self.stage));
        let refs: Vec<&ClopenSet> = self.pieces.iter().collect();
        crate::oracles::check_partition(&refs).map_err(|e| format!("pieces: {e}"))?;
        let images: Vec<ClopenSet> = self
            .pieces
            .iter()
            .zip(&self.exponents)
            .map(|(p, e)| map.power(p, *e).ok_or_else(|| format!("g^{e} undefined on {p}")))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&ClopenSet> = images.iter().collect();
        crate::oracles::check_partition(&refs).map_err(|e| format!("images: {e}"))?;
        let by_power = self.image(g, u).ok_or("image of u undefined")?;
        if by_power != *v {
            return Err(format!("piecewise image of {u} is {by_power}, not {v}"));
        }
        let direct = saturation_witness(g, u, v).map_err(|e| e.to_string())?;
        let mut matched = ClopenSet::empty();
        let s = g.stage(self.stage);
        for col in s.columns() {
            let src = col.iter().filter(|a| a.is_subset(u)).count();
            let dst: Vec<&ClopenSet> = col.iter().filter(|a| a.is_subset(v)).collect();
            if src != dst.len() {
                return Err("unequal counts in a column".into());
            }
            for a in dst {
                matched = matched.union(a);
            }
        }
        if matched != by_power || direct.pieces != self.pieces {
            return Err("direct atom matching disagrees with the piecewise image".into());
        }
        Ok(())
    }
}

// ---- first return ----

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FirstReturnDivision {
    pub classes: Vec<ClopenSet>,
    pub remainder: ClopenSet,
}

/// Split `a` (a union of atoms of the last stage) into `n` pairwise `~_K` classes: in each
/// column the levels inside `a` are numbered upwards and the first `k_C·n` of them are dealt
/// out modulo `n`. The rest must weigh at most `eps·μ(a)` under every generator.
pub fn first_return_divide(
    k: &MeasureFamily,
    g: &TowerSequence,
    a: &ClopenSet,
    n: usize,
    eps: &BigRational,
) -> Result<FirstReturnDivision, VerifyError> {
    if n == 0 {
        return Err(VerifyError::InvalidArgument("n must be positive".into()));
    }
    if eps.is_negative() {
        return Err(VerifyError::InvalidArgument("eps must be nonnegative".into()));
    }
    let s = g.last();
    if !s.is_compatible(a) {
        return Err(VerifyError::NotCompatible(a.to_string()));
    }
    let mut classes: Vec<Vec<CylinderWord>> = vec![Vec::new(); n];
    for col in s.columns() {
        let levels: Vec<&ClopenSet> = col.iter().filter(|x| x.is_subset(a)).collect();
        let used = levels.len() / n * n;
        for (t, atom) in levels.into_iter().take(used).enumerate() {
            classes[t % n].extend(atom.leaves().iter().copied());
        }
    }
    let classes: Vec<ClopenSet> = classes.into_iter().map(ClopenSet::normalize).collect();
    let remainder = classes.iter().fold(a.clone(), |r, c| r.minus(c));
    for (i, mu) in k.generators().iter().enumerate() {
        if mu.eval(&remainder) > eps * mu.eval(a) {
            return Err(VerifyError::StageTooShallow { generator: i, remainder: render(&mu.eval(&remainder)) });
        }
    }
    Ok(FirstReturnDivision { classes, remainder })
}

// ---- report ----

#[derive(Clone, Debug, Serialize)]
pub struct StageReport {
    pub stage: usize,
    pub columns: usize,
    pub atoms: usize,
    #[serde(with = "serde_q")]
    pub base_diameter: BigRational,
    #[serde(with = "serde_q")]
    pub top_diameter: BigRational,
    pub cone_vertices: usize,
    #[serde(with = "serde_q")]
    pub cone_collapse: BigRational,
    pub generators_in_cone: bool,
    pub minimal: bool,
    pub witness: Option<WitnessReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct WitnessReport {
    pub u: ClopenSet,
    pub v: ClopenSet,
    pub pieces: usize,
    pub verified: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub invariants: Result<(), String>,
    pub stages: Vec<StageReport>,
    pub cone_non_increasing: bool,
    pub first_return: Option<FirstReturnReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FirstReturnReport {
    pub n: usize,
    #[serde(with = "serde_q")]
    pub eps: BigRational,
    pub remainder: Result<String, String>,
}

/// Depth of the cylinders over which cone collapse is measured.
pub const COLLAPSE_DEPTH: usize = 3;

/// Run every check on every stage. First-return division of X into 3 classes is checked on the
/// last stage with the given `eps`.
pub fn verify_sequence(k: &MeasureFamily, g: &TowerSequence, eps: &BigRational) -> VerifyReport {
    let invariants = g.check(k).map_err(|e| e.to_string());
    let structural = invariants.is_ok();
    let mut stages = Vec::new();
    for n in 1..=g.len() {
        let s = g.stage(n);
        let cone = invariant_cone(g, n);
        let (u, v) = &g.pairs[n - 1];
        let witness = structural.then(|| match saturation_witness(g, u, v) {
            Ok(w) => {
                let check = w.check(g, u, v);
                WitnessReport { u: u.clone(), v: v.clone(), pieces: w.pieces.len(), verified: check.is_ok(), error: check.err() }
            }
            Err(e) => WitnessReport { u: u.clone(), v: v.clone(), pieces: 0, verified: false, error: Some(e.to_string()) },
        });
        stages.push(StageReport {
            stage: n,
            columns: s.columns().len(),
            atoms: s.atom_count(),
            base_diameter: s.base().diameter(),
            top_diameter: s.top().diameter(),
            cone_vertices: cone.vertices.len(),
            cone_collapse: cone.collapse_metric(COLLAPSE_DEPTH),
            generators_in_cone: cone.contains_generators(k),
            minimal: structural && minimality_check(g, n).is_minimal(),
            witness,
        });
    }
    let cone_non_increasing = stages.windows(2).all(|w| w[1].cone_collapse <= w[0].cone_collapse);
    let first_return = structural.then(|| FirstReturnReport {
        n: 3,
        eps: eps.clone(),
        remainder: first_return_divide(k, g, &ClopenSet::full(), 3, eps)
            .map(|d| render_vec(&k.eval(&d.remainder)))
            .map_err(|e| e.to_string()),
    });
    VerifyReport { invariants, stages, cone_non_increasing, first_return }
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.invariants.is_ok()
            && self.cone_non_increasing
            && self.first_return.as_ref().is_some_and(|f| f.remainder.is_ok())
            && self.stages.iter().all(|s| {
                s.generators_in_cone && s.minimal && s.witness.as_ref().is_some_and(|w| w.verified)
            })
    }

    /// The first failed check, named.
    pub fn failure(&self) -> Option<String> {
        if let Err(e) = &self.invariants {
            return Some(e.clone());
        }
        if !self.cone_non_increasing {
            return Some("cone collapse increased".into());
        }
        for s in &self.stages {
            if !s.generators_in_cone {
                return Some(format!("stage {}: a generator is outside the invariant cone", s.stage));
            }
            if !s.minimal {
                return Some(format!("stage {}: minimality check failed", s.stage));
            }
            if let Some(w) = &s.witness {
                if !w.verified {
                    return Some(format!("stage {}: saturation witness failed: {}", s.stage, w.error.clone().unwrap_or_default()));
                }
            }
        }
        match &self.first_return {
            Some(FirstReturnReport { remainder: Err(e), .. }) => Some(e.clone()),
            None => Some("first-return division not attempted".into()),
            _ => None,
        }
    }
}
