//! KR-partitions: clopen partitions of the Cantor space into columns of pairwise `~_K` atoms,
//! their partial automorphisms, the refinement relation, and the two refinement procedures
//! (shrinking base and top; balancing a `~_K` pair column by column).

use std::fmt::Write as _;

use log::debug;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clopen::{ClopenSet, CylinderWord};
use crate::measure::{render_vec, vec_le, vec_sub, MeasureFamily};
use crate::oracles::{self, OracleError};
use crate::rational::{self, dyadic};

/// Atoms of one column, from the base upwards.
pub type Column = Vec<ClopenSet>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Violation {
    #[error("NotAPartition: {0}")]
    NotAPartition(String),
    #[error("NotEquivalentColumn: column {column}, atoms {lower} and {upper} differ in mass")]
    NotEquivalentColumn { column: usize, lower: usize, upper: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TowerError {
    #[error("invalid KR-partition: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("{0}")]
    Internal(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRPartition {
    columns: Vec<Column>,
}

/// Partial automorphism of a KR-partition: each non-top atom goes to the next one up, and the
/// top (as a set) goes onto the base.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialAutomorphism {
    pub atom_map: Vec<(ClopenSet, ClopenSet)>,
    pub top: ClopenSet,
    pub base: ClopenSet,
}

impl PartialAutomorphism {
    /// Image of a union of non-top atoms of the defining partition.
    pub fn image(&self, set: &ClopenSet) -> Option<ClopenSet> {
        let mut covered = ClopenSet::empty();
        let mut image = ClopenSet::empty();
        for (a, b) in &self.atom_map {
            if a.is_subset(set) {
                covered = covered.union(a);
                image = image.union(b);
            }
        }
        (covered == *set).then_some(image)
    }
}

/// Lookup of the atom containing a given cylinder.
pub struct AtomIndex {
    leaves: Vec<(CylinderWord, usize, usize)>,
}

impl AtomIndex {
    pub fn new(t: &KRPartition) -> Self {
        let mut leaves: Vec<_> = t
            .columns
            .iter()
            .enumerate()
            .flat_map(|(i, col)| {
                col.iter()
                    .enumerate()
                    .flat_map(move |(r, a)| a.leaves().iter().map(move |w| (*w, i, r)))
            })
            .collect();
        leaves.sort();
        AtomIndex { leaves }
    }

    /// `(column, level)` of the atom whose leaf contains `[w]`.
    pub fn locate_word(&self, w: &CylinderWord) -> Option<(usize, usize)> {
        let idx = self.leaves.partition_point(|(l, _, _)| l <= w);
        let (leaf, i, r) = self.leaves.get(idx.checked_sub(1)?)?;
        leaf.is_prefix_of(w).then_some((*i, *r))
    }

    /// `(column, level)` of the atom containing all of `set`, if there is a single one.
    pub fn locate(&self, t: &KRPartition, set: &ClopenSet) -> Option<(usize, usize)> {
        let first = set.leaves().first()?;
        let (i, r) = self.locate_word(first)?;
        set.is_subset(&t.columns[i][r]).then_some((i, r))
    }
}

impl KRPartition {
    /// Validate and build. Every violation found is reported.
    pub fn from_columns(k: &MeasureFamily, columns: Vec<Column>) -> Result<Self, TowerError> {
        let t = KRPartition { columns };
        let violations = t.violations(k);
        if violations.is_empty() {
            Ok(t)
        } else {
            Err(TowerError::Invalid(violations))
        }
    }

    pub(crate) fn from_columns_unchecked(columns: Vec<Column>) -> Self {
        KRPartition { columns }
    }

    pub fn trivial() -> Self {
        KRPartition { columns: vec![vec![ClopenSet::full()]] }
    }

    pub fn violations(&self, k: &MeasureFamily) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.columns.is_empty() || self.columns.iter().any(Vec::is_empty) {
            out.push(Violation::NotAPartition("empty column".into()));
            return out;
        }
        let atoms: Vec<&ClopenSet> = self.atoms().map(|(_, _, a)| a).collect();
        if let Err(e) = oracles::check_partition(&atoms) {
            out.push(Violation::NotAPartition(e));
        }
        for (i, col) in self.columns.iter().enumerate() {
            let base = k.eval(&col[0]);
            for (r, a) in col.iter().enumerate().skip(1) {
                if k.eval(a) != base {
                    out.push(Violation::NotEquivalentColumn { column: i, lower: 0, upper: r });
                    break;
                }
            }
        }
        out
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn into_columns(self) -> Vec<Column> {
        self.columns
    }

    /// `(column, level, atom)` for every atom.
    pub fn atoms(&self) -> impl Iterator<Item = (usize, usize, &ClopenSet)> {
        self.columns
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.iter().enumerate().map(move |(r, a)| (i, r, a)))
    }

    pub fn atom_count(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    pub fn base(&self) -> ClopenSet {
        union_all(self.columns.iter().map(|c| &c[0]))
    }

    pub fn top(&self) -> ClopenSet {
        union_all(self.columns.iter().map(|c| c.last().expect("nonempty column")))
    }

    pub fn partial_automorphism(&self) -> PartialAutomorphism {
        let atom_map = self
            .columns
            .iter()
            .flat_map(|c| c.windows(2).map(|w| (w[0].clone(), w[1].clone())))
            .collect();
        PartialAutomorphism { atom_map, top: self.top(), base: self.base() }
    }

    pub fn index(&self) -> AtomIndex {
        AtomIndex::new(self)
    }

    /// Union of the atoms of `self` contained in `set`; equal to `set` iff compatible.
    pub fn is_compatible(&self, set: &ClopenSet) -> bool {
        self.atoms().all(|(_, _, a)| a.is_subset(set) || a.is_disjoint(set))
    }

    /// `(#atoms ⊆ u) - (#atoms ⊆ v)` per column.
    pub fn imbalance(&self, u: &ClopenSet, v: &ClopenSet) -> Vec<i64> {
        self.columns
            .iter()
            .map(|c| {
                let nu = c.iter().filter(|a| a.is_subset(u)).count() as i64;
                let nv = c.iter().filter(|a| a.is_subset(v)).count() as i64;
                nu - nv
            })
            .collect()
    }

    /// DOT rendering: one cluster per column, atom-map edges, and a dashed top → base edge.
    pub fn to_dot(&self, k: &MeasureFamily) -> String {
        let mut out = String::from("digraph kr {\n  rankdir=BT;\n  node [shape=box];\n");
        for (i, col) in self.columns.iter().enumerate() {
            let _ = writeln!(out, "  subgraph cluster_{i} {{\n    label=\"column {i}\";");
            for (r, a) in col.iter().enumerate() {
                let _ = writeln!(out, "    a{i}_{r} [label=\"{a}\\n{}\"];", render_vec(&k.eval(a)));
            }
            out.push_str("  }\n");
            for r in 1..col.len() {
                let _ = writeln!(out, "  a{i}_{} -> a{i}_{r};", r - 1);
            }
        }
        let _ = writeln!(out, "  top [shape=ellipse, label=\"top: {}\"];", self.top());
        let _ = writeln!(out, "  base [shape=ellipse, label=\"base: {}\"];", self.base());
        out.push_str("  top -> base [style=dashed];\n}\n");
        out
    }
}

fn union_all<'a>(sets: impl Iterator<Item = &'a ClopenSet>) -> ClopenSet {
    ClopenSet::normalize(sets.flat_map(|s| s.leaves().iter().copied()))
}

/// Whether `s` is obtained from `t` by cutting and stacking: bases and tops shrink, and every
/// column of `s` is a concatenation of runs, each run tracing one full column of `t` level by
/// level.
pub fn refines(s: &KRPartition, t: &KRPartition) -> bool {
    if !s.base().is_subset(&t.base()) || !s.top().is_subset(&t.top()) {
        return false;
    }
    let index = t.index();
    s.columns.iter().all(|col| run_decomposition(&index, t, col).is_some())
}

/// Columns of `t` traced, in order, by a column of a refinement of `t`.
pub fn run_decomposition(index: &AtomIndex, t: &KRPartition, col: &[ClopenSet]) -> Option<Vec<usize>> {
    let mut runs = Vec::new();
    let mut p = 0;
    while p < col.len() {
        let (i, r) = index.locate(t, &col[p])?;
        if r != 0 {
            return None;
        }
        let height = t.columns[i].len();
        if p + height > col.len() {
            return None;
        }
        for j in 1..height {
            if !col[p + j].is_subset(&t.columns[i][j]) {
                return None;
            }
        }
        runs.push(i);
        p += height;
    }
    Some(runs)
}

/// Cut a column into subcolumns: `pieces` partition the atom at `level`, and every other level
/// is cut into `~_K` copies of the pieces.
pub fn split_column(
    k: &MeasureFamily,
    col: &[ClopenSet],
    level: usize,
    pieces: &[ClopenSet],
    max_depth: usize,
) -> Result<Vec<Column>, TowerError> {
    debug_assert_eq!(&union_all(pieces.iter()), &col[level]);
    if pieces.len() <= 1 {
        return Ok(vec![col.to_vec()]);
    }
    let mut out: Vec<Column> = vec![Vec::with_capacity(col.len()); pieces.len()];
    for (j, atom) in col.iter().enumerate() {
        let cut = if j == level {
            pieces.to_vec()
        } else {
            oracles::transport_partition(k, pieces, atom, max_depth)?
        };
        for (sub, piece) in out.iter_mut().zip(cut) {
            sub.push(piece);
        }
    }
    Ok(out)
}

fn nonempty(pieces: impl IntoIterator<Item = ClopenSet>) -> Vec<ClopenSet> {
    pieces.into_iter().filter(|p| !p.is_empty()).collect()
}

/// Stack the columns of `upper` on top of the columns of `lower`. The union of the tops of
/// `lower` must be `~_K` the union of the bases of `upper`: it is cut into copies of the upper
/// bases, the lower columns are cut accordingly at their tops, the upper columns at their bases,
/// and matching pieces are concatenated.
pub fn stack_families(
    k: &MeasureFamily,
    lower: Vec<Column>,
    upper: Vec<Column>,
    max_depth: usize,
) -> Result<Vec<Column>, TowerError> {
    let tops = union_all(lower.iter().map(|c| c.last().expect("nonempty column")));
    let bases: Vec<ClopenSet> = upper.iter().map(|c| c[0].clone()).collect();
    if k.eval(&tops) != k.eval(&union_all(bases.iter())) {
        return Err(TowerError::Internal("stacked families have different masses".into()));
    }
    let targets = oracles::transport_partition(k, &bases, &tops, max_depth)?;
    // pieces[l][u] = part of lower column l's top that goes under upper column u
    let pieces: Vec<Vec<ClopenSet>> = lower
        .iter()
        .map(|c| {
            let top = c.last().expect("nonempty column");
            targets.iter().map(|t| top.intersect(t)).collect()
        })
        .collect();
    let mut lower_parts: Vec<Vec<Option<Column>>> = Vec::with_capacity(lower.len());
    for (l, col) in lower.iter().enumerate() {
        let used: Vec<usize> = (0..upper.len()).filter(|&u| !pieces[l][u].is_empty()).collect();
        let cut: Vec<ClopenSet> = used.iter().map(|&u| pieces[l][u].clone()).collect();
        let subs = split_column(k, col, col.len() - 1, &cut, max_depth)?;
        let mut row = vec![None; upper.len()];
        for (u, sub) in used.into_iter().zip(subs) {
            row[u] = Some(sub);
        }
        lower_parts.push(row);
    }
    let mut upper_parts: Vec<Vec<Option<Column>>> = Vec::with_capacity(upper.len());
    for (u, col) in upper.iter().enumerate() {
        let used: Vec<usize> = (0..lower.len()).filter(|&l| !pieces[l][u].is_empty()).collect();
        let src: Vec<ClopenSet> = used.iter().map(|&l| pieces[l][u].clone()).collect();
        let cut = oracles::transport_partition(k, &src, &col[0], max_depth)?;
        let subs = split_column(k, col, 0, &cut, max_depth)?;
        let mut row = vec![None; lower.len()];
        for (l, sub) in used.into_iter().zip(subs) {
            row[l] = Some(sub);
        }
        upper_parts.push(row);
    }
    let mut out = Vec::new();
    for (l, row) in lower_parts.iter_mut().enumerate() {
        for (u, part) in row.iter_mut().enumerate() {
            if let Some(mut col) = part.take() {
                col.extend(upper_parts[u][l].take().expect("matching upper piece"));
                out.push(col);
            }
        }
    }
    Ok(out)
}

/// Depth `d` with `2^-d < eps`.
fn cylinder_depth_below(eps: &BigRational) -> usize {
    (0..).find(|&d| dyadic(d) < *eps).expect("eps is positive")
}

/// The length-`d` cylinder containing the first leaf of `a` (or the leftmost one below it).
fn first_cylinder(a: &ClopenSet, d: usize) -> CylinderWord {
    let leaf = a.leaves()[0];
    if leaf.len() >= d {
        leaf.prefix(d)
    } else {
        leaf.extensions(d).next().expect("at least one extension")
    }
}

/// Two disjoint `~_K` parts of `z`: a small cylinder at its left end and a copy of it.
fn find_twin(k: &MeasureFamily, z: &ClopenSet, max_depth: usize) -> Result<(ClopenSet, ClopenSet), TowerError> {
    let mut w = z.leaves()[0];
    let mut last_err = None;
    while w.len() < max_depth.max(z.depth() + 1) {
        w = w.child(0);
        let p = ClopenSet::cylinder(w);
        let rest = z.minus(&p);
        match oracles::select_measure(k, &k.eval(&p), &rest, max_depth) {
            Ok(c) => return Ok((p, c)),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err
        .map(TowerError::from)
        .unwrap_or_else(|| TowerError::Internal(format!("cannot split {z} into twins"))))
}

/// Cut `col` at `level` by the given pieces and return (subcolumn for the first piece, rest).
fn peel(
    k: &MeasureFamily,
    col: &[ClopenSet],
    level: usize,
    piece: &ClopenSet,
    max_depth: usize,
) -> Result<(Column, Vec<Column>), TowerError> {
    let pieces = nonempty([piece.clone(), col[level].minus(piece)]);
    let mut subs = split_column(k, col, level, &pieces, max_depth)?;
    let first = subs.remove(0);
    Ok((first, subs))
}

/// A refinement of `t` whose base and top both have diameter `< eps`.
///
/// Column 0 is cut until its base is small and its top sits, together with the top of a
/// second column 1 of the same mass, inside one small cylinder. The base is then split into
/// `n` equal classes `C_0 ⊆ B_{0,0}`, `C_1 ⊆ B_{1,0}`, `C_2..C_{n-1}` plus an error set
/// `E ⊆ B_{0,0}`; the columns over the classes are stacked in class order (column 0 first,
/// column 1 last) and the columns over `E` are kept aside.
pub fn refine_small_base_top(
    k: &MeasureFamily,
    t: &KRPartition,
    eps: &BigRational,
    max_depth: usize,
) -> Result<KRPartition, TowerError> {
    if !eps.is_zero() && t.base().diameter() < *eps && t.top().diameter() < *eps {
        return Ok(t.clone());
    }
    if eps <= &BigRational::zero() {
        return Err(TowerError::Internal("eps must be positive".into()));
    }
    let depth = cylinder_depth_below(eps);
    let mut others: Vec<Column> = t.columns.clone();

    // (a) a small cylinder holding part of the top, and the column through it
    let top_cyl = ClopenSet::cylinder(first_cylinder(&t.top(), depth));
    let i = others
        .iter()
        .position(|c| !c.last().unwrap().is_disjoint(&top_cyl))
        .expect("the top meets its first cylinder");
    let col = others.remove(i);
    let h = col.len();
    let z = col[h - 1].intersect(&top_cyl);
    let (zcol, rest) = peel(k, &col, h - 1, &z, max_depth)?;
    others.extend(rest);

    // two columns whose tops are equivalent parts of z
    let (ta, tb) = find_twin(k, &z, max_depth)?;
    let cut = nonempty([ta.clone(), tb.clone(), z.minus(&ta).minus(&tb)]);
    let mut subs = split_column(k, &zcol, h - 1, &cut, max_depth)?.into_iter();
    let col_a = subs.next().expect("twin a");
    let mut col_b = subs.next().expect("twin b");
    others.extend(subs);

    // small base for column 0, then re-equalize the top of column 1
    let base_cyl = ClopenSet::cylinder(first_cylinder(&col_a[0], depth));
    let (col0, rest) = peel(k, &col_a, 0, &col_a[0].intersect(&base_cyl), max_depth)?;
    others.extend(rest);
    let top0 = col0.last().unwrap().clone();
    if top0 != ta {
        let c = oracles::select_measure(k, &k.eval(&top0), &tb, max_depth)?;
        let (b, rest) = peel(k, &col_b, col_b.len() - 1, &c, max_depth)?;
        col_b = b;
        others.extend(rest);
    }
    let col1 = col_b;

    // (c) number of classes
    let base = t.base();
    let b00 = col0[0].clone();
    let b10 = col1[0].clone();
    let mass_b = k.eval(&base);
    let mass_00 = k.eval(&b00);
    let n = mass_b
        .iter()
        .zip(&mass_00)
        .map(|(b, c)| rational::ceil(&(b / c)))
        .max()
        .unwrap_or_default()
        .max(BigInt::from(2));
    let n: usize = n.try_into().map_err(|_| TowerError::Internal("too many classes".into()))?;

    // (d) classes C_0..C_{n-1} of equal mass, error E ⊆ B_{0,0}
    let min_00 = mass_00.iter().min().cloned().unwrap_or_default();
    let probe = oracles::approx_divide(k, &base, n as u64, &min_00, max_depth)?;
    let m = k.eval(&probe);
    let c0 = oracles::select_measure(k, &m, &b00, max_depth)?;
    let c1 = oracles::select_measure(k, &m, &b10, max_depth)?;
    let mut free00 = b00.minus(&c0);
    let mut outside = base.minus(&b00).minus(&c1);
    let mut classes = vec![c0, c1];
    for _ in 2..n {
        let (class, rest_out) = if outside.is_empty() {
            (oracles::select_measure(k, &m, &free00, max_depth)?, ClopenSet::empty())
        } else {
            let p = oracles::pack_below(k, &outside, &m, max_depth);
            let missing = vec_sub(&m, &k.eval(&p));
            let fill = oracles::select_measure(k, &missing, &free00, max_depth)?;
            (p.union(&fill), outside.minus(&p))
        };
        free00 = free00.minus(&class);
        outside = rest_out;
        classes.push(class);
    }
    if !outside.is_empty() {
        return Err(OracleError::DivisibilityFailure {
            max_depth,
            set: base.to_string(),
            n: n as u64,
            eps: rational::render(&min_00),
        }
        .into());
    }
    let error = free00;
    debug!("refine_small_base_top: n = {n}, class mass {}, error {error}", render_vec(&m));

    // (e) cut every column at its base by the classes and the error set
    let mut by_class: Vec<Vec<Column>> = vec![Vec::new(); n];
    let mut error_cols = Vec::new();
    let mut all = vec![col0, col1];
    all.extend(others);
    for col in all {
        let mut tags = Vec::new();
        let mut pieces = Vec::new();
        for (j, c) in classes.iter().enumerate() {
            let p = col[0].intersect(c);
            if !p.is_empty() {
                tags.push(Some(j));
                pieces.push(p);
            }
        }
        let p = col[0].intersect(&error);
        if !p.is_empty() {
            tags.push(None);
            pieces.push(p);
        }
        for (tag, sub) in tags.into_iter().zip(split_column(k, &col, 0, &pieces, max_depth)?) {
            match tag {
                Some(j) => by_class[j].push(sub),
                None => error_cols.push(sub),
            }
        }
    }

    // (f) favorable-case stacking, column 1's class last
    let mut by_class = by_class.into_iter();
    let mut stack = by_class.next().expect("class 0");
    let last = by_class.next().expect("class 1");
    for family in by_class {
        stack = stack_families(k, stack, family, max_depth)?;
    }
    stack = stack_families(k, stack, last, max_depth)?;

    // (g) the error columns come back
    stack.extend(error_cols);
    let s = KRPartition::from_columns_unchecked(stack);
    debug_assert!(s.violations(k).is_empty());
    Ok(s)
}

/// Split columns (no stacking) until `u` and `v` are unions of atoms.
pub fn make_compatible(
    k: &MeasureFamily,
    t: &KRPartition,
    sets: &[&ClopenSet],
    max_depth: usize,
) -> Result<KRPartition, TowerError> {
    let mut out = Vec::new();
    for col in &t.columns {
        let mut work = vec![col.clone()];
        for level in 0..col.len() {
            let mut next = Vec::new();
            for c in work {
                let mut pieces = vec![c[level].clone()];
                for s in sets {
                    pieces = pieces
                        .into_iter()
                        .flat_map(|p| nonempty([p.intersect(s), p.minus(s)]))
                        .collect();
                }
                next.extend(split_column(k, &c, level, &pieces, max_depth)?);
            }
            work = next;
        }
        out.extend(work);
    }
    Ok(KRPartition::from_columns_unchecked(out))
}

/// Stack every column of `lower` on part of the columns of `candidates`, choosing the part by
/// goodness when the candidates carry strictly more mass. Returns the new columns and the
/// unused remainders of the candidates.
fn stack_onto_candidates(
    k: &MeasureFamily,
    lower: Vec<Column>,
    candidates: Vec<Column>,
    max_depth: usize,
) -> Result<(Vec<Column>, Vec<Column>), TowerError> {
    let b = union_all(lower.iter().map(|c| &c[0]));
    let b_prime = union_all(candidates.iter().map(|c| &c[0]));
    let (mb, mbp) = (k.eval(&b), k.eval(&b_prime));
    if !vec_le(&mb, &mbp) {
        return Err(TowerError::Internal("balancing: imbalanced class carries less mass".into()));
    }
    let landing = if mb == mbp { b_prime } else { oracles::select_measure(k, &mb, &b_prime, max_depth)? };
    let mut upper = Vec::new();
    let mut unused = Vec::new();
    for col in candidates {
        let inside = col[0].intersect(&landing);
        if inside.is_empty() {
            unused.push(col);
        } else if inside == col[0] {
            upper.push(col);
        } else {
            let (used, rest) = peel(k, &col, 0, &inside, max_depth)?;
            upper.push(used);
            unused.extend(rest);
        }
    }
    Ok((stack_families(k, lower, upper, max_depth)?, unused))
}

/// Like [`balance_columns`], also returning the maximal imbalance before each descent round.
pub fn balance_columns_traced(
    k: &MeasureFamily,
    t: &KRPartition,
    u: &ClopenSet,
    v: &ClopenSet,
    max_depth: usize,
) -> Result<(KRPartition, Vec<u64>), TowerError> {
    if !k.sim(u, v) {
        return Err(OracleError::NotEquivalent(u.to_string(), v.to_string()).into());
    }
    let mut s = make_compatible(k, t, &[u, v], max_depth)?;
    let mut trace = Vec::new();
    loop {
        let n_c = s.imbalance(u, v);
        let n_max = n_c.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0);
        trace.push(n_max);
        debug!("balance_columns: maximal imbalance {n_max} over {} columns", n_c.len());
        if n_max == 0 {
            break;
        }
        let target = n_max as i64;
        for sign in [1i64, -1] {
            let n_c = s.imbalance(u, v);
            if !n_c.contains(&(sign * target)) {
                continue;
            }
            let mut lower = Vec::new();
            let mut candidates = Vec::new();
            let mut rest = Vec::new();
            for (col, n) in s.columns.into_iter().zip(n_c) {
                if n == sign * target {
                    lower.push(col);
                } else if n.signum() == -sign {
                    candidates.push(col);
                } else {
                    rest.push(col);
                }
            }
            let (stacked, unused) = stack_onto_candidates(k, lower, candidates, max_depth)?;
            rest.extend(stacked);
            rest.extend(unused);
            s = KRPartition::from_columns_unchecked(rest);
        }
        let after = s.imbalance(u, v).iter().map(|x| x.unsigned_abs()).max().unwrap_or(0);
        if after >= n_max {
            return Err(TowerError::Internal(format!("imbalance did not decrease ({n_max} -> {after})")));
        }
    }
    debug_assert!(s.violations(k).is_empty());
    Ok((s, trace))
}

/// A refinement of `t` compatible with `u ~_K v` in which every column has as many atoms inside
/// `u` as inside `v`.
pub fn balance_columns(
    k: &MeasureFamily,
    t: &KRPartition,
    u: &ClopenSet,
    v: &ClopenSet,
    max_depth: usize,
) -> Result<KRPartition, TowerError> {
    balance_columns_traced(k, t, u, v, max_depth).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::q;

    fn set(s: &str) -> ClopenSet {
        s.parse().unwrap()
    }

    fn cols(levels: &[&[&str]]) -> Vec<Column> {
        levels.iter().map(|c| c.iter().map(|a| set(a)).collect()).collect()
    }

    #[test]
    fn from_columns_examples() {
        let u = MeasureFamily::uniform();
        let t = KRPartition::from_columns(&u, cols(&[&["X"]])).unwrap();
        assert_eq!(t.base(), ClopenSet::full());
        assert_eq!(t.top(), ClopenSet::full());
        let t = KRPartition::from_columns(&u, cols(&[&["0", "1"]])).unwrap();
        assert_eq!(t.base(), set("0"));
        assert_eq!(t.top(), set("1"));
        match KRPartition::from_columns(&u, cols(&[&["0", "10"]])) {
            Err(TowerError::Invalid(v)) => {
                assert!(v.iter().any(|x| matches!(x, Violation::NotAPartition(_))));
                assert!(v.iter().any(|x| matches!(x, Violation::NotEquivalentColumn { .. })));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partial_automorphism_examples() {
        let p = KRPartition::trivial().partial_automorphism();
        assert!(p.atom_map.is_empty());
        assert_eq!((p.top, p.base), (ClopenSet::full(), ClopenSet::full()));
        let t = KRPartition::from_columns_unchecked(cols(&[&["0", "1"]]));
        let p = t.partial_automorphism();
        assert_eq!(p.atom_map, vec![(set("0"), set("1"))]);
        assert_eq!((p.top, p.base), (set("1"), set("0")));
        let t = KRPartition::from_columns_unchecked(cols(&[&["0"], &["1"]]));
        let p = t.partial_automorphism();
        assert!(p.atom_map.is_empty());
        assert_eq!((p.top, p.base), (ClopenSet::full(), ClopenSet::full()));
    }

    #[test]
    fn refines_examples() {
        let t = KRPartition::from_columns_unchecked(cols(&[&["0", "1"]]));
        assert!(refines(&t, &t));
        assert!(!refines(&KRPartition::trivial(), &t));
        let two = KRPartition::from_columns_unchecked(cols(&[&["0"], &["1"]]));
        assert!(refines(&t, &two));
        assert!(refines(&t, &KRPartition::trivial()));
        let wrong_order = KRPartition::from_columns_unchecked(cols(&[&["1", "0"]]));
        assert!(!refines(&wrong_order, &t));
    }

    #[test]
    fn split_and_stack() {
        let u = MeasureFamily::uniform();
        let col = cols(&[&["0", "1"]]).remove(0);
        let subs = split_column(&u, &col, 0, &[set("00"), set("01")], 8).unwrap();
        assert_eq!(subs, cols(&[&["00", "10"], &["01", "11"]]));
        let stacked = stack_families(&u, cols(&[&["00"]]), cols(&[&["1"]]), 8).unwrap_err();
        assert!(matches!(stacked, TowerError::Internal(_)));
        let stacked = stack_families(&u, cols(&[&["00"], &["01"]]), cols(&[&["1"]]), 8).unwrap();
        assert_eq!(stacked, cols(&[&["00", "10"], &["01", "11"]]));
    }

    #[test]
    fn small_base_top_vacuous_and_trivial() {
        let u = MeasureFamily::uniform();
        let t = KRPartition::from_columns_unchecked(cols(&[&["0", "1"]]));
        assert_eq!(refine_small_base_top(&u, &t, &q(2, 1), 10).unwrap(), t);
        let s = refine_small_base_top(&u, &KRPartition::trivial(), &q(1, 2), 10).unwrap();
        assert!(s.violations(&u).is_empty());
        assert!(refines(&s, &KRPartition::trivial()));
        assert!(s.base().diameter() < q(1, 2));
        assert!(s.top().diameter() < q(1, 2));
    }

    #[test]
    fn small_base_top_on_a_column() {
        let u = MeasureFamily::uniform();
        let t = KRPartition::from_columns_unchecked(cols(&[&["0", "1"]]));
        let s = refine_small_base_top(&u, &t, &q(1, 4), 10).unwrap();
        assert!(s.violations(&u).is_empty());
        assert!(refines(&s, &t));
        assert!(s.base().diameter() < q(1, 4));
        assert!(s.top().diameter() < q(1, 4));
    }

    #[test]
    fn balance_examples() {
        let u = MeasureFamily::uniform();
        let x = KRPartition::trivial();
        let s = balance_columns(&u, &x, &set("0"), &set("1"), 8).unwrap();
        assert!(s == KRPartition::from_columns_unchecked(cols(&[&["0", "1"]]))
            || s == KRPartition::from_columns_unchecked(cols(&[&["1", "0"]])));
        let s = balance_columns(&u, &x, &set("01"), &set("01"), 8).unwrap();
        assert!(s.is_compatible(&set("01")));
        let (s, trace) = balance_columns_traced(&u, &x, &set("00,11"), &set("01,10"), 10).unwrap();
        assert!(s.violations(&u).is_empty());
        assert!(refines(&s, &x));
        assert!(s.imbalance(&set("00,11"), &set("01,10")).iter().all(|n| *n == 0));
        assert!(trace.windows(2).all(|w| w[1] < w[0]));
        assert!(matches!(
            balance_columns(&u, &x, &set("0"), &set("01"), 8),
            Err(TowerError::Oracle(OracleError::NotEquivalent(..)))
        ));
    }

    #[test]
    fn dot_export_mentions_every_atom() {
        let u = MeasureFamily::uniform();
        let t = KRPartition::from_columns_unchecked(cols(&[&["00", "01"], &["1"]]));
        let dot = t.to_dot(&u);
        assert!(dot.contains("a0_0 -> a0_1"));
        assert!(dot.contains("top -> base [style=dashed]"));
        assert!(dot.contains("label=\"1\\n(1/2)\""));
    }
}
