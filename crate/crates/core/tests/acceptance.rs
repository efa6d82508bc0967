//! Acceptance run: one PASS/FAIL line per criterion. Every expected value is recomputed here by
//! an independent method (exhaustive sums, direct level arithmetic) rather than read back from
//! the library.

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use cantordyn::builder::{build_saturated, enumerate_pairs, TowerSequence};
use cantordyn::cli;
use cantordyn::oracles::{self, OracleError};
use cantordyn::rational::{dyadic, q, render};
use cantordyn::tower::{balance_columns_traced, refines, KRPartition};
use cantordyn::verify::{first_return_divide, invariant_cone, minimality_check, saturation_witness, MinimalityCertificate};
use cantordyn::{ClopenSet, CylinderWord, MeasureFamily, TreeMeasure};
use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn set(s: &str) -> ClopenSet {
    s.parse().unwrap()
}

fn akin() -> (MeasureFamily, TowerSequence, Duration) {
    let k = MeasureFamily::uniform();
    let start = Instant::now();
    let g = build_saturated(&k, 6, 3, 12).expect("Akin build");
    (k, g, start.elapsed())
}

/// Depth-`d` words as explicit strings; used to recompute masses from scratch.
fn words(d: usize) -> Vec<CylinderWord> {
    (0..1u64 << d).map(|b| CylinderWord::from_bits(d, b)).collect()
}

/// Mass of a cylinder computed from the branching weights by walking down the word.
fn cylinder_mass(mu: &TreeMeasure, w: &CylinderWord) -> BigRational {
    let mut m = BigRational::from_integer(1.into());
    for i in 0..w.len() {
        let p = mu.weight(&w.prefix(i));
        m *= if w.bit(i) == 0 { p } else { BigRational::from_integer(1.into()) - p };
    }
    m
}

fn set_mass(mu: &TreeMeasure, a: &ClopenSet) -> BigRational {
    a.leaves().iter().map(|w| cylinder_mass(mu, w)).sum()
}

/// Depth-`d` cylinders inside `a`.
fn cylinders_in(a: &ClopenSet, d: usize) -> Vec<CylinderWord> {
    words(d).into_iter().filter(|w| a.leaves().iter().any(|l| l.is_prefix_of(w))).collect()
}

/// Exhaustive subset-sum over the depth-`d` cylinders of `host`: is some union of them equal in
/// every generator to `target`? Masses are scaled to integers and every reachable sum is kept.
fn brute_force_feasible(gens: &[&TreeMeasure], target: &[BigRational], host: &ClopenSet, d: usize) -> bool {
    let cyls = cylinders_in(host, d);
    let masses: Vec<Vec<BigRational>> = cyls.iter().map(|w| gens.iter().map(|mu| cylinder_mass(mu, w)).collect()).collect();
    let mut den = BigInt::from(1);
    for x in masses.iter().flatten().chain(target) {
        den = den.lcm(x.denom());
    }
    let scale = |x: &BigRational| (x * BigRational::from_integer(den.clone())).to_integer().to_u128().unwrap();
    let goal: Vec<u128> = target.iter().map(scale).collect();
    let items: Vec<Vec<u128>> = masses.iter().map(|v| v.iter().map(scale).collect()).collect();
    let mut reach: HashSet<Vec<u128>> = HashSet::from([vec![0; gens.len()]]);
    for it in &items {
        let new: Vec<Vec<u128>> = reach
            .iter()
            .map(|s| s.iter().zip(it).map(|(a, b)| a + b).collect::<Vec<u128>>())
            .filter(|s| s.iter().zip(&goal).all(|(a, g)| a <= g))
            .collect();
        reach.extend(new);
        if reach.contains(&goal) {
            return true;
        }
    }
    reach.contains(&goal)
}

fn random_set(rng: &mut ChaCha8Rng, d: usize) -> ClopenSet {
    ClopenSet::normalize(words(d).into_iter().filter(|_| rng.gen_bool(0.5)))
}

// ---- criteria ----

fn criterion_1() -> Outcome {
    let (k, g, elapsed) = akin();
    ensure(elapsed < Duration::from_secs(60), format!("build took {elapsed:?}"))?;
    ensure(g.len() == 6, "six stages")?;
    g.check(&k).map_err(|e| e.to_string())?;
    let mu = &k.generators()[0];
    for (idx, s) in g.stages.iter().enumerate() {
        let n = idx + 1;
        for col in s.columns() {
            let m0 = set_mass(mu, &col[0]);
            ensure(col.iter().all(|a| set_mass(mu, a) == m0), format!("stage {n}: unequal column masses"))?;
        }
        let total: BigRational = s.atoms().map(|(_, _, a)| set_mass(mu, a)).sum();
        ensure(total == q(1, 1), format!("stage {n}: atoms do not have total mass 1"))?;
        if idx > 0 {
            ensure(refines(s, &g.stages[idx - 1]), format!("stage {n} does not refine stage {idx}"))?;
        }
        let (u, v) = &g.pairs[idx];
        for col in s.columns() {
            ensure(col.iter().all(|a| (a.is_subset(u) || a.is_disjoint(u)) && (a.is_subset(v) || a.is_disjoint(v))), "compatibility")?;
            let cu = col.iter().filter(|a| a.is_subset(u)).count();
            let cv = col.iter().filter(|a| a.is_subset(v)).count();
            ensure(cu == cv, format!("stage {n}: column counts {cu} vs {cv}"))?;
        }
        ensure(s.base().diameter() <= dyadic(n) && s.top().diameter() <= dyadic(n), format!("stage {n}: diameter"))?;
    }
    Ok(format!("6 stages built in {elapsed:?}, {} atoms at stage 6", g.last().atom_count()))
}

fn criterion_2() -> Outcome {
    let (k, g, _) = akin();
    let mut metrics = Vec::new();
    for n in 1..=g.len() {
        let cone = invariant_cone(&g, n);
        // independent description: one vertex per column, 1/height on its atoms
        let s = g.stage(n);
        let mut expected: Vec<Vec<BigRational>> = Vec::new();
        let mut offset = 0;
        let total = s.atom_count();
        for col in s.columns() {
            let mut v = vec![BigRational::zero(); total];
            for x in v.iter_mut().skip(offset).take(col.len()) {
                *x = q(1, col.len() as i64);
            }
            offset += col.len();
            expected.push(v);
        }
        let mut got = cone.vertices.clone();
        got.sort();
        expected.sort();
        ensure(got == expected, format!("stage {n}: cone vertices"))?;
        ensure(cone.contains_generators(&k), format!("stage {n}: generator outside the cone"))?;
        metrics.push(cone.collapse_metric(3));
    }
    ensure(metrics.windows(2).all(|w| w[1] <= w[0]), "collapse metric increased")?;
    ensure(metrics[5] <= q(1, 32), format!("stage 6 metric {}", render(&metrics[5])))?;
    Ok(format!("collapse metrics {}", metrics.iter().map(render).collect::<Vec<_>>().join(", ")))
}

fn criterion_3() -> Outcome {
    let (k, g, _) = akin();
    let pairs = enumerate_pairs(&k, 5, 3);
    ensure(pairs[..] == g.pairs[..5], "consumed pairs differ from the enumeration")?;
    for (u, v) in &pairs {
        let w = saturation_witness(&g, u, v).map_err(|e| e.to_string())?;
        w.check(&g, u, v)?;
        // recompute the image level by level
        let s = g.stage(w.stage);
        let mut image = ClopenSet::empty();
        let mut cover = ClopenSet::empty();
        for (p, e) in w.pieces.iter().zip(&w.exponents) {
            ensure(cover.is_disjoint(p), "overlapping pieces")?;
            cover = cover.union(p);
            for col in s.columns() {
                for (r, a) in col.iter().enumerate() {
                    if a.is_subset(p) && a.is_subset(u) {
                        let t = r as i64 + e;
                        ensure((0..col.len() as i64).contains(&t), "exponent leaves the column")?;
                        image = image.union(&col[t as usize]);
                    }
                }
            }
        }
        ensure(cover.is_full(), "pieces do not cover X")?;
        ensure(image == *v, format!("h({u}) = {image}, expected {v}"))?;
    }
    Ok(format!("{} witnesses, images exact", pairs.len()))
}

fn criterion_4() -> Outcome {
    let (_, g, _) = akin();
    for n in 1..=g.len() {
        ensure(minimality_check(&g, n).is_minimal(), format!("stage {n} not minimal"))?;
    }
    let k = MeasureFamily::uniform();
    let t = KRPartition::from_columns(&k, vec![vec![set("0")], vec![set("1")]]).map_err(|e| e.to_string())?;
    let split = TowerSequence::new(vec![t.clone()], vec![(ClopenSet::empty(), ClopenSet::empty())]);
    match minimality_check(&split, 1) {
        MinimalityCertificate::InvariantSet { set: inv, .. } => {
            ensure(!inv.is_empty() && !inv.is_full(), "separating set is trivial")?;
            for col in t.columns() {
                let inside = col.iter().all(|a| a.is_subset(&inv));
                let outside = col.iter().all(|a| a.is_disjoint(&inv));
                ensure(inside || outside, "separating set cuts a column")?;
            }
            Ok(format!("all 6 stages strongly connected; split tower separated by {inv}"))
        }
        other => Err(format!("two-column tower: {other:?}")),
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values = [q(1, 4), q(1, 3), q(2, 5), q(3, 5), q(2, 3), q(3, 4)];
    let mut weights = BTreeMap::new();
    for w in ["", "0", "1"] {
        weights.insert(w.parse::<CylinderWord>().unwrap(), values[rng.gen_range(0..values.len())].clone());
    }
    let second = TreeMeasure::new(weights, 2).map_err(|e| e.to_string())?;
    let families = [
        MeasureFamily::uniform(),
        MeasureFamily::new(vec![TreeMeasure::uniform(), second]).map_err(|e| e.to_string())?,
    ];
    let mut feasible = 0;
    for k in &families {
        let gens: Vec<&TreeMeasure> = k.generators().iter().collect();
        for _ in 0..100 {
            let da = rng.gen_range(1..=6);
            let db = rng.gen_range(1..=6);
            let (a, b) = (random_set(&mut rng, da), random_set(&mut rng, db));
            let target: Vec<BigRational> = gens.iter().map(|mu| set_mass(mu, &a)).collect();
            let expected = brute_force_feasible(&gens, &target, &b, 6);
            match oracles::goodness_select(k, &a, &b, 6) {
                Ok(c) => {
                    ensure(expected, format!("oracle found {c} for {a} in {b}, brute force says none"))?;
                    ensure(c.is_subset(&b), "witness not inside B")?;
                    let got: Vec<BigRational> = gens.iter().map(|mu| set_mass(mu, &c)).collect();
                    ensure(got == target, "witness mass differs")?;
                    feasible += 1;
                }
                Err(OracleError::GoodnessFailure { .. }) => {
                    ensure(!expected, format!("brute force found a subset of {b} matching {a}"))?;
                }
                Err(e) => return Err(e.to_string()),
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!("200 instances agree ({feasible} feasible) in {elapsed:?}"))
}

fn criterion_6() -> Outcome {
    let k = MeasureFamily::new(vec![TreeMeasure::uniform(), TreeMeasure::with_root_weight(q(1, 4)).unwrap()])
        .map_err(|e| e.to_string())?;
    let (a, b) = (set("00"), set("1"));
    match oracles::goodness_select(&k, &a, &b, 12) {
        Err(OracleError::GoodnessFailure { .. }) => {}
        other => return Err(format!("expected GoodnessFailure, got {other:?}")),
    }
    let gens: Vec<&TreeMeasure> = k.generators().iter().collect();
    let target: Vec<BigRational> = gens.iter().map(|mu| set_mass(mu, &a)).collect();
    for d in 1..=12 {
        ensure(!brute_force_feasible(&gens, &target, &b, d), format!("feasible at depth {d}"))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("family.toml");
    std::fs::write(&path, "[[measure]]\nweights = {}\n\n[[measure]]\ndepth_bound = 1\nweights = { \"\" = \"1/4\" }\n")
        .map_err(|e| e.to_string())?;
    let code = cli::run(["cantordyn", "validate", "--family", path.to_str().unwrap()]);
    ensure(code == 2, format!("validate exited {code}"))?;
    Ok("GoodnessFailure, infeasible at depths 1..=12, validate exits 2".into())
}

fn criterion_7() -> Outcome {
    let (k, g, _) = akin();
    let mu = &k.generators()[0];
    let d = first_return_divide(&k, &g, &ClopenSet::full(), 3, &q(1, 4)).map_err(|e| e.to_string())?;
    let m0 = set_mass(mu, &d.classes[0]);
    ensure(d.classes.iter().all(|c| set_mass(mu, c) == m0), "classes not equivalent")?;
    let mut seen = d.remainder.clone();
    for c in &d.classes {
        ensure(seen.is_disjoint(c), "classes overlap")?;
        seen = seen.union(c);
    }
    ensure(seen.is_full(), "classes and remainder do not cover X")?;
    let rem = set_mass(mu, &d.remainder);
    ensure(rem <= q(1, 4), format!("remainder {}", render(&rem)))?;
    // height-6 column of depth-3 atoms, plus [11]
    let col: Vec<ClopenSet> = ["000", "001", "010", "011", "100", "101"].iter().map(|s| set(s)).collect();
    let t = KRPartition::from_columns(&k, vec![col.clone(), vec![set("11")]]).map_err(|e| e.to_string())?;
    let tall = TowerSequence::new(vec![t], vec![(ClopenSet::empty(), ClopenSet::empty())]);
    let a = col.iter().fold(ClopenSet::empty(), |x, y| x.union(y));
    let d6 = first_return_divide(&k, &tall, &a, 3, &q(1, 2)).map_err(|e| e.to_string())?;
    ensure(d6.remainder.is_empty(), "height-6 remainder nonempty")?;
    for j in 0..3 {
        ensure(d6.classes[j] == col[j].union(&col[j + 3]), format!("class {j}"))?;
    }
    Ok(format!("remainder {} at stage 6; height-6 column divides exactly", render(&rem)))
}

fn criterion_8() -> Outcome {
    let k = MeasureFamily::uniform();
    let b = oracles::affine_approx(&k, &[(ClopenSet::full(), q(1, 3))], &q(1, 16), 12).map_err(|e| e.to_string())?;
    let m = set_mass(&k.generators()[0], &b);
    let gap = if m > q(1, 3) { &m - q(1, 3) } else { q(1, 3) - &m };
    ensure(gap <= q(1, 16), format!("|μ(B) - 1/3| = {}", render(&gap)))?;
    // greedy dyadic approximation from below at the tolerance's depth
    let greedy = q((16 / 3) as i64, 16);
    ensure(m == greedy, format!("μ(B) = {}, greedy gives {}", render(&m), render(&greedy)))?;
    Ok(format!("B = {b}, μ(B) = {}", render(&m)))
}

fn criterion_9() -> Outcome {
    let k = MeasureFamily::uniform();
    let trivial = KRPartition::trivial();
    let check_balanced = |s: &KRPartition, u: &ClopenSet, v: &ClopenSet| -> Result<(), String> {
        ensure(refines(s, &trivial), "not a refinement")?;
        for col in s.columns() {
            let cu = col.iter().filter(|a| a.is_subset(u)).count();
            let cv = col.iter().filter(|a| a.is_subset(v)).count();
            ensure(cu == cv, format!("column counts {cu} vs {cv}"))?;
            ensure(col.iter().all(|a| (a.is_subset(u) || a.is_disjoint(u)) && (a.is_subset(v) || a.is_disjoint(v))), "incompatible")?;
        }
        Ok(())
    };
    let (u, v) = (set("0"), set("1"));
    let (s, _) = balance_columns_traced(&k, &trivial, &u, &v, 8).map_err(|e| e.to_string())?;
    check_balanced(&s, &u, &v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut descents = 0;
    for _ in 0..20 {
        let d = rng.gen_range(1..=4);
        let mut cyls = words(d);
        let count = rng.gen_range(0..=cyls.len());
        let pick = |rng: &mut ChaCha8Rng, cyls: &mut Vec<CylinderWord>| {
            let mut chosen = Vec::new();
            let mut pool = cyls.clone();
            for _ in 0..count {
                chosen.push(pool.swap_remove(rng.gen_range(0..pool.len())));
            }
            let _ = cyls;
            ClopenSet::normalize(chosen)
        };
        let u = pick(&mut rng, &mut cyls);
        let v = pick(&mut rng, &mut cyls);
        let (s, trace) = balance_columns_traced(&k, &trivial, &u, &v, 12).map_err(|e| e.to_string())?;
        ensure(trace.windows(2).all(|w| w[1] < w[0]), format!("imbalance trace {trace:?} for ({u}, {v})"))?;
        ensure(trace.last() == Some(&0), "imbalance did not reach 0")?;
        check_balanced(&s, &u, &v)?;
        descents += trace.len() - 1;
    }
    Ok(format!("({{0}}, {{1}}) balanced; 20 random pairs, {descents} strictly decreasing descent steps"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("Akin build, exact invariants", criterion_1),
        ("invariant cone collapse", criterion_2),
        ("saturation witnesses", criterion_3),
        ("minimality certificates", criterion_4),
        ("goodness oracle vs brute force", criterion_5),
        ("non-good family refuted", criterion_6),
        ("first-return division", criterion_7),
        ("affine approximation", criterion_8),
        ("column balancing", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
