//! Command-line front end. Exit codes: 0 success, 1 usage / I/O / parse error, 2 axiom or oracle
//! failure, 3 verification failure.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use num_rational::BigRational;
use num_traits::Signed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::builder::{build_saturated, LoadError, TowerSequence};
use crate::clopen::{canonical_enumeration, ClopenSet, CylinderWord};
use crate::measure::{parse_family, render_vec, MeasureFamily};
use crate::oracles::{self, OracleError};
use crate::rational;
use crate::verify::verify_sequence;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_AXIOM: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "cantordyn", version, about = "Build and check minimal Cantor homeomorphisms with a prescribed simplex of invariant measures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check a measure family and probe goodness and divisibility on small sets.
    Validate(RunConfig),
    /// Build a tower sequence; writes tower.json, one DOT file per stage and build.log.
    Build(RunConfig),
    /// Verify a serialized tower sequence (or a fresh build) and write verify.json.
    Verify(TowerArgs),
    /// Write one DOT file per stage of a serialized tower sequence (or a fresh build).
    ExportDot(TowerArgs),
    /// Run a single oracle call and print its witness.
    Oracle(OracleArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunConfig {
    /// Measure family (TOML).
    #[arg(long)]
    pub family: PathBuf,
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u64).range(1..=64))]
    pub stages: u64,
    /// Largest depth of the sets enumerated as pairs.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..=5))]
    pub depth_cap: u64,
    /// Largest cylinder depth the oracles may use.
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(1..=63))]
    pub max_depth: u64,
    /// Tolerance for first-return division and oracle calls, as "num/den".
    #[arg(long, default_value = "1/4", value_parser = parse_positive)]
    pub eps: BigRational,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TowerArgs {
    #[command(flatten)]
    pub config: RunConfig,
    /// A tower.json written by `build`; without it the sequence is rebuilt from the config.
    #[arg(long)]
    pub tower: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum OracleOp {
    Goodness,
    Divide,
    Affine,
}

#[derive(Args, Debug, Clone)]
pub struct OracleArgs {
    #[command(flatten)]
    pub config: RunConfig,
    #[arg(long, value_enum)]
    pub op: OracleOp,
    #[arg(long, default_value = "X")]
    pub a: ClopenSet,
    #[arg(long, default_value = "X")]
    pub b: ClopenSet,
    #[arg(long, default_value_t = 2)]
    pub n: u64,
    /// Value of the step function on `a` (0 elsewhere), for `affine`.
    #[arg(long, default_value = "1/2", value_parser = rational::parse)]
    pub value: BigRational,
}

fn parse_positive(s: &str) -> Result<BigRational, String> {
    let x = rational::parse(s)?;
    if x.is_positive() {
        Ok(x)
    } else {
        Err(format!("{s:?} must be positive"))
    }
}

/// A failed command: exit code plus message.
struct Failure(i32, String);

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure(EXIT_USAGE, format!("I/O error: {e}"))
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Validate(c) => cmd_validate(c),
        Command::Build(c) => cmd_build(c),
        Command::Verify(t) => cmd_verify(t),
        Command::ExportDot(t) => cmd_export_dot(t),
        Command::Oracle(o) => cmd_oracle(o),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

fn load_family(path: &Path) -> Result<MeasureFamily, Failure> {
    let src = fs::read_to_string(path).map_err(|e| Failure(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    parse_family(&src).map_err(|e| Failure(EXIT_USAGE, format!("{}: {e}", path.display())))
}

/// Write via a temporary file and rename, so readers never see partial output.
fn write_atomic(dir: &Path, name: &str, contents: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents)?;
    fs::rename(tmp, dir.join(name))
}

fn emit(config: &RunConfig, name: &str, contents: &str) -> Result<(), Failure> {
    match &config.out {
        Some(dir) => Ok(write_atomic(dir, name, contents)?),
        None => Ok(()),
    }
}

fn to_json<T: Serialize>(x: &T) -> String {
    serde_json::to_string_pretty(x).expect("serializable") + "\n"
}

// ---- validate ----

#[derive(Serialize)]
struct Probe {
    kind: &'static str,
    a: String,
    b: String,
    ok: bool,
    witness: Option<String>,
    error: Option<String>,
}

/// Goodness probes on every strictly dominated pair of depth ≤ 2, a seeded sample of depth-3
/// pairs, and division of every depth ≤ 2 set into 2 and 3 parts.
fn probes(k: &MeasureFamily, c: &RunConfig) -> Vec<Probe> {
    let max_depth = c.max_depth as usize;
    let mut out = Vec::new();
    let goodness = |a: &ClopenSet, b: &ClopenSet, out: &mut Vec<Probe>| {
        if !k.dominated(a, b) {
            return;
        }
        let r = oracles::goodness_select(k, a, b, max_depth);
        out.push(Probe {
            kind: "goodness",
            a: a.to_string(),
            b: b.to_string(),
            ok: r.is_ok(),
            witness: r.as_ref().ok().map(ToString::to_string),
            error: r.err().map(|e| e.to_string()),
        });
    };
    let small: Vec<ClopenSet> = canonical_enumeration(2).collect();
    for a in &small {
        for b in &small {
            goodness(a, b, &mut out);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let words: Vec<CylinderWord> = CylinderWord::ROOT.extensions(3).collect();
    let random_set = |rng: &mut ChaCha8Rng| {
        ClopenSet::normalize(words.iter().copied().filter(|_| rng.gen_bool(0.5)))
    };
    for _ in 0..32 {
        let (a, b) = (random_set(&mut rng), random_set(&mut rng));
        goodness(&a, &b, &mut out);
    }
    for a in small.iter().filter(|a| !a.is_empty()) {
        for n in [2u64, 3] {
            let r = oracles::approx_divide(k, a, n, &c.eps, max_depth);
            out.push(Probe {
                kind: "divide",
                a: a.to_string(),
                b: n.to_string(),
                ok: r.is_ok(),
                witness: r.as_ref().ok().map(ToString::to_string),
                error: r.err().map(|e| e.to_string()),
            });
        }
    }
    out
}

fn cmd_validate(c: &RunConfig) -> Result<(), Failure> {
    let k = load_family(&c.family)?;
    let structural = k.validate();
    let probes = probes(&k, c);
    let failed: Vec<&Probe> = probes.iter().filter(|p| !p.ok).collect();
    let report = json!({
        "structural": structural,
        "probes": probes.len(),
        "failures": failed,
        "seed": c.seed,
    });
    emit(c, "validation.json", &to_json(&report))?;
    match failed.first() {
        None => {
            println!("ok: {} generators, {} probes passed", structural.generators, probes.len());
            Ok(())
        }
        Some(p) => {
            for p in &failed {
                println!("{} probe ({}, {}): {}", p.kind, p.a, p.b, p.error.clone().unwrap_or_default());
            }
            Err(Failure(EXIT_AXIOM, p.error.clone().unwrap_or_default()))
        }
    }
}

// ---- build / verify / export ----

fn build(k: &MeasureFamily, c: &RunConfig) -> Result<TowerSequence, Failure> {
    build_saturated(k, c.stages as usize, c.depth_cap as usize, c.max_depth as usize)
        .map_err(|e| Failure(EXIT_AXIOM, e.to_string()))
}

fn write_dots(k: &MeasureFamily, c: &RunConfig, g: &TowerSequence) -> Result<(), Failure> {
    for (n, s) in g.stages.iter().enumerate() {
        emit(c, &format!("stage_{}.dot", n + 1), &s.to_dot(k))?;
    }
    Ok(())
}

fn cmd_build(c: &RunConfig) -> Result<(), Failure> {
    let k = load_family(&c.family)?;
    let g = build(&k, c)?;
    let mut log = String::new();
    for (n, s) in g.stages.iter().enumerate() {
        let (u, v) = &g.pairs[n];
        let _ = writeln!(
            log,
            "stage {}: pair ({u}, {v}); {} columns, {} atoms; base diameter {}, top diameter {}",
            n + 1,
            s.columns().len(),
            s.atom_count(),
            rational::render(&s.base().diameter()),
            rational::render(&s.top().diameter()),
        );
    }
    info!("built {} stages", g.len());
    emit(c, "tower.json", &g.to_json(&k))?;
    write_dots(&k, c, &g)?;
    emit(c, "build.log", &log)?;
    print!("{log}");
    Ok(())
}

fn load_or_build(k: &MeasureFamily, t: &TowerArgs) -> Result<TowerSequence, Failure> {
    let Some(path) = &t.tower else {
        return build(k, &t.config);
    };
    let src = fs::read_to_string(path).map_err(|e| Failure(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    match TowerSequence::from_json(&src, k) {
        Ok(g) if !g.is_empty() => Ok(g),
        Ok(_) => Err(Failure(EXIT_USAGE, format!("{}: no stages", path.display()))),
        Err(e @ LoadError::Parse(_)) => Err(Failure(EXIT_USAGE, format!("{}: {e}", path.display()))),
        Err(e @ LoadError::MeasureMismatch { .. }) => Err(Failure(EXIT_VERIFY, format!("recorded measure violated: {e}"))),
    }
}

fn cmd_verify(t: &TowerArgs) -> Result<(), Failure> {
    let k = load_family(&t.config.family)?;
    let g = load_or_build(&k, t)?;
    let report = verify_sequence(&k, &g, &t.config.eps);
    emit(&t.config, "verify.json", &to_json(&report))?;
    println!("stage  atoms  base     top      vertices  collapse  minimal  witness");
    for s in &report.stages {
        println!(
            "{:>5}  {:>5}  {:<7}  {:<7}  {:>8}  {:<8}  {:<7}  {}",
            s.stage,
            s.atoms,
            rational::render(&s.base_diameter),
            rational::render(&s.top_diameter),
            s.cone_vertices,
            rational::render(&s.cone_collapse),
            s.minimal,
            s.witness.as_ref().is_some_and(|w| w.verified),
        );
    }
    if let Some(f) = &report.first_return {
        match &f.remainder {
            Ok(r) => println!("first return, n = {}: remainder {r}", f.n),
            Err(e) => println!("first return, n = {}: {e}", f.n),
        }
    }
    match report.failure() {
        None => Ok(()),
        Some(msg) => Err(Failure(EXIT_VERIFY, msg)),
    }
}

fn cmd_export_dot(t: &TowerArgs) -> Result<(), Failure> {
    let k = load_family(&t.config.family)?;
    let g = load_or_build(&k, t)?;
    if t.config.out.is_none() {
        print!("{}", g.last().to_dot(&k));
    }
    write_dots(&k, &t.config, &g)
}

// ---- oracle ----

fn oracle_failure(e: OracleError) -> Failure {
    match e {
        OracleError::InvalidArgument(_) => Failure(EXIT_USAGE, e.to_string()),
        _ => Failure(EXIT_AXIOM, e.to_string()),
    }
}

fn cmd_oracle(o: &OracleArgs) -> Result<(), Failure> {
    let k = load_family(&o.config.family)?;
    let max_depth = o.config.max_depth as usize;
    let witness = match o.op {
        OracleOp::Goodness => oracles::goodness_select(&k, &o.a, &o.b, max_depth),
        OracleOp::Divide => oracles::approx_divide(&k, &o.a, o.n, &o.config.eps, max_depth),
        OracleOp::Affine => {
            let f: Vec<(ClopenSet, BigRational)> =
                [(o.a.clone(), o.value.clone()), (o.a.complement(), BigRational::default())]
                    .into_iter()
                    .filter(|(s, _)| !s.is_empty())
                    .collect();
            oracles::affine_approx(&k, &f, &o.config.eps, max_depth)
        }
    }
    .map_err(oracle_failure)?;
    let report = json!({
        "witness": witness.to_string(),
        "measure": k.eval(&witness).iter().map(rational::render).collect::<Vec<_>>(),
    });
    emit(&o.config, "oracle.json", &to_json(&report))?;
    println!("{witness}  {}", render_vec(&k.eval(&witness)));
    Ok(())
}
