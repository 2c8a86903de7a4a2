//! Command-line front end. Exit codes: 0 output written, 2 input error,
//! 3 internal failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use miniscope::exec::{execute, snapshot_at_first_vuln_read, ExecConfig, Impact, Selector};
use miniscope::fuzz::{confirm_same_bug, fuzz_contexts, load_version_set, Context, FuzzConfig, Origin, SameBugVerdict};
use miniscope::ir::{parse_program, parse_testcase, Program, TestCase};
use miniscope::pipeline::{emit_report, run_pipeline, PipelineConfig, PipelineInput};
use miniscope::sym::{explore, ExploreConfig};
use miniscope::taint::{estimate_hidden_impacts, locate_vuln_point, Estimate, TaintLimits};

#[derive(Parser)]
#[command(name = "miniscope", version, about = "Escalate the impact of memory-safety bugs in MiniKernel programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full pipeline: reproduce, fuzz (with --versions), estimate, explore, report.
    Run(RunArgs),
    /// Execute the PoC under the sanitizer and list its impacts.
    Reproduce(ReproduceArgs),
    /// Search for new contexts and confirm them against a version set.
    Fuzz(FuzzArgs),
    /// Estimate hidden impacts from a sanitizer report.
    Taint(TaintArgs),
    /// Explore symbolically from the snapshot of an estimate's anchor.
    Sym(SymArgs),
}

#[derive(Args)]
struct Io {
    #[arg(long)]
    program: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    io: Io,
    #[arg(long)]
    poc: PathBuf,
    /// Version set directory; enables fuzzing.
    #[arg(long)]
    versions: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    guidance_threshold: u64,
    #[arg(long, default_value_t = 50_000)]
    exec_budget: u64,
    #[arg(long, default_value_t = 10_000)]
    state_budget: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Disable impact feedback while fuzzing.
    #[arg(long)]
    coverage_only: bool,
}

#[derive(Args)]
struct ReproduceArgs {
    #[command(flatten)]
    io: Io,
    #[arg(long)]
    poc: PathBuf,
    /// Stop at the first recoverable impact.
    #[arg(long)]
    single_shot: bool,
}

#[derive(Args)]
struct FuzzArgs {
    #[command(flatten)]
    io: Io,
    #[arg(long)]
    poc: PathBuf,
    #[arg(long)]
    versions: Option<PathBuf>,
    #[arg(long, default_value_t = 50_000)]
    exec_budget: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    coverage_only: bool,
}

#[derive(Args)]
struct TaintArgs {
    #[command(flatten)]
    io: Io,
    /// An impact, a list of impacts, or the output of `reproduce`.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SymArgs {
    #[command(flatten)]
    io: Io,
    #[arg(long)]
    poc: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long, default_value_t = 40)]
    threshold: u64,
    #[arg(long, default_value_t = 10_000)]
    state_budget: u64,
    /// Explore without the estimate's guidance.
    #[arg(long)]
    unguided: bool,
}

enum Failure {
    Input(String),
    Internal(String),
}

type Res<T> = Result<T, Failure>;

fn input<E: std::fmt::Display>(what: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Input(format!("{what}: {e}"))
}

fn read(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(input(path.display()))
}

fn load_program(path: &Path) -> Res<Program> {
    parse_program(&read(path)?).map_err(input(path.display()))
}

fn load_poc(path: &Path, p: &Program) -> Res<TestCase> {
    parse_testcase(&read(path)?, p).map_err(input(path.display()))
}

fn write_json<T: Serialize>(out: &Option<PathBuf>, v: &T) -> Res<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Failure::Internal(e.to_string()))?;
    s.push('\n');
    write_text(out, &s)
}

fn write_text(out: &Option<PathBuf>, s: &str) -> Res<()> {
    match out {
        Some(path) => fs::write(path, s).map_err(|e| Failure::Internal(format!("{}: {e}", path.display()))),
        None => {
            print!("{s}");
            Ok(())
        }
    }
}

fn run(a: RunArgs) -> Res<()> {
    let program = load_program(&a.io.program)?;
    let poc = load_poc(&a.poc, &program)?;
    let versions = a.versions.as_deref().map(load_version_set).transpose().map_err(input("versions"))?;
    let mut config = PipelineConfig::default();
    config.fuzz.rng_seed = a.seed;
    config.fuzz.exec_budget = a.exec_budget;
    config.fuzz.impact_feedback = !a.coverage_only;
    config.explore.threshold_blocks = a.guidance_threshold;
    config.explore.state_budget = a.state_budget;
    config.workers = a.workers;
    let report = run_pipeline(&PipelineInput { program, poc, versions, config }).map_err(input("configuration"))?;
    write_text(&a.io.out, &emit_report(&report))
}

#[derive(Serialize)]
struct Reproduction<'a> {
    impacts: &'a [Impact],
    outcome: miniscope::exec::Outcome,
    steps: u64,
}

fn reproduce(a: ReproduceArgs) -> Res<()> {
    let p = load_program(&a.io.program)?;
    let tc = load_poc(&a.poc, &p)?;
    let cfg = if a.single_shot { ExecConfig::default() } else { ExecConfig::multi_shot() };
    let r = execute(&p, &tc, &cfg);
    write_json(&a.io.out, &Reproduction { impacts: &r.impacts, outcome: r.outcome, steps: r.steps })
}

#[derive(Serialize)]
struct FuzzedContext {
    #[serde(flatten)]
    context: Context,
    same_bug: Option<SameBugVerdict>,
}

#[derive(Serialize)]
struct FuzzReport {
    executions: u64,
    relaxed_at: Option<u64>,
    contexts: Vec<FuzzedContext>,
}

fn fuzz(a: FuzzArgs) -> Res<()> {
    let p = load_program(&a.io.program)?;
    let tc = load_poc(&a.poc, &p)?;
    let vs = a.versions.as_deref().map(load_version_set).transpose().map_err(input("versions"))?;
    let cfg = FuzzConfig { exec_budget: a.exec_budget, rng_seed: a.seed, impact_feedback: !a.coverage_only, ..FuzzConfig::default() };
    let out = fuzz_contexts(&p, &tc, &cfg).map_err(input("fuzz"))?;
    let mut contexts = Vec::new();
    for c in out.contexts {
        let same_bug = match (&vs, c.origin) {
            (Some(vs), Origin::Fuzzed) => {
                Some(confirm_same_bug(&c, vs, &ExecConfig::multi_shot()).map_err(input("versions"))?)
            }
            _ => None,
        };
        contexts.push(FuzzedContext { context: c, same_bug });
    }
    write_json(&a.io.out, &FuzzReport { executions: out.executions, relaxed_at: out.relaxed_at, contexts })
}

/// The first use-after-free or out-of-bounds read in `text`.
fn report_impact(text: &str) -> Result<Impact, String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let list = match v.get("impacts") {
        Some(l) => l.clone(),
        None => v,
    };
    let impacts: Vec<Impact> = match list {
        serde_json::Value::Array(_) => serde_json::from_value(list).map_err(|e| e.to_string())?,
        one => vec![serde_json::from_value(one).map_err(|e| e.to_string())?],
    };
    impacts
        .into_iter()
        .find(|i| i.kind.is_vuln_read())
        .ok_or_else(|| "no use-after-free or out-of-bounds read in the report".to_string())
}

fn taint(a: TaintArgs) -> Res<()> {
    let p = load_program(&a.io.program)?;
    let impact = report_impact(&read(&a.report)?).map_err(input(a.report.display()))?;
    let anchor = locate_vuln_point(&p, &impact).map_err(input(a.report.display()))?;
    write_json(&a.io.out, &estimate_hidden_impacts(&p, &anchor, &TaintLimits::default()))
}

fn sym(a: SymArgs) -> Res<()> {
    let p = load_program(&a.io.program)?;
    let tc = load_poc(&a.poc, &p)?;
    let est: Estimate = serde_json::from_str(&read(&a.estimate)?).map_err(input(a.estimate.display()))?;
    let exec_cfg = ExecConfig::multi_shot();
    let anchor = &est.anchor;
    let seq = execute(&p, &tc, &exec_cfg)
        .impacts
        .iter()
        .find(|i| {
            i.kind.is_vuln_read()
                && i.location == anchor.instruction
                && i.alloc_site.as_ref() == Some(&anchor.object.alloc_site)
        })
        .map(|i| i.seq)
        .ok_or_else(|| Failure::Input("the PoC does not reach the estimate's anchor".into()))?;
    let snap = snapshot_at_first_vuln_read(&p, &tc, &exec_cfg, &Selector::Seq(seq)).map_err(input("snapshot"))?;
    let cfg = ExploreConfig { threshold_blocks: a.threshold, state_budget: a.state_budget, ..ExploreConfig::default() };
    let guidance = (!a.unguided).then_some(&est.guidance);
    write_json(&a.io.out, &explore(&p, &tc, &snap, guidance, &cfg, 0))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = std::panic::catch_unwind(|| match cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Reproduce(a) => reproduce(a),
        Cmd::Fuzz(a) => fuzz(a),
        Cmd::Taint(a) => taint(a),
        Cmd::Sym(a) => sym(a),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::Input(m))) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Ok(Err(Failure::Internal(m))) => {
            eprintln!("internal error: {m}");
            ExitCode::from(3)
        }
        Err(_) => ExitCode::from(3),
    }
}
