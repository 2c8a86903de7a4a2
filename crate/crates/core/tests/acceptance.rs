//! End-to-end acceptance checks. Each criterion runs in isolation, prints
//! one PASS/FAIL line, and the test fails if any criterion failed.

mod support;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use miniscope::exec::{
    execute, replay_with_bytes, snapshot_at_first_vuln_read, EventKind, ExecConfig, ImpactKind, Outcome,
    Selector,
};
use miniscope::fuzz::{
    confirm_same_bug, fuzz_contexts, load_version_set, Context, FuzzConfig, Origin, SameBugVerdict,
};
use miniscope::ir::{parse_program, parse_testcase, Location, Program, TestCase};
use miniscope::pipeline::{emit_report, run_pipeline, PipelineConfig, PipelineInput, Report, Verdict};
use miniscope::sym::{explore, ExploreConfig, Finding, PrimitiveKind};
use miniscope::taint::{estimate_hidden_impacts, locate_vuln_point, TaintLimits};

type Outcome_ = Result<String, String>;

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn load(rel: &str) -> (Program, TestCase) {
    let p = parse_program(&std::fs::read_to_string(corpus().join(format!("{rel}.mk"))).unwrap()).unwrap();
    let tc = parse_testcase(&std::fs::read_to_string(corpus().join(format!("{rel}.poc"))).unwrap(), &p).unwrap();
    (p, tc)
}

fn at(p: &Program, f: &str, label: &str, i: usize) -> Location {
    Location::new(f, p.function(f).unwrap().block_index(label).unwrap(), i)
}

fn pipeline(name: &str, versions: bool, tweak: impl FnOnce(&mut PipelineConfig)) -> (Program, Report) {
    let (program, poc) = load(name);
    let versions = versions.then(|| load_version_set(&corpus().join("versions").join(name)).unwrap());
    let mut config = PipelineConfig::default();
    tweak(&mut config);
    let r = run_pipeline(&PipelineInput { program: program.clone(), poc, versions, config }).unwrap();
    (program, r)
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn cli(args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_miniscope")).args(args).current_dir(corpus()).output().unwrap();
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn validated(r: &Report, kind: PrimitiveKind, site: &Location) -> bool {
    r.contexts.iter().flat_map(|c| &c.findings).any(|f| f.primitive == kind && &f.site == site && f.validated)
}

fn c1_fig2_escalation() -> Outcome_ {
    let t0 = Instant::now();
    let (code, out) = cli(&["run", "--program", "fig2_tcindex.mk", "--poc", "fig2_tcindex.poc", "--workers", "1"]);
    let elapsed = t0.elapsed();
    ensure(code == 0, format!("exit code {code}"))?;
    let r: Report = serde_json::from_slice(&out).map_err(|e| e.to_string())?;
    let (p, _) = load("fig2_tcindex");
    let aaw = at(&p, "tcf_action_destroy", "body", 0);
    let fpd = at(&p, "tcf_action_cleanup", "call_cleanup", 0);
    ensure(r.verdict == Verdict::HighRisk, format!("verdict {:?}", r.verdict))?;
    ensure(validated(&r, PrimitiveKind::Aaw, &aaw), format!("no validated AAW at {aaw}"))?;
    ensure(validated(&r, PrimitiveKind::Fpd, &fpd), format!("no validated FPD at {fpd}"))?;
    ensure(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!("high-risk, AAW at {aaw}, FPD at {fpd}, {:.2}s", elapsed.as_secs_f64()))
}

fn c2_guidance_value() -> Outcome_ {
    let (p, tc) = load("fig2_tcindex");
    let cfg = ExecConfig::multi_shot();
    let snap = snapshot_at_first_vuln_read(&p, &tc, &cfg, &Selector::FirstFlagged).unwrap();
    let est = estimate_hidden_impacts(&p, &locate_vuln_point(&p, &snap.trigger).unwrap(), &TaintLimits::default());
    let fpd = at(&p, "tcf_action_cleanup", "call_cleanup", 0);
    let has_fpd = |fs: &[Finding]| fs.iter().find(|f| f.primitive == PrimitiveKind::Fpd && f.site == fpd).cloned();

    let guided = explore(&p, &tc, &snap, Some(&est.guidance), &ExploreConfig::default(), 0);
    ensure(has_fpd(&guided.findings).is_some(), "guided run misses the FPD")?;
    let budget = guided.states();
    let same = ExploreConfig { state_budget: budget, ..ExploreConfig::default() };
    let unguided = explore(&p, &tc, &snap, None, &same, 0);
    ensure(has_fpd(&unguided.findings).is_none(), format!("unguided run with {budget} states finds the FPD"))?;
    let big = ExploreConfig { state_budget: 100_000, ..ExploreConfig::default() };
    let wide = explore(&p, &tc, &snap, None, &big, 0);
    let f = has_fpd(&wide.findings).ok_or("unguided run with 100000 states misses the FPD")?;
    let ratio = f.state_count as f64 / budget as f64;
    ensure(ratio >= 10.0, format!("ratio {ratio:.1}"))?;
    Ok(format!(
        "guided {budget} states; unguided finds FPD after {} states ({} total), ratio {ratio:.1}",
        f.state_count,
        wide.states()
    ))
}

fn c3_fig5_classification() -> Outcome_ {
    let (p, r) = pipeline("fig5_bfs", false, |_| {});
    let site = at(&p, "set_bit", "bb0", 7);
    let findings: Vec<_> = r.contexts.iter().flat_map(|c| &c.findings).collect();
    ensure(validated(&r, PrimitiveKind::Aaw, &site), format!("no validated AAW at {site}"))?;
    ensure(
        !findings.iter().any(|f| f.primitive == PrimitiveKind::Caw),
        "a CAW finding was emitted",
    )?;
    let (tc, snap) = {
        let (_, tc) = load("fig5_bfs");
        let snap = snapshot_at_first_vuln_read(&p, &tc, &ExecConfig::multi_shot(), &Selector::FirstFlagged).unwrap();
        (tc, snap)
    };
    // The path does constrain memory read through the symbolic address.
    let est = estimate_hidden_impacts(&p, &locate_vuln_point(&p, &snap.trigger).unwrap(), &TaintLimits::default());
    let x = explore(&p, &tc, &snap, Some(&est.guidance), &ExploreConfig::default(), 0);
    let aaw = x.findings.iter().find(|f| f.primitive == PrimitiveKind::Aaw).unwrap();
    ensure(aaw.constraints.iter().any(|c| c.contains("mem_")), "no constraint on memory at the symbolic address")?;
    Ok(format!("AAW at {site}, no CAW, {} path constraints", aaw.constraints.len()))
}

fn c4_fig6_object_writes() -> Outcome_ {
    let (_, r) = pipeline("fig6_tcp", false, |_| {});
    let uow: Vec<_> = r.contexts[0].findings.iter().filter(|f| f.primitive == PrimitiveKind::Uow).collect();
    ensure(uow.len() == 2, format!("{} UOW findings", uow.len()))?;
    for f in &uow {
        ensure(f.validated, format!("UOW at {} not validated", f.site))?;
        let b = f.model.object_bytes();
        ensure(b[0..4].iter().any(|&x| x != 0), format!("sacked_out zero at {}", f.site))?;
        ensure(b[8..16].iter().any(|&x| x != 0), format!("highest_sack zero at {}", f.site))?;
    }
    Ok(format!("UOW at {} and {}, models nonzero", uow[0].site, uow[1].site))
}

fn c5_fuzzing_utility() -> Outcome_ {
    let (_, r) = pipeline("fig4_rxrpc", true, |c| c.fuzz.exec_budget = 50_000);
    ensure(r.contexts.len() >= 2, format!("{} contexts", r.contexts.len()))?;
    ensure(r.timings.fuzz_executions <= 50_000, "over budget")?;
    let fpd = |c: &&miniscope::pipeline::ContextReport| c.validated[&PrimitiveKind::Fpd] > 0;
    let with: Vec<_> = r.contexts.iter().filter(fpd).collect();
    ensure(!with.is_empty(), "no context has an FPD")?;
    ensure(with.iter().all(|c| c.origin == Origin::Fuzzed), "the original context has an FPD")?;
    let (p, tc) = load("fig4_rxrpc");
    let ablation = FuzzConfig { impact_feedback: false, exec_budget: 50_000, ..FuzzConfig::default() };
    let out = fuzz_contexts(&p, &tc, &ablation).unwrap();
    ensure(out.contexts.len() == 1, format!("coverage-only finds {} contexts", out.contexts.len()))?;
    Ok(format!(
        "{} contexts, FPD in fuzzed context {}; coverage-only: 1 context",
        r.contexts.len(),
        with[0].id
    ))
}

fn decide(name: &str) -> SameBugVerdict {
    let dir = corpus().join("versions").join(name);
    let vs = load_version_set(&dir).unwrap();
    let base = parse_program(&vs.base_text).unwrap();
    let poc = parse_testcase(&std::fs::read_to_string(dir.join("context.poc")).unwrap(), &base).unwrap();
    let ctx = Context::original(&base, &poc, &ExecConfig::multi_shot()).unwrap();
    confirm_same_bug(&ctx, &vs, &ExecConfig::multi_shot()).unwrap()
}

fn c6_decision_table() -> Outcome_ {
    let got: Vec<_> =
        ["same_bug_patch", "different_bug", "same_bug_intermediate", "ambiguous"].iter().map(|n| decide(n)).collect();
    let want = [SameBugVerdict::SameBug, SameBugVerdict::DifferentBug, SameBugVerdict::SameBug, SameBugVerdict::Ambiguous];
    ensure(got == want, format!("{got:?}"))?;
    Ok(format!("{got:?}"))
}

fn c7_sanitizer_suite() -> Outcome_ {
    let dir = corpus().join("sanitizer");
    let mut names: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| e.ok()?.file_name().to_str()?.strip_suffix(".mk").map(str::to_string))
        .collect();
    names.sort();
    ensure(names.len() == 12, format!("{} micro-programs", names.len()))?;
    for n in &names {
        let src = std::fs::read_to_string(dir.join(format!("{n}.mk"))).unwrap();
        let expect = src.lines().find_map(|l| l.strip_prefix("; expect: ")).ok_or(format!("{n}: no expectation"))?;
        let mut it = expect.split_whitespace();
        let kind = it.next().unwrap();
        let alloc: u32 = it.next().and_then(|s| s.strip_prefix("alloc=")).unwrap().parse().unwrap();
        let offset: i64 = it.next().and_then(|s| s.strip_prefix("offset=")).unwrap().parse().unwrap();
        let (p, tc) = load(&format!("sanitizer/{n}"));
        let r = execute(&p, &tc, &ExecConfig::multi_shot());
        let mem: Vec<_> = r.impacts.iter().filter(|i| i.kind.is_memory()).collect();
        ensure(mem.len() == 1, format!("{n}: {} memory impacts", mem.len()))?;
        let i = mem[0];
        ensure(i.kind.name() == kind, format!("{n}: {} != {kind}", i.kind.name()))?;
        ensure(i.vuln_alloc.map(|a| a.0) == Some(alloc), format!("{n}: alloc {:?}", i.vuln_alloc))?;
        ensure(i.offset == Some(offset), format!("{n}: offset {:?}", i.offset))?;
    }
    let (p, tc) = load("fig2_tcindex");
    let r = execute(&p, &tc, &ExecConfig::multi_shot());
    let oob = r.impacts.iter().find(|i| i.kind == ImpactKind::OobRead).ok_or("fig2: no OOB_READ")?;
    let gpf = r.impacts.last().ok_or("fig2: no impacts")?;
    ensure(gpf.kind == ImpactKind::Gpf && r.outcome == Outcome::KilledIrrecoverable, "fig2: run not killed by a GPF")?;
    ensure(oob.seq < gpf.seq, "fig2: GPF precedes the OOB_READ")?;
    Ok(format!("12/12 micro-programs exact; fig2 OOB_READ seq {} before GPF seq {}", oob.seq, gpf.seq))
}

/// Independent replay check: the concrete event at the site must match the
/// finding's category and model operand.
fn replays(p: &Program, tc: &TestCase, f: &Finding) -> bool {
    let cfg = ExecConfig::multi_shot();
    let Ok(snap) = snapshot_at_first_vuln_read(p, tc, &cfg, &Selector::FirstFlagged) else { return false };
    let Ok(r) = replay_with_bytes(p, tc, &snap, &f.model.object_bytes(), &f.model.spray()) else { return false };
    let op = f.model.operand;
    let events: Vec<_> = r.events.iter().filter(|e| e.location == f.site).collect();
    let impact_at = |k: &[ImpactKind]| r.impacts.iter().any(|i| i.location == f.site && k.contains(&i.kind));
    match f.primitive {
        PrimitiveKind::Uow => impact_at(&[ImpactKind::UafWrite, ImpactKind::OobWrite]),
        PrimitiveKind::Aaw | PrimitiveKind::Caw => events
            .iter()
            .any(|e| matches!(e.kind, EventKind::Store { addr, .. } if Some(addr) == op)),
        PrimitiveKind::Avw | PrimitiveKind::Cvw => events.iter().any(|e| {
            matches!(e.kind, EventKind::Store { value, width, .. }
                if op.is_some_and(|v| width >= 8 && v == value || width < 8 && v & ((1 << (8 * width)) - 1) == value))
        }),
        PrimitiveKind::Fpd => events.iter().any(|e| matches!(e.kind, EventKind::ICall { target } if Some(target) == op)),
        PrimitiveKind::If => {
            impact_at(&[ImpactKind::InvalidFree]) || events.iter().any(|e| matches!(e.kind, EventKind::Free { .. }))
        }
    }
}

fn c8_replay_oracle() -> Outcome_ {
    let mut total = 0;
    let mut failed = Vec::new();
    for (name, versions) in
        [("fig2_tcindex", false), ("fig4_rxrpc", true), ("fig5_bfs", false), ("fig6_tcp", false), ("fig7_refcount", false)]
    {
        let (p, r) = pipeline(name, versions, |_| {});
        for c in &r.contexts {
            for f in c.findings.iter().filter(|f| f.validated) {
                total += 1;
                if !replays(&p, &c.poc, f) {
                    failed.push(format!("{name}#{} {} {}", c.id, f.primitive, f.site));
                }
            }
        }
    }
    ensure(total > 0, "no validated findings")?;
    ensure(failed.is_empty(), format!("{} of {total} fail: {failed:?}", failed.len()))?;
    Ok(format!("{total}/{total} validated findings replay"))
}

fn c9_taint_oracle() -> Outcome_ {
    let t0 = Instant::now();
    let anchors = support::taint_oracle::check_corpus();
    let (programs, with_sinks) = support::taint_oracle::check_generated(3000);
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{anchors} corpus anchors and {programs} generated programs ({with_sinks} with sinks) covered, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn c10_determinism() -> Outcome_ {
    let args = [
        "run",
        "--program",
        "fig4_rxrpc.mk",
        "--poc",
        "fig4_rxrpc.poc",
        "--versions",
        "versions/fig4_rxrpc",
        "--seed",
        "7",
    ];
    let (c1, a) = cli(&args);
    let (c2, b) = cli(&args);
    ensure(c1 == 0 && c2 == 0, format!("exit codes {c1}, {c2}"))?;
    ensure(a == b, "reports differ")?;
    let (_, r1) = pipeline("fig2_tcindex", false, |_| {});
    let (_, r2) = pipeline("fig2_tcindex", false, |_| {});
    ensure(emit_report(&r1) == emit_report(&r2), "fig2 reports differ")?;
    Ok(format!("{} identical bytes", a.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome_); 10] = [
        ("1 fig2 escalation", c1_fig2_escalation),
        ("2 guidance value", c2_guidance_value),
        ("3 fig5 classification", c3_fig5_classification),
        ("4 fig6 object writes", c4_fig6_object_writes),
        ("5 fuzzing utility", c5_fuzzing_utility),
        ("6 same-bug decision table", c6_decision_table),
        ("7 sanitizer suite", c7_sanitizer_suite),
        ("8 replay oracle", c8_replay_oracle),
        ("9 taint completeness", c9_taint_oracle),
        ("10 determinism", c10_determinism),
    ];
    // Written to the raw handle so the lines survive the harness's capture.
    let mut out = std::io::stdout().lock();
    let mut failures = 0;
    for (name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => writeln!(out, "PASS criterion {name}: {detail}").unwrap(),
            Err(why) => {
                failures += 1;
                writeln!(out, "FAIL criterion {name}: {why}").unwrap();
            }
        }
    }
    assert_eq!(failures, 0, "{failures} criteria failed");
}
