use std::path::PathBuf;

use super::*;
use crate::ir::{parse_program, parse_testcase};

fn corpus() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../corpus"))
}

fn load(name: &str) -> (Program, TestCase) {
    let src = std::fs::read_to_string(corpus().join(format!("{name}.mk"))).unwrap();
    let poc = std::fs::read_to_string(corpus().join(format!("{name}.poc"))).unwrap();
    let p = parse_program(&src).unwrap();
    let tc = parse_testcase(&poc, &p).unwrap();
    (p, tc)
}

fn small(seed: u64) -> FuzzConfig {
    FuzzConfig { exec_budget: 5_000, rng_seed: seed, ..FuzzConfig::default() }
}

#[test]
fn fig4_finds_the_keepalive_context() {
    let (p, tc) = load("fig4_rxrpc");
    let out = fuzz_contexts(&p, &tc, &small(0)).unwrap();
    assert!(out.contexts.len() >= 2);
    assert_eq!(out.contexts[0].origin, Origin::Original);
    let keepalive = out
        .contexts
        .iter()
        .find(|c| c.fingerprint.frames == ["rxrpc_send_keepalive"] && c.fingerprint.kind == ImpactKind::UafRead)
        .expect("keepalive context");
    assert_eq!(keepalive.origin, Origin::Fuzzed);
}

#[test]
fn coverage_only_ablation_finds_nothing_new() {
    let (p, tc) = load("fig4_rxrpc");
    let cfg = FuzzConfig { impact_feedback: false, ..small(0) };
    let out = fuzz_contexts(&p, &tc, &cfg).unwrap();
    assert_eq!(out.contexts.len(), 1);
    assert_eq!(out.corpus.len(), 1);
}

#[test]
fn contexts_have_distinct_fingerprints() {
    let (p, tc) = load("fig4_rxrpc");
    let out = fuzz_contexts(&p, &tc, &small(3)).unwrap();
    let fps: BTreeSet<_> = out.contexts.iter().map(|c| &c.fingerprint).collect();
    assert_eq!(fps.len(), out.contexts.len());
    for (i, c) in out.contexts.iter().enumerate() {
        assert_eq!(c.id, i);
    }
}

#[test]
fn impact_seeds_get_the_next_burst() {
    let (p, tc) = load("fig4_rxrpc");
    let cfg = small(0);
    let out = fuzz_contexts(&p, &tc, &cfg).unwrap();
    assert!(!out.discoveries.is_empty());
    let burst = cfg.mutation_priority_burst as usize;
    let mut checked = 0;
    for (k, d) in out.discoveries.iter().enumerate() {
        // A later discovery inside the window preempts the rest of it.
        let end = d.exec + burst as u64;
        if out.discoveries.get(k + 1).is_some_and(|n| n.exec <= end) {
            continue;
        }
        let next: Vec<_> = out.schedule.iter().filter(|s| s.exec > d.exec).take(burst).collect();
        if next.len() < burst {
            continue;
        }
        assert!(next.iter().all(|s| s.parent == d.seed && s.priority), "discovery at {}", d.exec);
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn stagnation_switches_to_relaxed_mode() {
    let (p, tc) = load("fig4_rxrpc");
    let cfg = FuzzConfig { impact_feedback: false, stagnation_threshold: 100, ..small(0) };
    let out = fuzz_contexts(&p, &tc, &cfg).unwrap();
    let at = out.relaxed_at.expect("relaxed");
    assert!(out.schedule.iter().all(|s| (s.mode == Mode::Relaxed) == (s.exec > at)));
}

#[test]
fn fuzzing_is_deterministic() {
    let (p, tc) = load("fig4_rxrpc");
    let a = fuzz_contexts(&p, &tc, &small(11)).unwrap();
    let b = fuzz_contexts(&p, &tc, &small(11)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.schedule, b.schedule);
}

#[test]
fn silent_poc_is_a_repro_failure() {
    let (p, _) = load("fig4_rxrpc");
    let tc = parse_testcase("call rxrpc_bind()\n", &p).unwrap();
    assert_eq!(fuzz_contexts(&p, &tc, &small(0)).unwrap_err(), FuzzError::ReproFailure);
}

#[test]
fn config_bounds_are_checked() {
    let (p, tc) = load("fig4_rxrpc");
    let bad = FuzzConfig { removal_probability: 0.5, ..FuzzConfig::default() };
    assert!(matches!(fuzz_contexts(&p, &tc, &bad), Err(FuzzError::Config(_))));
    let bad = FuzzConfig { exec_budget: 0, ..FuzzConfig::default() };
    assert!(matches!(fuzz_contexts(&p, &tc, &bad), Err(FuzzError::Config(_))));
}

fn decide(name: &str) -> SameBugVerdict {
    let dir = corpus().join("versions").join(name);
    let vs = load_version_set(&dir).unwrap();
    let base = parse_program(&vs.base_text).unwrap();
    let poc = parse_testcase(&std::fs::read_to_string(dir.join("context.poc")).unwrap(), &base).unwrap();
    let ctx = Context::original(&base, &poc, &ExecConfig::multi_shot()).expect("context reproduces on base");
    confirm_same_bug(&ctx, &vs, &ExecConfig::multi_shot()).unwrap()
}

#[test]
fn decision_table() {
    assert_eq!(decide("same_bug_patch"), SameBugVerdict::SameBug);
    assert_eq!(decide("different_bug"), SameBugVerdict::DifferentBug);
    assert_eq!(decide("same_bug_intermediate"), SameBugVerdict::SameBug);
    assert_eq!(decide("ambiguous"), SameBugVerdict::Ambiguous);
}

#[test]
fn version_sets_take_the_documented_branch() {
    let vs = |n: &str| load_version_set(&corpus().join("versions").join(n)).unwrap();
    assert!(vs("same_bug_patch").patch_on_base().is_some());
    assert!(vs("different_bug").patch_on_base().is_some());
    assert!(vs("same_bug_intermediate").patch_on_base().is_none());
    assert!(vs("ambiguous").patch_on_base().is_none());
}

#[test]
fn unbuildable_patched_version_is_an_error() {
    let dir = std::env::temp_dir().join(format!("miniscope-vs-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let src = corpus().join("versions/same_bug_patch");
    std::fs::copy(src.join("base.mk"), dir.join("base.mk")).unwrap();
    std::fs::write(dir.join("patch.diff"), "@@ -1,1 +1,1 @@\n-program objslot\n+progrm objslot\n").unwrap();
    let err = load_version_set(&dir).unwrap_err();
    std::fs::remove_dir_all(&dir).unwrap();
    assert!(matches!(err, VersionError::Build(_)), "{err}");
}

#[test]
fn fig4_fuzzed_contexts_are_the_same_bug() {
    let (p, tc) = load("fig4_rxrpc");
    let vs = load_version_set(&corpus().join("versions/fig4_rxrpc")).unwrap();
    let out = fuzz_contexts(&p, &tc, &small(0)).unwrap();
    let keepalive = out.contexts.iter().find(|c| c.fingerprint.frames == ["rxrpc_send_keepalive"]).unwrap();
    assert_eq!(confirm_same_bug(keepalive, &vs, &ExecConfig::multi_shot()).unwrap(), SameBugVerdict::SameBug);
}
