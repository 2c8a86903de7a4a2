//! End-to-end triage: reproduce, explore contexts, estimate, explore
//! symbolically, and report.
//!
//! [`run_pipeline`] reproduces the PoC with multi-shot execution. When a
//! [`VersionSet`] is supplied it fuzzes for further contexts and keeps those
//! confirmed as the same bug. Every context with a use-after-free or
//! out-of-bounds read is then anchored, estimated and explored from a
//! snapshot at that read. [`emit_report`] renders the [`Report`] as stable
//! JSON.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::exec::{execute, snapshot_at_first_vuln_read, ExecConfig, Impact, Selector};
use crate::fuzz::{
    confirm_same_bug, context_fingerprint, fuzz_contexts, Context, Fingerprint, FuzzConfig, FuzzError, Origin,
    SameBugVerdict, VersionSet,
};
use crate::ir::{Program, TestCase};
use crate::sym::{explore, ExploreConfig, Finding, PrimitiveKind};
use crate::taint::{estimate_hidden_impacts, locate_vuln_point, PotentialImpact, TaintLimits};

pub const TOOL: &str = "miniscope";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub fuzz: FuzzConfig,
    pub taint: TaintLimits,
    pub explore: ExploreConfig,
    /// Threads used for per-context analysis. Reports do not depend on it.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            fuzz: FuzzConfig::default(),
            taint: TaintLimits::default(),
            explore: ExploreConfig::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineInput {
    pub program: Program,
    pub poc: TestCase,
    pub versions: Option<VersionSet>,
    pub config: PipelineConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] FuzzError),
    #[error("workers must be at least 1")]
    Workers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    HighRisk,
    LowRisk,
    NoRepro,
}

/// Count per primitive class, with every class present.
pub type Counts = BTreeMap<PrimitiveKind, u64>;

fn zero_counts() -> Counts {
    PrimitiveKind::ALL.iter().map(|&k| (k, 0)).collect()
}

fn ratio(validated: &Counts, all: &Counts) -> Option<f64> {
    let total: u64 = all.values().sum();
    (total > 0).then(|| validated.values().sum::<u64>() as f64 / total as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTimings {
    /// Steps of the multi-shot run of the context's PoC.
    pub reproduce_steps: u64,
    pub explore_states: u64,
    pub explore_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextReport {
    pub id: usize,
    pub origin: Origin,
    /// Same-bug decision for fuzzed contexts.
    pub same_bug: Option<SameBugVerdict>,
    pub poc: TestCase,
    pub fingerprint: Option<Fingerprint>,
    pub impacts: Vec<Impact>,
    pub potential_impacts: Vec<PotentialImpact>,
    pub findings: Vec<Finding>,
    pub counts: Counts,
    pub validated: Counts,
    /// Validated findings over all findings; `None` without findings.
    pub validation_ratio: Option<f64>,
    /// Some stage ran out of budget.
    pub incomplete: bool,
    pub timings: ContextTimings,
    /// Stage failure confined to this context.
    pub error: Option<String>,
}

impl ContextReport {
    fn new(id: usize, origin: Origin, same_bug: Option<SameBugVerdict>, poc: TestCase, impacts: Vec<Impact>) -> Self {
        ContextReport {
            id,
            origin,
            same_bug,
            poc,
            fingerprint: context_fingerprint(&impacts),
            impacts,
            potential_impacts: Vec::new(),
            findings: Vec::new(),
            counts: zero_counts(),
            validated: zero_counts(),
            validation_ratio: None,
            incomplete: false,
            timings: ContextTimings::default(),
            error: None,
        }
    }

    fn recount(&mut self) {
        self.counts = zero_counts();
        self.validated = zero_counts();
        for f in &self.findings {
            *self.counts.entry(f.primitive).or_default() += 1;
            if f.validated {
                *self.validated.entry(f.primitive).or_default() += 1;
            }
        }
        self.validation_ratio = ratio(&self.validated, &self.counts);
    }

    /// Whether this context alone makes the bug high-risk.
    pub fn is_high_risk(&self) -> bool {
        self.findings.iter().any(|f| f.validated) || self.impacts.iter().any(|i| i.kind.is_high_risk())
    }
}

/// A fuzzed context that was not kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardedContext {
    pub fingerprint: Fingerprint,
    pub found_at: u64,
    pub same_bug: Option<SameBugVerdict>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub counts: Counts,
    pub validated: Counts,
    pub validation_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub fuzz: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub program: String,
    pub poc_calls: usize,
    pub versions_supplied: bool,
    pub config: PipelineConfig,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub reproduce_steps: u64,
    pub fuzz_executions: u64,
    pub explore_states: u64,
    pub explore_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub verdict: Verdict,
    pub contexts: Vec<ContextReport>,
    pub discarded: Vec<DiscardedContext>,
    pub totals: Totals,
    pub provenance: Provenance,
    pub timings: Timings,
    /// Problems that did not belong to one context.
    pub notes: Vec<String>,
}

impl Report {
    /// High-risk iff a validated finding exists or a concrete high-risk
    /// impact was observed in a kept context.
    pub fn compute_verdict(contexts: &[ContextReport], reproduced: bool) -> Verdict {
        if !reproduced {
            Verdict::NoRepro
        } else if contexts.iter().any(ContextReport::is_high_risk) {
            Verdict::HighRisk
        } else {
            Verdict::LowRisk
        }
    }

    pub fn context(&self, id: usize) -> Option<&ContextReport> {
        self.contexts.iter().find(|c| c.id == id)
    }
}

/// Anchors, estimates and explores one context in place.
fn analyze(p: &Program, cfg: &PipelineConfig, c: &mut ContextReport) {
    if !c.impacts.iter().any(|i| i.kind.is_vuln_read()) {
        return;
    }
    let exec_cfg = ExecConfig::multi_shot();
    let snap = match snapshot_at_first_vuln_read(p, &c.poc, &exec_cfg, &Selector::FirstFlagged) {
        Ok(s) => s,
        Err(e) => {
            c.error = Some(format!("snapshot: {e}"));
            return;
        }
    };
    let anchor = match locate_vuln_point(p, &snap.trigger) {
        Ok(a) => a,
        Err(e) => {
            c.error = Some(format!("anchor: {e}"));
            return;
        }
    };
    let est = estimate_hidden_impacts(p, &anchor, &cfg.taint);
    let x = explore(p, &c.poc, &snap, Some(&est.guidance), &cfg.explore, c.id);
    c.potential_impacts = est.impacts;
    c.incomplete = est.incomplete || x.incomplete;
    c.timings.explore_states = x.states();
    c.timings.explore_steps = x.steps();
    c.findings = x.findings;
    c.recount();
}

fn analyze_all(p: &Program, cfg: &PipelineConfig, contexts: &mut [ContextReport]) {
    if cfg.workers <= 1 || contexts.len() <= 1 {
        for c in contexts.iter_mut() {
            analyze(p, cfg, c);
        }
        return;
    }
    let per = contexts.len().div_ceil(cfg.workers);
    std::thread::scope(|s| {
        for chunk in contexts.chunks_mut(per) {
            s.spawn(move || {
                for c in chunk {
                    analyze(p, cfg, c);
                }
            });
        }
    });
}

pub fn run_pipeline(input: &PipelineInput) -> Result<Report, PipelineError> {
    let cfg = &input.config;
    cfg.fuzz.check()?;
    if cfg.workers == 0 {
        return Err(PipelineError::Workers);
    }
    let p = &input.program;
    let exec_cfg = ExecConfig::multi_shot();
    let first = execute(p, &input.poc, &exec_cfg);
    let mut timings = Timings { reproduce_steps: first.steps, ..Timings::default() };
    let mut notes = Vec::new();
    let mut discarded = Vec::new();
    let provenance = Provenance {
        tool: TOOL.into(),
        version: VERSION.into(),
        program: p.name.clone(),
        poc_calls: input.poc.len(),
        versions_supplied: input.versions.is_some(),
        config: cfg.clone(),
        seeds: Seeds { fuzz: cfg.fuzz.rng_seed },
    };
    if first.impacts.is_empty() {
        let totals = Totals { counts: zero_counts(), validated: zero_counts(), validation_ratio: None };
        return Ok(Report {
            verdict: Verdict::NoRepro,
            contexts: Vec::new(),
            discarded,
            totals,
            provenance,
            timings,
            notes,
        });
    }

    let mut original = ContextReport::new(0, Origin::Original, None, input.poc.clone(), first.impacts);
    original.timings.reproduce_steps = first.steps;
    let mut contexts = vec![original];
    if let Some(vs) = &input.versions {
        match fuzz_contexts(p, &input.poc, &cfg.fuzz) {
            Ok(out) => {
                timings.fuzz_executions = out.executions;
                for ctx in out.contexts.into_iter().filter(|c| c.origin == Origin::Fuzzed) {
                    keep_if_same_bug(p, vs, ctx, &mut contexts, &mut discarded);
                }
            }
            Err(e) => notes.push(format!("fuzzing skipped: {e}")),
        }
    }

    analyze_all(p, cfg, &mut contexts);
    for c in &contexts {
        timings.explore_states += c.timings.explore_states;
        timings.explore_steps += c.timings.explore_steps;
    }
    let mut counts = zero_counts();
    let mut validated = zero_counts();
    for c in &contexts {
        for (k, n) in &c.counts {
            *counts.entry(*k).or_default() += n;
        }
        for (k, n) in &c.validated {
            *validated.entry(*k).or_default() += n;
        }
    }
    let totals = Totals { validation_ratio: ratio(&validated, &counts), counts, validated };
    Ok(Report {
        verdict: Report::compute_verdict(&contexts, true),
        contexts,
        discarded,
        totals,
        provenance,
        timings,
        notes,
    })
}

fn keep_if_same_bug(
    p: &Program,
    vs: &VersionSet,
    ctx: Context,
    contexts: &mut Vec<ContextReport>,
    discarded: &mut Vec<DiscardedContext>,
) {
    match confirm_same_bug(&ctx, vs, &ExecConfig::multi_shot()) {
        Ok(SameBugVerdict::SameBug) => {
            let steps = execute(p, &ctx.poc, &ExecConfig::multi_shot()).steps;
            let mut c =
                ContextReport::new(contexts.len(), Origin::Fuzzed, Some(SameBugVerdict::SameBug), ctx.poc, ctx.impacts);
            c.timings.reproduce_steps = steps;
            contexts.push(c);
        }
        Ok(v) => discarded.push(DiscardedContext {
            fingerprint: ctx.fingerprint,
            found_at: ctx.found_at,
            same_bug: Some(v),
            error: None,
        }),
        Err(e) => discarded.push(DiscardedContext {
            fingerprint: ctx.fingerprint,
            found_at: ctx.found_at,
            same_bug: None,
            error: Some(e.to_string()),
        }),
    }
}

/// Pretty JSON with a trailing newline. Key order follows the type
/// definitions and every map is ordered, so equal reports give equal bytes.
pub fn emit_report(r: &Report) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}
