//! Impact-aware fuzzing for new vulnerable contexts.
//!
//! [`fuzz_contexts`] mutates the PoC under a syscall pool derived from its
//! templates. Seeds are retained for new coverage, for an impact
//! fingerprint not seen before, or for a new initial memory-safety impact
//! (the context fingerprint); a seed that finds a new fingerprint jumps ahead of the FIFO
//! corpus for a burst of mutations. After a stagnation window the pool
//! widens to the whole module and calls may be removed.
//!
//! [`confirm_same_bug`] decides whether a new context belongs to the bug
//! fixed by a [`VersionSet`]'s patch.

mod mutate;
mod versions;

use std::collections::{BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{execute, ExecConfig, Impact, ImpactKind};
use crate::ir::{Location, Program, TestCase};

pub use mutate::{mutate, Mode, Mutation, Pools, INTERESTING, MAX_CALLS};
pub use versions::{confirm_same_bug, load_version_set, SameBugVerdict, VersionError, VersionSet};

/// Call-trace frames included in a fingerprint.
pub const FINGERPRINT_FRAMES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    /// Innermost first.
    pub frames: Vec<String>,
    pub kind: ImpactKind,
    pub alloc_site: Option<Location>,
}

impl Fingerprint {
    pub fn of(i: &Impact) -> Fingerprint {
        Fingerprint { frames: i.frames(FINGERPRINT_FRAMES), kind: i.kind, alloc_site: i.alloc_site.clone() }
    }
}

/// Fingerprint of the first memory-safety impact, which identifies the
/// context.
pub fn context_fingerprint(impacts: &[Impact]) -> Option<Fingerprint> {
    impacts.iter().find(|i| i.kind.is_memory()).map(Fingerprint::of)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Fuzzed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub id: usize,
    pub origin: Origin,
    pub poc: TestCase,
    pub impacts: Vec<Impact>,
    pub fingerprint: Fingerprint,
    /// Execution index that produced it (0 for the original).
    pub found_at: u64,
}

impl Context {
    /// The original context of `poc`, if it shows a memory-safety impact.
    pub fn original(p: &Program, poc: &TestCase, cfg: &ExecConfig) -> Option<Context> {
        let r = execute(p, poc, cfg);
        let fingerprint = context_fingerprint(&r.impacts)?;
        Some(Context { id: 0, origin: Origin::Original, poc: poc.clone(), impacts: r.impacts, fingerprint, found_at: 0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub exec_budget: u64,
    pub mutation_priority_burst: u64,
    pub stagnation_threshold: u64,
    pub removal_probability: f64,
    pub rng_seed: u64,
    /// Retain seeds for new impact fingerprints. Off is the coverage-only
    /// ablation.
    pub impact_feedback: bool,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            exec_budget: 50_000,
            mutation_priority_burst: 500,
            stagnation_threshold: 2_000,
            removal_probability: 0.02,
            rng_seed: 0,
            impact_feedback: true,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FuzzError {
    #[error("the PoC does not reproduce a memory-safety impact")]
    ReproFailure,
    #[error("invalid fuzz configuration: {0}")]
    Config(String),
}

impl FuzzConfig {
    pub fn check(&self) -> Result<(), FuzzError> {
        if self.exec_budget == 0 || self.mutation_priority_burst == 0 || self.stagnation_threshold == 0 {
            return Err(FuzzError::Config("budgets must be positive".into()));
        }
        if !(0.0..=0.1).contains(&self.removal_probability) {
            return Err(FuzzError::Config("removal_probability must lie in [0, 0.1]".into()));
        }
        Ok(())
    }
}

/// One parent selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    /// Execution index of the child.
    pub exec: u64,
    /// Corpus index of the parent.
    pub parent: usize,
    /// Selected from the impact queue.
    pub priority: bool,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discovery {
    pub exec: u64,
    /// Corpus index of the retained seed.
    pub seed: usize,
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzOutcome {
    pub contexts: Vec<Context>,
    pub executions: u64,
    pub corpus: Vec<TestCase>,
    /// Executions at which new impact fingerprints were retained.
    pub discoveries: Vec<Discovery>,
    /// Execution at which the relaxed mode started.
    pub relaxed_at: Option<u64>,
    #[serde(skip)]
    pub schedule: Vec<ScheduleEntry>,
}

/// Searches for contexts of the bug in `poc`. The original context is
/// always first.
pub fn fuzz_contexts(p: &Program, poc: &TestCase, cfg: &FuzzConfig) -> Result<FuzzOutcome, FuzzError> {
    cfg.check()?;
    let exec_cfg = ExecConfig::multi_shot();
    let first = execute(p, poc, &exec_cfg);
    let Some(fp) = context_fingerprint(&first.impacts) else {
        return Err(FuzzError::ReproFailure);
    };
    let pools = Pools::new(p, poc);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut coverage = first.coverage.clone();
    let mut seen: BTreeSet<Fingerprint> = first.impacts.iter().map(Fingerprint::of).collect();
    let mut context_fps: BTreeSet<Fingerprint> = BTreeSet::from([fp.clone()]);
    let mut contexts = vec![Context {
        id: 0,
        origin: Origin::Original,
        poc: poc.clone(),
        impacts: first.impacts,
        fingerprint: fp,
        found_at: 0,
    }];
    let mut corpus = vec![poc.clone()];
    let mut cursor = 0usize;
    let mut priority: VecDeque<(usize, u64)> = VecDeque::new();
    let mut mode = Mode::Restricted;
    let mut relaxed_at = None;
    let mut last_progress = 1u64;
    let mut executions = 1u64;
    let mut schedule = Vec::new();
    let mut discoveries = Vec::new();

    while executions < cfg.exec_budget {
        let (parent, from_queue) = match priority.front_mut() {
            Some((seed, left)) => {
                let seed = *seed;
                *left -= 1;
                if *left == 0 {
                    priority.pop_front();
                }
                (seed, true)
            }
            None => {
                let seed = cursor % corpus.len();
                cursor += 1;
                (seed, false)
            }
        };
        executions += 1;
        schedule.push(ScheduleEntry { exec: executions, parent, priority: from_queue, mode });
        let (child, _) = mutate(&corpus[parent], mode, p, &pools, cfg.removal_probability, &mut rng);
        let r = execute(p, &child, &exec_cfg);

        let new_cov = r.coverage.iter().any(|e| !coverage.contains(e));
        let new_fps: Vec<Fingerprint> =
            r.impacts.iter().map(Fingerprint::of).filter(|f| !seen.contains(f)).collect();
        let ctx_fp = context_fingerprint(&r.impacts).filter(|f| !context_fps.contains(f));
        let novel = !new_fps.is_empty() || ctx_fp.is_some();
        let retain = new_cov || (cfg.impact_feedback && novel);
        if retain || !new_fps.is_empty() {
            last_progress = executions;
        }
        seen.extend(new_fps.iter().cloned());
        if !retain {
            if mode == Mode::Restricted && executions - last_progress >= cfg.stagnation_threshold {
                mode = Mode::Relaxed;
                relaxed_at = Some(executions);
            }
            continue;
        }
        coverage.extend(r.coverage.iter().copied());
        let seed = corpus.len();
        corpus.push(child.clone());
        if let Some(fingerprint) = ctx_fp.clone().or_else(|| new_fps.first().cloned()) {
            if cfg.impact_feedback {
                priority.push_front((seed, cfg.mutation_priority_burst));
            }
            discoveries.push(Discovery { exec: executions, seed, fingerprint });
        }
        if let Some(fp) = ctx_fp {
            context_fps.insert(fp.clone());
            contexts.push(Context {
                id: contexts.len(),
                origin: Origin::Fuzzed,
                poc: child,
                impacts: r.impacts,
                fingerprint: fp,
                found_at: executions,
            });
        }
    }
    Ok(FuzzOutcome { contexts, executions, corpus, discoveries, relaxed_at, schedule })
}

#[cfg(test)]
mod tests;
