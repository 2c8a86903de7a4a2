//! Test case mutation under the restricted and relaxed syscall pools.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ir::{Call, Program, TestCase};

/// Argument values tried by insertion and argument mutation.
pub const INTERESTING: [u64; 13] = [0, 1, 4095, 4096, (1 << 31) - 1, (1 << 63) - 1, 16, 17, 24, 32, 33, 64, 65];

/// Longest test case the mutator grows.
pub const MAX_CALLS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Restricted,
    Relaxed,
}

/// What one mutation did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    Insert { at: usize, syscall: String },
    Arg { call: usize, arg: usize, from: u64, to: u64 },
    Remove { at: usize, syscall: String },
    None,
}

/// Syscall pools derived from the original PoC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pools {
    /// Union of the templates that contain any PoC syscall.
    pub restricted: Vec<String>,
    /// Every syscall of a module holding one of those templates.
    pub relaxed: Vec<String>,
}

impl Pools {
    pub fn new(p: &Program, poc: &TestCase) -> Pools {
        let mut templates = BTreeSet::new();
        for c in &poc.calls {
            templates.extend(p.templates_of(&c.syscall).map(str::to_string));
        }
        let members = |names: &mut dyn Iterator<Item = &String>| -> Vec<String> {
            let mut out = BTreeSet::new();
            for t in names {
                out.extend(p.template(t).unwrap_or_default().iter().filter(|s| p.entry(s).is_some()).cloned());
            }
            out.into_iter().collect()
        };
        let restricted = members(&mut templates.iter());
        let module_templates: BTreeSet<String> = p
            .modules
            .iter()
            .filter(|(_, ts)| ts.iter().any(|t| templates.contains(t)))
            .flat_map(|(_, ts)| ts.iter().cloned())
            .collect();
        let mut relaxed = members(&mut module_templates.iter());
        if relaxed.is_empty() {
            relaxed = restricted.clone();
        }
        Pools { restricted, relaxed }
    }
}

/// Mutates `tc` once. Restricted mode keeps every call of `tc` in order;
/// relaxed mode widens the insertion pool and may delete one call.
pub fn mutate<R: Rng>(
    tc: &TestCase,
    mode: Mode,
    p: &Program,
    pools: &Pools,
    removal_probability: f64,
    rng: &mut R,
) -> (TestCase, Mutation) {
    let mut out = tc.clone();
    if mode == Mode::Relaxed && out.len() > 1 && rng.gen_bool(removal_probability) {
        let at = rng.gen_range(0..out.len());
        let c = out.calls.remove(at);
        return (out, Mutation::Remove { at, syscall: c.syscall });
    }
    let pool = match mode {
        Mode::Restricted => &pools.restricted,
        Mode::Relaxed => &pools.relaxed,
    };
    let with_args: Vec<usize> = (0..out.len()).filter(|&i| !out.calls[i].args.is_empty()).collect();
    let can_insert = !pool.is_empty() && out.len() < MAX_CALLS;
    let insert = match (can_insert, with_args.is_empty()) {
        (false, true) => return (out, Mutation::None),
        (true, true) => true,
        (false, false) => false,
        (true, false) => rng.gen_bool(0.5),
    };
    if insert {
        let syscall = pool.choose(rng).expect("nonempty pool").clone();
        let arity = p.entry(&syscall).map(|id| p.func(id).params.len()).unwrap_or(0);
        let args: Vec<u64> = (0..arity).map(|_| *INTERESTING.choose(rng).expect("constants")).collect();
        let at = rng.gen_range(0..=out.len());
        out.calls.insert(at, Call::new(syscall.clone(), args));
        return (out, Mutation::Insert { at, syscall });
    }
    let call = *with_args.choose(rng).expect("nonempty");
    let arg = rng.gen_range(0..out.calls[call].args.len());
    let from = out.calls[call].args[arg];
    let to = match rng.gen_range(0..4) {
        0 => from ^ (1u64 << rng.gen_range(0..64)),
        1 => from.wrapping_add(1),
        2 => from.wrapping_sub(1),
        _ => *INTERESTING.choose(rng).expect("constants"),
    };
    out.calls[call].args[arg] = to;
    (out, Mutation::Arg { call, arg, from, to })
}
