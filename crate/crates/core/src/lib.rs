//! Impact escalation for memory-safety bugs in MiniKernel programs.
//!
//! Stages: [`exec`] reproduces a PoC under a sanitizer, [`fuzz`] finds new
//! contexts for the bug, [`taint`] estimates hidden impacts statically,
//! [`sym`] explores and validates them, and [`pipeline`] produces the
//! report. [`ir`] holds the program representation.

pub mod exec;
pub mod fuzz;
pub mod ir;
pub mod pipeline;
pub mod sym;
pub mod taint;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ir.md")]
    mod ir {}
    #[doc = include_str!("../../../book/src/exec.md")]
    mod exec {}
    #[doc = include_str!("../../../book/src/taint.md")]
    mod taint {}
    #[doc = include_str!("../../../book/src/sym.md")]
    mod sym {}
    #[doc = include_str!("../../../book/src/fuzz.md")]
    mod fuzz {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
