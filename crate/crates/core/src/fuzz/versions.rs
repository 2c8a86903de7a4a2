//! Version sets and the same-bug decision procedure.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::exec::{execute, ExecConfig};
use crate::ir::{apply_diff, parse_diff, parse_program, Diff, Program};

use super::{Context, Fingerprint};

/// Program source at bug discovery, the commits up to the fix, and the fix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionSet {
    pub base_text: String,
    pub intermediate_diffs: Vec<Diff>,
    pub patch_diff: Diff,
}

#[derive(Debug, thiserror::Error)]
pub enum VersionError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("the fully patched version does not build: {0}")]
    Build(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SameBugVerdict {
    SameBug,
    DifferentBug,
    Ambiguous,
}

/// Reads `base.mk`, the numbered `NNNN.diff` files in order, and
/// `patch.diff` from `dir`.
pub fn load_version_set(dir: &Path) -> Result<VersionSet, VersionError> {
    let read = |path: PathBuf| fs::read_to_string(&path).map_err(|source| VersionError::Io { path, source });
    let diff = |path: PathBuf| -> Result<Diff, VersionError> {
        let text = read(path.clone())?;
        parse_diff(&text).map_err(|e| VersionError::Malformed { path, message: e.to_string() })
    };
    let base_text = read(dir.join("base.mk"))?;
    let entries = fs::read_dir(dir).map_err(|source| VersionError::Io { path: dir.to_path_buf(), source })?;
    let mut numbered = Vec::new();
    for e in entries {
        let e = e.map_err(|source| VersionError::Io { path: dir.to_path_buf(), source })?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".diff") {
            if !stem.is_empty() && stem.bytes().all(|b| b.is_ascii_digit()) {
                numbered.push((stem.parse::<u64>().unwrap_or(u64::MAX), e.path()));
            }
        }
    }
    numbered.sort();
    let intermediate_diffs = numbered.into_iter().map(|(_, path)| diff(path)).collect::<Result<_, _>>()?;
    let patch_diff = diff(dir.join("patch.diff"))?;
    let vs = VersionSet { base_text, intermediate_diffs, patch_diff };
    vs.fully_patched()?;
    Ok(vs)
}

impl VersionSet {
    fn build(&self, diffs: &[&Diff]) -> Option<Program> {
        let mut text = self.base_text.clone();
        for d in diffs {
            text = apply_diff(&text, d).ok()?;
        }
        parse_program(&text).ok()
    }

    /// Base plus every intermediate commit plus the patch.
    pub fn fully_patched(&self) -> Result<Program, VersionError> {
        let mut text = self.base_text.clone();
        for (i, d) in self.intermediate_diffs.iter().chain([&self.patch_diff]).enumerate() {
            text = apply_diff(&text, d).map_err(|c| VersionError::Build(format!("diff {}: {c}", i + 1)))?;
        }
        parse_program(&text).map_err(|e| VersionError::Build(e.to_string()))
    }

    /// Base with only the patch applied, if it applies and parses.
    pub fn patch_on_base(&self) -> Option<Program> {
        self.build(&[&self.patch_diff])
    }

    /// Base plus the intermediate commits, without the patch.
    pub fn unpatched_head(&self) -> Option<Program> {
        self.build(&self.intermediate_diffs.iter().collect::<Vec<_>>())
    }
}

fn triggers(p: &Program, ctx: &Context, cfg: &ExecConfig) -> bool {
    execute(p, &ctx.poc, cfg).impacts.iter().any(|i| Fingerprint::of(i) == ctx.fingerprint)
}

/// Whether `ctx` exhibits the bug fixed by `vs`'s patch.
pub fn confirm_same_bug(ctx: &Context, vs: &VersionSet, cfg: &ExecConfig) -> Result<SameBugVerdict, VersionError> {
    if triggers(&vs.fully_patched()?, ctx, cfg) {
        return Ok(SameBugVerdict::DifferentBug);
    }
    if let Some(p) = vs.patch_on_base() {
        return Ok(if triggers(&p, ctx, cfg) { SameBugVerdict::DifferentBug } else { SameBugVerdict::SameBug });
    }
    match vs.unpatched_head() {
        Some(p) if triggers(&p, ctx, cfg) => Ok(SameBugVerdict::SameBug),
        _ => Ok(SameBugVerdict::Ambiguous),
    }
}
