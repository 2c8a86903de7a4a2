//! Unified-diff subset over program text.
//!
//! Only `@@ -a,b +c,d @@` hunks with ` `, `-` and `+` lines are understood;
//! `---`/`+++` file headers and `\ No newline` markers are skipped.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HunkLine {
    Context(String),
    Remove(String),
    Add(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    /// 1-based line in the original text where the hunk starts.
    pub old_start: usize,
    pub lines: Vec<HunkLine>,
}

impl Hunk {
    /// Lines the hunk expects to find (context and removals, in order).
    pub fn old_lines(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                HunkLine::Context(s) | HunkLine::Remove(s) => Some(s.as_str()),
                HunkLine::Add(_) => None,
            })
            .collect()
    }

    pub fn new_lines(&self) -> Vec<&str> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                HunkLine::Context(s) | HunkLine::Add(s) => Some(s.as_str()),
                HunkLine::Remove(_) => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Diff {
    pub hunks: Vec<Hunk>,
}

impl Diff {
    pub fn is_empty(&self) -> bool {
        self.hunks.is_empty()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiffError {
    #[error("line {line}: malformed hunk header `{text}`")]
    BadHeader { line: usize, text: String },
    #[error("line {line}: diff body line outside any hunk")]
    Orphan { line: usize },
    #[error("line {line}: unexpected diff line `{text}`")]
    BadLine { line: usize, text: String },
    #[error("hunk {hunk}: line counts disagree with header")]
    Count { hunk: usize },
}

/// A hunk whose expected lines were not found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conflict {
    /// Index of the first failing hunk.
    pub hunk: usize,
    pub old_start: usize,
}

impl fmt::Display for Conflict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "hunk #{} (at line {}) does not apply", self.hunk + 1, self.old_start)
    }
}

fn parse_range(s: &str) -> Option<(usize, usize)> {
    match s.split_once(',') {
        Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
        None => Some((s.parse().ok()?, 1)),
    }
}

fn parse_header(line: &str) -> Option<((usize, usize), (usize, usize))> {
    let rest = line.strip_prefix("@@ -")?;
    let (old, rest) = rest.split_once(" +")?;
    let (new, _) = rest.split_once(" @@")?;
    Some((parse_range(old)?, parse_range(new)?))
}

pub fn parse_diff(text: &str) -> Result<Diff, DiffError> {
    let mut hunks: Vec<Hunk> = Vec::new();
    let mut expect: Vec<(usize, usize)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.starts_with("@@") {
            let ((os, oc), (_, nc)) =
                parse_header(line).ok_or_else(|| DiffError::BadHeader { line: lineno, text: line.to_string() })?;
            hunks.push(Hunk { old_start: os, lines: Vec::new() });
            expect.push((oc, nc));
            continue;
        }
        if hunks.is_empty() {
            // Preamble: file headers, commit message, anything else.
            continue;
        }
        if line.starts_with("--- ") || line.starts_with("+++ ") || line.starts_with("diff ") {
            continue;
        }
        if line.starts_with('\\') {
            continue;
        }
        let h = hunks.last_mut().unwrap();
        let body = match line.chars().next() {
            Some(' ') => HunkLine::Context(line[1..].to_string()),
            Some('-') => HunkLine::Remove(line[1..].to_string()),
            Some('+') => HunkLine::Add(line[1..].to_string()),
            None => HunkLine::Context(String::new()),
            _ => return Err(DiffError::BadLine { line: lineno, text: line.to_string() }),
        };
        h.lines.push(body);
    }
    for (i, (h, (oc, nc))) in hunks.iter().zip(&expect).enumerate() {
        if h.old_lines().len() != *oc || h.new_lines().len() != *nc {
            return Err(DiffError::Count { hunk: i });
        }
    }
    Ok(Diff { hunks })
}

fn matches_at(lines: &[&str], at: usize, want: &[&str]) -> bool {
    at + want.len() <= lines.len() && lines[at..at + want.len()] == *want
}

/// Applies `d` to `text`.
///
/// Each hunk is tried at its recorded position (shifted by earlier hunks'
/// growth) and otherwise at the nearest position after the previous hunk where
/// its old lines match exactly.
pub fn apply_diff(text: &str, d: &Diff) -> Result<String, Conflict> {
    if d.hunks.is_empty() {
        return Ok(text.to_string());
    }
    let lines: Vec<&str> = text.lines().collect();
    let mut out: Vec<&str> = Vec::new();
    let mut cursor = 0usize;
    for (hi, h) in d.hunks.iter().enumerate() {
        let old = h.old_lines();
        // A 0-length old range names the line *after* which to insert.
        let nominal = if old.is_empty() { h.old_start } else { h.old_start.saturating_sub(1) };
        let conflict = Conflict { hunk: hi, old_start: h.old_start };
        let at = if nominal >= cursor && matches_at(&lines, nominal, &old) {
            nominal
        } else {
            let mut best: Option<usize> = None;
            for at in cursor..=lines.len().saturating_sub(old.len()) {
                if matches_at(&lines, at, &old) {
                    let better = best.map_or(true, |b| at.abs_diff(nominal) < b.abs_diff(nominal));
                    if better {
                        best = Some(at);
                    }
                }
            }
            best.ok_or(conflict)?
        };
        out.extend_from_slice(&lines[cursor..at]);
        out.extend(h.new_lines());
        cursor = at + old.len();
    }
    out.extend_from_slice(&lines[cursor..]);
    let mut s = out.join("\n");
    s.push('\n');
    Ok(s)
}
