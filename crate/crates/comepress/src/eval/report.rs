//! Deterministic JSON report emission and the loaders the CLI consumes.
//!
//! Reports are plain serde structs (no hash maps), so field order is fixed
//! and identical inputs serialize to byte-identical files. Loaders validate
//! structure before anything downstream touches the data; they operate on
//! raw bytes so untrusted files can be checked (and fuzzed) in isolation.

use crate::error::Result;
use crate::merging::PruneReport;
use serde::Serialize;
use std::path::Path;

/// Serialize to pretty JSON with a trailing newline.
pub fn to_report_string<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Write a report; identical inputs produce byte-identical files.
pub fn emit_report<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, to_report_string(value)?)?;
    Ok(())
}

/// Parse and validate a pruning report (the `--mapping` input of `distill`).
pub fn parse_prune_report(bytes: &[u8]) -> Result<PruneReport> {
    let report: PruneReport = serde_json::from_slice(bytes)?;
    report.validate()?;
    Ok(report)
}

pub fn load_prune_report(path: &Path) -> Result<PruneReport> {
    parse_prune_report(&std::fs::read(path)?)
}
