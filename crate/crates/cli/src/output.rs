//! Result writers. Every file goes through a temporary sibling and an
//! atomic rename, so a failed command never leaves a truncated file.

use std::io::Write;
use std::path::{Path, PathBuf};

use ixplore_core::engine::RunLog;
use serde::Serialize;

use crate::CliError;

pub const ROUNDS_HEADER: [&str; 11] = [
    "replicate",
    "t",
    "stage",
    "type_id",
    "message",
    "arm",
    "reward",
    "expected_reward",
    "regret",
    "lambda_min",
    "lambda_diag",
];

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn rounds_csv(logs: &[RunLog]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Runtime(format!("csv: {e}"));
    w.write_record(ROUNDS_HEADER).map_err(io)?;
    for log in logs {
        for r in &log.rounds {
            let rec = &r.record;
            let (lmin, ldiag) = match log.snapshot_at(rec.t) {
                Some(s) => (fmt_f64(s.lambda_min), fmt_f64(s.lambda_diag)),
                None => (String::new(), String::new()),
            };
            w.write_record([
                log.replicate.to_string(),
                rec.t.to_string(),
                r.stage.as_str().to_string(),
                rec.type_id.to_string(),
                rec.message.as_ref().map(ToString::to_string).unwrap_or_default(),
                rec.arm.to_string(),
                fmt_f64(rec.reward),
                fmt_f64(r.expected_reward),
                fmt_f64(r.regret),
                lmin,
                ldiag,
            ])
            .map_err(io)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(format!("json: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Files staged in memory and committed together.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((PathBuf::from(name), bytes));
    }

    /// Writes every staged file into `dir`. All temporaries are written and
    /// flushed before the first rename.
    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        let io = |what: &str, e: std::io::Error| CliError::Runtime(format!("{what} {}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(|e| io("cannot create", e))?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, bytes) in self.files {
            let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io("cannot write into", e))?;
            tmp.write_all(&bytes).map_err(|e| io("cannot write into", e))?;
            tmp.as_file().sync_all().map_err(|e| io("cannot write into", e))?;
            staged.push((tmp, dir.join(name)));
        }
        let mut written = Vec::with_capacity(staged.len());
        for (tmp, dest) in staged {
            tmp.persist(&dest)
                .map_err(|e| CliError::Runtime(format!("cannot rename into {}: {}", dest.display(), e.error)))?;
            written.push(dest);
        }
        Ok(written)
    }
}
