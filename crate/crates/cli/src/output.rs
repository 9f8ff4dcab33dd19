//! CSV documents with a `#` metadata header.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use pimnb::nn::FORMAT_VERSION;

use crate::config::RunConfig;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Prefix of the only metadata line that varies between identical runs.
pub const TIMESTAMP_PREFIX: &str = "# timestamp:";

pub struct CsvDoc {
    text: String,
}

impl CsvDoc {
    pub fn new(command: &str, cfg: &RunConfig, seeds: &str, header: &str) -> Self {
        let mut text = String::new();
        let _ = writeln!(text, "# pimnb {ARTIFACT_VERSION}");
        let _ = writeln!(text, "# model_format_version: {FORMAT_VERSION}");
        let _ = writeln!(text, "# command: {command}");
        let _ = writeln!(text, "# config_sha256: {}", cfg.sha256());
        let _ = writeln!(text, "# seed: {seeds}");
        for (k, v) in cfg.entries() {
            let _ = writeln!(text, "# config: {k} = {v}");
        }
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let _ = writeln!(text, "{TIMESTAMP_PREFIX} {secs}");
        text.push_str(header.trim_end());
        text.push('\n');
        Self { text }
    }

    pub fn note(&mut self, line: &str) {
        // Notes go before the column header, so they stay in the comment block.
        let at = self.text.trim_end().rfind('\n').map_or(0, |i| i + 1);
        self.text.insert_str(at, &format!("# {line}\n"));
    }

    pub fn row(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    /// Appends pre-rendered CSV rows (no header).
    pub fn rows(&mut self, body: &str) {
        self.text.push_str(body);
    }

    #[cfg(test)]
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Writes to `path`, or stdout when `None`.
    pub fn emit(&self, path: Option<&Path>) -> std::io::Result<()> {
        match path {
            Some(p) => std::fs::write(p, &self.text),
            None => {
                use std::io::Write;
                std::io::stdout().write_all(self.text.as_bytes())
            }
        }
    }
}

/// The document without its timestamp line, for byte comparison.
#[cfg(test)]
pub fn strip_timestamp(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with(TIMESTAMP_PREFIX)).map(|l| format!("{l}\n")).collect()
}
