//! Output files. Every JSON, CSV and PNG written by a command carries the
//! resolved run config and a SHA-256 of the dataset it was computed on.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use tripatch::data_io::Dataset;

use crate::config::RunConfig;
use crate::error::CliError;

/// Hash over the dataset content: format, class filter, and every record's
/// id, image size, pixel values and boxes in load order.
pub fn dataset_hash(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    let head = serde_json::to_string(&(&ds.manifest.format, &ds.manifest.class_filter, ds.records.len()))
        .expect("manifest serializes");
    h.update(head.as_bytes());
    for r in &ds.records {
        h.update((r.id.len() as u64).to_le_bytes());
        h.update(r.id.as_bytes());
        h.update((r.image.height() as u64).to_le_bytes());
        h.update((r.image.width() as u64).to_le_bytes());
        for v in r.image.as_slice() {
            h.update(v.to_le_bytes());
        }
        h.update((r.person_boxes.len() as u64).to_le_bytes());
        for b in &r.person_boxes {
            for c in b.to_array() {
                h.update(c.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Where a result came from.
pub struct Provenance<'a> {
    pub command: &'static str,
    pub config: &'a RunConfig,
    pub dataset_sha256: String,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    dataset_sha256: &'a str,
    config: &'a RunConfig,
    result: &'a T,
}

impl Provenance<'_> {
    fn config_json(&self) -> String {
        serde_json::to_string(self.config).expect("config serializes")
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, result: &T) -> Result<(), CliError> {
        let env = Envelope {
            tool: "tripatch",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            dataset_sha256: &self.dataset_sha256,
            config: self.config,
            result,
        };
        let mut text = serde_json::to_string_pretty(&env).expect("report serializes");
        text.push('\n');
        write(path, text.as_bytes())
    }

    /// CSV preceded by `#` comment lines holding the provenance.
    pub fn write_csv(&self, path: &Path, body: &[u8]) -> Result<(), CliError> {
        let mut out = format!(
            "# tripatch {} {}\n# dataset_sha256: {}\n# config: {}\n",
            self.command,
            env!("CARGO_PKG_VERSION"),
            self.dataset_sha256,
            self.config_json()
        )
        .into_bytes();
        out.extend_from_slice(body);
        write(path, &out)
    }

    pub fn png_text(&self) -> Vec<(&'static str, String)> {
        vec![
            ("tripatch:command", self.command.to_string()),
            ("tripatch:dataset_sha256", self.dataset_sha256.clone()),
            ("tripatch:config", self.config_json()),
        ]
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn borrow_text<'a>(text: &'a [(&'static str, String)]) -> Vec<(&'static str, &'a str)> {
    text.iter().map(|(k, v)| (*k, v.as_str())).collect()
}
