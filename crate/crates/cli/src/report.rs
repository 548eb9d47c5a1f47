//! Report emission: JSON with a deterministic header, and CSV for processes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use geval_core::AdaptedProcess;

#[derive(Debug, Serialize)]
pub struct Header {
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub header: Header,
    pub command: String,
    pub body: Value,
}

pub fn config_hash(raw: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(raw);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Report {
    pub fn new(command: &str, seed: Option<u64>, config_hash: String, body: Value) -> Self {
        Report {
            header: Header {
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                config_hash,
            },
            command: command.to_string(),
            body,
        }
    }

    pub fn write(&self, out: Option<&Path>) -> Result<(), String> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| e.to_string())?;
        text.push('\n');
        match out {
            Some(path) => fs::write(path, text).map_err(|e| e.to_string()),
            None => {
                let stdout = std::io::stdout();
                stdout.lock().write_all(text.as_bytes()).map_err(|e| e.to_string())
            }
        }
    }
}

/// CSV with columns time_index,node_index,value.
pub fn process_csv(y: &AdaptedProcess) -> String {
    let mut out = String::from("time_index,node_index,value\n");
    for layer in &y.0 {
        for (node, v) in layer.values.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", layer.time, node, v));
        }
    }
    out
}
