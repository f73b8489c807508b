use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::failure::Failure;

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// `manifest.json`: the command, its resolved inputs and the build version.
/// The wall-clock stamp sits in its own `created_unix` key so manifests of
/// identical runs differ only there.
pub fn write_manifest(dir: &Path, command: &str, inputs: Value) -> Result<(), Failure> {
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "parallel": cfg!(feature = "parallel"),
        "inputs": inputs,
        "created_unix": created,
    });
    write_json(&dir.join("manifest.json"), &manifest)
}
