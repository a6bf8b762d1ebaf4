//! JSON emission with sorted keys, for byte-reproducible artifacts.

use std::path::Path;

use serde::Serialize;

/// Serialize with recursively sorted object keys (serde_json's `Value` map
/// is a `BTreeMap`, so a round trip through `Value` sorts everything).
pub fn to_sorted_string(value: &impl Serialize) -> serde_json::Result<String> {
    let v: serde_json::Value = serde_json::to_value(value)?;
    serde_json::to_string_pretty(&v)
}

pub fn write_sorted(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    let text = to_sorted_string(value)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    std::fs::write(path, text + "\n")
}
