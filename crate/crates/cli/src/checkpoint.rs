//! Checkpoints: a JSON manifest describing the architecture and tensor
//! catalog, next to a contiguous little-endian fp32 payload.
//!
//! Weights are trained and evaluated in fp64; the payload narrows to
//! fp32 to halve size, so a save/load round trip perturbs forward
//! outputs by at most fp32 rounding (the documented 1e-6 relative
//! budget). Catalog offsets are byte positions into `weights.bin`,
//! non-overlapping and covering the file exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bridge_core::model::{BridgeConfig, BridgeParams};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset of this tensor's fp32 data in `weights.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config_digest: String,
    pub model: BridgeConfig,
    pub catalog: Vec<CatalogEntry>,
}

/// Writes `manifest.json` and `weights.bin` into `dir`, returning the
/// manifest path (the path other commands mean by "the checkpoint").
pub fn save(dir: &Path, params: &BridgeParams, config_digest: &str) -> Result<PathBuf, CliError> {
    let mut catalog = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    params.visit(&mut |name, tensor| {
        catalog.push(CatalogEntry {
            name: name.to_string(),
            rows: tensor.rows(),
            cols: tensor.cols(),
            offset: payload.len() as u64,
        });
        for &v in tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let manifest = Manifest {
        format_version: 1,
        config_digest: config_digest.to_string(),
        model: params.config.clone(),
        catalog,
    };

    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    std::fs::write(&weights_path, &payload).map_err(|e| CliError::io(&weights_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text + "\n").map_err(|e| CliError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads a checkpoint back into fp64 parameters, validating the catalog
/// against the manifest's architecture.
pub fn load(manifest_path: &Path) -> Result<(BridgeParams, Manifest), CliError> {
    let bad = |reason: String| CliError::Checkpoint { reason };

    let text =
        std::fs::read_to_string(manifest_path).map_err(|e| CliError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| bad(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != 1 {
        return Err(bad(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    manifest.model.validate()?;

    let weights_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(WEIGHTS_FILE);
    let payload = std::fs::read(&weights_path).map_err(|e| CliError::io(&weights_path, e))?;

    // The architecture dictates the exact tensor list; the catalog must
    // name the same tensors with the same shapes at contiguous offsets.
    let mut params = BridgeParams::init(manifest.model.clone(), 0)?;
    let expected = params.catalog();
    if expected.len() != manifest.catalog.len() {
        return Err(bad(format!(
            "catalog lists {} tensors, architecture has {}",
            manifest.catalog.len(),
            expected.len()
        )));
    }
    let mut cursor = 0u64;
    for (entry, (name, (rows, cols))) in manifest.catalog.iter().zip(&expected) {
        if &entry.name != name {
            return Err(bad(format!(
                "catalog names {} where the architecture expects {name}",
                entry.name
            )));
        }
        if entry.rows != *rows || entry.cols != *cols {
            return Err(bad(format!(
                "{name}: catalog shape {}x{} does not match architecture {rows}x{cols}",
                entry.rows, entry.cols
            )));
        }
        if entry.offset != cursor {
            return Err(bad(format!(
                "{name}: offset {} overlaps or skips bytes (expected {cursor})",
                entry.offset
            )));
        }
        cursor += (entry.rows * entry.cols * 4) as u64;
    }
    if payload.len() as u64 != cursor {
        return Err(bad(format!(
            "weights payload is {} bytes, catalog covers {cursor}",
            payload.len()
        )));
    }

    let mut cursor = 0usize;
    params.visit_mut(&mut |_, tensor| {
        for v in tensor.data_mut() {
            let bytes: [u8; 4] = payload[cursor..cursor + 4].try_into().expect("bounds");
            *v = f64::from(f32::from_le_bytes(bytes));
            cursor += 4;
        }
    });
    Ok((params, manifest))
}
