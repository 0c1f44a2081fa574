//! Checkpoint file format.
//!
//! A text manifest header (key/value config fields plus one `tensor` line
//! per weight with name, shape and float offset), an `end-header` marker,
//! the raw little-endian f64 payload in manifest order, and a 4-byte
//! little-endian CRC-32 trailer over everything before it. Round trips are
//! bit-exact.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelConfig, ModelParams};

const MAGIC: &str = "resetox-weights v1";

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

pub fn save_weights(params: &ModelParams, path: &Path) -> Result<()> {
    let cfg = &params.config;
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (key, value) in [
        ("vocab_size", cfg.vocab_size),
        ("d_model", cfg.d_model),
        ("n_heads", cfg.n_heads),
        ("d_k", cfg.d_k),
        ("n_layers_enc", cfg.n_layers_enc),
        ("n_layers_dec", cfg.n_layers_dec),
        ("d_ff", cfg.d_ff),
        ("max_len", cfg.max_len),
    ] {
        header.push_str(&format!("{key} = {value}\n"));
    }
    let mut offset = 0usize;
    let mut payload: Vec<u8> = Vec::new();
    params.visit(&mut |name, t| {
        header.push_str(&format!(
            "tensor {name} {} {} {offset}\n",
            t.shape()[0],
            t.shape()[1]
        ));
        offset += t.numel();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    header.push_str("end-header\n");

    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    let crc = crc32(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, bytes)?;
    Ok(())
}

struct ManifestEntry {
    rows: usize,
    cols: usize,
    offset: usize,
}

pub fn load_weights(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 {
        return Err(Error::Format("weight file truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([trailer[0], trailer[1], trailer[2], trailer[3]]);
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }

    // Header is everything up to and including the end-header line.
    let marker = b"end-header\n";
    let header_end = body
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Format("missing end-header marker".into()))?
        + marker.len();
    let header = std::str::from_utf8(&body[..header_end])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let data = &body[header_end..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Format("not a resetox weight file".into()));
    }
    let mut fields: HashMap<String, usize> = HashMap::new();
    let mut manifest: Vec<(String, ManifestEntry)> = Vec::new();
    for line in lines {
        if line == "end-header" {
            break;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!("malformed tensor line: {line:?}")));
            }
            let parse = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad number {s:?} in tensor line")))
            };
            manifest.push((
                parts[0].to_string(),
                ManifestEntry {
                    rows: parse(parts[1])?,
                    cols: parse(parts[2])?,
                    offset: parse(parts[3])?,
                },
            ));
        } else if let Some((key, value)) = line.split_once(" = ") {
            fields.insert(
                key.trim().to_string(),
                value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad config value in {line:?}")))?,
            );
        } else {
            return Err(Error::Format(format!("unrecognized header line: {line:?}")));
        }
    }

    let field = |name: &str| -> Result<usize> {
        fields
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing config field {name}")))
    };
    let config = ModelConfig {
        vocab_size: field("vocab_size")?,
        d_model: field("d_model")?,
        n_heads: field("n_heads")?,
        d_k: field("d_k")?,
        n_layers_enc: field("n_layers_enc")?,
        n_layers_dec: field("n_layers_dec")?,
        d_ff: field("d_ff")?,
        max_len: field("max_len")?,
    };
    config.validate()?;

    let total_floats = data.len() / 8;
    if data.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64s".into()));
    }
    let by_name: HashMap<&str, &ManifestEntry> = manifest
        .iter()
        .map(|(n, e)| (n.as_str(), e))
        .collect();

    // Template establishes the expected tensor set and shapes for the config.
    let template = ModelParams::init(config, 0)?;
    let mut loaded = template.clone();
    let mut failure: Option<Error> = None;
    loaded.visit_mut(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.get(name.as_str()) else {
            failure = Some(Error::Format(format!("tensor {name} missing from manifest")));
            return;
        };
        let expected = slot.shape().to_vec();
        if [entry.rows, entry.cols] != expected[..] {
            failure = Some(Error::Format(format!(
                "tensor {name}: shape [{}, {}] does not match expected {expected:?}",
                entry.rows, entry.cols
            )));
            return;
        }
        let numel = entry.rows * entry.cols;
        if entry.offset + numel > total_floats {
            failure = Some(Error::Format(format!(
                "tensor {name}: data range out of bounds"
            )));
            return;
        }
        let mut values = Vec::with_capacity(numel);
        let start = entry.offset * 8;
        for i in 0..numel {
            let chunk: [u8; 8] = data[start + i * 8..start + (i + 1) * 8].try_into().unwrap();
            values.push(f64::from_le_bytes(chunk));
        }
        if values.iter().any(|v| !v.is_finite()) {
            failure = Some(Error::Format(format!("tensor {name}: non-finite values")));
            return;
        }
        *slot = Arc::new(Tensor::matrix(entry.rows, entry.cols, values).unwrap());
    });
    if let Some(err) = failure {
        return Err(err);
    }
    Ok(loaded.with_positions())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            d_k: 4,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 16,
            max_len: 100,
        }
    }

    #[test]
    fn save_load_save_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let params = ModelParams::init(small_config(), 7).unwrap();
        save_weights(&params, &p1).unwrap();
        let loaded = load_weights(&p1).unwrap();
        save_weights(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let params = ModelParams::init(small_config(), 7).unwrap();
        save_weights(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Format(_))));
    }

    #[test]
    fn corrupted_payload_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let params = ModelParams::init(small_config(), 7).unwrap();
        save_weights(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        let err = load_weights(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn mismatched_vocab_size_names_the_offending_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let params = ModelParams::init(small_config(), 7).unwrap();
        save_weights(&params, &path).unwrap();

        // Rewrite the manifest to claim a different vocab_size and re-seal
        // the checksum, leaving the tensor shapes inconsistent with it.
        let bytes = std::fs::read(&path).unwrap();
        let body = &bytes[..bytes.len() - 4];
        let text_end = body.windows(11).position(|w| w == b"end-header\n").unwrap() + 11;
        let header = String::from_utf8(body[..text_end].to_vec()).unwrap();
        let tampered = header.replace("vocab_size = 12", "vocab_size = 20");
        let mut new_body = tampered.into_bytes();
        new_body.extend_from_slice(&body[text_end..]);
        let crc = crc32(&new_body);
        new_body.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, new_body).unwrap();

        let err = load_weights(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("embedding") && msg.contains("shape"), "{msg}");
    }

    #[test]
    fn crc32_known_vector() {
        // CRC-32 of "123456789" is 0xCBF43926.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }
}
