use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::tensor::Array;

/// On-disk checkpoint: every parameter as shape + base64 little-endian f64
/// payload, plus a config echo and the training RNG position. Round-trips
/// bit-exactly.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_echo: String,
    pub seed: u64,
    pub step: u64,
    params: BTreeMap<String, StoredArray>,
}

#[derive(Serialize, Deserialize)]
struct StoredArray {
    shape: Vec<usize>,
    data_b64: String,
}

fn encode(a: &Array) -> StoredArray {
    let mut bytes = Vec::with_capacity(a.numel() * 8);
    for v in a.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    StoredArray { shape: a.shape().to_vec(), data_b64: B64.encode(bytes) }
}

fn decode(s: &StoredArray) -> Result<Array> {
    let bytes = B64
        .decode(&s.data_b64)
        .map_err(|e| Error::invalid(format!("checkpoint payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::invalid("checkpoint payload length not a multiple of 8"));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array::new(s.shape.clone(), data)
}

impl Checkpoint {
    pub fn capture(
        config_echo: &str,
        seed: u64,
        step: u64,
        models: &[(&str, &ModelParams)],
    ) -> Self {
        let mut params = BTreeMap::new();
        for (label, m) in models {
            for p in &m.entries {
                params.insert(format!("{label}.{}", p.name), encode(&p.value));
            }
        }
        Checkpoint { config_echo: config_echo.to_string(), seed, step, params }
    }

    /// Write parameters back into the given models; every entry must be
    /// present with a matching shape.
    pub fn restore(&self, models: &mut [(&str, &mut ModelParams)]) -> Result<()> {
        for (label, m) in models {
            for p in &mut m.entries {
                let key = format!("{label}.{}", p.name);
                let stored = self
                    .params
                    .get(&key)
                    .ok_or_else(|| Error::invalid(format!("checkpoint missing `{key}`")))?;
                let arr = decode(stored)?;
                if arr.shape() != p.value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "checkpoint-restore",
                        details: format!("{key}: {:?} vs {:?}", arr.shape(), p.value.shape()),
                    });
                }
                p.value = arr;
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string_pretty(ckpt)
        .map_err(|e| Error::invalid(format!("checkpoint encode: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("checkpoint decode: {e}")))
}
