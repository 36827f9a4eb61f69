//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SWAE" | version u8 = 1 | manifest length u64 | SHA-256(manifest ‖ data)
//!        | manifest (JSON) | data (f64 arrays)
//! ```
//!
//! The manifest names every array with its shape and offset (in f64s) into
//! the data section. Parameters and Adam moments live in the data section
//! so they round-trip bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::OptimState;
use crate::config::TrainConfig;
use crate::data::Vocab;
use crate::params::Params;
use crate::seqmodel::{ModelDims, SeqModel};
use crate::train::{Example, LogRow, TrainState, Trainer};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SWAE";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 8 + 32;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    /// Decimal string; JSON numbers cannot hold a u128.
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    vocab: Vec<String>,
    dims: ModelDims,
    stochastic: bool,
    state: TrainState,
    optim_step: u64,
    rng: RngState,
    examples: Vec<Example>,
    arrays: Vec<ArrayEntry>,
}

/// Serializes the full training state.
pub fn encode_checkpoint(t: &Trainer) -> Result<Vec<u8>> {
    let params = &t.model.params;
    let mut arrays = Vec::new();
    let mut data: Vec<f64> = Vec::with_capacity(3 * params.num_scalars());
    let mut push = |name: String, shape: &[usize], values: &[f64]| {
        arrays.push(ArrayEntry {
            name,
            shape: shape.to_vec(),
            offset: data.len(),
        });
        data.extend_from_slice(values);
    };
    for (i, name) in params.names.iter().enumerate() {
        push(name.clone(), &params.shapes[i], &params.values[i]);
    }
    let moments = t.optim.first.len() == params.len() && t.optim.second.len() == params.len();
    if moments {
        for (i, name) in params.names.iter().enumerate() {
            push(format!("adam.m/{name}"), &params.shapes[i], &t.optim.first[i]);
            push(format!("adam.v/{name}"), &params.shapes[i], &t.optim.second[i]);
        }
    }
    let manifest = Manifest {
        config: t.config.clone(),
        vocab: t.vocab.tokens().to_vec(),
        dims: t.model.dims,
        stochastic: t.model.stochastic,
        state: t.state.clone(),
        optim_step: t.optim.step,
        rng: RngState {
            seed: t.rng.get_seed().to_vec(),
            stream: t.rng.get_stream(),
            word_pos: t.rng.get_word_pos().to_string(),
        },
        examples: t.examples.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Integrity(format!("manifest encoding failed: {e}")))?;
    let mut body = Vec::with_capacity(json.len() + 8 * data.len());
    body.extend_from_slice(&json);
    for v in &data {
        body.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&body);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&body);
    Ok(out)
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

/// Parses and verifies a checkpoint. No partial state is returned on error.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < 5 {
        return Err(integrity("checkpoint truncated before header"));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::UnsupportedFormat("missing SWAE magic bytes".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "checkpoint version {} (reader supports {VERSION})",
            bytes[4]
        )));
    }
    if bytes.len() < HEADER_LEN {
        return Err(integrity("checkpoint truncated in header"));
    }
    let mlen = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if (body.len() as u64) < mlen {
        return Err(integrity("checkpoint truncated in manifest"));
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != &bytes[13..45] {
        return Err(integrity("checksum mismatch"));
    }
    let mlen = mlen as usize;
    let manifest: Manifest = serde_json::from_slice(&body[..mlen])
        .map_err(|e| integrity(format!("bad manifest: {e}")))?;
    let raw = &body[mlen..];
    if !raw.len().is_multiple_of(8) {
        return Err(integrity("data section is not a whole number of f64s"));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let read = |e: &ArrayEntry| -> Result<Vec<f64>> {
        let n: usize = e.shape.iter().product();
        data.get(e.offset..e.offset + n)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| integrity(format!("array {} out of bounds", e.name)))
    };
    let mut params = Params::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for e in &manifest.arrays {
        let values = read(e)?;
        if let Some(name) = e.name.strip_prefix("adam.m/") {
            check_moment(&params, name, first.len())?;
            first.push(values);
        } else if let Some(name) = e.name.strip_prefix("adam.v/") {
            check_moment(&params, name, second.len())?;
            second.push(values);
        } else {
            if params.index(&e.name).is_some() {
                return Err(integrity(format!("duplicate array {}", e.name)));
            }
            params.push(&e.name, e.shape.clone(), values);
        }
    }
    if first.len() != second.len() || (!first.is_empty() && first.len() != params.len()) {
        return Err(integrity("optimizer moments do not cover every parameter"));
    }
    let model = SeqModel::from_params(manifest.dims, manifest.stochastic, params)
        .map_err(|e| integrity(format!("parameters do not match the model: {e}")))?;
    let vocab = Vocab::from_tokens(manifest.vocab);
    if vocab.len() != manifest.dims.vocab {
        return Err(integrity("vocabulary size disagrees with model dimensions"));
    }
    let seed: [u8; 32] = manifest
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| integrity("RNG seed must be 32 bytes"))?;
    let word_pos: u128 = manifest
        .rng
        .word_pos
        .parse()
        .map_err(|_| integrity("bad RNG position"))?;
    let rng = Trainer::rng_from_state(seed, manifest.rng.stream, word_pos);
    let optim = OptimState {
        first,
        second,
        step: manifest.optim_step,
    };
    Ok(Trainer::from_parts(
        manifest.config,
        vocab,
        model,
        optim,
        rng,
        manifest.state,
        manifest.examples,
    ))
}

fn check_moment(params: &Params, name: &str, position: usize) -> Result<()> {
    if params.names.get(position).map(String::as_str) != Some(name) {
        return Err(integrity(format!("optimizer moment {name} out of order")));
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, trainer: &Trainer) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(trainer)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Writes the tab-separated training log.
pub fn write_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, crate::train::format_log(rows)).map_err(|e| Error::io(path, e))
}
