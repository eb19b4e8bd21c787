//! Weight files: one JSON header line, then raw little-endian f32 sections
//! in header order (params, bn_mean, bn_var, and optionally adam m, v).

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{config_hash, ModelConfig, OptimState, TensorDesc, WeightSnapshot};
use crate::{Error, Result};

const FORMAT: &str = "contlearn-weights-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config_hash: String,
    model: ModelConfig,
    layout: Vec<TensorDesc>,
    n_params: usize,
    n_bn: usize,
    optimizer: Option<OptimState<f32>>,
    /// Hash of the full run configuration, if the caller supplied one.
    run_config_hash: Option<String>,
}

fn put(w: &mut impl Write, v: &[f32]) -> std::io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_weights(
    path: &Path,
    weights: &WeightSnapshot<f32>,
    optimizer: Option<&OptimState<f32>>,
    run_config_hash: Option<&str>,
) -> Result<()> {
    let layout = weights.layout();
    let header = Header {
        format: FORMAT.into(),
        config_hash: config_hash(&weights.config),
        model: weights.config.clone(),
        layout: layout.tensors.clone(),
        n_params: layout.n_params,
        n_bn: layout.n_bn,
        optimizer: optimizer.cloned(),
        run_config_hash: run_config_hash.map(str::to_owned),
    };
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    put(&mut w, &weights.params)?;
    put(&mut w, &weights.bn_mean)?;
    put(&mut w, &weights.bn_var)?;
    if let Some(o) = optimizer {
        put(&mut w, &o.m)?;
        put(&mut w, &o.v)?;
    }
    w.flush()?;
    Ok(())
}

pub type LoadedWeights = (WeightSnapshot<f32>, Option<OptimState<f32>>, Option<String>);

pub fn read_weights(path: &Path) -> Result<LoadedWeights> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim())?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("unknown weight format '{}'", header.format)));
    }
    if header.config_hash != config_hash(&header.model) {
        return Err(Error::Format("model config hash mismatch".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let (np, nb) = (header.n_params, header.n_bn);
    let base = np + 2 * nb;
    let with_opt = header.optimizer.is_some();
    let expected = if with_opt { base + 2 * np } else { base };
    if floats.len() != expected || bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "weight payload has {} floats, header implies {expected}",
            floats.len()
        )));
    }
    let weights = WeightSnapshot {
        config: header.model,
        params: floats[..np].to_vec(),
        bn_mean: floats[np..np + nb].to_vec(),
        bn_var: floats[np + nb..base].to_vec(),
    };
    if weights.layout().n_params != np {
        return Err(Error::Format("layout does not match model config".into()));
    }
    let optimizer = header.optimizer.map(|mut o| {
        o.m = floats[base..base + np].to_vec();
        o.v = floats[base + np..].to_vec();
        o
    });
    Ok((weights, optimizer, header.run_config_hash))
}
