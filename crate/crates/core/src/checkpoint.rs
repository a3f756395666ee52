//! Self-describing checkpoint container: a JSON header (kind, config echo,
//! step counter, parameter manifest) followed by raw little-endian f32 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"SCKP";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    step: u64,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub params: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            step: self.step,
            params: self
                .params
                .iter()
                .map(|(name, arr)| ParamEntry {
                    name: name.clone(),
                    shape: arr.shape().to_vec(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(&MAGIC).map_err(io)?;
        w.write_all(&[VERSION]).map_err(io)?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&header_bytes).map_err(io)?;
        for (_, arr) in &self.params {
            for &v in arr.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version).map_err(io)?;
        if version[0] != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                version[0]
            )));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(io)?;
        let mut header_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header_bytes).map_err(io)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(io)?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(entry.shape, data)
                .map_err(|e| Error::Format(format!("checkpoint param shape: {e}")))?;
            params.push((entry.name, arr));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            step: header.step,
            params,
        })
    }
}

/// Snapshot every parameter reachable through `visit`.
pub fn collect_params(
    visit: impl FnOnce(&mut dyn FnMut(&mut crate::nn::Param)),
) -> Vec<(String, ArrayD<f32>)> {
    let mut out = Vec::new();
    visit(&mut |p| out.push((p.name.clone(), p.value.clone())));
    out
}

/// Write checkpointed values back into a network. Every parameter must be
/// present with a matching shape.
pub fn restore_params(
    ckpt: &Checkpoint,
    visit: impl FnOnce(&mut dyn FnMut(&mut crate::nn::Param)),
) -> Result<()> {
    let mut missing = Vec::new();
    let mut result = Ok(());
    visit(&mut |p| {
        match ckpt.params.iter().find(|(name, _)| name == &p.name) {
            Some((_, value)) if value.shape() == p.value.shape() => {
                p.value.assign(value);
            }
            Some((name, value)) => {
                result = Err(Error::Format(format!(
                    "checkpoint param {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            None => missing.push(p.name.clone()),
        }
    });
    result?;
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint missing parameters: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}
