//! Binary checkpoint format.
//!
//! ```text
//! b"DIFFANv1"                 magic, 8 bytes
//! u32 (LE)                    header length H
//! H bytes                     JSON header: architecture, schedule, standardizer, tensor shapes
//! f64 (LE) × Σ shapes         weights in `Params::tensors` order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Params, ScoreNet};
use crate::diffusion::{NoiseSchedule, Standardizer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DIFFANv1";

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    schedule: NoiseSchedule,
    standardizer: Standardizer,
    tensor_lengths: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(net: &ScoreNet, mut w: W) -> Result<()> {
    let tensors = net.params.tensors();
    let header = Header {
        architecture: net.arch.clone(),
        schedule: net.schedule.clone(),
        standardizer: net.standardizer.clone(),
        tensor_lengths: tensors.iter().map(|t| t.len()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    for t in tensors {
        for v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ScoreNet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a DiffAN checkpoint".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    header.architecture.validate()?;
    let mut params = Params::<f64>::zeros(&header.architecture);
    let expected: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if expected != header.tensor_lengths {
        return Err(Error::Checkpoint("tensor shapes disagree with architecture".into()));
    }
    let mut buf = [0u8; 8];
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if header.standardizer.mean.len() != header.architecture.d {
        return Err(Error::Checkpoint("standardizer width disagrees with architecture".into()));
    }
    Ok(ScoreNet {
        arch: header.architecture,
        params,
        schedule: header.schedule,
        standardizer: header.standardizer,
    })
}

pub fn save_checkpoint(net: &ScoreNet, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(net, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ScoreNet> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
