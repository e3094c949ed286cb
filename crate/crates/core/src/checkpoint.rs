//! Parameter checkpoints: one JSON header line, then the parameter vector as
//! little-endian `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ArchDescriptor, PolicyParams};

pub const FORMAT: &str = "zrl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub arch: ArchDescriptor,
    pub num_params: usize,
    pub iteration: u64,
}

pub fn write<W: Write>(mut out: W, params: &PolicyParams, iteration: u64) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        arch: params.arch().clone(),
        num_params: params.num_params(),
        iteration,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for v in &params.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn save(path: &Path, params: &PolicyParams, iteration: u64) -> Result<()> {
    write(BufWriter::new(File::create(path)?), params, iteration)
}

/// Read a checkpoint; with `expected`, any architecture difference is an
/// error naming the first mismatching field.
pub fn read<R: Read>(input: R, expected: Option<&ArchDescriptor>) -> Result<(PolicyParams, Header)> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())?;
    if header.format != FORMAT {
        return Err(Error::Config(format!("not a checkpoint (format `{}`)", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {} (expected {VERSION})",
            header.version
        )));
    }
    if let Some(exp) = expected {
        header.arch.check_matches(exp)?;
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != header.num_params * 8 {
        return Err(Error::Config(format!(
            "checkpoint holds {} bytes of parameters, header promises {}",
            bytes.len(),
            header.num_params * 8
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = PolicyParams::from_values(header.arch.clone(), values)?;
    Ok((params, header))
}

pub fn load(path: &Path, expected: Option<&ArchDescriptor>) -> Result<(PolicyParams, Header)> {
    read(File::open(path)?, expected)
}
