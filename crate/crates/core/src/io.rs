//! Machine-readable outputs: newline-delimited JSON metrics and the binary
//! parameter checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroupedParams, ParamGroup};

/// One experiment outcome. Serialises with exactly these keys, in order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub seed: u64,
    pub kind: String,
    pub objective: String,
    pub tying: String,
    pub lambda: BTreeMap<String, f64>,
    pub evidence: f64,
    pub test_nll: f64,
    pub jitter: f64,
    pub converged: bool,
    pub extras: serde_json::Value,
}

/// Write records as NDJSON, one object per line. An empty slice yields an
/// empty file.
pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Config(format!("metrics serialise: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("metrics parse: {e}")))
        })
        .collect()
}

const CKPT_MAGIC: &[u8; 8] = b"LLAPCKPT";
const CKPT_VERSION: u32 = 1;
const FLAG_NORMALISED: u8 = 1 << 0;
const FLAG_BIAS: u8 = 1 << 1;

/// Binary checkpoint: magic, version, group descriptor table, then the flat
/// values as little-endian doubles.
pub fn write_checkpoint(params: &GroupedParams, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_u32::<LittleEndian>(CKPT_VERSION)?;
    f.write_u32::<LittleEndian>(params.groups.len() as u32)?;
    for g in &params.groups {
        let name = g.name.as_bytes();
        f.write_u32::<LittleEndian>(name.len() as u32)?;
        f.write_all(name)?;
        f.write_u64::<LittleEndian>(g.start as u64)?;
        f.write_u64::<LittleEndian>(g.len as u64)?;
        let mut flags = 0u8;
        if g.normalised {
            flags |= FLAG_NORMALISED;
        }
        if g.bias {
            flags |= FLAG_BIAS;
        }
        f.write_u8(flags)?;
    }
    for &v in &params.values {
        f.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<GroupedParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let had = bytes.len();
    let mut cur = std::io::Cursor::new(bytes);

    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| Error::TruncatedFile { needed: 8, had })?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::TruncatedFile { needed: 12, had })?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let trunc = |_| Error::TruncatedFile { needed: had + 1, had };
    let n_groups = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let name_len = cur.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name).map_err(trunc)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("group name not UTF-8: {e}")))?;
        let start = cur.read_u64::<LittleEndian>().map_err(trunc)? as usize;
        let len = cur.read_u64::<LittleEndian>().map_err(trunc)? as usize;
        let flags = cur.read_u8().map_err(trunc)?;
        groups.push(ParamGroup {
            name,
            start,
            len,
            normalised: flags & FLAG_NORMALISED != 0,
            bias: flags & FLAG_BIAS != 0,
        });
    }
    let dim: usize = groups.iter().map(|g| g.len).sum();
    let mut values = Vec::with_capacity(dim);
    for _ in 0..dim {
        values.push(cur.read_f64::<LittleEndian>().map_err(trunc)?);
    }
    let params = GroupedParams { values, groups };
    params.check_partition()?;
    Ok(params)
}
