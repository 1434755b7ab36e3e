//! `MTG1` binary grid files.
//!
//! Layout, all little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `MTG1` |
//! | 5×u32 | version, t, h, w, l |
//! | 8×f64 | lat0, lon0, dlat, dlon, t0, dt, reserved, reserved |
//! | t·h·w·l × f64 | variables, row-major `(t, h, w, l)` |
//! | t·h·w × f64 | precipitation, row-major `(t, h, w)` |
//!
//! Variable names and units live in a JSON sidecar next to the file
//! (`<file>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GeoTime, GridSequence, VariableMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MTG1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4 + 8 * 8;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    variables: Vec<VariableMeta>,
    precip_unit: String,
}

pub fn write_grid(seq: &GridSequence) -> Vec<u8> {
    let s = seq.vars.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (seq.vars.numel() + seq.precip.numel()));
    out.extend_from_slice(&MAGIC);
    for v in [
        FORMAT_VERSION,
        s[0] as u32,
        s[1] as u32,
        s[2] as u32,
        s[3] as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let g = &seq.geo;
    for v in [g.lat0, g.lon0, g.dlat, g.dlon, g.t0, g.dt, 0.0, 0.0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in seq.vars.data().iter().chain(seq.precip.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f64_at(b: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

/// Decode a grid; variables get placeholder names when `variables` is `None`.
pub fn read_grid(bytes: &[u8], variables: Option<Vec<VariableMeta>>) -> Result<GridSequence> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let dims: Vec<usize> = (0..4).map(|i| u32_at(bytes, 8 + 4 * i) as usize).collect();
    if dims.contains(&0) {
        return Err(Error::Input(format!(
            "grid header has a zero dimension: {dims:?}"
        )));
    }
    let geo_at = |i: usize| f64_at(bytes, 24 + 8 * i);
    let geo = GeoTime {
        lat0: geo_at(0),
        lon0: geo_at(1),
        dlat: geo_at(2),
        dlon: geo_at(3),
        t0: geo_at(4),
        dt: geo_at(5),
    };
    let n_vars: usize = dims.iter().product();
    let n_precip = dims[0] * dims[1] * dims[2];
    let expected = HEADER_LEN + 8 * (n_vars + n_precip);
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingData {
            found: bytes.len() - expected,
        });
    }
    let floats: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (vars, precip) = floats.split_at(n_vars);
    let variables = variables.unwrap_or_else(|| {
        (0..dims[3])
            .map(|i| VariableMeta {
                name: format!("var{i}"),
                unit: String::new(),
            })
            .collect()
    });
    GridSequence::new(
        Tensor::new(dims.clone(), vars.to_vec())?,
        Tensor::new(dims[..3].to_vec(), precip.to_vec())?,
        variables,
        geo,
    )
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write `path` and its `<path>.json` sidecar.
pub fn save_grid(seq: &GridSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    seq.validate()?;
    fs::write(path, write_grid(seq)).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        variables: seq.variables.clone(),
        precip_unit: "mm/h".into(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

/// Read `path`, picking up variable metadata from the sidecar when present.
pub fn load_grid(path: impl AsRef<Path>) -> Result<GridSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sp = sidecar_path(path);
    let variables = match fs::read(&sp) {
        Ok(b) => Some(serde_json::from_slice::<Sidecar>(&b)?.variables),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(&sp, e)),
    };
    read_grid(&bytes, variables)
}
