//! Versioned binary container for parameters, curvature and posteriors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "KFLC"
//! version    u32      currently 1
//! kind       u32 len + UTF-8 ("params" | "curvature" | "posterior")
//! header     u64 len + UTF-8 JSON
//! payload    u64 count + count × f64
//! ```
//!
//! The header is the JSON form of the stored value with every matrix
//! replaced by `{"$matrix": k, "rows": r, "cols": c}`; matrix `k`'s values
//! are the `k`-th run of `r·c` row-major doubles in the payload. Raw
//! doubles make round trips bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::curvature::CurvatureSet;
use crate::error::{Error, Result};
use crate::network::MlpParams;
use crate::posterior::PosteriorState;

pub const MAGIC: &[u8; 4] = b"KFLC";
pub const VERSION: u32 = 1;

fn is_matrix(map: &Map<String, Value>) -> bool {
    map.len() == 3
        && map.get("rows").is_some_and(Value::is_u64)
        && map.get("cols").is_some_and(Value::is_u64)
        && map.get("data").is_some_and(Value::is_array)
}

fn extract(value: &mut Value, payload: &mut Vec<f64>, count: &mut usize) -> Result<()> {
    match value {
        Value::Object(map) if is_matrix(map) => {
            let rows = map["rows"].as_u64().unwrap_or(0);
            let cols = map["cols"].as_u64().unwrap_or(0);
            let data = map["data"].as_array().map(Vec::as_slice).unwrap_or(&[]);
            for v in data {
                payload.push(v.as_f64().ok_or_else(|| Error::contract("matrix entry is not a number"))?);
            }
            *value = json!({"$matrix": *count, "rows": rows, "cols": cols});
            *count += 1;
        }
        Value::Object(map) => {
            for v in map.values_mut() {
                extract(v, payload, count)?;
            }
        }
        Value::Array(items) => {
            for v in items {
                extract(v, payload, count)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn restore(value: &mut Value, payload: &[f64], cursor: &mut usize, path: &Path) -> Result<()> {
    match value {
        Value::Object(map) if map.contains_key("$matrix") => {
            let dim = |k: &str| map.get(k).and_then(Value::as_u64).map(|v| v as usize);
            let (Some(rows), Some(cols)) = (dim("rows"), dim("cols")) else {
                return Err(bad(path, "header", "matrix placeholder without dimensions"));
            };
            let n = rows * cols;
            let slice = payload
                .get(*cursor..*cursor + n)
                .ok_or_else(|| bad(path, "payload", "shorter than the header's matrices"))?;
            *cursor += n;
            *value = json!({"rows": rows, "cols": cols, "data": slice});
        }
        Value::Object(map) => {
            for v in map.values_mut() {
                restore(v, payload, cursor, path)?;
            }
        }
        Value::Array(items) => {
            for v in items {
                restore(v, payload, cursor, path)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn bad(path: &Path, field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field,
        detail: detail.into(),
    }
}

pub fn encode<T: Serialize>(kind: &str, value: &T) -> Result<Vec<u8>> {
    let mut tree = serde_json::to_value(value)?;
    let mut payload = Vec::new();
    extract(&mut tree, &mut payload, &mut 0)?;
    let header = serde_json::to_vec(&tree)?;
    let mut out = Vec::with_capacity(32 + kind.len() + header.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind.len() as u32).to_le_bytes());
    out.extend_from_slice(kind.as_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for x in payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(self.path, field, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<T: DeserializeOwned>(expected_kind: &str, bytes: &[u8], path: &Path) -> Result<T> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(bad(path, "magic", "not a KFLC container"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(bad(path, "version", format!("unsupported version {version}")));
    }
    let kind_len = r.u32("kind")? as usize;
    let kind = std::str::from_utf8(r.take(kind_len, "kind")?).map_err(|e| bad(path, "kind", e.to_string()))?;
    if kind != expected_kind {
        return Err(bad(path, "kind", format!("expected {expected_kind}, found {kind}")));
    }
    let header_len = r.u64("header")? as usize;
    let header = r.take(header_len, "header")?;
    let mut tree: Value = serde_json::from_slice(header)?;
    let count = r.u64("payload")? as usize;
    let raw = r.take(count.checked_mul(8).ok_or_else(|| bad(path, "payload", "overflow"))?, "payload")?;
    if r.pos != bytes.len() {
        return Err(bad(path, "payload", "trailing bytes"));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut cursor = 0;
    restore(&mut tree, &payload, &mut cursor, path)?;
    if cursor != payload.len() {
        return Err(bad(path, "payload", "longer than the header's matrices"));
    }
    Ok(serde_json::from_value(tree)?)
}

fn save<T: Serialize>(kind: &str, value: &T, path: &Path) -> Result<()> {
    let bytes = encode(kind, value)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load<T: DeserializeOwned>(kind: &str, path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(kind, &bytes, path)
}

pub fn save_params(params: &MlpParams, path: &Path) -> Result<()> {
    save("params", params, path)
}

pub fn load_params(path: &Path) -> Result<MlpParams> {
    let p: MlpParams = load("params", path)?;
    p.validate()?;
    Ok(p)
}

pub fn save_curvature(curvature: &CurvatureSet, path: &Path) -> Result<()> {
    save("curvature", curvature, path)
}

pub fn load_curvature(path: &Path) -> Result<CurvatureSet> {
    load("curvature", path)
}

pub fn save_posterior(posterior: &PosteriorState, path: &Path) -> Result<()> {
    save("posterior", posterior, path)
}

pub fn load_posterior(path: &Path) -> Result<PosteriorState> {
    load("posterior", path)
}
