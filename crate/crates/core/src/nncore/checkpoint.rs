//! Named-array container.
//!
//! Layout:
//! ```text
//! magic    8 bytes   "EDUCKPT1"
//! hlen     u64 LE    length of the JSON header in bytes
//! header   hlen      {"meta":<any JSON>,"tensors":[{"name":..,"shape":[..],"dtype":"f64le"}, ..]}
//! payload            every tensor's values as little-endian f64, in header order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EDUCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

pub type NamedArray = (String, Vec<usize>, Vec<f64>);

pub fn save_checkpoint(path: impl AsRef<Path>, meta: &serde_json::Value, arrays: &[NamedArray]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let header = Header {
        meta: meta.clone(),
        tensors: arrays
            .iter()
            .map(|(name, shape, _)| TensorHeader {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f64le".into(),
            })
            .collect(),
    };
    let hbytes = serde_json::to_vec(&header).expect("header serializes");
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(hbytes.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&hbytes).map_err(io)?;
    for (_, _, data) in arrays {
        for x in data {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(serde_json::Value, Vec<NamedArray>)> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let bad = |message: String| Error::Format {
        format: "checkpoint",
        path: path.to_path_buf(),
        message,
    };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut hbytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut hbytes).map_err(io)?;
    let header: Header = serde_json::from_slice(&hbytes).map_err(|e| bad(e.to_string()))?;
    let mut arrays = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        if t.dtype != "f64le" {
            return Err(bad(format!("unsupported dtype {}", t.dtype)));
        }
        let n: usize = t.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|e| bad(format!("tensor {}: {e}", t.name)))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((t.name, t.shape, data));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok((header.meta, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let arrays = vec![
            ("a".to_string(), vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]),
            ("b".to_string(), vec![1], vec![1e300]),
        ];
        let meta = serde_json::json!({"kind": "test"});
        save_checkpoint(&path, &meta, &arrays).unwrap();
        let (m, back) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.len(), 2);
        for ((n1, s1, d1), (n2, s2, d2)) in arrays.iter().zip(&back) {
            assert_eq!((n1, s1), (n2, s2));
            assert!(d1.iter().zip(d2).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        std::fs::write(&path, b"nonsense").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
