//! Checkpoint files: a flat archive of named f64 tensors.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   b"F64CKPT1"
//! count      u32       number of entries
//! entry * count:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   rows     u32
//!   cols     u32
//!   data     rows*cols f64, little-endian bit patterns
//! ```
//!
//! Values round-trip bit-exactly (including signed zeros and subnormals), so
//! a saved model reloads to the same bytes it was trained to.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::{ParamStore, ParamTensor};

const MAGIC: &[u8; 8] = b"F64CKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(&'static str),
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for name in store.names() {
        let entry = store.get(name).unwrap();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(entry.rows as u32).to_le_bytes())?;
        w.write_all(&(entry.cols as u32).to_le_bytes())?;
        for &v in &entry.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8"))?;
        if store.contains(&name) {
            return Err(CheckpointError::Corrupt("duplicate parameter name"));
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        store.insert(&name, ParamTensor { data, rows, cols });
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.insert(
            "enc.w",
            ParamTensor {
                data: vec![0.0, -0.0, 1.5e-310, 1.0e300, -3.25, std::f64::consts::PI],
                rows: 2,
                cols: 3,
            },
        );
        store.insert(
            "dec.bias",
            ParamTensor {
                data: vec![f64::MIN_POSITIVE, -1.0],
                rows: 1,
                cols: 2,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&store, &path).unwrap();
        let loaded = load(&path).unwrap();

        let names: Vec<_> = store.names().collect();
        let loaded_names: Vec<_> = loaded.names().collect();
        assert_eq!(names, loaded_names);
        for name in names {
            let a = store.get(name).unwrap();
            let b = loaded.get(name).unwrap();
            assert_eq!((a.rows, a.cols), (b.rows, b.cols));
            let abits: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(abits, bbits);
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }
}
