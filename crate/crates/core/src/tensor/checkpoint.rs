//! Parameter checkpoint file: a JSON index followed by raw values.
//!
//! Layout: magic `MFT1`, u64 LE header length, header JSON (an array of
//! `{name, shape}` entries in order), then each tensor's values as
//! little-endian f64 in entry order. Round trips are bit-exact.

use super::TensorData;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"MFT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected MFT1, got {0:?}")]
    BadMagic([u8; 4]),
    #[error("malformed header: {0}")]
    BadHeader(#[from] serde_json::Error),
    #[error("truncated checkpoint: expected {expected} more bytes for {name}")]
    Truncated { name: String, expected: usize },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint<P: AsRef<Path>>(
    path: P,
    entries: &[(String, TensorData)],
) -> Result<(), CheckpointError> {
    let mut out = BufWriter::new(File::create(path)?);
    let index: Vec<Entry> = entries
        .iter()
        .map(|(name, t)| Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = serde_json::to_vec(&index)?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, t) in entries {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(
    path: P,
) -> Result<Vec<(String, TensorData)>, CheckpointError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header)?;
    let index: Vec<Entry> = serde_json::from_slice(&header)?;
    let mut entries = Vec::with_capacity(index.len());
    for entry in index {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        input.read_exact(&mut bytes).map_err(|_| CheckpointError::Truncated {
            name: entry.name.clone(),
            expected: n * 8,
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((
            entry.name,
            TensorData::new(entry.shape, data).expect("length checked"),
        ));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries = vec![
            (
                "layer.weight".to_string(),
                TensorData::randn(&[4, 3], 0.0, 1.0, &mut rng),
            ),
            ("layer.bias".to_string(), TensorData::zeros(&[3])),
            (
                "odd".to_string(),
                TensorData::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap(),
            ),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        save_checkpoint(&path, &entries).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), entries.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // a second save of the loaded state is byte-identical
        let path2 = dir.path().join("test2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic(_)) | Err(CheckpointError::Io(_))
        ));

        let entries = vec![("w".to_string(), TensorData::zeros(&[8]))];
        save_checkpoint(&path, &entries).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated { .. })
        ));
    }
}
