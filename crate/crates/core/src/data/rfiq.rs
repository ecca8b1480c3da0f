//! The `RFIQ` container: magic, version, JSON header, u16 labels,
//! interleaved little-endian f32 samples.
//!
//! Byte layout:
//!
//! ```text
//! 0      "RFIQ"
//! 4      u16 LE version (currently 1)
//! 6      u32 LE header length H
//! 10     H bytes of header JSON
//! 10+H   n_frames × u16 LE labels
//! …      n_frames × modes × frame_len × (f32 re, f32 im), mode-major
//! ```
//!
//! Storage is f32 for interchange; in-memory math promotes to f64.
//! Loading a saved file and saving it again reproduces the bytes
//! exactly.

use super::{DataError, Dataset, Layout};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RFIQ";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    frame_len: usize,
    n_frames: usize,
    n_classes: usize,
    sample_rate: f64,
    symbol_rate: f64,
    layout: Layout,
    class_names: Vec<String>,
}

pub fn save_iq<P: AsRef<Path>>(path: P, dataset: &Dataset) -> Result<(), DataError> {
    dataset.validate()?;
    let header = Header {
        frame_len: dataset.frame_len,
        n_frames: dataset.len(),
        n_classes: dataset.n_classes(),
        sample_rate: dataset.sample_rate,
        symbol_rate: dataset.symbol_rate,
        layout: dataset.layout,
        class_names: dataset.class_names.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let samples_per_frame = dataset.frame_len * dataset.layout.modes();
    let mut bytes = Vec::with_capacity(
        10 + header_json.len() + dataset.len() * (2 + samples_per_frame * 8),
    );
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for &label in &dataset.labels {
        bytes.extend_from_slice(&label.to_le_bytes());
    }
    for frame in &dataset.frames {
        for s in frame {
            bytes.extend_from_slice(&(s.re as f32).to_le_bytes());
            bytes.extend_from_slice(&(s.im as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_iq<P: AsRef<Path>>(path: P) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path)?;
    let need = |expected: usize| -> Result<(), DataError> {
        if bytes.len() < expected {
            Err(DataError::TruncatedPayload {
                file_len: bytes.len(),
                expected,
            })
        } else {
            Ok(())
        }
    };

    need(10)?;
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    need(10 + header_len)?;
    let header: Header = serde_json::from_slice(&bytes[10..10 + header_len])?;

    let labels_at = 10 + header_len;
    let samples_at = labels_at + header.n_frames * 2;
    let samples_per_frame = header.frame_len * header.layout.modes();
    let total = samples_at + header.n_frames * samples_per_frame * 8;
    need(total)?;
    if bytes.len() > total {
        return Err(DataError::TrailingBytes {
            extra: bytes.len() - total,
        });
    }

    let mut labels = Vec::with_capacity(header.n_frames);
    for i in 0..header.n_frames {
        let at = labels_at + i * 2;
        let label = u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap());
        if label as usize >= header.n_classes {
            return Err(DataError::LabelOutOfRange {
                index: i,
                label,
                n_classes: header.n_classes,
            });
        }
        labels.push(label);
    }

    let mut frames = Vec::with_capacity(header.n_frames);
    let mut at = samples_at;
    for _ in 0..header.n_frames {
        let mut frame = Vec::with_capacity(samples_per_frame);
        for _ in 0..samples_per_frame {
            let re = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
            let im = f32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap()) as f64;
            frame.push(Complex64::new(re, im));
            at += 8;
        }
        frames.push(frame);
    }

    let dataset = Dataset {
        frames,
        labels,
        class_names: header.class_names,
        layout: header.layout,
        frame_len: header.frame_len,
        sample_rate: header.sample_rate,
        symbol_rate: header.symbol_rate,
    };
    dataset.validate()?;
    Ok(dataset)
}
