//! Datasets: synthetic transmitter fleets, stratified splits,
//! legal/illegal partitioning, class weights, VMD preprocessing, and the
//! `RFIQ` container format.
//!
//! A [`Dataset`] stores complex frames in one of two channel layouts:
//! raw IQ (one complex sequence per frame, two model channels) or
//! VMD-decomposed (`k` mode sequences per frame stored mode-major,
//! `2k` model channels, real/imaginary interleaved per mode).

mod gen;
mod rfiq;

pub use gen::{clean_preamble, gen_fleet, synthesize_frame, GenConfig, ImpairmentCaps, SynthDeviceProfile};
pub use rfiq::{load_iq, save_iq};

use crate::signal::{ComplexSample, IQFrame, SignalError};
use crate::tensor::TensorData;
use crate::vmd::{CenterSet, LosslessVmd, VmdError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Vmd(#[from] VmdError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected RFIQ, got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported RFIQ version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed header: {0}")]
    BadHeader(#[from] serde_json::Error),
    #[error("truncated payload: file ends at byte {file_len}, expected {expected} bytes")]
    TruncatedPayload { file_len: usize, expected: usize },
    #[error("trailing bytes: {extra} unexpected bytes after the payload")]
    TrailingBytes { extra: usize },
    #[error("label {label} of frame {index} out of range for {n_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u16,
        n_classes: usize,
    },
    #[error("frame {index} has {got} samples, layout wants {expected}")]
    FrameLength {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("frames ({frames}) and labels ({labels}) differ in count")]
    CountMismatch { frames: usize, labels: usize },
    #[error("invalid generator config: {0}")]
    BadGenConfig(String),
    #[error("all impairment caps are zero; devices would be indistinguishable")]
    DegenerateCaps,
    #[error("class {class} has {count} samples, need at least {min}")]
    ClassTooSmall {
        class: usize,
        count: usize,
        min: usize,
    },
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadRatios((f64, f64, f64)),
    #[error("cannot mark {n_illegal} of {n_classes} classes illegal")]
    TooManyIllegal { n_illegal: usize, n_classes: usize },
    #[error("operation requires raw-IQ layout, dataset is {0:?}")]
    WrongLayout(Layout),
    #[error("class {0} missing from the label set")]
    MissingClass(usize),
}

/// Channel layout of the stored frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    RawIq,
    Vmd { mode_count: usize },
}

impl Layout {
    /// Complex sequences per frame (1 for raw IQ, k for VMD).
    pub fn modes(&self) -> usize {
        match self {
            Layout::RawIq => 1,
            Layout::Vmd { mode_count } => *mode_count,
        }
    }

    /// Real model channels per time step (2 per complex sequence).
    pub fn channels(&self) -> usize {
        2 * self.modes()
    }
}

/// A labeled frame collection with uniform length and layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Vec<ComplexSample>>,
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
    pub layout: Layout,
    pub frame_len: usize,
    pub sample_rate: f64,
    pub symbol_rate: f64,
}

impl Dataset {
    /// Builds and validates a dataset from complex frames. This is also
    /// the ingestion point for WiSig-shaped data: extract the 256-sample
    /// equalized preamble segments and their transmitter labels from the
    /// upstream archive, hand them over as complex frames at 25 Msps /
    /// 2 Msps, then persist with [`save_iq`].
    pub fn from_complex_frames(
        frames: Vec<Vec<ComplexSample>>,
        labels: Vec<u16>,
        class_names: Vec<String>,
        layout: Layout,
        frame_len: usize,
        sample_rate: f64,
        symbol_rate: f64,
    ) -> Result<Self, DataError> {
        let ds = Self {
            frames,
            labels,
            class_names,
            layout,
            frame_len,
            sample_rate,
            symbol_rate,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.frames.len() != self.labels.len() {
            return Err(DataError::CountMismatch {
                frames: self.frames.len(),
                labels: self.labels.len(),
            });
        }
        let expected = self.frame_len * self.layout.modes();
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.len() != expected {
                return Err(DataError::FrameLength {
                    index: i,
                    got: frame.len(),
                    expected,
                });
            }
        }
        for (i, &label) in self.labels.iter().enumerate() {
            if label as usize >= self.class_names.len() {
                return Err(DataError::LabelOutOfRange {
                    index: i,
                    label,
                    n_classes: self.class_names.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// View one raw-IQ frame as an [`IQFrame`].
    pub fn iq_frame(&self, index: usize) -> Result<IQFrame, DataError> {
        if self.layout != Layout::RawIq {
            return Err(DataError::WrongLayout(self.layout));
        }
        Ok(IQFrame::new(
            self.frames[index].clone(),
            self.sample_rate,
            self.symbol_rate,
        )?)
    }

    /// Packs selected frames into a `(batch, time, channels)` tensor.
    /// VMD mode `i` fills channels `(2i, 2i+1)` with its real and
    /// imaginary parts.
    pub fn to_model_input(&self, indices: &[usize]) -> TensorData {
        let modes = self.layout.modes();
        let t_len = self.frame_len;
        let channels = self.layout.channels();
        let mut data = vec![0.0; indices.len() * t_len * channels];
        for (b, &idx) in indices.iter().enumerate() {
            let frame = &self.frames[idx];
            for m in 0..modes {
                for t in 0..t_len {
                    let s = frame[m * t_len + t];
                    let base = (b * t_len + t) * channels + 2 * m;
                    data[base] = s.re;
                    data[base + 1] = s.im;
                }
            }
        }
        TensorData::new(vec![indices.len(), t_len, channels], data).expect("sized")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            layout: self.layout,
            frame_len: self.frame_len,
            sample_rate: self.sample_rate,
            symbol_rate: self.symbol_rate,
        }
    }
}

/// Split protocol: ratios, shuffle seed, stratification flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: (0.8, 0.1, 0.1),
            seed: 42,
            stratified: true,
        }
    }
}

/// Largest-remainder apportionment of `n` into three parts. Every part
/// gets `floor(rᵢ·n)` plus at most one of the leftover seats, assigned
/// by descending fractional remainder (ties to the earlier part), so
/// each part is within one sample of exact.
fn apportion(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let quotas = [ratios.0 * n as f64, ratios.1 * n as f64, ratios.2 * n as f64];
    let mut counts = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    let mut assigned = 0;
    for i in 0..3 {
        counts[i] = quotas[i].floor() as usize;
        remainders[i] = quotas[i] - quotas[i].floor();
        assigned += counts[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b)));
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Seeded stratified (or plain) shuffle-and-cut into train/val/test.
/// Per-class partition sizes follow largest-remainder rounding.
pub fn stratified_split(
    dataset: &Dataset,
    spec: &SplitSpec,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let (r0, r1, r2) = spec.ratios;
    if !(r0 > 0.0 && r1 > 0.0 && r2 > 0.0) || (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(spec.ratios));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut by_class = vec![Vec::new(); dataset.n_classes()];
        for (i, &label) in dataset.labels.iter().enumerate() {
            by_class[label as usize].push(i);
        }
        for (class, group) in by_class.iter().enumerate() {
            if group.len() < 10 {
                return Err(DataError::ClassTooSmall {
                    class,
                    count: group.len(),
                    min: 10,
                });
            }
        }
        by_class
    } else {
        vec![(0..dataset.len()).collect()]
    };

    for mut group in groups {
        group.shuffle(&mut rng);
        let counts = apportion(group.len(), spec.ratios);
        let mut cursor = 0;
        for (p, &count) in counts.iter().enumerate() {
            parts[p].extend_from_slice(&group[cursor..cursor + count]);
            cursor += count;
        }
    }
    Ok((
        dataset.subset(&parts[0]),
        dataset.subset(&parts[1]),
        dataset.subset(&parts[2]),
    ))
}

/// Outcome of the legal/illegal class partition. Legal classes are
/// re-indexed `0..K−1`; both mappings back to the original class
/// indices are recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct LegalIllegalSplit {
    pub legal: Dataset,
    pub illegal: Dataset,
    /// Original class index per new legal index.
    pub legal_classes: Vec<usize>,
    /// Original class indices marked illegal.
    pub illegal_classes: Vec<usize>,
}

/// Uniformly samples `n_illegal` classes (seeded) as unauthorized
/// transmitters and splits the dataset accordingly.
pub fn legal_illegal_partition(
    dataset: &Dataset,
    n_illegal: usize,
    rng_seed: u64,
) -> Result<LegalIllegalSplit, DataError> {
    let n_classes = dataset.n_classes();
    if n_illegal >= n_classes {
        return Err(DataError::TooManyIllegal {
            n_illegal,
            n_classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut all: Vec<usize> = (0..n_classes).collect();
    all.shuffle(&mut rng);
    let mut illegal_classes: Vec<usize> = all[..n_illegal].to_vec();
    illegal_classes.sort_unstable();
    let legal_classes: Vec<usize> = (0..n_classes)
        .filter(|c| !illegal_classes.contains(c))
        .collect();

    let mut new_index = vec![usize::MAX; n_classes];
    for (new, &orig) in legal_classes.iter().enumerate() {
        new_index[orig] = new;
    }
    let mut illegal_index = vec![usize::MAX; n_classes];
    for (new, &orig) in illegal_classes.iter().enumerate() {
        illegal_index[orig] = new;
    }

    let mut legal = Dataset {
        frames: Vec::new(),
        labels: Vec::new(),
        class_names: legal_classes
            .iter()
            .map(|&c| dataset.class_names[c].clone())
            .collect(),
        layout: dataset.layout,
        frame_len: dataset.frame_len,
        sample_rate: dataset.sample_rate,
        symbol_rate: dataset.symbol_rate,
    };
    let mut illegal = Dataset {
        frames: Vec::new(),
        labels: Vec::new(),
        class_names: illegal_classes
            .iter()
            .map(|&c| dataset.class_names[c].clone())
            .collect(),
        layout: dataset.layout,
        frame_len: dataset.frame_len,
        sample_rate: dataset.sample_rate,
        symbol_rate: dataset.symbol_rate,
    };
    for (frame, &label) in dataset.frames.iter().zip(&dataset.labels) {
        let orig = label as usize;
        if new_index[orig] != usize::MAX {
            legal.frames.push(frame.clone());
            legal.labels.push(new_index[orig] as u16);
        } else {
            illegal.frames.push(frame.clone());
            illegal.labels.push(illegal_index[orig] as u16);
        }
    }
    Ok(LegalIllegalSplit {
        legal,
        illegal,
        legal_classes,
        illegal_classes,
    })
}

/// Inverse-frequency class weights normalized to mean 1:
/// `w_k = N / (K · count_k)`.
pub fn class_weights(labels: &[u16], n_classes: usize) -> Result<Vec<f64>, DataError> {
    let mut counts = vec![0usize; n_classes];
    for &label in labels {
        counts[label as usize] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(DataError::MissingClass(missing));
    }
    let n = labels.len() as f64;
    let k = n_classes as f64;
    Ok(counts.iter().map(|&c| n / (k * c as f64)).collect())
}

/// Replaces every raw-IQ frame with its lossless modes (mode-major),
/// turning a 2-channel dataset into a `2k`-channel one. Labels, order,
/// and metadata are untouched.
pub fn vmd_preprocess(dataset: &Dataset, centers: &CenterSet) -> Result<Dataset, DataError> {
    if dataset.layout != Layout::RawIq {
        return Err(DataError::WrongLayout(dataset.layout));
    }
    let k = centers.mode_count();
    let decomposer = LosslessVmd::new(centers.clone(), dataset.frame_len)?;
    let mut frames = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let frame = dataset.iq_frame(i)?;
        let modes = decomposer.decompose(&frame)?;
        let mut packed = Vec::with_capacity(k * dataset.frame_len);
        for mode in modes.mode_frames() {
            packed.extend_from_slice(mode.samples());
        }
        frames.push(packed);
    }
    Ok(Dataset {
        frames,
        labels: dataset.labels.clone(),
        class_names: dataset.class_names.clone(),
        layout: Layout::Vmd { mode_count: k },
        frame_len: dataset.frame_len,
        sample_rate: dataset.sample_rate,
        symbol_rate: dataset.symbol_rate,
    })
}

#[cfg(test)]
mod tests;
