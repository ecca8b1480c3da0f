//! Complex sample containers and spectral transforms.
//!
//! Everything downstream (decomposition, preprocessing, the synthetic
//! generator) is built on two invariant-carrying containers: [`IQFrame`]
//! for time-domain complex baseband segments and [`Spectrum`] for their
//! DFT. Both validate on construction, so the transforms themselves can
//! assume finite inputs.
//!
//! Conventions: forward DFT is unnormalized, `X[k] = Σ x[n]·e^{−j2πkn/L}`;
//! the inverse carries the `1/L` factor. All math is double precision.

use num_complex::Complex64;
use rustfft::FftPlanner;
use std::cell::RefCell;
use thiserror::Error;

/// One complex baseband sample (in-phase `re`, quadrature `im`).
pub type ComplexSample = Complex64;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("frame must contain at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("non-finite spectrum bin at index {0}")]
    NonFiniteBin(usize),
    #[error("rates must satisfy sample_rate > symbol_rate > 0, got sample_rate={sample_rate}, symbol_rate={symbol_rate}")]
    BadRates { sample_rate: f64, symbol_rate: f64 },
}

fn check_finite(samples: &[ComplexSample]) -> Result<(), usize> {
    match samples
        .iter()
        .position(|s| !s.re.is_finite() || !s.im.is_finite())
    {
        Some(i) => Err(i),
        None => Ok(()),
    }
}

/// A complex baseband signal segment with its sampling metadata.
///
/// Invariants enforced at construction: length ≥ 2, all samples finite,
/// `sample_rate > symbol_rate > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct IQFrame {
    samples: Vec<ComplexSample>,
    sample_rate: f64,
    symbol_rate: f64,
}

impl IQFrame {
    pub fn new(
        samples: Vec<ComplexSample>,
        sample_rate: f64,
        symbol_rate: f64,
    ) -> Result<Self, SignalError> {
        if samples.len() < 2 {
            return Err(SignalError::TooShort(samples.len()));
        }
        check_finite(&samples).map_err(SignalError::NonFiniteSample)?;
        if !(sample_rate > symbol_rate && symbol_rate > 0.0)
            || !sample_rate.is_finite()
            || !symbol_rate.is_finite()
        {
            return Err(SignalError::BadRates {
                sample_rate,
                symbol_rate,
            });
        }
        Ok(Self {
            samples,
            sample_rate,
            symbol_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length ≥ 2 by invariant
    }

    pub fn samples(&self) -> &[ComplexSample] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn symbol_rate(&self) -> f64 {
        self.symbol_rate
    }

    /// Total time-domain energy `Σ |x[n]|²`.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }
}

/// DFT of one frame. Bin `k` runs 0…L−1; the originating frame's rates
/// are carried along so the inverse transform can rebuild a full frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    bins: Vec<ComplexSample>,
    sample_rate: f64,
    symbol_rate: f64,
}

impl Spectrum {
    pub fn new(
        bins: Vec<ComplexSample>,
        sample_rate: f64,
        symbol_rate: f64,
    ) -> Result<Self, SignalError> {
        if bins.len() < 2 {
            return Err(SignalError::TooShort(bins.len()));
        }
        check_finite(&bins).map_err(SignalError::NonFiniteBin)?;
        if !(sample_rate > symbol_rate && symbol_rate > 0.0) {
            return Err(SignalError::BadRates {
                sample_rate,
                symbol_rate,
            });
        }
        Ok(Self {
            bins,
            sample_rate,
            symbol_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bins(&self) -> &[ComplexSample] {
        &self.bins
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn symbol_rate(&self) -> f64 {
        self.symbol_rate
    }

    /// Frequency-domain energy `Σ |X[k]|²`.
    pub fn energy(&self) -> f64 {
        self.bins.iter().map(|b| b.norm_sqr()).sum()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn fft_forward(buf: &mut [Complex64]) {
    PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft_forward(buf.len());
        fft.process(buf);
    });
}

pub(crate) fn fft_inverse(buf: &mut [Complex64]) {
    PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft_inverse(buf.len());
        fft.process(buf);
    });
    let scale = 1.0 / buf.len() as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Forward DFT: `X[k] = Σ_{n=0}^{L−1} x[n]·exp(−j2πkn/L)`.
///
/// Uses a mixed-radix FFT internally (any length, including primes); the
/// test suite pins it against a direct O(L²) summation oracle.
pub fn dft(frame: &IQFrame) -> Spectrum {
    let mut buf = frame.samples.clone();
    fft_forward(&mut buf);
    Spectrum {
        bins: buf,
        sample_rate: frame.sample_rate,
        symbol_rate: frame.symbol_rate,
    }
}

/// Inverse DFT: `x[n] = (1/L) Σ_k X[k]·exp(+j2πkn/L)`.
pub fn idft(spectrum: &Spectrum) -> IQFrame {
    let mut buf = spectrum.bins.clone();
    fft_inverse(&mut buf);
    IQFrame {
        samples: buf,
        sample_rate: spectrum.sample_rate,
        symbol_rate: spectrum.symbol_rate,
    }
}

/// Relative Parseval gap `|Σ|x[n]|² − (1/L)Σ|X[k]|²| / Σ|x[n]|²`.
///
/// Returns 0 for the all-zero frame by convention.
pub fn parseval_gap(frame: &IQFrame) -> f64 {
    let time_energy = frame.energy();
    if time_energy == 0.0 {
        return 0.0;
    }
    let spectrum = dft(frame);
    let freq_energy = spectrum.energy() / frame.len() as f64;
    (time_energy - freq_energy).abs() / time_energy
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    pub fn random_frame(len: usize, seed: u64) -> IQFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..len)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        IQFrame::new(samples, 25e6, 2e6).unwrap()
    }

    /// Direct O(L²) summation, the independent oracle for the FFT path.
    fn dft_direct(samples: &[Complex64]) -> Vec<Complex64> {
        let l = samples.len();
        (0..l)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (n, &x) in samples.iter().enumerate() {
                    let phase = -2.0 * PI * (k as f64) * (n as f64) / l as f64;
                    acc += x * Complex64::new(phase.cos(), phase.sin());
                }
                acc
            })
            .collect()
    }

    fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut samples = vec![Complex64::new(0.0, 0.0); 8];
        samples[0] = Complex64::new(1.0, 0.0);
        let frame = IQFrame::new(samples, 25e6, 2e6).unwrap();
        let spec = dft(&frame);
        for bin in spec.bins() {
            assert!((bin - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_frame_is_dc_only() {
        let samples = vec![Complex64::new(1.0, 0.0); 8];
        let frame = IQFrame::new(samples, 25e6, 2e6).unwrap();
        let spec = dft(&frame);
        assert!((spec.bins()[0] - Complex64::new(8.0, 0.0)).norm() < 1e-12);
        for bin in &spec.bins()[1..] {
            assert!(bin.norm() < 1e-12);
        }
    }

    #[test]
    fn fast_path_matches_direct_sum_on_random_frames() {
        for seed in 0..100 {
            let frame = random_frame(256, seed);
            let fast = dft(&frame);
            let direct = dft_direct(frame.samples());
            assert!(rel_err(fast.bins(), &direct) <= 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn fast_path_matches_direct_sum_on_awkward_lengths() {
        for &len in &[4usize, 8, 256, 300] {
            let frame = random_frame(len, len as u64);
            let fast = dft(&frame);
            let direct = dft_direct(frame.samples());
            assert!(rel_err(fast.bins(), &direct) <= 1e-12, "len {len}");
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let frame = random_frame(256, 7);
        let back = idft(&dft(&frame));
        assert!(rel_err(back.samples(), frame.samples()) <= 1e-12);
        assert_eq!(back.sample_rate(), frame.sample_rate());
        assert_eq!(back.symbol_rate(), frame.symbol_rate());
    }

    #[test]
    fn zero_spectrum_gives_zero_frame() {
        let spec = Spectrum::new(vec![Complex64::new(0.0, 0.0); 16], 25e6, 2e6).unwrap();
        let frame = idft(&spec);
        assert!(frame.samples().iter().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn single_bin_synthesizes_complex_exponential() {
        let mut bins = vec![Complex64::new(0.0, 0.0); 4];
        bins[1] = Complex64::new(1.0, 0.0);
        let spec = Spectrum::new(bins, 25e6, 2e6).unwrap();
        let frame = idft(&spec);
        for (n, s) in frame.samples().iter().enumerate() {
            let phase = 2.0 * PI * n as f64 / 4.0;
            let expect = Complex64::new(phase.cos(), phase.sin()) / 4.0;
            assert!((s - expect).norm() < 1e-14, "n={n}");
        }
    }

    #[test]
    fn parseval_gap_examples() {
        // impulse: time energy 1, freq energy (1/8)·8 = 1
        let mut samples = vec![Complex64::new(0.0, 0.0); 8];
        samples[0] = Complex64::new(1.0, 0.0);
        let frame = IQFrame::new(samples, 25e6, 2e6).unwrap();
        assert!(parseval_gap(&frame) <= 1e-12);

        let zero = IQFrame {
            samples: vec![Complex64::new(0.0, 0.0); 8],
            sample_rate: 25e6,
            symbol_rate: 2e6,
        };
        assert_eq!(parseval_gap(&zero), 0.0);
    }

    #[test]
    fn rejects_invalid_construction() {
        assert_eq!(
            IQFrame::new(vec![Complex64::new(1.0, 0.0)], 25e6, 2e6),
            Err(SignalError::TooShort(1))
        );
        let nan = vec![Complex64::new(f64::NAN, 0.0), Complex64::new(0.0, 0.0)];
        assert_eq!(
            IQFrame::new(nan, 25e6, 2e6),
            Err(SignalError::NonFiniteSample(0))
        );
        let ok = vec![Complex64::new(1.0, 0.0); 4];
        assert!(matches!(
            IQFrame::new(ok.clone(), 2e6, 2e6),
            Err(SignalError::BadRates { .. })
        ));
        let inf = vec![Complex64::new(0.0, f64::INFINITY); 4];
        assert_eq!(
            Spectrum::new(inf, 25e6, 2e6),
            Err(SignalError::NonFiniteBin(0))
        );
    }

    proptest! {
        #[test]
        fn dft_is_linear(seed_f in 0u64..1000, seed_g in 1000u64..2000,
                         a_re in -2.0f64..2.0, b_re in -2.0f64..2.0) {
            let f = random_frame(64, seed_f);
            let g = random_frame(64, seed_g);
            let a = Complex64::new(a_re, 0.3);
            let b = Complex64::new(b_re, -0.5);
            let combined: Vec<Complex64> = f.samples().iter().zip(g.samples())
                .map(|(x, y)| a * x + b * y)
                .collect();
            let lhs = dft(&IQFrame::new(combined, 25e6, 2e6).unwrap());
            let rhs: Vec<Complex64> = dft(&f).bins().iter().zip(dft(&g).bins())
                .map(|(x, y)| a * x + b * y)
                .collect();
            prop_assert!(rel_err(lhs.bins(), &rhs) <= 1e-12);
        }

        #[test]
        fn round_trip_and_parseval(seed in 0u64..500, len in 4usize..128) {
            let frame = random_frame(len, seed);
            let back = idft(&dft(&frame));
            prop_assert!(rel_err(back.samples(), frame.samples()) <= 1e-12);
            prop_assert!(parseval_gap(&frame) <= 1e-12);
        }
    }
}
