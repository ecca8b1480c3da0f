//! Synthetic transmitter-fleet generator.
//!
//! Every device transmits the same fixed 32-symbol QPSK preamble,
//! oversampled 12.5× (25 Msps over 2 Msps symbols, so the fundamental
//! DFT index k₀ = 12.5 matches the center tables) and shaped with a
//! raised-cosine filter. What distinguishes devices is a per-device
//! impairment profile — IQ imbalance, DC offset, residual carrier
//! offset, a per-sample phase-noise walk, and a memoryless cubic
//! nonlinearity — followed by AWGN at the requested SNR. Everything is
//! deterministic given the seeds.

use super::{DataError, Dataset, Layout};
use crate::signal::ComplexSample;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const SAMPLE_RATE: f64 = 25e6;
pub const SYMBOL_RATE: f64 = 2e6;
const OVERSAMPLE: f64 = SAMPLE_RATE / SYMBOL_RATE; // 12.5
const RC_ROLLOFF: f64 = 0.35;
const RC_SPAN_SYMBOLS: i64 = 6;

/// The published preamble: 32 QPSK symbols, components ±1/√2.
const PREAMBLE_SIGNS: [(i8, i8); 32] = [
    (1, 1), (-1, 1), (1, 1), (1, 1), (1, 1), (-1, -1), (1, -1), (-1, -1),
    (1, -1), (-1, -1), (-1, -1), (-1, 1), (1, -1), (1, 1), (1, -1), (-1, 1),
    (1, 1), (1, -1), (1, 1), (1, -1), (-1, 1), (-1, -1), (1, -1), (1, -1),
    (-1, 1), (1, -1), (1, 1), (1, -1), (-1, -1), (-1, -1), (1, 1), (-1, -1),
];

/// Raised-cosine pulse at `t` symbol periods from the peak.
fn raised_cosine(t: f64) -> f64 {
    let sinc = if t.abs() < 1e-12 {
        1.0
    } else {
        (PI * t).sin() / (PI * t)
    };
    let denom = 1.0 - (2.0 * RC_ROLLOFF * t) * (2.0 * RC_ROLLOFF * t);
    if denom.abs() < 1e-9 {
        // limit at t = ±1/(2β)
        let tt = 1.0 / (2.0 * RC_ROLLOFF);
        return (PI / 4.0) * ((PI * tt).sin() / (PI * tt));
    }
    sinc * (PI * RC_ROLLOFF * t).cos() / denom
}

/// The clean shaped preamble: unit-RMS, periodic over the 32-symbol
/// sequence, length `frame_len`.
pub fn clean_preamble(frame_len: usize) -> Vec<ComplexSample> {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = vec![Complex64::new(0.0, 0.0); frame_len];
    for (n, sample) in out.iter_mut().enumerate() {
        let t_sym = n as f64 / OVERSAMPLE;
        let center = t_sym.floor() as i64;
        for m in (center - RC_SPAN_SYMBOLS)..=(center + RC_SPAN_SYMBOLS) {
            let pulse = raised_cosine(t_sym - m as f64);
            if pulse == 0.0 {
                continue;
            }
            let sym = PREAMBLE_SIGNS[(m.rem_euclid(32)) as usize];
            *sample += Complex64::new(sym.0 as f64 * scale, sym.1 as f64 * scale) * pulse;
        }
    }
    let rms = (out.iter().map(|s| s.norm_sqr()).sum::<f64>() / frame_len as f64).sqrt();
    if rms > 0.0 {
        for s in out.iter_mut() {
            *s /= rms;
        }
    }
    out
}

/// Hardware impairment profile of one synthetic transmitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDeviceProfile {
    /// Q-arm gain relative to I, dB.
    pub gain_imbalance_db: f64,
    /// Quadrature error, radians.
    pub phase_imbalance: f64,
    /// Additive DC term (relative to unit-RMS signal).
    pub dc_offset: (f64, f64),
    /// Residual carrier offset as a fraction of the symbol rate.
    pub carrier_offset: f64,
    /// Std-dev of the per-sample phase random walk, radians.
    pub phase_noise_std: f64,
    /// Third-order memoryless nonlinearity coefficient.
    pub nonlinearity_coeff: f64,
    /// Per-device seed for the stochastic (per-frame) effects.
    pub seed: u64,
}

/// Upper bounds for the drawn impairments. Defaults are small enough to
/// keep classification nontrivial and large enough to be learnable at
/// 20 dB SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentCaps {
    pub gain_imbalance_db: f64,
    pub phase_imbalance: f64,
    pub dc_offset: f64,
    pub carrier_offset: f64,
    pub phase_noise_std: f64,
    pub nonlinearity_coeff: f64,
}

impl Default for ImpairmentCaps {
    fn default() -> Self {
        Self {
            gain_imbalance_db: 1.0,
            phase_imbalance: 5.0_f64.to_radians(),
            dc_offset: 0.02,
            carrier_offset: 0.01,
            phase_noise_std: 0.01,
            nonlinearity_coeff: 0.05,
        }
    }
}

impl ImpairmentCaps {
    fn is_degenerate(&self) -> bool {
        self.gain_imbalance_db == 0.0
            && self.phase_imbalance == 0.0
            && self.dc_offset == 0.0
            && self.carrier_offset == 0.0
            && self.phase_noise_std == 0.0
            && self.nonlinearity_coeff == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_devices: usize,
    pub frames_per_device: usize,
    pub frame_len: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub caps: ImpairmentCaps,
}

impl GenConfig {
    pub fn new(
        n_devices: usize,
        frames_per_device: usize,
        frame_len: usize,
        snr_db: f64,
        seed: u64,
    ) -> Self {
        Self {
            n_devices,
            frames_per_device,
            frame_len,
            snr_db,
            seed,
            caps: ImpairmentCaps::default(),
        }
    }
}

fn draw_profile(caps: &ImpairmentCaps, rng: &mut ChaCha8Rng, seed: u64) -> SynthDeviceProfile {
    let sym = |rng: &mut ChaCha8Rng, cap: f64| {
        if cap == 0.0 {
            0.0
        } else {
            rng.gen_range(-cap..=cap)
        }
    };
    let mag = |rng: &mut ChaCha8Rng, cap: f64| {
        if cap == 0.0 {
            0.0
        } else {
            rng.gen_range(0.0..=cap)
        }
    };
    let dc_mag = mag(rng, caps.dc_offset);
    let dc_phase = rng.gen_range(0.0..2.0 * PI);
    SynthDeviceProfile {
        gain_imbalance_db: sym(rng, caps.gain_imbalance_db),
        phase_imbalance: sym(rng, caps.phase_imbalance),
        dc_offset: (dc_mag * dc_phase.cos(), dc_mag * dc_phase.sin()),
        carrier_offset: sym(rng, caps.carrier_offset),
        phase_noise_std: mag(rng, caps.phase_noise_std),
        nonlinearity_coeff: sym(rng, caps.nonlinearity_coeff),
        seed,
    }
}

/// splitmix-style mix of (seed, device, frame) into one stream seed
fn frame_seed(seed: u64, device: usize, frame: usize) -> u64 {
    let mut z = seed
        .wrapping_add((device as u64).wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add((frame as u64).wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// One frame through a device's impairment chain plus AWGN. Order:
/// IQ imbalance → DC offset → cubic nonlinearity → carrier rotation →
/// phase-noise walk → noise. `snr_db = ∞` disables the noise.
pub fn synthesize_frame(
    clean: &[ComplexSample],
    profile: &SynthDeviceProfile,
    snr_db: f64,
    frame_rng: &mut ChaCha8Rng,
) -> Vec<ComplexSample> {
    let gain = 10.0f64.powf(profile.gain_imbalance_db / 20.0);
    let (sin_phi, cos_phi) = profile.phase_imbalance.sin_cos();
    let dc = Complex64::new(profile.dc_offset.0, profile.dc_offset.1);
    let cfo_step = 2.0 * PI * profile.carrier_offset / OVERSAMPLE;

    let mut out = Vec::with_capacity(clean.len());
    let mut theta = 0.0;
    for (n, &s) in clean.iter().enumerate() {
        let mut z = Complex64::new(s.re, gain * (s.im * cos_phi + s.re * sin_phi));
        z += dc;
        z += profile.nonlinearity_coeff * z * z.norm_sqr();
        let rot = cfo_step * n as f64;
        z *= Complex64::new(rot.cos(), rot.sin());
        if profile.phase_noise_std > 0.0 {
            theta += profile.phase_noise_std * gaussian(frame_rng);
            z *= Complex64::new(theta.cos(), theta.sin());
        }
        out.push(z);
    }

    if snr_db.is_finite() {
        let p_sig = out.iter().map(|s| s.norm_sqr()).sum::<f64>() / out.len() as f64;
        let sigma = (p_sig * 10.0f64.powf(-snr_db / 10.0) / 2.0).sqrt();
        for z in out.iter_mut() {
            *z += Complex64::new(sigma * gaussian(frame_rng), sigma * gaussian(frame_rng));
        }
    }
    out
}

/// Generates a labeled fleet: `n_devices` classes, `frames_per_device`
/// frames each, fully deterministic given `seed`.
pub fn gen_fleet(config: &GenConfig) -> Result<Dataset, DataError> {
    if config.n_devices < 2 {
        return Err(DataError::BadGenConfig(format!(
            "need at least 2 devices, got {}",
            config.n_devices
        )));
    }
    if config.frame_len < 64 {
        return Err(DataError::BadGenConfig(format!(
            "frame_len must be ≥ 64, got {}",
            config.frame_len
        )));
    }
    if config.caps.is_degenerate() {
        return Err(DataError::DegenerateCaps);
    }

    let clean = clean_preamble(config.frame_len);
    let mut profile_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let profiles: Vec<SynthDeviceProfile> = (0..config.n_devices)
        .map(|d| draw_profile(&config.caps, &mut profile_rng, frame_seed(config.seed, d, 0)))
        .collect();

    let n = config.n_devices * config.frames_per_device;
    let mut frames = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (d, profile) in profiles.iter().enumerate() {
        for f in 0..config.frames_per_device {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(profile.seed, d, f + 1));
            frames.push(synthesize_frame(&clean, profile, config.snr_db, &mut rng));
            labels.push(d as u16);
        }
    }
    Ok(Dataset {
        frames,
        labels,
        class_names: (0..config.n_devices).map(|d| format!("tx{d:02}")).collect(),
        layout: Layout::RawIq,
        frame_len: config.frame_len,
        sample_rate: SAMPLE_RATE,
        symbol_rate: SYMBOL_RATE,
    })
}
