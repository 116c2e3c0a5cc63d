//! Synthetic gearbox-style vibration data and spectrum preprocessing.
//!
//! The pipeline mirrors a real measurement chain: a time-domain window
//! (2048 samples at 12 kHz) of meshing-harmonic sinusoids with
//! amplitude-modulation sidebands and a broadband noise floor, transformed to
//! a 1024-bin magnitude spectrum, 0-1 normalized, then optionally augmented
//! (additive noise, scaling, masking — each applied with probability 0.5).
//! Augmentation happens after normalization and may push bins outside [0, 1];
//! values are not clamped.
//!
//! The default four-class task keeps every spectral line on an exact FFT bin
//! so tests can reason about peak positions: bin width is
//! 12000/2048 = 5.859375 Hz and each class has a dominant line a
//! convolutional quarter apart (bins 5, 384, 640, 896).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PmnError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: f64 = 12_000.0;
pub const WINDOW_LEN: usize = 2048;
pub const SPECTRUM_BINS: usize = WINDOW_LEN / 2;

/// Width of one spectrum bin in Hz.
pub fn bin_hz() -> f64 {
    SAMPLE_RATE / WINDOW_LEN as f64
}

/// Spectrum bin index a tone at `freq` Hz lands on (nearest bin).
pub fn tone_bin(freq: f64) -> usize {
    (freq * WINDOW_LEN as f64 / SAMPLE_RATE).round() as usize
}

/// Spectral recipe for one fault class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultSpec {
    pub class_id: u16,
    /// Meshing (carrier) frequency in Hz.
    pub mesh_hz: f64,
    /// Amplitudes of the 1x..4x harmonics of `mesh_hz`.
    pub harmonic_amps: [f64; 4],
    /// Sideband spacing in Hz (amplitude modulation of the harmonic stack).
    pub sideband_hz: f64,
    /// Modulation depth; each sideband line carries depth/2 of its carrier.
    pub sideband_depth: f64,
    /// Standard deviation of the broadband time-domain noise floor.
    pub noise_floor: f64,
}

impl FaultSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE / 2.0;
        if self.harmonic_amps.iter().any(|&a| a < 0.0)
            || self.sideband_depth < 0.0
            || self.noise_floor < 0.0
        {
            return Err(PmnError::Config(format!(
                "negative amplitude in fault spec for class {}",
                self.class_id
            )));
        }
        for (h, &amp) in self.harmonic_amps.iter().enumerate() {
            if amp == 0.0 {
                continue;
            }
            let freq = (h + 1) as f64 * self.mesh_hz;
            let top = if self.sideband_depth > 0.0 {
                freq + self.sideband_hz
            } else {
                freq
            };
            if top >= nyquist {
                return Err(PmnError::Config(format!(
                    "class {}: harmonic {} at {:.1} Hz reaches past the Nyquist \
                     frequency {:.1} Hz",
                    self.class_id,
                    h + 1,
                    top,
                    nyquist
                )));
            }
        }
        Ok(())
    }

    /// Index (0-based) of the strongest harmonic; ties take the lowest.
    pub fn dominant_harmonic(&self) -> usize {
        let mut best = 0;
        for (h, &a) in self.harmonic_amps.iter().enumerate().skip(1) {
            if a > self.harmonic_amps[best] {
                best = h;
            }
        }
        best
    }

    /// Spectrum bin of the strongest harmonic — the line that separates this
    /// class from the others in the default task.
    pub fn dominant_bin(&self) -> usize {
        tone_bin((self.dominant_harmonic() + 1) as f64 * self.mesh_hz)
    }
}

/// The stock four-class task: each condition excites one characteristic
/// frequency with rotation-spaced modulation sidebands over a shared noise
/// floor — a shaft-rate line for the healthy class and three fault
/// resonances. The classes carry equal energy and differ only in *where*
/// that energy sits, so a trained classifier has to key on the presence of
/// each line rather than on absence patterns. The lines sit on the encoder's
/// receptive-field centers (multiples of the cumulative stride, 256 bins)
/// and on exact FFT bins, so both attribution and spectra are leakage-free.
pub fn default_fault_specs() -> Vec<FaultSpec> {
    let rot = 5.0 * bin_hz(); // 29.296875 Hz shaft rate, bin 5
    let line = |class_id: u16, bin: f64| FaultSpec {
        class_id,
        mesh_hz: bin * bin_hz(),
        harmonic_amps: [1.0, 0.0, 0.0, 0.0],
        sideband_hz: rot,
        sideband_depth: 0.3,
        noise_floor: 0.03,
    };
    vec![
        line(0, 5.0),   // 29.3 Hz
        line(1, 256.0), // 1500 Hz
        line(2, 512.0), // 3000 Hz
        line(3, 768.0), // 4500 Hz
    ]
}

/// Deterministic harmonic synthesis with explicit phases and no noise.
fn synth(spec: &FaultSpec, length: usize, rate: f64, phases: &[f64; 4], sb_phase: f64) -> Vec<f64> {
    let two_pi = std::f64::consts::TAU;
    (0..length)
        .map(|t| {
            let time = t as f64 / rate;
            let carrier: f64 = spec
                .harmonic_amps
                .iter()
                .enumerate()
                .filter(|(_, &a)| a > 0.0)
                .map(|(h, &a)| a * (two_pi * (h + 1) as f64 * spec.mesh_hz * time + phases[h]).sin())
                .sum();
            let am = if spec.sideband_depth > 0.0 {
                1.0 + spec.sideband_depth * (two_pi * spec.sideband_hz * time + sb_phase).cos()
            } else {
                1.0
            };
            carrier * am
        })
        .collect()
}

/// One time-domain window of the fault signature.
///
/// Per call the generator draws, in this order: four harmonic phases, one
/// sideband phase, then `length` noise samples — so a cloned `Rng` predicts
/// the output exactly.
pub fn generate_signal(
    spec: &FaultSpec,
    length: usize,
    rate: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut phases = [0.0; 4];
    for p in &mut phases {
        *p = rng.uniform_in(0.0, std::f64::consts::TAU);
    }
    let sb_phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let mut signal = synth(spec, length, rate, &phases, sb_phase);
    if spec.noise_floor > 0.0 {
        for v in &mut signal {
            *v += spec.noise_floor * rng.gaussian();
        }
    }
    Ok(signal)
}

// ── FFT (radix-2 decimation-in-time, complex as (re, im) tuples) ───────────

fn fft_in_place(buf: &mut [(f64, f64)]) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "FFT length must be a power of two");

    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j ^= bit;
        if i < j {
            buf.swap(i, j);
        }
    }

    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let angle = -std::f64::consts::TAU / len as f64;
        let wn = (angle.cos(), angle.sin());
        let mut start = 0;
        while start < n {
            let mut w = (1.0, 0.0);
            for k in 0..half {
                let u = buf[start + k];
                let v = buf[start + k + half];
                let t = (w.0 * v.0 - w.1 * v.1, w.0 * v.1 + w.1 * v.0);
                buf[start + k] = (u.0 + t.0, u.1 + t.1);
                buf[start + k + half] = (u.0 - t.0, u.1 - t.1);
                w = (w.0 * wn.0 - w.1 * wn.1, w.0 * wn.1 + w.1 * wn.0);
            }
            start += len;
        }
        len <<= 1;
    }
}

/// Magnitudes of the full FFT of a power-of-two real signal (all N bins,
/// unnormalized).
pub(crate) fn fft_magnitudes(signal: &[f64]) -> Vec<f64> {
    let mut buf: Vec<(f64, f64)> = signal.iter().map(|&v| (v, 0.0)).collect();
    fft_in_place(&mut buf);
    buf.iter().map(|(re, im)| (re * re + im * im).sqrt()).collect()
}

/// Magnitude spectrum of one window: the first 1024 non-redundant FFT bins
/// (DC included, Nyquist excluded). Bin `k` corresponds to
/// `k * rate / 2048` Hz.
pub fn to_spectrum(time: &[f64]) -> Result<Vec<f64>> {
    if time.len() != WINDOW_LEN {
        return Err(PmnError::Dimension(format!(
            "to_spectrum expects a window of {WINDOW_LEN} samples, got {}",
            time.len()
        )));
    }
    let mut mags = fft_magnitudes(time);
    mags.truncate(SPECTRUM_BINS);
    Ok(mags)
}

/// 0-1 normalization: `(x - min) / (max - min)`; a constant input maps to
/// all zeros.
pub fn normalize_01(bins: &mut [f64]) {
    let min = bins.iter().copied().fold(f64::INFINITY, f64::min);
    let max = bins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        let span = max - min;
        for v in bins.iter_mut() {
            *v = (*v - min) / span;
        }
    } else {
        bins.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Augmentation strengths: `v` drives noise/scale, `d` the mask width in
/// bins; each of the three augmentations fires independently with
/// `probability`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub v: f64,
    pub d: usize,
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            v: 0.1,
            d: 100,
            probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, bins: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(PmnError::Config(format!(
                "augmentation probability {} outside [0, 1]",
                self.probability
            )));
        }
        if self.d > bins {
            return Err(PmnError::Config(format!(
                "mask length {} exceeds spectrum width {bins}",
                self.d
            )));
        }
        if self.v < 0.0 || !self.v.is_finite() {
            return Err(PmnError::Config(format!("invalid noise strength {}", self.v)));
        }
        Ok(())
    }

    /// Parse the `v-d` shorthand, e.g. `0.2-200` -> `(0.2, 200)`.
    pub fn parse_vd(s: &str) -> Result<(f64, usize)> {
        let (v, d) = s
            .split_once('-')
            .ok_or_else(|| PmnError::Data(format!("expected `v-d` condition label, got '{s}'")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| PmnError::Data(format!("bad noise strength in '{s}'")))?;
        let d: usize = d
            .trim()
            .parse()
            .map_err(|_| PmnError::Data(format!("bad mask length in '{s}'")))?;
        Ok((v, d))
    }
}

/// Apply the three augmentations in a fixed order (noise, scale, mask), each
/// with its own coin flip:
///
/// - noise: `x += v * 10 * std(x) * g`, per-bin standard normal `g`, scalar
///   `std(x)` over the sample's bins
/// - scale: one draw of `N(1, v)` multiplies the whole sample
/// - mask: a run of `d` bins starting at a uniform offset in `[0, n-d]` is
///   zeroed
pub fn augment(bins: &mut [f64], config: &AugmentConfig, rng: &mut Rng) -> Result<()> {
    config.validate(bins.len())?;

    if rng.uniform() < config.probability {
        let n = bins.len() as f64;
        let mean = bins.iter().sum::<f64>() / n;
        let std = (bins.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let scale = config.v * 10.0 * std;
        for v in bins.iter_mut() {
            *v += scale * rng.gaussian();
        }
    }
    if rng.uniform() < config.probability {
        let factor = 1.0 + config.v * rng.gaussian();
        bins.iter_mut().for_each(|v| *v *= factor);
    }
    if rng.uniform() < config.probability && config.d > 0 {
        let offset = rng.below(bins.len() - config.d + 1);
        bins[offset..offset + config.d].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

/// One preprocessed spectrum with its class label and operating-condition
/// tag.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSample {
    pub bins: Vec<f64>,
    pub label: u16,
    pub domain: u16,
}

/// An ordered collection of spectrum samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SpectrumSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.samples.iter().map(|s| s.label as usize + 1).max().unwrap_or(0)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label as usize).collect()
    }

    /// Stack the selected samples into an `[n, bins]` tensor.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let bins = self.samples[indices[0]].bins.len();
        let mut data = Vec::with_capacity(indices.len() * bins);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].bins);
        }
        Tensor::from_vec(&[indices.len(), bins], data).expect("stacked batch")
    }

    /// Stack the whole dataset into an `[n, bins]` tensor.
    pub fn full_tensor(&self) -> Tensor {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch_tensor(&indices)
    }
}

/// The clean (noise-free, zero-phase, unaugmented) normalized spectrum of a
/// fault class — the ground-truth template its decoded prototype should
/// resemble.
pub fn clean_template(spec: &FaultSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let time = synth(spec, WINDOW_LEN, SAMPLE_RATE, &[0.0; 4], 0.0);
    let mut bins = to_spectrum(&time)?;
    normalize_01(&mut bins);
    Ok(bins)
}

// Stream labels for deriving independent per-stage generators.
const STREAM_GENERATE: u64 = 0x67656e; // "gen"
const STREAM_AUGMENT: u64 = 0x617567; // "aug"
const STREAM_SPLIT: u64 = 0x73706c; // "spl"

/// Generate, preprocess, split, and augment the synthetic task.
///
/// Per class: `per_class` windows are synthesized, turned into normalized
/// spectra, split into train/test by a stratified shuffle
/// (`round(per_class * split_ratio)` to train), and then *both* splits are
/// augmented — robustness is evaluated on disturbed spectra too. Bins are
/// rounded to f32 so in-memory datasets match their PMDS files exactly.
pub fn build_dataset(
    specs: &[FaultSpec],
    per_class: usize,
    split_ratio: f64,
    augment_config: &AugmentConfig,
    rng: &Rng,
) -> Result<(Dataset, Dataset)> {
    if specs.is_empty() {
        return Err(PmnError::Config("no fault classes given".into()));
    }
    if per_class < 2 {
        return Err(PmnError::Config(format!(
            "need at least 2 samples per class, got {per_class}"
        )));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(PmnError::Config(format!(
            "split ratio {split_ratio} outside (0, 1)"
        )));
    }
    augment_config.validate(SPECTRUM_BINS)?;

    let mut train = Dataset::default();
    let mut test = Dataset::default();
    for (c, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let mut class_samples = Vec::with_capacity(per_class);
        for i in 0..per_class {
            let mut gen_rng = rng
                .derive(STREAM_GENERATE)
                .derive(((c as u64) << 32) | i as u64);
            let time = generate_signal(spec, WINDOW_LEN, SAMPLE_RATE, &mut gen_rng)?;
            let mut bins = to_spectrum(&time)?;
            normalize_01(&mut bins);

            let mut aug_rng = rng
                .derive(STREAM_AUGMENT)
                .derive(((c as u64) << 32) | i as u64);
            augment(&mut bins, augment_config, &mut aug_rng)?;
            for v in &mut bins {
                *v = *v as f32 as f64;
            }
            class_samples.push(SpectrumSample {
                bins,
                label: spec.class_id,
                domain: 0,
            });
        }

        let mut order: Vec<usize> = (0..per_class).collect();
        rng.derive(STREAM_SPLIT).derive(c as u64).shuffle(&mut order);
        let train_count = ((per_class as f64 * split_ratio).round() as usize)
            .clamp(1, per_class - 1);
        for (rank, &idx) in order.iter().enumerate() {
            let sample = class_samples[idx].clone();
            if rank < train_count {
                train.samples.push(sample);
            } else {
                test.samples.push(sample);
            }
        }
    }
    Ok((train, test))
}

// ── PMDS dataset files ─────────────────────────────────────────────────────

const PMDS_MAGIC: &[u8; 4] = b"PMDS";
const PMDS_VERSION: u16 = 1;

/// Write a dataset in the PMDS binary format: magic `PMDS`, version u16,
/// sample count u32, bin count u32, then per sample label u16, domain u16,
/// and the bins as little-endian f32.
pub fn write_pmds(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| PmnError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| PmnError::io(path.display().to_string(), e);

    let bins = dataset.samples.first().map_or(SPECTRUM_BINS, |s| s.bins.len());
    w.write_all(PMDS_MAGIC).map_err(io_err)?;
    w.write_all(&PMDS_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(dataset.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(bins as u32).to_le_bytes()).map_err(io_err)?;
    for sample in &dataset.samples {
        if sample.bins.len() != bins {
            return Err(PmnError::Data(format!(
                "sample with {} bins in a {bins}-bin dataset",
                sample.bins.len()
            )));
        }
        w.write_all(&sample.label.to_le_bytes()).map_err(io_err)?;
        w.write_all(&sample.domain.to_le_bytes()).map_err(io_err)?;
        for &v in &sample.bins {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read a PMDS dataset file back into memory.
pub fn read_pmds(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| PmnError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| PmnError::io(path.display().to_string(), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != PMDS_MAGIC {
        return Err(PmnError::Format(format!(
            "{}: not a PMDS file (magic {magic:?})",
            path.display()
        )));
    }
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u16buf).map_err(io_err)?;
    let version = u16::from_le_bytes(u16buf);
    if version != PMDS_VERSION {
        return Err(PmnError::Format(format!(
            "{}: unsupported PMDS version {version}",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let bins = u32::from_le_bytes(u32buf) as usize;

    let mut samples = Vec::with_capacity(count);
    let mut f32buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut u16buf).map_err(io_err)?;
        let label = u16::from_le_bytes(u16buf);
        r.read_exact(&mut u16buf).map_err(io_err)?;
        let domain = u16::from_le_bytes(u16buf);
        let mut sample_bins = Vec::with_capacity(bins);
        for _ in 0..bins {
            r.read_exact(&mut f32buf).map_err(io_err)?;
            sample_bins.push(f32::from_le_bytes(f32buf) as f64);
        }
        samples.push(SpectrumSample {
            bins: sample_bins,
            label,
            domain,
        });
    }
    Ok(Dataset { samples })
}

/// CSV export: header `label,domain,b0..b1023`, one row per sample.
pub fn write_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| PmnError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| PmnError::io(path.display().to_string(), e);

    let bins = dataset.samples.first().map_or(SPECTRUM_BINS, |s| s.bins.len());
    let mut header = String::from("label,domain");
    for b in 0..bins {
        header.push_str(&format!(",b{b}"));
    }
    writeln!(w, "{header}").map_err(io_err)?;
    for sample in &dataset.samples {
        let mut row = format!("{},{}", sample.label, sample.domain);
        for &v in &sample.bins {
            row.push(',');
            row.push_str(&format!("{}", v as f32));
        }
        writeln!(w, "{row}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
