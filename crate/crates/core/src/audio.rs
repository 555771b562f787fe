//! Audio frontend: waveform resampling, short-time Fourier magnitudes, and
//! the log-frequency remap that produces the model's spectrogram input.
//!
//! Pipeline: resample to 11025 Hz, fix the clip to exactly [`CLIP_SAMPLES`]
//! samples (center-crop or loop-pad), Hann-windowed STFT with window 1022 and
//! hop 256 (no padding, 512 frequency rows), remap the frequency axis onto
//! 256 log-spaced bins over [30 Hz, Nyquist], log1p compression, per-clip
//! standardization.

use std::fs;
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::data::{write_f32_array, MOD_SPECTROGRAM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RATE: f64 = 11025.0;
pub const WINDOW: usize = 1022;
pub const HOP: usize = 256;
pub const FREQ_ROWS: usize = WINDOW / 2; // bins 0..511, Nyquist dropped
pub const LOG_BINS: usize = 256;
pub const F_MIN: f64 = 30.0;
/// Exactly 256 frames: WINDOW + 255 * HOP.
pub const CLIP_SAMPLES: usize = WINDOW + 255 * HOP;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if sample_rate <= 0.0 {
            return Err(Error::Input("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input("waveform contains non-finite samples".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreqScale {
    Linear,
    Log,
}

/// Time-major spectrogram (rows = time, cols = frequency).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Tensor,
    pub scale: FreqScale,
    /// true when the clip had ~zero variance and was mapped to all-zeros
    pub degenerate: bool,
}

/// Linear-interpolation resampling. Output length = round(len * target/src).
pub fn resample(w: &Waveform, target_rate: f64) -> Result<Waveform> {
    if target_rate <= 0.0 {
        return Err(Error::Input("target_rate must be positive".into()));
    }
    if w.samples.is_empty() {
        return Err(Error::Input("cannot resample an empty waveform".into()));
    }
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("waveform contains non-finite samples".into()));
    }
    let ratio = w.sample_rate / target_rate;
    let out_len = (w.samples.len() as f64 * target_rate / w.sample_rate).round() as usize;
    let out_len = out_len.max(1);
    let n = w.samples.len();
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let i0 = pos.floor() as usize;
        if i0 + 1 >= n {
            out.push(w.samples[n - 1]);
        } else {
            let frac = pos - i0 as f64;
            out.push(w.samples[i0] * (1.0 - frac) + w.samples[i0 + 1] * frac);
        }
    }
    Ok(Waveform {
        samples: out,
        sample_rate: target_rate,
    })
}

/// Center-crop or loop-pad to exactly `len` samples.
pub fn fix_length(w: &Waveform, len: usize) -> Waveform {
    let n = w.samples.len();
    let samples = if n == len {
        w.samples.clone()
    } else if n > len {
        let start = (n - len) / 2;
        w.samples[start..start + len].to_vec()
    } else {
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let take = (len - out.len()).min(n);
            out.extend_from_slice(&w.samples[..take]);
        }
        out
    };
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Number of full STFT frames for a signal of `len` samples.
pub fn frame_count(len: usize) -> Option<usize> {
    if len < WINDOW {
        None
    } else {
        Some((len - WINDOW) / HOP + 1)
    }
}

/// Hann-windowed STFT magnitude, 512 frequency rows x n_frames columns.
/// Frames lie fully inside the signal (no padding).
pub fn stft_magnitude(w: &Waveform) -> Result<Tensor> {
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("waveform contains non-finite samples".into()));
    }
    let n_frames = frame_count(w.samples.len()).ok_or_else(|| {
        Error::Input(format!(
            "waveform too short for STFT: {} samples, need at least {WINDOW}",
            w.samples.len()
        ))
    })?;
    let window: Vec<f64> = (0..WINDOW)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / WINDOW as f64).cos()))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(WINDOW);
    let mut out = Tensor::zeros(FREQ_ROWS, n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    for frame in 0..n_frames {
        let start = frame * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (bin, c) in buf.iter().take(FREQ_ROWS).enumerate() {
            out.set(bin, frame, c.norm());
        }
    }
    Ok(out)
}

/// Interpolation source position (fractional linear-frequency bin index) for
/// each log-frequency output bin.
pub fn log_bin_positions(sample_rate: f64, f_min: f64, out_bins: usize) -> Vec<f64> {
    let nyquist = sample_rate / 2.0;
    let bin_width = sample_rate / WINDOW as f64;
    (0..out_bins)
        .map(|j| {
            let f = f_min * (nyquist / f_min).powf(j as f64 / (out_bins - 1) as f64);
            (f / bin_width).min((FREQ_ROWS - 1) as f64)
        })
        .collect()
}

/// Remap a 512 x T magnitude matrix onto `LOG_BINS` log-spaced frequency
/// bins by linear interpolation. Output is time-major (T x LOG_BINS). This
/// is the pre-compression stage: positively homogeneous in its input.
pub fn log_frequency_remap(spec: &Tensor, sample_rate: f64) -> Result<Tensor> {
    if spec.rows() != FREQ_ROWS {
        return Err(Error::Shape(format!(
            "expected {FREQ_ROWS} frequency rows, got {}",
            spec.rows()
        )));
    }
    if !spec.is_finite() {
        return Err(Error::Input("spectrogram contains non-finite values".into()));
    }
    let positions = log_bin_positions(sample_rate, F_MIN, LOG_BINS);
    let t = spec.cols();
    let mut out = Tensor::zeros(t, LOG_BINS);
    for (j, &pos) in positions.iter().enumerate() {
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        for frame in 0..t {
            let v = if i0 + 1 >= FREQ_ROWS {
                spec.get(FREQ_ROWS - 1, frame)
            } else {
                spec.get(i0, frame) * (1.0 - frac) + spec.get(i0 + 1, frame) * frac
            };
            out.set(frame, j, v);
        }
    }
    Ok(out)
}

const DEGENERATE_STD: f64 = 1e-8;

/// log1p compression followed by per-clip standardization (mean 0, std 1).
/// A clip with std below 1e-8 maps to all-zeros and is flagged degenerate.
pub fn compress_standardize(remapped: &Tensor) -> Spectrogram {
    let compressed = remapped.map(|v| v.ln_1p());
    let mean = compressed.mean();
    let std = compressed.std();
    if std < DEGENERATE_STD {
        return Spectrogram {
            values: Tensor::zeros(remapped.rows(), remapped.cols()),
            scale: FreqScale::Log,
            degenerate: true,
        };
    }
    Spectrogram {
        values: compressed.map(|v| (v - mean) / std),
        scale: FreqScale::Log,
        degenerate: false,
    }
}

/// Full frequency-axis stage: remap, compress, standardize.
pub fn to_log_frequency(spec: &Tensor, sample_rate: f64) -> Result<Spectrogram> {
    Ok(compress_standardize(&log_frequency_remap(spec, sample_rate)?))
}

/// Full pipeline from a raw waveform to the model's spectrogram input.
pub fn spectrogram_from_waveform(w: &Waveform) -> Result<Spectrogram> {
    let resampled = if (w.sample_rate - DEFAULT_RATE).abs() < 1e-9 {
        w.clone()
    } else {
        resample(w, DEFAULT_RATE)?
    };
    let fixed = fix_length(&resampled, CLIP_SAMPLES);
    let stft = stft_magnitude(&fixed)?;
    to_log_frequency(&stft, DEFAULT_RATE)
}

/// Read a headerless little-endian float32 waveform file.
pub fn read_waveform_f32le(path: &Path, sample_rate: f64) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::corrupt(path, "length not a multiple of 4"));
    }
    let samples: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Waveform::new(samples, sample_rate)
}

pub fn write_waveform_f32le(path: &Path, w: &Waveform) -> Result<()> {
    let mut bytes = Vec::with_capacity(w.samples.len() * 4);
    for s in &w.samples {
        bytes.extend_from_slice(&(*s as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serialize a spectrogram in the dataset binary array format.
pub fn spectrogram_bytes(spec: &Spectrogram) -> Vec<u8> {
    let vals: Vec<f32> = spec.values.data().iter().map(|&v| v as f32).collect();
    let mut out = Vec::new();
    write_f32_array(
        &mut out,
        MOD_SPECTROGRAM,
        &[spec.values.rows(), spec.values.cols()],
        &vals,
    );
    out
}
