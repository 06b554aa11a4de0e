//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Frame `n` covers samples `[n * hop, n * hop + window_length)` of the input;
//! the tail is zero-padded so that the last sample is covered. Synthesis uses
//! the canonical dual of the analysis window, which gives exact
//! reconstruction wherever the frames overlap fully.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView1, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multichannel real signal, `channels x samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Array2<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn from_channels(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        let m = channels.len();
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::DimensionMismatch(
                "all channels must have the same length".into(),
            ));
        }
        let flat: Vec<f64> = channels.into_iter().flatten().collect();
        let samples = Array2::from_shape_vec((m, len), flat)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Waveform::new(samples, sample_rate)
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, m: usize) -> ArrayView1<'_, f64> {
        self.samples.row(m)
    }

    pub fn to_channels(&self) -> Vec<Vec<f64>> {
        self.samples.outer_iter().map(|r| r.to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Periodic Hann taper.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn taper(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub fft_length: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 25 ms Hann window, 10 ms hop at 16 kHz, zero-padded to 512.
    fn default() -> Self {
        StftConfig {
            window_length: 400,
            hop: 160,
            fft_length: 512,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window_length || self.window_length > self.fft_length
        {
            return Err(Error::InvalidConfig(format!(
                "need 0 < hop <= window_length <= fft_length, got hop={} window={} fft={}",
                self.hop, self.window_length, self.fft_length
            )));
        }
        let w = self.window.taper(self.window_length);
        if self.overlap_energy(&w).iter().any(|&d| d <= 0.0) {
            return Err(Error::InvalidConfig(
                "analysis window leaves samples uncovered at this hop".into(),
            ));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    /// Number of frames needed to cover `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if len <= self.window_length {
            1
        } else {
            (len - self.window_length).div_ceil(self.hop) + 1
        }
    }

    // Sum of squared window values stacked at every hop, per in-frame position.
    fn overlap_energy(&self, w: &[f64]) -> Vec<f64> {
        let len = self.window_length;
        (0..len)
            .map(|t| {
                let mut acc = 0.0;
                let mut p = t % self.hop;
                while p < len {
                    acc += w[p] * w[p];
                    p += self.hop;
                }
                acc
            })
            .collect()
    }

    /// Synthesis taper dual to the analysis taper under weighted overlap-add.
    pub fn synthesis_window(&self) -> Vec<f64> {
        let w = self.window.taper(self.window_length);
        let denom = self.overlap_energy(&w);
        w.iter().zip(&denom).map(|(a, d)| a / d).collect()
    }
}

/// Complex spectrogram, `channels x bins x frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSpectrogram {
    pub data: Array3<Complex64>,
    pub config: StftConfig,
    /// Length of the time-domain signal the spectrogram was computed from.
    pub num_samples: usize,
    pub sample_rate: u32,
}

impl MultichannelSpectrogram {
    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn bins(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn frames(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    /// Wraps raw STFT-domain data, as produced by synthetic tests.
    pub fn from_data(data: Array3<Complex64>) -> Self {
        let bins = data.len_of(Axis(1));
        let fft_length = 2 * bins.saturating_sub(1).max(1);
        let config = StftConfig {
            window_length: fft_length,
            hop: fft_length / 2,
            fft_length,
            window: WindowKind::Hann,
        };
        let frames = data.len_of(Axis(2));
        MultichannelSpectrogram {
            data,
            config,
            num_samples: config.window_length + (frames.saturating_sub(1)) * config.hop,
            sample_rate: 16_000,
        }
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Plans {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<MultichannelSpectrogram> {
    cfg.validate()?;
    if w.channels() == 0 || w.is_empty() {
        return Err(Error::EmptyInput("waveform"));
    }
    if w.samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("waveform"));
    }

    let len = w.len();
    let frames = cfg.num_frames(len);
    let bins = cfg.num_bins();
    let taper = cfg.window.taper(cfg.window_length);
    let plans = Plans::new(cfg.fft_length);

    let mut data = Array3::<Complex64>::zeros((w.channels(), bins, frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_length];
    for (m, channel) in w.samples.outer_iter().enumerate() {
        for n in 0..frames {
            buf.fill(Complex64::new(0.0, 0.0));
            let start = n * cfg.hop;
            for (t, b) in buf.iter_mut().take(cfg.window_length).enumerate() {
                if let Some(&x) = channel.get(start + t) {
                    b.re = x * taper[t];
                }
            }
            plans.forward.process(&mut buf);
            for f in 0..bins {
                data[[m, f, n]] = buf[f];
            }
        }
    }

    Ok(MultichannelSpectrogram {
        data,
        config: *cfg,
        num_samples: len,
        sample_rate: w.sample_rate,
    })
}

pub fn istft(spec: &MultichannelSpectrogram) -> Result<Waveform> {
    let cfg = &spec.config;
    cfg.validate()?;
    if spec.bins() != cfg.num_bins() {
        return Err(Error::DimensionMismatch(format!(
            "spectrogram has {} bins, config implies {}",
            spec.bins(),
            cfg.num_bins()
        )));
    }
    if spec.frames() != cfg.num_frames(spec.num_samples) {
        return Err(Error::DimensionMismatch(format!(
            "spectrogram has {} frames, {} samples imply {}",
            spec.frames(),
            spec.num_samples,
            cfg.num_frames(spec.num_samples)
        )));
    }

    let nfft = cfg.fft_length;
    let bins = cfg.num_bins();
    let frames = spec.frames();
    let synth = cfg.synthesis_window();
    let plans = Plans::new(nfft);
    let padded = (frames - 1) * cfg.hop + cfg.window_length;
    let scale = 1.0 / nfft as f64;

    let mut out = Array2::<f64>::zeros((spec.channels(), padded));
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for (m, mut row) in out.outer_iter_mut().enumerate() {
        for n in 0..frames {
            for f in 0..bins {
                buf[f] = spec.data[[m, f, n]];
            }
            // DC and Nyquist are real for a real signal.
            buf[0].im = 0.0;
            if nfft.is_multiple_of(2) {
                buf[nfft / 2].im = 0.0;
            }
            for f in 1..nfft.div_ceil(2) {
                buf[nfft - f] = buf[f].conj();
            }
            plans.inverse.process(&mut buf);
            let start = n * cfg.hop;
            for t in 0..cfg.window_length {
                row[start + t] += buf[t].re * scale * synth[t];
            }
        }
    }

    let samples = out.slice(s![.., ..spec.num_samples]).to_owned();
    Waveform::new(samples, spec.sample_rate)
}
