//! Seeded synthetic scenes: dry sources, mixing filters, noise and the
//! rendered mixture, with per-source images kept as ground truth.
//!
//! Sources are colored noise under a random syllable-rate envelope, which
//! gives them the non-stationarity a speech signal has. Each microphone
//! receives every source through its own filter: a single gain
//! (instantaneous), a gain and integer delay (anechoic), or a delayed direct
//! tap followed by an exponentially decaying random tail (reverberant).

use std::str::FromStr;
use std::sync::Arc;

use log::warn;
use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixingKind {
    /// Real gains only.
    Instantaneous,
    /// Gains with integer propagation delays.
    Anechoic,
    /// Direct path plus exponentially decaying random tail.
    Reverberant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Spectrally white, independent per channel.
    White,
    /// Spectrally tilted like the sources, independent per channel.
    Diffuse,
}

impl FromStr for MixingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "instantaneous" => Ok(MixingKind::Instantaneous),
            "anechoic" => Ok(MixingKind::Anechoic),
            "reverberant" => Ok(MixingKind::Reverberant),
            other => Err(Error::InvalidConfig(format!(
                "unknown mixing kind '{other}' (expected instantaneous, anechoic or reverberant)"
            ))),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "white" => Ok(NoiseKind::White),
            "diffuse" => Ok(NoiseKind::Diffuse),
            other => Err(Error::InvalidConfig(format!(
                "unknown noise kind '{other}' (expected white or diffuse)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub sources: usize,
    pub mics: usize,
    pub kind: MixingKind,
    /// Reverberant tail length in milliseconds (60 dB amplitude decay over it).
    pub rt_ms: f64,
    /// Silent gap between the direct tap and the start of the tail.
    #[serde(default)]
    pub onset_ms: f64,
    /// Direct-to-reverberant energy ratio of each filter.
    pub drr_db: f64,
    /// `None` renders without noise.
    pub snr_db: Option<f64>,
    pub noise: NoiseKind,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl SceneParams {
    pub fn new(sources: usize, mics: usize, kind: MixingKind, seed: u64) -> Self {
        SceneParams {
            sources,
            mics,
            kind,
            rt_ms: 300.0,
            onset_ms: 0.0,
            drr_db: 0.0,
            snr_db: None,
            noise: NoiseKind::Diffuse,
            duration_s: 3.0,
            sample_rate: 16_000,
            seed,
        }
    }
}

/// One source-to-microphone filter; `taps[..direct_len]` is the direct path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fir {
    pub taps: Vec<f64>,
    pub direct_len: usize,
}

#[derive(Debug, Clone)]
pub struct MixtureScene {
    pub params: SceneParams,
    /// Dry source signals, one per source.
    pub sources: Vec<Vec<f64>>,
    /// `filters[m][k]`.
    pub filters: Vec<Vec<Fir>>,
    /// `M x T`.
    pub noise: Array2<f64>,
    pub mixture: Waveform,
    /// Per source, `M x T` image at every microphone.
    images: Vec<Array2<f64>>,
}

const MAX_DELAY: usize = 8;
// Amplitude decay of ln(1000) over the tail, i.e. 60 dB.
const DECAY_60DB: f64 = 6.907_755_278_982_137;

pub fn make_scene(params: &SceneParams) -> Result<MixtureScene> {
    let (k, m) = (params.sources, params.mics);
    if k == 0 || m == 0 {
        return Err(Error::InvalidConfig("need at least one source and one mic".into()));
    }
    if params.duration_s < 1.0 {
        return Err(Error::InvalidConfig(format!(
            "scene duration must be at least 1 s, got {}",
            params.duration_s
        )));
    }
    if params.sample_rate == 0 {
        return Err(Error::InvalidConfig("sample rate must be positive".into()));
    }
    if k > m {
        warn!("underdetermined scene: {k} sources on {m} microphones");
    }
    let len = (params.duration_s * params.sample_rate as f64).round() as usize;
    let mut r = ChaCha8Rng::seed_from_u64(params.seed);

    let sources: Vec<Vec<f64>> = (0..k)
        .map(|_| speech_like(&mut r, len, params.sample_rate))
        .collect();
    let filters: Vec<Vec<Fir>> = (0..m)
        .map(|_| (0..k).map(|_| make_filter(&mut r, params)).collect())
        .collect();

    let conv = Convolver::new(len, filters.iter().flatten().map(|h| h.taps.len()).max().unwrap_or(1));
    let src_spec: Vec<Vec<Complex64>> = sources.iter().map(|s| conv.spectrum(s)).collect();

    let mut images = vec![Array2::<f64>::zeros((m, len)); k];
    // Mixture rendered in one pass per channel so the image sum is an
    // independent check of it.
    let mut dry_mix = Array2::<f64>::zeros((m, len));
    for (mi, row) in filters.iter().enumerate() {
        let mut acc = vec![Complex64::new(0.0, 0.0); conv.nfft];
        for (ki, h) in row.iter().enumerate() {
            let hs = conv.spectrum(&h.taps);
            let mut prod: Vec<Complex64> = hs.iter().zip(&src_spec[ki]).map(|(a, b)| a * b).collect();
            for (a, p) in acc.iter_mut().zip(&prod) {
                *a += p;
            }
            let img = conv.inverse(&mut prod, len);
            images[ki].row_mut(mi).assign(&ndarray::Array1::from(img));
        }
        let mix = conv.inverse(&mut acc, len);
        dry_mix.row_mut(mi).assign(&ndarray::Array1::from(mix));
    }

    let mut noise = Array2::<f64>::zeros((m, len));
    if let Some(snr) = params.snr_db {
        for mut row in noise.outer_iter_mut() {
            let n = match params.noise {
                NoiseKind::White => (0..len).map(|_| StandardNormal.sample(&mut r)).collect(),
                NoiseKind::Diffuse => tilted_noise(&mut r, len, 0.9),
            };
            row.assign(&ndarray::Array1::from(n));
        }
        let signal: f64 = images.iter().flat_map(|i| i.iter()).map(|v| v * v).sum::<f64>();
        let current: f64 = noise.iter().map(|v| v * v).sum();
        let gain = (signal / current / 10f64.powf(snr / 10.0)).sqrt();
        noise.mapv_inplace(|v| v * gain);
    }

    let mixture_samples = &dry_mix + &noise;
    let mut check = noise.clone();
    for img in &images {
        check += img;
    }
    let err: f64 = check
        .iter()
        .zip(mixture_samples.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = mixture_samples.iter().map(|v| v * v).sum::<f64>().sqrt();
    if err > 1e-10 * scale {
        return Err(Error::InvalidConfig(format!(
            "rendered mixture differs from image sum by {:e} (relative)",
            err / scale
        )));
    }

    Ok(MixtureScene {
        params: params.clone(),
        sources,
        filters,
        noise,
        mixture: Waveform::new(mixture_samples, params.sample_rate)?,
        images,
    })
}

impl MixtureScene {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    /// Image of every source at every microphone (`[k]` is `M x T`).
    pub fn oracle_images(&self) -> &[Array2<f64>] {
        &self.images
    }

    /// Image of source `k` at microphone `m`.
    pub fn image(&self, k: usize, m: usize) -> Vec<f64> {
        self.images[k].row(m).to_vec()
    }

    /// Source `k` filtered by only the direct part of each microphone's filter.
    pub fn direct_image(&self, k: usize, m: usize) -> Vec<f64> {
        let h = &self.filters[m][k];
        let direct = &h.taps[..h.direct_len];
        let s = &self.sources[k];
        let mut out = vec![0.0; s.len()];
        for (d, &g) in direct.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for t in d..s.len() {
                out[t] += g * s[t - d];
            }
        }
        out
    }

    /// Image of every source at one microphone, as a multichannel waveform.
    pub fn image_waveform(&self, k: usize) -> Waveform {
        Waveform {
            samples: self.images[k].clone(),
            sample_rate: self.params.sample_rate,
        }
    }

    /// Measured signal-to-noise ratio over the full scene, or `None` when silent.
    pub fn measured_snr_db(&self) -> Option<f64> {
        let n: f64 = self.noise.iter().map(|v| v * v).sum();
        if n == 0.0 {
            return None;
        }
        let s: f64 = self.images.iter().flat_map(|i| i.iter()).map(|v| v * v).sum();
        Some(10.0 * (s / n).log10())
    }
}

/// Sidecar metadata written next to rendered scene WAVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub params: SceneParams,
    pub num_samples: usize,
    pub filters: Vec<Vec<Fir>>,
}

impl From<&MixtureScene> for SceneSidecar {
    fn from(s: &MixtureScene) -> Self {
        SceneSidecar {
            params: s.params.clone(),
            num_samples: s.len(),
            filters: s.filters.clone(),
        }
    }
}

fn make_filter<R: Rng>(r: &mut R, p: &SceneParams) -> Fir {
    let gain: f64 = StandardNormal.sample(r);
    match p.kind {
        MixingKind::Instantaneous => Fir {
            taps: vec![gain],
            direct_len: 1,
        },
        MixingKind::Anechoic => {
            let d = r.random_range(0..=MAX_DELAY);
            let mut taps = vec![0.0; d + 1];
            taps[d] = gain;
            Fir {
                taps,
                direct_len: d + 1,
            }
        }
        MixingKind::Reverberant => {
            let d = r.random_range(0..=MAX_DELAY);
            let ms = |t: f64| ((t / 1000.0) * p.sample_rate as f64).round() as usize;
            let tail_len = ms(p.rt_ms).max(1);
            let gap = ms(p.onset_ms);
            let start = d + 1 + gap;
            let mut taps = vec![0.0; start + tail_len];
            taps[d] = gain;
            let mut tail_energy = 0.0;
            for i in 0..tail_len {
                let env = (-DECAY_60DB * (i + 1) as f64 / tail_len as f64).exp();
                let v: f64 = StandardNormal.sample(r);
                taps[start + i] = v * env;
                tail_energy += (v * env).powi(2);
            }
            let want = gain * gain * 10f64.powf(-p.drr_db / 10.0);
            let scale = if tail_energy > 0.0 {
                (want / tail_energy).sqrt()
            } else {
                0.0
            };
            for t in &mut taps[d + 1..] {
                *t *= scale;
            }
            Fir {
                taps,
                direct_len: d + 1,
            }
        }
    }
}

/// First-order autoregressive (low-pass tilted) Gaussian noise.
fn tilted_noise<R: Rng>(r: &mut R, len: usize, pole: f64) -> Vec<f64> {
    let mut prev = 0.0;
    (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(r);
            prev = e + pole * prev;
            prev
        })
        .collect()
}

/// Colored noise under a piecewise random envelope with pauses, normalized to
/// unit RMS.
fn speech_like<R: Rng>(r: &mut R, len: usize, fs: u32) -> Vec<f64> {
    let pole = r.random_range(0.85..0.95);
    let carrier = tilted_noise(r, len, pole);

    let fs = fs as f64;
    let mut env = Vec::with_capacity(len);
    while env.len() < len {
        let seg = (r.random_range(0.08..0.4) * fs) as usize;
        let g = if r.random_bool(0.3) {
            0.02
        } else {
            let z: f64 = StandardNormal.sample(r);
            z.exp()
        };
        env.extend(std::iter::repeat_n(g, seg.max(1)));
    }
    env.truncate(len);
    // one-pole smoothing, ~10 ms
    let a = (-1.0 / (0.01 * fs)).exp();
    let mut state = env[0];
    for e in env.iter_mut() {
        state = a * state + (1.0 - a) * *e;
        *e = state;
    }

    let mut s: Vec<f64> = carrier.iter().zip(&env).map(|(c, e)| c * e).collect();
    let rms = (s.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        s.iter_mut().for_each(|v| *v /= rms);
    }
    s
}

struct Convolver {
    nfft: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl Convolver {
    fn new(len: usize, max_filter: usize) -> Self {
        let nfft = (len + max_filter).next_power_of_two();
        let mut planner = FftPlanner::new();
        Convolver {
            nfft,
            fft: planner.plan_fft_forward(nfft),
            ifft: planner.plan_fft_inverse(nfft),
        }
    }

    fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.nfft];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        self.fft.process(&mut buf);
        buf
    }

    /// Real part of the inverse transform, truncated to `len` samples.
    fn inverse(&self, buf: &mut [Complex64], len: usize) -> Vec<f64> {
        self.ifft.process(buf);
        let scale = 1.0 / self.nfft as f64;
        buf[..len].iter().map(|v| v.re * scale).collect()
    }
}
