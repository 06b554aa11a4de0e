//! Run settings, layered as command-line flags over a TOML file over defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use tiss_core::iss::{IssConfig, DEFAULT_EPSILON};
use tiss_core::simulate::{MixingKind, NoiseKind, SceneParams};
use tiss_core::wpe::{WpeConfig, DEFAULT_WPE_EPSILON};
use tiss_core::SourceModelKind;

use crate::error::CliError;

/// One layer of settings. Every field is optional; unset fields fall through
/// to the next layer. Flag names and config-file keys are the same.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// Number of sources to extract (default: number of channels).
    #[arg(long)]
    pub sources: Option<usize>,
    /// Microphones in a simulated scene.
    #[arg(long)]
    pub mics: Option<usize>,
    /// Dereverberation taps L (0 disables them).
    #[arg(long)]
    pub taps: Option<usize>,
    /// Prediction delay D in frames.
    #[arg(long)]
    pub delay: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Tap-free iterations run before the taps are switched on.
    #[arg(long)]
    pub warmstart_iterations: Option<usize>,
    /// Source model: gauss, laplace or unit.
    #[arg(long)]
    pub model: Option<String>,
    /// Relative diagonal loading of the linear solves.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Channel the estimates are scaled to and scored against.
    #[arg(long)]
    pub ref_channel: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Where to write the JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Mixing kind of a simulated scene: instantaneous, anechoic or reverberant.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub rt_ms: Option<f64>,
    #[arg(long)]
    pub onset_ms: Option<f64>,
    #[arg(long)]
    pub drr_db: Option<f64>,
    /// Noise level of a simulated scene; omit for a noiseless scene.
    #[arg(long)]
    pub snr_db: Option<f64>,
    /// Noise kind: white or diffuse.
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
}

macro_rules! layer {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        Settings { $($f: $hi.$f.clone().or_else(|| $lo.$f.clone()),)* }
    };
}

impl Settings {
    /// Fields set in `self` win; the rest come from `lower`.
    pub fn over(&self, lower: &Settings) -> Settings {
        layer!(
            self, lower, sources, mics, taps, delay, iterations, warmstart_iterations, model,
            epsilon, ref_channel, seed, threads, report, kind, rt_ms, onset_ms, drr_db, snr_db,
            noise, duration_s, sample_rate
        )
    }

    pub fn from_toml(text: &str) -> Result<Settings, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sources: Option<usize>,
    pub mics: usize,
    pub taps: usize,
    pub delay: usize,
    pub iterations: usize,
    pub warmstart_iterations: usize,
    pub model: SourceModelKind,
    pub epsilon: f64,
    pub ref_channel: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub report: Option<PathBuf>,
    pub kind: MixingKind,
    pub rt_ms: f64,
    pub onset_ms: f64,
    pub drr_db: f64,
    pub snr_db: Option<f64>,
    pub noise: NoiseKind,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneParams::new(2, 2, MixingKind::Reverberant, 0);
        RunConfig {
            sources: None,
            mics: scene.mics,
            taps: 5,
            delay: 3,
            iterations: 15,
            warmstart_iterations: 0,
            model: SourceModelKind::laplace(),
            epsilon: DEFAULT_EPSILON,
            ref_channel: 0,
            seed: 0,
            threads: None,
            report: None,
            kind: scene.kind,
            rt_ms: scene.rt_ms,
            onset_ms: scene.onset_ms,
            drr_db: scene.drr_db,
            snr_db: scene.snr_db,
            noise: scene.noise,
            duration_s: scene.duration_s,
            sample_rate: scene.sample_rate,
        }
    }
}

impl RunConfig {
    /// Defaults for `dereverb`: a single WPE iteration with its own loading.
    pub fn dereverb_defaults() -> Self {
        let w = WpeConfig::default();
        RunConfig {
            taps: w.taps,
            delay: w.delay,
            iterations: w.iterations,
            epsilon: DEFAULT_WPE_EPSILON,
            ..RunConfig::default()
        }
    }

    /// Applies `flags` over `file` over `defaults`.
    pub fn resolve(
        flags: &Settings,
        file: &Settings,
        defaults: &RunConfig,
    ) -> Result<RunConfig, CliError> {
        let s = flags.over(file);
        let d = defaults;
        Ok(RunConfig {
            sources: s.sources.or(d.sources),
            mics: s.mics.unwrap_or(d.mics),
            taps: s.taps.unwrap_or(d.taps),
            delay: s.delay.unwrap_or(d.delay),
            iterations: s.iterations.unwrap_or(d.iterations),
            warmstart_iterations: s.warmstart_iterations.unwrap_or(d.warmstart_iterations),
            model: match &s.model {
                Some(m) => m.parse()?,
                None => d.model,
            },
            epsilon: s.epsilon.unwrap_or(d.epsilon),
            ref_channel: s.ref_channel.unwrap_or(d.ref_channel),
            seed: s.seed.unwrap_or(d.seed),
            threads: s.threads.or(d.threads),
            report: s.report.or_else(|| d.report.clone()),
            kind: match &s.kind {
                Some(k) => k.parse()?,
                None => d.kind,
            },
            rt_ms: s.rt_ms.unwrap_or(d.rt_ms),
            onset_ms: s.onset_ms.unwrap_or(d.onset_ms),
            drr_db: s.drr_db.unwrap_or(d.drr_db),
            snr_db: s.snr_db.or(d.snr_db),
            noise: match &s.noise {
                Some(n) => n.parse()?,
                None => d.noise,
            },
            duration_s: s.duration_s.unwrap_or(d.duration_s),
            sample_rate: s.sample_rate.unwrap_or(d.sample_rate),
        })
    }

    pub fn iss(&self, channels: usize) -> IssConfig {
        IssConfig {
            sources: self.sources.unwrap_or(channels),
            iterations: self.iterations,
            warmstart_iterations: self.warmstart_iterations,
            taps: self.taps,
            delay: self.delay,
            model: self.model,
            epsilon: self.epsilon,
            ref_channel: self.ref_channel,
            track_cost: self.report.is_some(),
        }
    }

    pub fn wpe(&self) -> WpeConfig {
        WpeConfig {
            taps: self.taps,
            delay: self.delay,
            iterations: self.iterations,
            epsilon: self.epsilon,
            ..WpeConfig::default()
        }
    }

    pub fn scene(&self) -> SceneParams {
        SceneParams {
            sources: self.sources.unwrap_or(2),
            mics: self.mics,
            kind: self.kind,
            rt_ms: self.rt_ms,
            onset_ms: self.onset_ms,
            drr_db: self.drr_db,
            snr_db: self.snr_db,
            noise: self.noise,
            duration_s: self.duration_s,
            sample_rate: self.sample_rate,
            seed: self.seed,
        }
    }
}
