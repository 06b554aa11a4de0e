use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use tiss_core::metrics::{evaluate, EvalReport};
use tiss_core::pipeline::{dereverb_waveform, separate_waveform};
use tiss_core::simulate::{make_scene, SceneSidecar};
use tiss_core::wav::{read_wav, write_wav, WavEncoding};
use tiss_core::{StftConfig, Waveform};

use crate::config::RunConfig;
use crate::error::CliError;

/// Written by `separate --report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub sources: usize,
    pub channels: usize,
    pub iterations: usize,
    pub skipped: usize,
    pub cost_trace: Vec<f64>,
}

/// Written by `dereverb --report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DereverbReport {
    pub channels: usize,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(tiss_core::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_mono(path: &Path, samples: Vec<f64>, sample_rate: u32) -> Result<(), CliError> {
    let w = Waveform::from_channels(vec![samples], sample_rate)?;
    write_wav(path, &w, WavEncoding::Float32)?;
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scene = make_scene(&cfg.scene())?;
    create_dir(out)?;
    write_wav(out.join("mix.wav"), &scene.mixture, WavEncoding::Float32)?;
    for k in 0..scene.params.sources {
        write_wav(
            out.join(format!("src_{k}.wav")),
            &scene.image_waveform(k),
            WavEncoding::Float32,
        )?;
    }
    write_json(&out.join("scene.json"), &SceneSidecar::from(&scene))?;
    info!(
        "wrote {} sources on {} microphones to {}",
        scene.params.sources,
        scene.params.mics,
        out.display()
    );
    Ok(())
}

pub fn cmd_separate(cfg: &RunConfig, input: &Path, out: &Path) -> Result<(), CliError> {
    let x = read_wav(input)?;
    let iss = cfg.iss(x.channels());
    let (est, sep) = separate_waveform(&x, &iss, &StftConfig::default())?;
    create_dir(out)?;
    for (k, ch) in est.to_channels().into_iter().enumerate() {
        write_mono(&out.join(format!("est_{k}.wav")), ch, x.sample_rate)?;
    }
    if let Some(path) = &cfg.report {
        write_json(
            path,
            &SeparationReport {
                sources: iss.sources,
                channels: x.channels(),
                iterations: iss.warmstart_iterations + iss.iterations,
                skipped: sep.skipped,
                cost_trace: sep.cost_trace,
            },
        )?;
    }
    Ok(())
}

pub fn cmd_dereverb(cfg: &RunConfig, input: &Path, output: &Path) -> Result<(), CliError> {
    let x = read_wav(input)?;
    let (y, res) = dereverb_waveform(&x, &cfg.wpe(), &StftConfig::default())?;
    write_wav(output, &y, WavEncoding::Float32)?;
    if let Some(path) = &cfg.report {
        write_json(
            path,
            &DereverbReport {
                channels: x.channels(),
                iterations: cfg.iterations,
                objective_trace: res.objective_trace,
            },
        )?;
    }
    Ok(())
}

/// Scores estimate files (every channel is one estimate) against reference
/// files (channel `ref_channel` of each, or its only channel). The report
/// goes to `cfg.report` or, if unset, to stdout.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    estimates: &[PathBuf],
    references: &[PathBuf],
    separation_report: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let mut est = Vec::new();
    for p in estimates {
        est.extend(read_wav(p)?.to_channels());
    }
    let mut refs = Vec::new();
    for p in references {
        let w = read_wav(p)?;
        let c = if w.channels() == 1 { 0 } else { cfg.ref_channel };
        if c >= w.channels() {
            return Err(CliError::Usage(format!(
                "{}: reference channel {c} out of range for {} channels",
                p.display(),
                w.channels()
            )));
        }
        refs.push(w.channel(c).to_vec());
    }
    let mut report = evaluate(&est, &refs)?;
    if let Some(path) = separation_report {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let sep: SeparationReport =
            serde_json::from_str(&text).map_err(tiss_core::Error::from)?;
        report.cost_trace = sep.cost_trace;
    }
    match &cfg.report {
        Some(path) => write_json(path, &report)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(tiss_core::Error::from)?
        ),
    }
    Ok(report)
}
