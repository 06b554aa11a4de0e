//! Waveform-in, waveform-out wrappers around the spectral algorithms.

use crate::error::{Error, Result};
use crate::iss::{separate, IssConfig, Separation};
use crate::metrics::{evaluate_with, EvalReport, ReferenceSet, DISTORTION_TAPS};
use crate::simulate::MixtureScene;
use crate::stft::{istft, stft, StftConfig, Waveform};
use crate::wpe::{wpe_dereverb, WpeConfig, WpeOutput};

/// Separates a multichannel recording into `cfg.sources` signals aligned to
/// the reference channel.
pub fn separate_waveform(
    x: &Waveform,
    cfg: &IssConfig,
    stft_cfg: &StftConfig,
) -> Result<(Waveform, Separation)> {
    let spec = stft(x, stft_cfg)?;
    let sep = separate(&spec, cfg)?;
    let out = istft(&sep.estimates.to_spectrogram(&spec))?;
    Ok((out, sep))
}

pub fn dereverb_waveform(
    x: &Waveform,
    cfg: &WpeConfig,
    stft_cfg: &StftConfig,
) -> Result<(Waveform, WpeOutput)> {
    let spec = stft(x, stft_cfg)?;
    let out = wpe_dereverb(&spec, cfg)?;
    let w = istft(&out.dereverberated)?;
    Ok((w, out))
}

/// Scores separated signals against the scene's source images at
/// `ref_channel`, together with the per-source SIR of the unprocessed
/// reference channel.
#[derive(Debug, Clone)]
pub struct SceneScore {
    pub report: EvalReport,
    /// SIR of the mixture at the reference channel, per source.
    pub input_sir_db: Vec<f64>,
}

impl SceneScore {
    /// Output SIR minus input SIR for the source matched to each estimate.
    pub fn sir_improvement(&self) -> Vec<f64> {
        self.report
            .sir_db
            .iter()
            .zip(&self.report.permutation)
            .map(|(out, &k)| out - self.input_sir_db[k])
            .collect()
    }

    pub fn mean_sir_improvement(&self) -> f64 {
        let v = self.sir_improvement();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn mean_sir(&self) -> f64 {
        self.report.sir_db.iter().sum::<f64>() / self.report.sir_db.len() as f64
    }
}

pub fn score_scene(scene: &MixtureScene, est: &Waveform, ref_channel: usize) -> Result<SceneScore> {
    if ref_channel >= scene.params.mics {
        return Err(Error::InvalidConfig(format!(
            "reference channel {ref_channel} out of range"
        )));
    }
    let refs: Vec<Vec<f64>> = (0..scene.params.sources)
        .map(|k| scene.image(k, ref_channel))
        .collect();
    let set = ReferenceSet::new(&refs, DISTORTION_TAPS.min(scene.len()))?;
    let report = evaluate_with(&set, &est.to_channels())?;
    let mix = scene.mixture.channel(ref_channel).to_vec();
    let input = set.decompose_all(&mix)?;
    Ok(SceneScore {
        report,
        input_sir_db: input.iter().map(|d| d.sir_db()).collect(),
    })
}
