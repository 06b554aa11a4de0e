//! Seeded random instances shared by unit tests, integration tests and benches.

use ndarray::Array3;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::stft::MultichannelSpectrogram;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn complex_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Circular complex Gaussian entries, `channels x bins x frames`.
pub fn random_spectrogram(
    channels: usize,
    bins: usize,
    frames: usize,
    seed: u64,
) -> MultichannelSpectrogram {
    let mut r = rng(seed);
    let data = Array3::from_shape_simple_fn((channels, bins, frames), || complex_normal(&mut r));
    MultichannelSpectrogram::from_data(data)
}

/// Instantaneous mixture of `sources` independent sources with per-frame
/// random variance, observed on `channels` microphones. Each frequency gets
/// its own random mixing matrix.
pub fn random_mixture(
    sources: usize,
    channels: usize,
    bins: usize,
    frames: usize,
    seed: u64,
) -> MultichannelSpectrogram {
    let mut r = rng(seed);
    let mut s = Array3::<Complex64>::zeros((sources, bins, frames));
    for k in 0..sources {
        for n in 0..frames {
            let g: f64 = StandardNormal.sample(&mut r);
            let scale = (1.5 * g).exp();
            for f in 0..bins {
                s[[k, f, n]] = complex_normal(&mut r) * scale;
            }
        }
    }
    let mut x = Array3::<Complex64>::zeros((channels, bins, frames));
    for f in 0..bins {
        let a: Vec<Complex64> = (0..channels * sources)
            .map(|_| complex_normal(&mut r))
            .collect();
        for m in 0..channels {
            for k in 0..sources {
                let g = a[m * sources + k];
                for n in 0..frames {
                    x[[m, f, n]] += g * s[[k, f, n]];
                }
            }
        }
    }
    MultichannelSpectrogram::from_data(x)
}
