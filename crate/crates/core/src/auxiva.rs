//! Determined AuxIVA with iterative source steering, on the raw observation.
//!
//! This is the tap-free special case of [`crate::iss`] written directly
//! against square demixing matrices. It is kept as an independent path so
//! that the reduction of the tapped algorithm at `L = 0` can be checked
//! bit for bit.

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::source_model::{weights, SourceModelKind};
use crate::stft::MultichannelSpectrogram;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Identity demixing matrices, `F x M x M`.
pub fn identity(channels: usize, bins: usize) -> Array3<Complex64> {
    let mut w = Array3::zeros((bins, channels, channels));
    for f in 0..bins {
        for m in 0..channels {
            w[[f, m, m]] = Complex64::new(1.0, 0.0);
        }
    }
    w
}

/// `Y_f = W_f X_f` for every frequency, `M x F x N`.
pub fn apply(w: &Array3<Complex64>, x: &MultichannelSpectrogram) -> Array3<Complex64> {
    let (m, bins, frames) = x.data.dim();
    let mut y = Array3::<Complex64>::zeros((m, bins, frames));
    for f in 0..bins {
        for k in 0..m {
            for n in 0..frames {
                let mut acc = ZERO;
                for c in 0..m {
                    acc += w[[f, k, c]] * x.data[[c, f, n]];
                }
                y[[k, f, n]] = acc;
            }
        }
    }
    y
}

/// One sweep over all sources; returns the number of skipped updates.
pub fn sweep(
    w: &mut Array3<Complex64>,
    x: &MultichannelSpectrogram,
    model: &SourceModelKind,
) -> Result<usize> {
    let (m, bins, frames) = x.data.dim();
    if w.dim() != (bins, m, m) {
        return Err(Error::DimensionMismatch(format!(
            "demixing matrices {:?} for {m} channels x {bins} bins",
            w.dim()
        )));
    }
    let mut y = apply(w, x);
    let u: Vec<Array2<f64>> = y
        .outer_iter()
        .map(|yk| weights(model, yk).map(|mask| mask.u))
        .collect::<Result<_>>()?;

    let n_inv_src = frames as f64;
    let mut skipped = 0;
    for f in 0..bins {
        for l in 0..m {
            let pivot: Vec<Complex64> = (0..frames).map(|n| y[[l, f, n]]).collect();
            let row: Vec<Complex64> = (0..m).map(|c| w[[f, l, c]]).collect();
            let mut v = vec![ZERO; m];
            for (q, vq) in v.iter_mut().enumerate() {
                if q == l {
                    let mut a = 0.0;
                    for n in 0..frames {
                        a += u[q][[f, n]] * pivot[n].norm_sqr();
                    }
                    let a = a / n_inv_src;
                    if a > 0.0 && a.is_finite() {
                        *vq = Complex64::new(1.0 - 1.0 / a.sqrt(), 0.0);
                    } else {
                        skipped += 1;
                    }
                } else {
                    let mut num = ZERO;
                    let mut den = 0.0;
                    for n in 0..frames {
                        num += y[[q, f, n]] * pivot[n].conj() * u[q][[f, n]];
                        den += u[q][[f, n]] * pivot[n].norm_sqr();
                    }
                    if den > 0.0 && den.is_finite() {
                        *vq = num / den;
                    } else {
                        skipped += 1;
                    }
                }
            }
            for (q, &vq) in v.iter().enumerate() {
                if vq == ZERO {
                    continue;
                }
                for n in 0..frames {
                    y[[q, f, n]] -= vq * pivot[n];
                }
                for c in 0..m {
                    w[[f, q, c]] -= vq * row[c];
                }
            }
        }
    }
    Ok(skipped)
}

/// Runs `iterations` sweeps from the identity.
pub fn auxiva_iss(
    x: &MultichannelSpectrogram,
    iterations: usize,
    model: &SourceModelKind,
) -> Result<Array3<Complex64>> {
    let mut w = identity(x.data.len_of(Axis(0)), x.bins());
    for _ in 0..iterations {
        sweep(&mut w, x, model)?;
    }
    Ok(w)
}
