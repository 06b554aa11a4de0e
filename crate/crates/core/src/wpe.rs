//! Blind dereverberation by weighted prediction error.
//!
//! Each frequency is dereverberated by subtracting a multichannel linear
//! prediction of the current frame from delayed frames. The prediction
//! filter minimizes the prediction error weighted by the inverse mean
//! channel power of the current estimate; weights and filters are updated
//! alternately.

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::build_stacked;
use crate::linalg::{regularized_solve, CMatrix};
use crate::source_model::DEFAULT_FLOOR;
use crate::stft::MultichannelSpectrogram;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WpeConfig {
    pub taps: usize,
    pub delay: usize,
    pub iterations: usize,
    pub epsilon: f64,
    pub floor: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        WpeConfig {
            taps: 5,
            delay: 3,
            iterations: 1,
            epsilon: DEFAULT_WPE_EPSILON,
            floor: DEFAULT_FLOOR,
        }
    }
}

/// Small loading so that rank-deficient recordings still solve. The
/// objective decrease per iteration is only exact with `epsilon = 0`.
pub const DEFAULT_WPE_EPSILON: f64 = 1e-8;

/// Prediction matrices `Z_f`, `F x M x ML`.
#[derive(Debug, Clone, PartialEq)]
pub struct WpeFilter {
    pub z: Array3<Complex64>,
    pub taps: usize,
    pub delay: usize,
}

#[derive(Debug, Clone)]
pub struct WpeOutput {
    pub dereverberated: MultichannelSpectrogram,
    pub filter: WpeFilter,
    /// Objective at the input and after each iteration.
    pub objective_trace: Vec<f64>,
}

/// Concave contrast of the mean channel power `s`: `M log s`, continued
/// linearly below the floor. Its derivative w.r.t. `||d||^2` is the weight.
fn contrast(s: f64, channels: usize, floor: f64) -> f64 {
    let m = channels as f64;
    if s >= floor {
        m * s.ln()
    } else {
        m * (floor.ln() + s / floor - 1.0)
    }
}

/// `sum_fn M log max(floor, ||d_fn||^2 / M)` (with the linear continuation),
/// the quantity the alternating updates decrease.
pub fn objective(d: &MultichannelSpectrogram, floor: f64) -> f64 {
    let m = d.channels();
    let mut acc = 0.0;
    for f in 0..d.bins() {
        for n in 0..d.frames() {
            let p: f64 = (0..m).map(|c| d.data[[c, f, n]].norm_sqr()).sum::<f64>() / m as f64;
            acc += contrast(p, m, floor);
        }
    }
    acc
}

/// Weights `1 / max(floor, ||d_fn||^2 / M)` at one frequency.
pub fn frame_weights(d: ArrayView2<'_, Complex64>, floor: f64) -> Vec<f64> {
    let m = d.nrows() as f64;
    (0..d.ncols())
        .map(|n| {
            let p: f64 = d.column(n).iter().map(|v| v.norm_sqr()).sum::<f64>() / m;
            1.0 / p.max(floor)
        })
        .collect()
}

/// Weighted normal equations at one frequency: `(sum u x̄ x̄^H, sum u x̄ x^H)`.
pub fn weighted_statistics(
    x: ArrayView2<'_, Complex64>,
    xbar: ArrayView2<'_, Complex64>,
    u: &[f64],
) -> (CMatrix, CMatrix) {
    let (m, d) = (x.nrows(), xbar.nrows());
    let mut g = CMatrix::zeros(d, d);
    let mut c = CMatrix::zeros(d, m);
    for a in 0..d {
        let xa = xbar.row(a);
        for b in a..d {
            let xb = xbar.row(b);
            let mut acc = ZERO;
            for n in 0..u.len() {
                acc += xa[n] * xb[n].conj() * u[n];
            }
            g[(a, b)] = acc;
            g[(b, a)] = acc.conj();
        }
        for b in 0..m {
            let xb = x.row(b);
            let mut acc = ZERO;
            for n in 0..u.len() {
                acc += xa[n] * xb[n].conj() * u[n];
            }
            c[(a, b)] = acc;
        }
    }
    (g, c)
}

pub fn wpe_dereverb(x: &MultichannelSpectrogram, cfg: &WpeConfig) -> Result<WpeOutput> {
    if cfg.taps == 0 || cfg.delay == 0 || cfg.iterations == 0 {
        return Err(Error::InvalidConfig(format!(
            "WPE needs taps, delay and iterations >= 1, got {}/{}/{}",
            cfg.taps, cfg.delay, cfg.iterations
        )));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation"));
    }
    let m = x.channels();
    let bins = x.bins();
    let stacked = build_stacked(x, cfg.taps, cfg.delay)?;
    let xbar = stacked.data.slice(s![m.., .., ..]);
    let dim = m * cfg.taps;

    let mut out = x.clone();
    let mut z = Array3::<Complex64>::zeros((bins, m, dim));
    let mut trace = vec![objective(x, cfg.floor)];

    for _ in 0..cfg.iterations {
        let filters: Vec<Result<Array2<Complex64>>> = (0..bins)
            .into_par_iter()
            .map(|f| {
                let xf = x.data.index_axis(Axis(1), f);
                let bf = xbar.index_axis(Axis(1), f);
                if bf.iter().all(|v| *v == ZERO) {
                    return Ok(Array2::zeros((m, dim)));
                }
                let u = frame_weights(out.data.index_axis(Axis(1), f), cfg.floor);
                let (g, c) = weighted_statistics(xf, bf, &u);
                let zh = regularized_solve(&g, &c, cfg.epsilon)
                    .map_err(|e| match e {
                        Error::Singular(msg) => {
                            Error::Singular(format!("delayed covariance at frequency {f}: {msg}"))
                        }
                        other => other,
                    })?;
                Ok(Array2::from_shape_fn((m, dim), |(i, j)| zh[(j, i)].conj()))
            })
            .collect();
        for (f, zf) in filters.into_iter().enumerate() {
            z.index_axis_mut(Axis(0), f).assign(&zf?);
        }

        Zip::from(out.data.axis_iter_mut(Axis(1)))
            .and(x.data.axis_iter(Axis(1)))
            .and(xbar.axis_iter(Axis(1)))
            .and(z.outer_iter())
            .par_for_each(|mut df, xf, bf, zf| {
                df.assign(&xf);
                for (i, mut row) in df.outer_iter_mut().enumerate() {
                    for (j, b) in bf.outer_iter().enumerate() {
                        let w = zf[[i, j]];
                        if w != ZERO {
                            row.zip_mut_with(&b, |o, &v| *o -= w * v);
                        }
                    }
                }
            });
        trace.push(objective(&out, cfg.floor));
    }

    Ok(WpeOutput {
        dereverberated: out,
        filter: WpeFilter {
            z,
            taps: cfg.taps,
            delay: cfg.delay,
        },
        objective_trace: trace,
    })
}
