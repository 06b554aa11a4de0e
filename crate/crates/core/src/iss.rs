//! Joint dereverberation and separation by iterative source steering.
//!
//! The unified filter `P_f = [W_f U_f]` is improved by a sequence of optimal
//! rank-1 updates `P_f <- P_f - v p^H`, one per row of the square system
//!
//! ```text
//! [ y ]   [ W_f        U_f ] [ x    ]
//! [ z ] = [ [J_f -I]   0   ] [ x̄    ]
//! [ x̄ ]   [ 0          I   ]
//! ```
//!
//! The pivot row `p` is the `l`-th row of that matrix: a target row of `P_f`
//! for `l < K`, a background row `[J_f -I 0]` for `K <= l < M`, and the unit
//! vector `e_l` for the delayed-frame rows. Only the first `K` entries of
//! `v` are used, so `J_f` and the lower blocks are never touched by a sweep;
//! when `M > K` the background coupling is refreshed afterwards so that the
//! targets are uncorrelated with the background.
//!
//! With `L = 0` and `K = M` this is plain AuxIVA-ISS.

use log::warn;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{
    build_stacked, demix, init_demix, projection_back, DemixState, SourceEstimates,
    StackedObservation,
};
use crate::linalg::{log_abs_det, regularized_solve, CMatrix};
use crate::source_model::{frame_energy, weights, SourceModelKind, WeightMask};
use crate::stft::MultichannelSpectrogram;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IssConfig {
    pub sources: usize,
    pub iterations: usize,
    /// Plain AuxIVA-ISS iterations (no taps) run before the tapped phase.
    pub warmstart_iterations: usize,
    pub taps: usize,
    pub delay: usize,
    pub model: SourceModelKind,
    /// Relative diagonal loading of the background solve.
    pub epsilon: f64,
    pub ref_channel: usize,
    pub track_cost: bool,
}

impl IssConfig {
    pub fn new(sources: usize) -> Self {
        IssConfig {
            sources,
            iterations: 15,
            warmstart_iterations: 0,
            taps: 5,
            delay: 3,
            model: SourceModelKind::laplace(),
            epsilon: DEFAULT_EPSILON,
            ref_channel: 0,
            track_cost: false,
        }
    }
}

/// Spatial statistics of the observation, computed once per input.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePair {
    /// `F x M x M`, `mean_n x x^H`.
    pub r: Array3<Complex64>,
    /// `F x ML x M`, `mean_n x̄ x^H`.
    pub cbar: Array3<Complex64>,
}

pub fn covariances(xt: &StackedObservation) -> CovariancePair {
    let m = xt.channels;
    let dim = xt.dim();
    let bins = xt.bins();
    let inv_n = 1.0 / xt.frames() as f64;
    let mut full = Array3::<Complex64>::zeros((bins, dim, m));
    Zip::from(full.outer_iter_mut())
        .and(xt.data.axis_iter(Axis(1)))
        .par_for_each(|mut cf, xf| {
            for a in 0..dim {
                let xa = xf.row(a);
                for b in 0..m {
                    let xb = xf.row(b);
                    let acc: Complex64 = xa.iter().zip(xb.iter()).map(|(p, q)| p * q.conj()).sum();
                    cf[[a, b]] = acc * inv_n;
                }
            }
        });
    CovariancePair {
        r: full.slice(s![.., ..m, ..]).to_owned(),
        cbar: full.slice(s![.., m.., ..]).to_owned(),
    }
}

/// Background signals `z_fn = J_f x_fn[..K] - x_fn[K..M]`, `(M-K) x F x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundEstimates {
    pub z: Array3<Complex64>,
}

pub fn background(state: &DemixState, xt: &StackedObservation) -> BackgroundEstimates {
    let (k, m) = (state.sources, state.channels);
    let mut z = Array3::<Complex64>::zeros((m - k, xt.bins(), xt.frames()));
    Zip::from(z.axis_iter_mut(Axis(1)))
        .and(state.j.outer_iter())
        .and(xt.data.axis_iter(Axis(1)))
        .par_for_each(|zf, jf, xf| background_bin(zf, jf, xf, k));
    BackgroundEstimates { z }
}

fn background_bin(
    mut zf: ArrayViewMut2<'_, Complex64>,
    jf: ArrayView2<'_, Complex64>,
    xf: ArrayView2<'_, Complex64>,
    k: usize,
) {
    for (b, mut zb) in zf.outer_iter_mut().enumerate() {
        for (src, x) in jf.row(b).iter().zip(xf.outer_iter()) {
            zb.zip_mut_with(&x, |o, &v| *o += src * v);
        }
        zb.zip_mut_with(&xf.row(k + b), |o, &v| *o -= v);
    }
}

/// Per-source weights from the current estimates.
pub fn source_weights(y: &SourceEstimates, model: &SourceModelKind) -> Result<Vec<WeightMask>> {
    y.y.outer_iter().map(|yk| weights(model, yk)).collect()
}

fn check_dims(state: &DemixState, xt: &StackedObservation) -> Result<()> {
    if state.channels != xt.channels
        || state.p.len_of(Axis(2)) != xt.dim()
        || state.bins() != xt.bins()
    {
        return Err(Error::DimensionMismatch(format!(
            "state expects {} channels x {} stacked rows x {} bins, observation has {} x {} x {}",
            state.channels,
            state.p.len_of(Axis(2)),
            state.bins(),
            xt.channels,
            xt.dim(),
            xt.bins()
        )));
    }
    Ok(())
}

/// `-2 N sum_f log|det Ŵ_f|`, with `Ŵ_f` the square effective demixer.
fn log_det_term(state: &DemixState, frames: usize) -> Result<f64> {
    let mut acc = 0.0;
    for f in 0..state.bins() {
        let w = state.effective_demixer(f);
        let ld = log_abs_det(&w).ok_or_else(|| Error::DegenerateState {
            freq: f,
            det: w.clone().lu().determinant().norm(),
        })?;
        acc += ld;
    }
    Ok(-2.0 * frames as f64 * acc)
}

/// Negative log-likelihood whose majorization the sweep minimizes:
/// `sum_kn G(sum_f |y_kfn|^2) - 2 N sum_f log|det Ŵ_f|`.
///
/// For the unit model `G(r) = r`, so this is `sum_kfn |y_kfn|^2 - 2 N sum_f
/// log|det Ŵ_f|`.
pub fn eval_cost(
    state: &DemixState,
    xt: &StackedObservation,
    model: &SourceModelKind,
) -> Result<f64> {
    check_dims(state, xt)?;
    let y = demix(state, xt)?;
    let bins = xt.bins();
    let mut contrast = 0.0;
    for yk in y.y.outer_iter() {
        contrast += frame_energy(yk)
            .into_iter()
            .map(|r| model.contrast(r, bins))
            .sum::<f64>();
    }
    Ok(contrast + log_det_term(state, xt.frames())?)
}

/// Majorizing surrogate with frozen weights:
/// `sum_kfn u_kfn |y_kfn|^2 - 2 N sum_f log|det Ŵ_f|`.
pub fn surrogate_cost(
    state: &DemixState,
    xt: &StackedObservation,
    weights: &[WeightMask],
) -> Result<f64> {
    check_dims(state, xt)?;
    if weights.len() != state.sources {
        return Err(Error::DimensionMismatch(format!(
            "{} weight masks for {} sources",
            weights.len(),
            state.sources
        )));
    }
    let y = demix(state, xt)?;
    let mut quad = 0.0;
    for (yk, wk) in y.y.outer_iter().zip(weights) {
        quad += yk
            .iter()
            .zip(wk.u.iter())
            .map(|(v, u)| u * v.norm_sqr())
            .sum::<f64>();
    }
    Ok(quad + log_det_term(state, xt.frames())?)
}

/// Counters from one sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    /// `(q, f)` updates skipped because the pivot signal had no energy.
    pub skipped: usize,
}

/// The `l`-th row of the square system at frequency `f` (see module docs).
pub fn pivot_row(state: &DemixState, f: usize, l: usize) -> Array1<Complex64> {
    pivot_row_bin(
        state.p.index_axis(Axis(0), f),
        state.j.index_axis(Axis(0), f),
        l,
        state.sources,
        state.channels,
    )
}

fn pivot_row_bin(
    p: ArrayView2<'_, Complex64>,
    j: ArrayView2<'_, Complex64>,
    l: usize,
    k: usize,
    m: usize,
) -> Array1<Complex64> {
    if l < k {
        return p.row(l).to_owned();
    }
    let mut r = Array1::zeros(p.ncols());
    if l < m {
        r.slice_mut(s![..k]).assign(&j.row(l - k));
        r[l] = -ONE;
    } else {
        r[l] = ONE;
    }
    r
}

/// Pivot signal `p_l^H x̃` at one frequency.
fn pivot_signal(
    l: usize,
    k: usize,
    m: usize,
    y: ArrayView2<'_, Complex64>,
    z: &Array2<Complex64>,
    x: ArrayView2<'_, Complex64>,
) -> Array1<Complex64> {
    if l < k {
        y.row(l).to_owned()
    } else if l < m {
        z.row(l - k).to_owned()
    } else {
        x.row(l).to_owned()
    }
}

/// Closed-form minimizer of the frozen-weight surrogate over `v`, for the
/// pivot signal `piv`. Entries whose denominator vanishes are left at zero
/// and reported in the returned count.
fn steering_vector(
    l: usize,
    piv: ArrayView1<'_, Complex64>,
    y: ArrayView2<'_, Complex64>,
    u: &[ArrayView1<'_, f64>],
) -> (Vec<Complex64>, usize) {
    let n = piv.len() as f64;
    let mut skipped = 0;
    let v = (0..y.nrows())
        .map(|q| {
            let uq = u[q];
            if q == l {
                let mut a = 0.0;
                for (w, p) in uq.iter().zip(piv.iter()) {
                    a += w * p.norm_sqr();
                }
                let a = a / n;
                if a > 0.0 && a.is_finite() {
                    Complex64::new(1.0 - 1.0 / a.sqrt(), 0.0)
                } else {
                    skipped += 1;
                    ZERO
                }
            } else {
                let mut num = ZERO;
                let mut den = 0.0;
                for ((w, yq), p) in uq.iter().zip(y.row(q).iter()).zip(piv.iter()) {
                    num += yq * p.conj() * *w;
                    den += w * p.norm_sqr();
                }
                if den > 0.0 && den.is_finite() {
                    num / den
                } else {
                    skipped += 1;
                    ZERO
                }
            }
        })
        .collect();
    (v, skipped)
}

#[allow(clippy::too_many_arguments)]
fn sweep_bin(
    mut p: ArrayViewMut2<'_, Complex64>,
    j: ArrayView2<'_, Complex64>,
    x: ArrayView2<'_, Complex64>,
    mut y: ArrayViewMut2<'_, Complex64>,
    u: &[ArrayView1<'_, f64>],
    k: usize,
    m: usize,
) -> usize {
    let dim = x.nrows();
    let mut z = Array2::<Complex64>::zeros((m - k, x.ncols()));
    background_bin(z.view_mut(), j, x, k);

    let mut skipped = 0;
    for l in 0..dim {
        let piv = pivot_signal(l, k, m, y.view(), &z, x);
        let row = pivot_row_bin(p.view(), j, l, k, m);
        let (v, miss) = steering_vector(l, piv.view(), y.view(), u);
        skipped += miss;
        for (q, vq) in v.into_iter().enumerate() {
            if vq == ZERO {
                continue;
            }
            y.row_mut(q).zip_mut_with(&piv, |o, &s| *o -= vq * s);
            p.row_mut(q).zip_mut_with(&row, |o, &s| *o -= vq * s);
        }
    }
    skipped
}

/// One full sweep `l = 0..M(L+1)` of rank-1 updates at every frequency.
///
/// Weights are computed once from the estimates at the start of the sweep
/// and held fixed, so every rank-1 step minimizes the same majorizer and the
/// cost cannot increase.
pub fn iss_sweep(
    state: &DemixState,
    xt: &StackedObservation,
    model: &SourceModelKind,
) -> Result<(DemixState, SweepStats)> {
    check_dims(state, xt)?;
    let mut y = demix(state, xt)?;
    let w = source_weights(&y, model)?;
    let (k, m) = (state.sources, state.channels);
    let mut next = state.clone();

    let skipped = Zip::indexed(next.p.outer_iter_mut())
        .and(state.j.outer_iter())
        .and(xt.data.axis_iter(Axis(1)))
        .and(y.y.axis_iter_mut(Axis(1)))
        .par_map_collect(|f, pf, jf, xf, yf| {
            let u: Vec<ArrayView1<'_, f64>> = w.iter().map(|wk| wk.u.row(f)).collect();
            sweep_bin(pf, jf, xf, yf, &u, k, m)
        })
        .sum();

    Ok((next, SweepStats { skipped }))
}

/// Steering vectors `v_l` for a single pivot row under frozen weights,
/// `F x K`.
pub fn steering_vectors(
    state: &DemixState,
    xt: &StackedObservation,
    weights: &[WeightMask],
    l: usize,
) -> Result<Array2<Complex64>> {
    check_dims(state, xt)?;
    if l >= xt.dim() {
        return Err(Error::InvalidConfig(format!(
            "pivot index {l} out of range for {} stacked rows",
            xt.dim()
        )));
    }
    let y = demix(state, xt)?;
    let z = background(state, xt);
    let (k, m) = (state.sources, state.channels);
    let mut out = Array2::<Complex64>::zeros((state.bins(), k));
    for f in 0..state.bins() {
        let yf = y.y.index_axis(Axis(1), f);
        let zf = z.z.index_axis(Axis(1), f).to_owned();
        let xf = xt.at_bin(f);
        let piv = pivot_signal(l, k, m, yf, &zf, xf);
        let u: Vec<ArrayView1<'_, f64>> = weights.iter().map(|wk| wk.u.row(f)).collect();
        let (v, _) = steering_vector(l, piv.view(), yf, &u);
        out.row_mut(f).assign(&Array1::from(v));
    }
    Ok(out)
}

/// `P_f <- P_f - v_f p_l^H` at every frequency.
pub fn apply_rank1(state: &DemixState, l: usize, v: &Array2<Complex64>) -> DemixState {
    let mut next = state.clone();
    for f in 0..state.bins() {
        let row = pivot_row(state, f, l);
        for q in 0..state.sources {
            let vq = v[[f, q]];
            next.p
                .slice_mut(s![f, q, ..])
                .zip_mut_with(&row, |o, &r| *o -= vq * r);
        }
    }
    next
}

/// Solves `((W R + U C̄) E1) J^H = (W R + U C̄) E2` at every frequency so that
/// targets and background are uncorrelated. No-op when `K == M`.
pub fn background_update(
    state: &DemixState,
    cov: &CovariancePair,
    epsilon: f64,
) -> Result<DemixState> {
    let (k, m) = (state.sources, state.channels);
    if m == k {
        return Ok(state.clone());
    }
    let bins = state.bins();
    if cov.r.dim() != (bins, m, m) || cov.cbar.len_of(Axis(1)) != m * state.taps {
        return Err(Error::DimensionMismatch(
            "covariances do not match the demixing state".into(),
        ));
    }
    let solved: Vec<Result<CMatrix>> = (0..bins)
        .map(|f| {
            let p = state.p.index_axis(Axis(0), f);
            let r = cov.r.index_axis(Axis(0), f);
            let cb = cov.cbar.index_axis(Axis(0), f);
            // (W R + U C̄), K x M
            let mut g = CMatrix::zeros(k, m);
            for q in 0..k {
                for b in 0..m {
                    let mut acc = ZERO;
                    for a in 0..m {
                        acc += p[[q, a]] * r[[a, b]];
                    }
                    for a in 0..m * state.taps {
                        acc += p[[q, m + a]] * cb[[a, b]];
                    }
                    g[(q, b)] = acc;
                }
            }
            let lhs = g.columns(0, k).into_owned();
            let rhs = g.columns(k, m - k).into_owned();
            regularized_solve(&lhs, &rhs, epsilon).map_err(|e| Error::BackgroundSolve {
                freq: f,
                source: Box::new(e),
            })
        })
        .collect();

    let mut next = state.clone();
    for (f, jh) in solved.into_iter().enumerate() {
        let jh = jh?;
        for b in 0..m - k {
            for q in 0..k {
                next.j[[f, b, q]] = jh[(q, b)].conj();
            }
        }
    }
    Ok(next)
}

/// Per-frequency `||E[y z^H]||_F / sqrt(E||y||^2 E||z||^2)`, with `y`
/// recomputed exactly from the state. Empty when `K == M`.
pub fn orthogonality_residual(state: &DemixState, xt: &StackedObservation) -> Result<Vec<f64>> {
    if !state.is_overdetermined() {
        return Ok(Vec::new());
    }
    let y = demix(state, xt)?;
    let z = background(state, xt);
    let n = xt.frames() as f64;
    Ok((0..state.bins())
        .map(|f| {
            let yf = y.y.index_axis(Axis(1), f);
            let zf = z.z.index_axis(Axis(1), f);
            let mut cross = 0.0;
            for yq in yf.outer_iter() {
                for zb in zf.outer_iter() {
                    let c: Complex64 = yq.iter().zip(zb.iter()).map(|(a, b)| a * b.conj()).sum();
                    cross += (c / n).norm_sqr();
                }
            }
            let ey: f64 = yf.iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
            let ez: f64 = zf.iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
            let scale = (ey * ez).sqrt();
            if scale > 0.0 {
                cross.sqrt() / scale
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct Separation {
    /// Projection-back aligned source estimates.
    pub estimates: SourceEstimates,
    pub state: DemixState,
    /// Cost before the first iteration and after each one, when tracked.
    pub cost_trace: Vec<f64>,
    pub skipped: usize,
}

struct Phase<'a> {
    xt: StackedObservation,
    cov: Option<CovariancePair>,
    cfg: &'a IssConfig,
}

impl<'a> Phase<'a> {
    fn new(x: &MultichannelSpectrogram, taps: usize, cfg: &'a IssConfig) -> Result<Phase<'a>> {
        let xt = build_stacked(x, taps, cfg.delay)?;
        let cov = (x.channels() > cfg.sources).then(|| covariances(&xt));
        Ok(Phase { xt, cov, cfg })
    }

    fn run(
        &self,
        mut state: DemixState,
        iterations: usize,
        offset: usize,
        trace: &mut Vec<f64>,
        skipped: &mut usize,
    ) -> Result<DemixState> {
        for it in 0..iterations {
            let (next, stats) = iss_sweep(&state, &self.xt, &self.cfg.model)?;
            state = next;
            *skipped += stats.skipped;
            if let Some(cov) = &self.cov {
                state = background_update(&state, cov, self.cfg.epsilon)?;
            }
            if !state.is_finite() {
                return Err(Error::Diverged(offset + it + 1));
            }
            if self.cfg.track_cost {
                trace.push(eval_cost(&state, &self.xt, &self.cfg.model)?);
            }
        }
        Ok(state)
    }
}

/// Runs the full separation: an optional tap-free warm start, then
/// `cfg.iterations` of `[sweep; background update]`, then projection back.
pub fn separate(x: &MultichannelSpectrogram, cfg: &IssConfig) -> Result<Separation> {
    let m = x.channels();
    if cfg.sources == 0 || cfg.sources > m {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= sources <= channels, got K={}, M={m}",
            cfg.sources
        )));
    }
    if cfg.ref_channel >= m {
        return Err(Error::InvalidConfig(format!(
            "reference channel {} out of range for {m} channels",
            cfg.ref_channel
        )));
    }
    if x.frames() <= m * (cfg.taps + 1) {
        warn!(
            "only {} frames for {} stacked rows; covariance estimates are rank deficient",
            x.frames(),
            m * (cfg.taps + 1)
        );
    }

    let mut trace = Vec::new();
    let mut skipped = 0;
    let warm = cfg.warmstart_iterations > 0 && cfg.taps > 0;

    let mut state;
    let main = Phase::new(x, cfg.taps, cfg)?;
    if warm {
        let first = Phase::new(x, 0, cfg)?;
        state = init_demix(m, cfg.sources, 0, cfg.delay, x.bins())?;
        if cfg.track_cost {
            trace.push(eval_cost(&state, &first.xt, &cfg.model)?);
        }
        state = first.run(
            state,
            cfg.warmstart_iterations,
            0,
            &mut trace,
            &mut skipped,
        )?;
        state = state.with_taps(cfg.taps, cfg.delay);
    } else {
        state = init_demix(m, cfg.sources, cfg.taps, cfg.delay, x.bins())?;
        if cfg.track_cost {
            trace.push(eval_cost(&state, &main.xt, &cfg.model)?);
        }
    }
    let offset = if warm { cfg.warmstart_iterations } else { 0 };
    state = main.run(state, cfg.iterations, offset, &mut trace, &mut skipped)?;

    if skipped > 0 {
        warn!("{skipped} steering updates skipped on silent pivots");
    }
    let y = demix(&state, &main.xt)?;
    let estimates = projection_back(&y, x, cfg.ref_channel)?;
    Ok(Separation {
        estimates,
        state,
        cost_trace: trace,
        skipped,
    })
}
