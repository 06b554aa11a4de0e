//! Delayed-frame stacking, the demixing state, and scale alignment.

use ndarray::{s, Array3, ArrayView2, Axis, Zip};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::stft::MultichannelSpectrogram;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Current frame stacked on top of `taps` delayed frames.
///
/// Rows `0..M` hold `x_fn`; block `l` in `1..=taps` holds `x` at frame
/// `n - delay - (l - 1)`, zero where that index is negative.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedObservation {
    /// `M(L+1) x F x N`.
    pub data: Array3<Complex64>,
    pub channels: usize,
    pub taps: usize,
    pub delay: usize,
}

impl StackedObservation {
    pub fn dim(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn bins(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn frames(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    /// The current-frame block, `M x F x N`.
    pub fn current(&self) -> ndarray::ArrayView3<'_, Complex64> {
        self.data.slice(s![..self.channels, .., ..])
    }

    /// `dim x N` slice at one frequency.
    pub fn at_bin(&self, f: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(1), f)
    }
}

pub fn build_stacked(
    x: &MultichannelSpectrogram,
    taps: usize,
    delay: usize,
) -> Result<StackedObservation> {
    if delay == 0 {
        return Err(Error::InvalidConfig(
            "delay must be at least one frame".into(),
        ));
    }
    let (m, f, n) = x.data.dim();
    let mut data = Array3::<Complex64>::zeros((m * (taps + 1), f, n));
    data.slice_mut(s![..m, .., ..]).assign(&x.data);
    for l in 1..=taps {
        let shift = delay + l - 1;
        if shift >= n {
            continue;
        }
        data.slice_mut(s![l * m..(l + 1) * m, .., shift..])
            .assign(&x.data.slice(s![.., .., ..n - shift]));
    }
    Ok(StackedObservation {
        data,
        channels: m,
        taps,
        delay,
    })
}

/// Per-frequency unified filter `P_f = [W_f U_f]` plus the background
/// coupling `J_f` used when there are more channels than sources.
///
/// Rows of `p` hold the conjugated filters `p_k^H`, so `y = P x̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemixState {
    /// `F x K x M(L+1)`.
    pub p: Array3<Complex64>,
    /// `F x (M-K) x K`; empty along axis 1 when `K == M`.
    pub j: Array3<Complex64>,
    pub sources: usize,
    pub channels: usize,
    pub taps: usize,
    pub delay: usize,
}

impl DemixState {
    pub fn bins(&self) -> usize {
        self.p.len_of(Axis(0))
    }

    pub fn is_overdetermined(&self) -> bool {
        self.channels > self.sources
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.j.iter()).all(|c| c.is_finite())
    }

    /// Square `M x M` demixer: `W_f` stacked over `[J_f  -I]`.
    pub fn effective_demixer(&self, f: usize) -> nalgebra::DMatrix<Complex64> {
        let (k, m) = (self.sources, self.channels);
        nalgebra::DMatrix::from_fn(m, m, |r, c| {
            if r < k {
                self.p[[f, r, c]]
            } else if c < k {
                self.j[[f, r - k, c]]
            } else if c == r {
                -ONE
            } else {
                ZERO
            }
        })
    }

    /// Re-embeds the state with a different number of taps, keeping `W`
    /// and `J` and copying the overlapping part of `U`.
    pub fn with_taps(&self, taps: usize, delay: usize) -> DemixState {
        let m = self.channels;
        let f = self.bins();
        let mut p = Array3::<Complex64>::zeros((f, self.sources, m * (taps + 1)));
        let keep = m * (taps.min(self.taps) + 1);
        p.slice_mut(s![.., .., ..keep])
            .assign(&self.p.slice(s![.., .., ..keep]));
        DemixState {
            p,
            j: self.j.clone(),
            sources: self.sources,
            channels: m,
            taps,
            delay,
        }
    }
}

pub fn init_demix(
    channels: usize,
    sources: usize,
    taps: usize,
    delay: usize,
    bins: usize,
) -> Result<DemixState> {
    if sources == 0 || sources > channels {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= sources <= channels, got K={sources}, M={channels}"
        )));
    }
    let mut p = Array3::<Complex64>::zeros((bins, sources, channels * (taps + 1)));
    for f in 0..bins {
        for k in 0..sources {
            p[[f, k, k]] = ONE;
        }
    }
    Ok(DemixState {
        p,
        j: Array3::zeros((bins, channels - sources, sources)),
        sources,
        channels,
        taps,
        delay,
    })
}

/// Source estimates `y_kfn = p_kf^H x̃_fn`, `K x F x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEstimates {
    pub y: Array3<Complex64>,
}

impl SourceEstimates {
    pub fn sources(&self) -> usize {
        self.y.len_of(Axis(0))
    }

    /// Wraps the estimates as a spectrogram so they can be synthesized.
    pub fn to_spectrogram(&self, like: &MultichannelSpectrogram) -> MultichannelSpectrogram {
        MultichannelSpectrogram {
            data: self.y.clone(),
            config: like.config,
            num_samples: like.num_samples,
            sample_rate: like.sample_rate,
        }
    }
}

pub fn demix(state: &DemixState, xt: &StackedObservation) -> Result<SourceEstimates> {
    let (bins, k, dim) = state.p.dim();
    if dim != xt.dim() || bins != xt.bins() {
        return Err(Error::DimensionMismatch(format!(
            "state is {bins} bins x {dim} inputs, observation is {} x {}",
            xt.bins(),
            xt.dim()
        )));
    }
    let n = xt.frames();
    let mut y = Array3::<Complex64>::zeros((k, bins, n));
    Zip::from(y.axis_iter_mut(Axis(1)))
        .and(state.p.outer_iter())
        .and(xt.data.axis_iter(Axis(1)))
        .par_for_each(|mut yf, pf, xf| {
            for (mut yk, pk) in yf.outer_iter_mut().zip(pf.outer_iter()) {
                for (c, xc) in xf.outer_iter().enumerate() {
                    let w = pk[c];
                    for (out, &x) in yk.iter_mut().zip(xc.iter()) {
                        *out += w * x;
                    }
                }
            }
        });
    Ok(SourceEstimates { y })
}

/// Least-squares per-(source, frequency) rescaling onto a reference channel.
pub fn projection_back(
    y: &SourceEstimates,
    x: &MultichannelSpectrogram,
    reference: usize,
) -> Result<SourceEstimates> {
    if reference >= x.channels() {
        return Err(Error::InvalidConfig(format!(
            "reference channel {reference} out of range for {} channels",
            x.channels()
        )));
    }
    if y.y.len_of(Axis(1)) != x.bins() || y.y.len_of(Axis(2)) != x.frames() {
        return Err(Error::DimensionMismatch(
            "estimates and observation differ in shape".into(),
        ));
    }
    let xr = x.data.index_axis(Axis(0), reference);
    let mut out = y.y.clone();
    for mut yk in out.outer_iter_mut() {
        for (mut row, xrow) in yk.outer_iter_mut().zip(xr.outer_iter()) {
            let scale = projection_scale(row.view(), xrow);
            if let Some(a) = scale {
                row.mapv_inplace(|v| v * a);
            }
        }
    }
    Ok(SourceEstimates { y: out })
}

/// `sum_n x_n y_n^* / sum_n |y_n|^2`, or `None` when `y` has no energy.
pub fn projection_scale(
    y: ndarray::ArrayView1<'_, Complex64>,
    x: ndarray::ArrayView1<'_, Complex64>,
) -> Option<Complex64> {
    let mut num = ZERO;
    let mut den = 0.0;
    for (&yn, &xn) in y.iter().zip(x.iter()) {
        num += xn * yn.conj();
        den += yn.norm_sqr();
    }
    (den > 0.0).then(|| num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_spectrogram;

    #[test]
    fn stacking_layout() {
        let x = random_spectrogram(2, 3, 8, 1);
        let xt = build_stacked(&x, 1, 1).unwrap();
        assert_eq!(xt.dim(), 4);
        for f in 0..3 {
            for m in 0..2 {
                assert_eq!(xt.data[[m, f, 5]], x.data[[m, f, 5]]);
                assert_eq!(xt.data[[2 + m, f, 5]], x.data[[m, f, 4]]);
                assert_eq!(xt.data[[2 + m, f, 0]], ZERO);
            }
        }
    }

    #[test]
    fn stacking_with_default_wpe_taps() {
        let x = random_spectrogram(3, 2, 20, 2);
        let xt = build_stacked(&x, 5, 3).unwrap();
        assert_eq!(xt.dim(), 18);
        for l in 1..=5 {
            for n in 0..20usize {
                let src = n as isize - 3 - (l as isize - 1);
                for m in 0..3 {
                    let want = if src < 0 {
                        ZERO
                    } else {
                        x.data[[m, 1, src as usize]]
                    };
                    assert_eq!(xt.data[[l * 3 + m, 1, n]], want);
                }
            }
        }
    }

    #[test]
    fn zero_taps_is_identity_and_zero_delay_rejected() {
        let x = random_spectrogram(2, 4, 6, 3);
        assert_eq!(build_stacked(&x, 0, 1).unwrap().data, x.data);
        assert!(build_stacked(&x, 2, 0).is_err());
    }

    #[test]
    fn init_shapes() {
        let s = init_demix(2, 2, 0, 1, 3).unwrap();
        assert_eq!(s.p.dim(), (3, 2, 2));
        assert_eq!(s.p[[1, 0, 0]], ONE);
        assert_eq!(s.p[[1, 0, 1]], ZERO);
        let s = init_demix(4, 2, 2, 1, 5).unwrap();
        assert_eq!(s.p.dim(), (5, 2, 12));
        assert_eq!(s.j.dim(), (5, 2, 2));
        assert!(s.j.iter().all(|c| *c == ZERO));
        assert!(init_demix(2, 3, 0, 1, 1).is_err());
    }

    #[test]
    fn identity_demix_returns_leading_channels() {
        let x = random_spectrogram(4, 5, 30, 4);
        let xt = build_stacked(&x, 2, 1).unwrap();
        let s = init_demix(4, 2, 2, 1, 5).unwrap();
        let y = demix(&s, &xt).unwrap();
        assert_eq!(y.y, x.data.slice(s![..2, .., ..]));
    }

    #[test]
    fn demix_matches_naive_loop() {
        let x = random_spectrogram(2, 3, 17, 5);
        let xt = build_stacked(&x, 1, 2).unwrap();
        let mut s = init_demix(2, 2, 1, 2, 3).unwrap();
        let r = random_spectrogram(3, 2, 4, 6);
        for f in 0..3 {
            for k in 0..2 {
                for c in 0..4 {
                    s.p[[f, k, c]] = r.data[[f, k, c]];
                }
            }
        }
        let y = demix(&s, &xt).unwrap();
        for k in 0..2 {
            for f in 0..3 {
                for n in 0..17 {
                    let mut acc = ZERO;
                    for c in 0..4 {
                        acc += s.p[[f, k, c]] * xt.data[[c, f, n]];
                    }
                    assert!((acc - y.y[[k, f, n]]).norm() < 1e-12);
                }
            }
        }
        let mut doubled = s.clone();
        doubled.p.mapv_inplace(|v| v * 2.0);
        let y2 = demix(&doubled, &xt).unwrap();
        for (a, b) in y2.y.iter().zip(y.y.iter()) {
            assert!((a - b * 2.0).norm() < 1e-12);
        }
        let wrong = init_demix(2, 2, 0, 1, 3).unwrap();
        assert!(demix(&wrong, &xt).is_err());
    }

    #[test]
    fn projection_back_recovers_scale() {
        let x = random_spectrogram(1, 4, 50, 7);
        let y = SourceEstimates {
            y: x.data.mapv(|v| v * 0.5),
        };
        let z = projection_back(&y, &x, 0).unwrap();
        for (a, b) in z.y.iter().zip(x.data.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
        let same = projection_back(&SourceEstimates { y: x.data.clone() }, &x, 0).unwrap();
        for (a, b) in same.y.iter().zip(x.data.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(projection_back(&y, &x, 1).is_err());
    }

    #[test]
    fn projection_back_leaves_silent_rows() {
        let x = random_spectrogram(2, 3, 10, 8);
        let mut y = random_spectrogram(2, 3, 10, 9).data;
        y.slice_mut(s![1, 2, ..]).fill(ZERO);
        let z = projection_back(&SourceEstimates { y: y.clone() }, &x, 1).unwrap();
        assert!(z.y.slice(s![1, 2, ..]).iter().all(|v| *v == ZERO));
    }

    #[test]
    fn projection_back_scale_matches_closed_form() {
        let x = random_spectrogram(3, 4, 40, 10);
        let y = random_spectrogram(2, 4, 40, 11);
        let z = projection_back(&SourceEstimates { y: y.data.clone() }, &x, 2).unwrap();
        for k in 0..2 {
            for f in 0..4 {
                let mut num = ZERO;
                let mut den = 0.0;
                for n in 0..40 {
                    num += x.data[[2, f, n]] * y.data[[k, f, n]].conj();
                    den += y.data[[k, f, n]].norm_sqr();
                }
                let a = num / den;
                for n in 0..40 {
                    assert!((z.y[[k, f, n]] - y.data[[k, f, n]] * a).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn projection_back_minimizes_residual_on_grid() {
        let x = random_spectrogram(1, 1, 25, 12);
        let y = random_spectrogram(1, 1, 25, 13);
        let a = projection_scale(y.data.slice(s![0, 0, ..]), x.data.slice(s![0, 0, ..])).unwrap();
        let resid = |s: Complex64| -> f64 {
            (0..25)
                .map(|n| (x.data[[0, 0, n]] - s * y.data[[0, 0, n]]).norm_sqr())
                .sum()
        };
        // Grid refinement around the origin converges on the same minimizer.
        let mut center = ZERO;
        let mut step = 1.0;
        for _ in 0..40 {
            let mut best = (resid(center), center);
            for i in -4..=4 {
                for j in -4..=4 {
                    let c = center + Complex64::new(i as f64, j as f64) * step;
                    let r = resid(c);
                    if r < best.0 {
                        best = (r, c);
                    }
                }
            }
            center = best.1;
            step *= 0.5;
        }
        assert!((center - a).norm() < 1e-8);
        assert!(resid(a) <= resid(center) + 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn projection_back_is_idempotent(seed in 0u64..500) {
            let x = random_spectrogram(2, 3, 12, seed);
            let y = random_spectrogram(2, 3, 12, seed + 1000);
            let once = projection_back(&SourceEstimates { y: y.data }, &x, 0).unwrap();
            let twice = projection_back(&once, &x, 0).unwrap();
            for (a, b) in once.y.iter().zip(twice.y.iter()) {
                proptest::prop_assert!((a - b).norm() <= 1e-10 * (1.0 + a.norm()));
            }
        }

        #[test]
        fn stacking_is_linear(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let x1 = random_spectrogram(2, 2, 9, seed);
            let x2 = random_spectrogram(2, 2, 9, seed + 77);
            let mut mix = x1.clone();
            mix.data = &x1.data * Complex64::from(a) + &x2.data * Complex64::from(b);
            let s1 = build_stacked(&x1, 2, 2).unwrap();
            let s2 = build_stacked(&x2, 2, 2).unwrap();
            let sm = build_stacked(&mix, 2, 2).unwrap();
            for ((p, q), r) in s1.data.iter().zip(s2.data.iter()).zip(sm.data.iter()) {
                proptest::prop_assert!((p * a + q * b - r).norm() < 1e-12);
            }
        }
    }
}
