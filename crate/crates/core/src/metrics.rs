//! Energy-decomposition separation metrics (SDR, SIR).
//!
//! An estimate `e` is projected onto the span of all delayed copies
//! (`DISTORTION_TAPS` lags) of the references. The part explained by its own
//! reference is the target, the rest of the projection is interference, and
//! what lies outside the span is artifact. Energies are evaluated as
//! quadratic forms of the least-squares coefficients, so no projected signal
//! is ever synthesized.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DISTORTION_TAPS: usize = 512;
pub const DB_CAP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Indexed by estimate.
    pub sdr_db: Vec<f64>,
    pub sir_db: Vec<f64>,
    /// `permutation[i]` is the reference matched to estimate `i`.
    pub permutation: Vec<usize>,
    pub cost_trace: Vec<f64>,
}

/// Energies of the three components of one estimate w.r.t. one reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub target: f64,
    pub interference: f64,
    pub artifact: f64,
}

impl Decomposition {
    pub fn sir_db(&self) -> f64 {
        ratio_db(self.target, self.interference)
    }

    pub fn sdr_db(&self) -> f64 {
        ratio_db(self.target, self.interference + self.artifact)
    }
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return if num > 0.0 { DB_CAP } else { -DB_CAP };
    }
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

/// References with their factored Gram matrices, reusable across estimates.
pub struct ReferenceSet {
    len: usize,
    taps: usize,
    nfft: usize,
    spectra: Vec<Vec<Complex64>>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    all: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    own: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl ReferenceSet {
    pub fn new(refs: &[Vec<f64>], taps: usize) -> Result<Self> {
        let k = refs.len();
        if k == 0 || taps == 0 {
            return Err(Error::EmptyInput("references"));
        }
        let len = refs[0].len();
        if len == 0 {
            return Err(Error::EmptyInput("reference signal"));
        }
        if refs.iter().any(|r| r.len() != len) {
            return Err(Error::DimensionMismatch(
                "references differ in length".into(),
            ));
        }
        let nfft = (len + taps).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(nfft);
        let ifft = planner.plan_fft_inverse(nfft);
        let spectra: Vec<Vec<Complex64>> = refs
            .iter()
            .map(|r| spectrum(fft.as_ref(), r, nfft))
            .collect();

        let mut set = ReferenceSet {
            len,
            taps,
            nfft,
            spectra,
            fft,
            ifft,
            all: DMatrix::<f64>::identity(1, 1).cholesky().unwrap(),
            own: Vec::new(),
        };

        // G[(i,a),(j,b)] = sum_t s_i(t - a) s_j(t - b) = c_ij(a - b)
        let d = k * taps;
        let mut gram = DMatrix::<f64>::zeros(d, d);
        for i in 0..k {
            for j in i..k {
                let c = set.correlation(&set.spectra[i], &set.spectra[j]);
                for a in 0..taps {
                    for b in 0..taps {
                        let lag = a as isize - b as isize;
                        let v = c[lag.rem_euclid(nfft as isize) as usize];
                        gram[(i * taps + a, j * taps + b)] = v;
                        gram[(j * taps + b, i * taps + a)] = v;
                    }
                }
            }
        }
        set.own = (0..k)
            .map(|i| {
                factor(
                    gram.view((i * taps, i * taps), (taps, taps))
                        .into_owned(),
                )
            })
            .collect::<Result<_>>()?;
        set.all = factor(gram)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sources(&self) -> usize {
        self.spectra.len()
    }

    // Circular cross-correlation c(τ) = sum_t a(t) b(t + τ); exact for
    // |τ| < taps because of the zero padding.
    fn correlation(&self, a: &[Complex64], b: &[Complex64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x.conj() * y).collect();
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.nfft as f64;
        buf.into_iter().map(|v| v.re * scale).collect()
    }

    /// Splits `est` into target/interference/artifact w.r.t. reference `target`.
    pub fn decompose(&self, est: &[f64], target: usize) -> Result<Decomposition> {
        Ok(self.decompose_all(est)?[target])
    }

    /// Decompositions of `est` against every reference.
    pub fn decompose_all(&self, est: &[f64]) -> Result<Vec<Decomposition>> {
        if est.len() != self.len {
            return Err(Error::DimensionMismatch(format!(
                "estimate has {} samples, references have {}",
                est.len(),
                self.len
            )));
        }
        if est.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("estimate"));
        }
        let k = self.sources();
        let taps = self.taps;
        let e_spec = spectrum(self.fft.as_ref(), est, self.nfft);
        // D[(j,a)] = sum_t s_j(t - a) e(t) = c_{s_j,e}(a)
        let mut rhs = DVector::<f64>::zeros(k * taps);
        for j in 0..k {
            let c = self.correlation(&self.spectra[j], &e_spec);
            for a in 0..taps {
                rhs[j * taps + a] = c[a];
            }
        }
        let energy: f64 = est.iter().map(|v| v * v).sum();
        let coeff = self.all.solve(&rhs);
        let in_span = coeff.dot(&rhs).clamp(0.0, energy);

        Ok((0..k)
            .map(|j| {
                let dj = rhs.rows(j * taps, taps).into_owned();
                let cj = self.own[j].solve(&dj);
                let own = cj.dot(&dj).clamp(0.0, in_span);
                Decomposition {
                    target: own,
                    interference: in_span - own,
                    artifact: energy - in_span,
                }
            })
            .collect())
    }
}

fn spectrum(fft: &dyn Fft<f64>, x: &[f64], nfft: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for (b, &v) in buf.iter_mut().zip(x) {
        b.re = v;
    }
    fft.process(&mut buf);
    buf
}

// Cholesky with a small relative ridge when the Gram matrix is rank deficient
// (e.g. pure tones).
fn factor(g: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = g.clone().cholesky() {
        return Ok(c);
    }
    let n = g.nrows();
    let scale = g.trace() / n as f64;
    let mut ridge = 1e-12 * scale.max(f64::MIN_POSITIVE);
    for _ in 0..8 {
        let mut h = g.clone();
        for i in 0..n {
            h[(i, i)] += ridge;
        }
        if let Some(c) = h.cholesky() {
            return Ok(c);
        }
        ridge *= 100.0;
    }
    Err(Error::Singular("reference Gram matrix".into()))
}

/// Lexicographically first permutation maximizing the mean of
/// `score[i][perm[i]]`.
pub fn best_permutation(score: &[Vec<f64>]) -> Vec<usize> {
    let k = score.len();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_score = f64::NEG_INFINITY;
    loop {
        let s: f64 = perm.iter().enumerate().map(|(i, &j)| score[i][j]).sum();
        if s > best_score {
            best_score = s;
            best.clone_from(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn check_sets(est: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<()> {
    if est.is_empty() || refs.is_empty() {
        return Err(Error::EmptyInput("evaluation signals"));
    }
    if est.len() != refs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates for {} references",
            est.len(),
            refs.len()
        )));
    }
    if est.len() > 8 {
        return Err(Error::InvalidConfig(
            "exhaustive permutation search limited to 8 sources".into(),
        ));
    }
    Ok(())
}

/// Best estimate-to-reference assignment by mean SIR.
pub fn permutation_align(est: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<Vec<usize>> {
    check_sets(est, refs)?;
    let set = ReferenceSet::new(refs, DISTORTION_TAPS.min(refs[0].len()))?;
    let decs = est
        .iter()
        .map(|e| set.decompose_all(e))
        .collect::<Result<Vec<_>>>()?;
    Ok(align(&decs))
}

fn align(decs: &[Vec<Decomposition>]) -> Vec<usize> {
    let score: Vec<Vec<f64>> = decs
        .iter()
        .map(|d| d.iter().map(Decomposition::sir_db).collect())
        .collect();
    best_permutation(&score)
}

pub fn evaluate(est: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<EvalReport> {
    check_sets(est, refs)?;
    let set = ReferenceSet::new(refs, DISTORTION_TAPS.min(refs[0].len()))?;
    evaluate_with(&set, est)
}

/// Evaluation against an already factored reference set.
pub fn evaluate_with(set: &ReferenceSet, est: &[Vec<f64>]) -> Result<EvalReport> {
    if est.len() != set.sources() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates for {} references",
            est.len(),
            set.sources()
        )));
    }
    let decs = est
        .iter()
        .map(|e| set.decompose_all(e))
        .collect::<Result<Vec<_>>>()?;
    let permutation = align(&decs);
    let (sdr_db, sir_db) = permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| (decs[i][j].sdr_db(), decs[i][j].sir_db()))
        .unzip();
    Ok(EvalReport {
        sdr_db,
        sir_db,
        permutation,
        cost_trace: Vec::new(),
    })
}
