//! Acceptance checks. Runs as a plain binary so that every criterion prints
//! its own PASS/FAIL line; exits non-zero if any of them fails.

use std::error::Error as StdError;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use tiss_core::auxiva;
use tiss_core::frontend::{build_stacked, demix, init_demix};
use tiss_core::iss::{
    apply_rank1, background_update, covariances, iss_sweep, orthogonality_residual, separate,
    source_weights, steering_vectors, surrogate_cost, IssConfig,
};
use tiss_core::linalg::{regularized_solve, regularized_system, CMatrix};
use tiss_core::metrics::EvalReport;
use tiss_core::pipeline::{dereverb_waveform, score_scene, separate_waveform, SceneScore};
use tiss_core::simulate::{make_scene, MixingKind, SceneParams, SceneSidecar};
use tiss_core::source_model::SourceModelKind;
use tiss_core::testutil::{complex_normal, random_mixture, rng};
use tiss_core::wav::{write_wav, WavEncoding};
use tiss_core::wpe::WpeConfig;
use tiss_core::{istft, stft, StftConfig, Waveform};

type Res<T> = Result<T, Box<dyn StdError>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Res<Outcome> {
    Ok(Outcome { pass, detail })
}

// ---------------------------------------------------------------- 1

fn stft_round_trip() -> Res<Outcome> {
    let cfg = StftConfig::default();
    let len = 16_000;
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng(100 + seed);
        let channels = 1 + (seed % 2) as usize;
        let mut rows = Vec::new();
        for _ in 0..channels {
            let x: Vec<f64> = match seed % 3 {
                0 => {
                    let f0 = r.random_range(50.0..7000.0);
                    let ph = r.random_range(0.0..std::f64::consts::TAU);
                    (0..len)
                        .map(|t| (std::f64::consts::TAU * f0 * t as f64 / 16_000.0 + ph).sin())
                        .collect()
                }
                1 => (0..len).map(|_| StandardNormal.sample(&mut r)).collect(),
                _ => {
                    let mut x = vec![0.0; len];
                    for _ in 0..20 {
                        let t = r.random_range(cfg.window_length..len - cfg.window_length);
                        let g: f64 = StandardNormal.sample(&mut r);
                        x[t] += g;
                    }
                    x
                }
            };
            rows.push(x);
        }
        let w = Waveform::from_channels(rows, 16_000)?;
        let back = istft(&stft(&w, &cfg)?)?;
        for c in 0..channels {
            let a = w.channel(c);
            let b = back.channel(c);
            let lo = cfg.window_length;
            let hi = len - cfg.window_length;
            let mut num = 0.0;
            let mut den = 0.0;
            for t in lo..hi {
                num += (a[t] - b[t]).powi(2);
                den += a[t] * a[t];
            }
            worst = worst.max((num / den).sqrt());
        }
    }
    outcome(worst <= 1e-6, format!("worst interior error {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn cost_monotonicity() -> Res<Outcome> {
    let mut worst = f64::NEG_INFINITY;
    let mut runs = 0;
    for seed in 0..100u64 {
        let x = random_mixture(2, 2, 6, 120, 1000 + seed);
        for taps in [0, 2] {
            for model in [SourceModelKind::gauss(), SourceModelKind::laplace()] {
                let cfg = IssConfig {
                    iterations: 10,
                    taps,
                    model,
                    track_cost: true,
                    ..IssConfig::new(2)
                };
                let sep = separate(&x, &cfg)?;
                for w in sep.cost_trace.windows(2) {
                    let rel = (w[1] - w[0]) / w[0].abs().max(w[1].abs());
                    worst = worst.max(rel);
                }
                runs += 1;
            }
        }
    }
    outcome(
        worst <= 1e-8,
        format!("{runs} runs, largest relative step {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 3

fn rank1_optimality() -> Res<Outcome> {
    let bins = 4;
    let steps = [
        Complex64::new(1e-3, 0.0),
        Complex64::new(-1e-3, 0.0),
        Complex64::new(0.0, 1e-3),
        Complex64::new(0.0, -1e-3),
    ];
    let mut margin = f64::INFINITY;
    let mut checks = 0;
    for seed in 0..20u64 {
        let (k, m, taps) = if seed % 2 == 0 { (2, 2, 2) } else { (2, 3, 1) };
        let model = if seed % 4 < 2 {
            SourceModelKind::laplace()
        } else {
            SourceModelKind::gauss()
        };
        let x = random_mixture(k, m, bins, 100, 2000 + seed);
        let xt = build_stacked(&x, taps, 1)?;
        let mut st = init_demix(m, k, taps, 1, bins)?;
        for _ in 0..2 {
            st = iss_sweep(&st, &xt, &model)?.0;
        }
        if m > k {
            st = background_update(&st, &covariances(&xt), 1e-3)?;
        }
        let w = source_weights(&demix(&st, &xt)?, &model)?;
        for l in 0..xt.dim() {
            let v = steering_vectors(&st, &xt, &w, l)?;
            let base = surrogate_cost(&apply_rank1(&st, l, &v), &xt, &w)?;
            for f in 0..bins {
                for q in 0..k {
                    for d in steps {
                        let mut vp = v.clone();
                        vp[[f, q]] += d;
                        let c = surrogate_cost(&apply_rank1(&st, l, &vp), &xt, &w)?;
                        margin = margin.min((c - base) / base.abs());
                        checks += 1;
                    }
                }
            }
        }
    }
    outcome(
        margin >= -1e-12,
        format!("{checks} perturbations, smallest relative change {margin:.2e}"),
    )
}

// ---------------------------------------------------------------- 4, 6, 10

fn separation_scores(
    k: usize,
    m: usize,
    snr_db: Option<f64>,
    seeds: std::ops::Range<u64>,
) -> Res<Vec<SceneScore>> {
    let mut out = Vec::new();
    for seed in seeds {
        let mut p = SceneParams::new(k, m, MixingKind::Instantaneous, seed);
        p.snr_db = snr_db;
        let scene = make_scene(&p)?;
        let cfg = IssConfig {
            taps: 0,
            iterations: 50,
            model: SourceModelKind::laplace(),
            ..IssConfig::new(k)
        };
        let (est, _) = separate_waveform(&scene.mixture, &cfg, &StftConfig::default())?;
        out.push(score_scene(&scene, &est, 0)?);
    }
    Ok(out)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn separation_quality() -> Res<Outcome> {
    let two = separation_scores(2, 2, None, 0..10)?;
    let three = separation_scores(3, 3, None, 0..10)?;
    let i2 = mean(two.iter().map(|s| s.mean_sir_improvement()));
    let i3 = mean(three.iter().map(|s| s.mean_sir_improvement()));
    outcome(
        i2 >= 20.0 && i3 >= 15.0,
        format!("2x2 {i2:.2} dB (>= 20), 3x3 {i3:.2} dB (>= 15)"),
    )
}

fn overdetermined_benefit() -> Res<Outcome> {
    let m2 = mean(separation_scores(2, 2, Some(10.0), 0..10)?.iter().map(|s| s.mean_sir()));
    let m4 = mean(separation_scores(2, 4, Some(10.0), 0..10)?.iter().map(|s| s.mean_sir()));
    outcome(
        m4 >= m2,
        format!("mean SIR M=4 {m4:.2} dB vs M=2 {m2:.2} dB"),
    )
}

fn more_sources() -> Res<Outcome> {
    let s = separation_scores(3, 4, None, 0..10)?;
    let imp = mean(s.iter().map(|s| s.mean_sir_improvement()));
    let worst = s
        .iter()
        .map(|s| s.mean_sir_improvement())
        .fold(f64::INFINITY, f64::min);
    outcome(
        imp >= 10.0,
        format!("K=3 M=4 mean improvement {imp:.2} dB (worst scene {worst:.2})"),
    )
}

// ---------------------------------------------------------------- 5

fn orthogonality() -> Res<Outcome> {
    let mut worst: f64 = 0.0;
    let mut updates = 0;
    for seed in 0..5u64 {
        let mut p = SceneParams::new(2, 4, MixingKind::Reverberant, 300 + seed);
        p.duration_s = 2.0;
        p.snr_db = Some(20.0);
        let scene = make_scene(&p)?;
        let x = stft(&scene.mixture, &StftConfig::default())?;
        let xt = build_stacked(&x, 5, 3)?;
        let cov = covariances(&xt);
        let model = SourceModelKind::laplace();
        let mut st = init_demix(4, 2, 5, 3, x.bins())?;
        for _ in 0..5 {
            st = iss_sweep(&st, &xt, &model)?.0;
            st = background_update(&st, &cov, 0.0)?;
            let r = orthogonality_residual(&st, &xt)?;
            worst = r.into_iter().fold(worst, f64::max);
            updates += 1;
        }
    }
    outcome(
        worst <= 1e-8,
        format!("{updates} background updates, worst normalized residual {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 7

/// Dense Gaussian elimination with partial pivoting.
fn gauss_elim(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let d = a.nrows();
    let r = b.ncols();
    let mut m: Vec<Vec<Complex64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| a[(i, j)])
                .chain((0..r).map(|j| b[(i, j)]))
                .collect()
        })
        .collect();
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&x, &y| m[x][col].norm().total_cmp(&m[y][col].norm()))
            .unwrap();
        m.swap(col, piv);
        for row in col + 1..d {
            let fac = m[row][col] / m[col][col];
            for j in col..d + r {
                let t = m[col][j];
                m[row][j] -= fac * t;
            }
        }
    }
    let mut x = CMatrix::zeros(d, r);
    for c in 0..r {
        for i in (0..d).rev() {
            let mut acc = m[i][d + c];
            for j in i + 1..d {
                acc -= m[i][j] * x[(j, c)];
            }
            x[(i, c)] = acc / m[i][i];
        }
    }
    x
}

fn regularized_solve_check() -> Res<Outcome> {
    let mut worst: f64 = 0.0;
    let mut r = rng(7000);
    for _ in 0..100 {
        let d = r.random_range(1..=10);
        let cols = r.random_range(1..=3);
        let mut a = CMatrix::from_fn(d, d, |_, _| complex_normal(&mut r));
        for i in 0..d {
            let g: f64 = StandardNormal.sample(&mut r);
            a.row_mut(i).scale_mut((2.0 * g).exp());
        }
        let b = CMatrix::from_fn(d, cols, |_, _| complex_normal(&mut r));
        let x = regularized_solve(&a, &b, 0.0)?;
        let xo = gauss_elim(&a, &b);
        worst = worst.max((&x - &xo).norm() / xo.norm());
    }

    let mut min_eig = f64::INFINITY;
    for _ in 0..100 {
        let d = r.random_range(2..=10);
        let rank = r.random_range(0..d);
        let u = CMatrix::from_fn(d, rank, |_, _| complex_normal(&mut r));
        let v = CMatrix::from_fn(rank, d, |_, _| complex_normal(&mut r));
        let a: CMatrix = if rank == 0 { CMatrix::zeros(d, d) } else { u * v };
        let b = CMatrix::from_fn(d, 1, |_, _| complex_normal(&mut r));
        let (sys, _) = regularized_system(&a, &b, 1e-3)?;
        let eig = DMatrix::from(sys).symmetric_eigenvalues();
        min_eig = eig.iter().copied().fold(min_eig, f64::min);
        regularized_solve(&a, &b, 1e-3)?;
    }
    outcome(
        worst <= 1e-10 && min_eig > 0.0,
        format!("eps=0 deviation {worst:.2e}, smallest eigenvalue at eps=1e-3 {min_eig:.3e}"),
    )
}

// ---------------------------------------------------------------- 8

fn reductions() -> Res<Outcome> {
    let model = SourceModelKind::laplace();
    let mut tap_free = true;
    let mut square = true;
    for seed in 0..10u64 {
        let m = 2 + (seed % 2) as usize;
        let x = random_mixture(m, m, 8, 150, 8000 + seed);

        let xt = build_stacked(&x, 0, 3)?;
        let mut st = init_demix(m, m, 0, 3, x.bins())?;
        let mut w = auxiva::identity(m, x.bins());
        for _ in 0..5 {
            st = iss_sweep(&st, &xt, &model)?.0;
            auxiva::sweep(&mut w, &x, &model)?;
        }
        tap_free &= st.p == w;

        let cfg = IssConfig {
            iterations: 5,
            taps: 2,
            ..IssConfig::new(m)
        };
        let xt = build_stacked(&x, 2, 3)?;
        let cov = covariances(&xt);
        let mut od = init_demix(m, m, 2, 3, x.bins())?;
        for _ in 0..5 {
            od = iss_sweep(&od, &xt, &model)?.0;
            od = background_update(&od, &cov, cfg.epsilon)?;
        }
        let det = separate(&x, &cfg)?.state;
        square &= od.p == det.p && od.j == det.j;
    }
    outcome(
        tap_free && square,
        format!("L=0 vs AuxIVA-ISS identical: {tap_free}, M=K paths identical: {square}"),
    )
}

// ---------------------------------------------------------------- 9

fn wpe_sanity() -> Res<Outcome> {
    let cfg = WpeConfig {
        taps: 5,
        delay: 3,
        iterations: 3,
        epsilon: 0.0,
        ..WpeConfig::default()
    };
    let mut gains = Vec::new();
    let mut worst_step = f64::NEG_INFINITY;
    for seed in 0..10u64 {
        let mut p = SceneParams::new(1, 4, MixingKind::Reverberant, 900 + seed);
        p.rt_ms = 300.0;
        p.onset_ms = 20.0;
        let scene = make_scene(&p)?;
        let (out, res) = dereverb_waveform(&scene.mixture, &cfg, &StftConfig::default())?;
        let mut g = 0.0;
        for m in 0..4 {
            let d = scene.direct_image(0, m);
            let de: f64 = d.iter().map(|v| v * v).sum();
            let err = |y: ndarray::ArrayView1<'_, f64>| -> f64 {
                y.iter().zip(&d).map(|(a, b)| (a - b).powi(2)).sum()
            };
            let before = 10.0 * (de / err(scene.mixture.channel(m))).log10();
            let after = 10.0 * (de / err(out.channel(m))).log10();
            g += (after - before) / 4.0;
        }
        gains.push(g);
        for w in res.objective_trace.windows(2) {
            worst_step = worst_step.max((w[1] - w[0]) / w[0].abs().max(w[1].abs()));
        }
    }
    let lo = gains.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        lo >= 3.0 && worst_step <= 1e-8,
        format!(
            "DRR gain mean {:.2} dB, min {lo:.2} dB; largest objective step {worst_step:.2e}",
            mean(gains.iter().copied())
        ),
    )
}

// ---------------------------------------------------------------- 11

fn end_to_end(dir: &Path) -> Res<()> {
    let mut p = SceneParams::new(2, 3, MixingKind::Reverberant, 4242);
    p.duration_s = 1.5;
    p.snr_db = Some(15.0);
    let scene = make_scene(&p)?;
    write_wav(dir.join("mix.wav"), &scene.mixture, WavEncoding::Float32)?;
    fs::write(
        dir.join("scene.json"),
        serde_json::to_vec_pretty(&SceneSidecar::from(&scene))?,
    )?;
    let cfg = IssConfig {
        track_cost: true,
        ..IssConfig::new(2)
    };
    let (est, sep) = separate_waveform(&scene.mixture, &cfg, &StftConfig::default())?;
    write_wav(dir.join("est.wav"), &est, WavEncoding::Float32)?;
    let mut report: EvalReport = score_scene(&scene, &est, 0)?.report;
    report.cost_trace = sep.cost_trace;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    let (derev, _) = dereverb_waveform(&scene.mixture, &WpeConfig::default(), &StftConfig::default())?;
    write_wav(dir.join("derev.wav"), &derev, WavEncoding::Pcm16)?;
    Ok(())
}

fn determinism() -> Res<Outcome> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    end_to_end(a.path())?;
    end_to_end(b.path())?;
    let names = ["mix.wav", "scene.json", "est.wav", "report.json", "derev.wav"];
    let mut same = 0;
    for n in names {
        if fs::read(a.path().join(n))? == fs::read(b.path().join(n))? {
            same += 1;
        }
    }
    outcome(
        same == names.len(),
        format!("{same}/{} output files byte-identical", names.len()),
    )
}

// ----------------------------------------------------------------

type Check = fn() -> Res<Outcome>;

fn main() {
    let checks: [(&str, u64, Check); 11] = [
        ("stft round trip", 5, stft_round_trip),
        ("cost monotonicity", 120, cost_monotonicity),
        ("rank-1 optimality", 60, rank1_optimality),
        ("separation quality", 120, separation_quality),
        ("overdetermined orthogonality", 60, orthogonality),
        ("overdetermined benefit", 180, overdetermined_benefit),
        ("regularized solve", 30, regularized_solve_check),
        ("reductions", 60, reductions),
        ("wpe sanity", 120, wpe_sanity),
        ("more sources", 120, more_sources),
        ("determinism", 120, determinism),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in checks.iter().enumerate() {
        let t = Instant::now();
        let res = check();
        let elapsed = t.elapsed();
        let (mut pass, mut detail) = match res {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if elapsed > Duration::from_secs(*limit) {
            pass = false;
            detail.push_str(&format!("; over the {limit} s budget"));
        }
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<29} {}  {} [{:.1} s]",
            i + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            detail,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
