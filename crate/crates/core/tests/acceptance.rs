//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};

use augbias::augment::{estimate_delta_p, gen_synthetic, KlFamily, TaskConfig};
use augbias::experiment::{parse_config, run_plan, RunOptions};
use augbias::losses::{combined_grad, grad_a, loss_a, loss_a_over, CorrectionSet, MixWeights};
use augbias::model::{ce_grad, ce_loss, estimate_g};
use augbias::problem::{FitOptions, Problem, SourceKind};
use augbias::theory::{estimate_l_smooth, estimate_mu, estimate_mu_from_records, gamma0, Quadratic};
use augbias::trainers::{read_records, train, Scheme, StageOpt, TrainConfig, TrainTrace, STAGE_ORIGINAL};
use augbias::{Arch, Mat, Predictor, Rng};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ITERS: usize = 3000;
const DROP: usize = 2400;
const LAMBDA: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn linear(d: usize, k: usize) -> Arch {
    Arch::SoftmaxLinear { dim: d, classes: k }
}

fn problem(task: &TaskConfig, seed: u64, source: SourceKind) -> Problem {
    let t = gen_synthetic(task, &Rng::new(seed)).expect("task");
    Problem::from_task(&t, linear(task.dim, task.classes), source, FitOptions::default()).expect("problem")
}

fn config(scheme: Scheme, seed: u64) -> TrainConfig {
    TrainConfig {
        scheme,
        batch: 32,
        aug_batch: 32,
        stage1: StageOpt::practical(0.05),
        stage2: StageOpt::practical(0.05),
        seed,
        resolved: Default::default(),
        snapshot_every: 300,
    }
}

fn run(p: &Problem, scheme: Scheme, seed: u64) -> TrainTrace {
    train(&p.arch.zeros(), p, &config(scheme, seed)).expect("run finishes")
}

fn random_simplex(k: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| -rng.uniform().max(1e-300).ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Projected gradient on `min ⟨z, p⟩` over `‖z − ỹ‖ ≤ δ`.
fn ball_pgd(y: &[f64], p: &[f64], delta: f64) -> f64 {
    let mut z = y.to_vec();
    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let step = 0.5 * delta / pn.max(1e-300);
    for _ in 0..2000 {
        for (zi, pi) in z.iter_mut().zip(p) {
            *zi -= step * pi;
        }
        let d: Vec<f64> = z.iter().zip(y).map(|(a, b)| a - b).collect();
        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dn > delta {
            for i in 0..z.len() {
                z[i] = y[i] + d[i] * delta / dn;
            }
        }
    }
    z.iter().zip(p).map(|(a, b)| a * b).sum()
}

fn c1() -> Outcome {
    let mut rng = Rng::new(101);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let k = 2 + rng.below(9);
        let y = random_simplex(k, &mut rng);
        let s = rng.normal_vec(k, 2.0);
        let delta = rng.uniform_in(0.0, 1.0);
        let closed = loss_a(&y, &s, delta).unwrap().value;
        let p: Vec<f64> = augbias::model::p_of_scores(&s).unwrap();
        worst = worst.max((closed - ball_pgd(&y, &p, delta)).abs());
    }
    outcome(worst <= 1e-4, format!("max |closed form - PGD| = {worst:.2e} over 100 instances"))
}

fn fd_rel_err(f: impl Fn(&[f64]) -> f64, w: &[f64], g: &[f64]) -> f64 {
    let h = 1e-5;
    let mut num = vec![0.0; w.len()];
    let mut wp = w.to_vec();
    for i in 0..w.len() {
        wp[i] = w[i] + h;
        let fp = f(&wp);
        wp[i] = w[i] - h;
        let fm = f(&wp);
        wp[i] = w[i];
        num[i] = (fp - fm) / (2.0 * h);
    }
    let diff: f64 = num.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn c2() -> Outcome {
    let mut rng = Rng::new(202);
    let mut worst = [0.0_f64; 3];
    for i in 0..100 {
        let (d, k) = (2 + rng.below(4), 2 + rng.below(4));
        let arch = if i % 2 == 0 {
            linear(d, k)
        } else {
            Arch::Mlp { dim: d, hidden: 3 + rng.below(4), classes: k }
        };
        let model = arch.random(0.8, &mut rng);
        let w = model.params().to_vec();
        let at = |v: &[f64]| Predictor::new(arch, v.to_vec()).unwrap();
        let x = rng.normal_vec(d, 1.0);
        let y = random_simplex(k, &mut rng);
        let delta = rng.uniform_in(0.01, 0.5);

        let g = ce_grad(&model, &x, &y).unwrap().grad;
        let e = fd_rel_err(|v| ce_loss(&y, &at(v).forward(&x).unwrap()).unwrap(), &w, &g);
        worst[0] = worst[0].max(e);

        let g = grad_a(&model, &x, &y, delta).unwrap().grad;
        let e = fd_rel_err(|v| loss_a(&y, &at(v).forward(&x).unwrap(), delta).unwrap().value, &w, &g);
        worst[1] = worst[1].max(e);

        let xs: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(d, 1.0)).collect();
        let ys: Vec<Vec<f64>> = (0..3).map(|_| random_simplex(k, &mut rng)).collect();
        let orig: Vec<(&[f64], &[f64])> = vec![(&xs[0], &ys[0])];
        let aug: Vec<(&[f64], &[f64])> = vec![(&xs[1], &ys[1]), (&xs[2], &ys[2])];
        let lam = rng.uniform_in(0.05, 0.95);
        let mix = MixWeights::new(lam, delta, 2).unwrap().with_correction(CorrectionSet::Ball);
        let g = combined_grad(&model, &orig, &aug, &mix).unwrap();
        let value = |v: &[f64]| {
            let m = at(v);
            let lo = ce_loss(orig[0].1, &m.forward(orig[0].0).unwrap()).unwrap();
            let la: f64 = aug
                .iter()
                .map(|(x, y)| loss_a_over(y, &m.forward(x).unwrap(), delta, CorrectionSet::Ball).unwrap().value)
                .sum::<f64>()
                / 2.0;
            lam * lo + (1.0 - lam) * la
        };
        worst[2] = worst[2].max(fd_rel_err(value, &w, &g));
    }
    let pass = worst.iter().all(|e| *e <= 1e-6);
    outcome(
        pass,
        format!("max rel err ce {:.1e}, corrected {:.1e}, combined {:.1e}", worst[0], worst[1], worst[2]),
    )
}

struct Canonical {
    problems: Vec<Problem>,
    augmented: Vec<TrainTrace>,
}

fn canonical(delta: f64) -> Canonical {
    let problems: Vec<Problem> = SEEDS
        .iter()
        .map(|&s| problem(&TaskConfig::canonical(delta), s, SourceKind::Fresh))
        .collect();
    let augmented = problems
        .iter()
        .zip(SEEDS)
        .map(|(p, s)| run(p, Scheme::Augmented { iters: ITERS }, s))
        .collect();
    Canonical { problems, augmented }
}

fn median_gap(traces: &[TrainTrace]) -> f64 {
    median(traces.iter().map(|t| t.final_gap()).collect())
}

fn c3(plateaus: &[(f64, f64)]) -> Outcome {
    let g: Vec<f64> = plateaus.iter().map(|p| p.1).collect();
    let (r1, r2) = (g[1] / g[0], g[2] / g[1]);
    let pass = g[0] < g[1] && g[1] < g[2] && (2.0..=8.0).contains(&r1) && (2.0..=8.0).contains(&r2);
    outcome(
        pass,
        format!("median gaps {:.4} / {:.4} / {:.4}, ratios {r1:.2} and {r2:.2}", g[0], g[1], g[2]),
    )
}

fn c4(aug: f64, augdrop: f64, mixloss: f64, wemix: f64, init: f64) -> Outcome {
    let pass = augdrop <= 0.5 * aug && mixloss <= 0.5 * aug && wemix <= augdrop.min(mixloss) + 0.1 * init;
    outcome(
        pass,
        format!("augmented {aug:.4}, augdrop {augdrop:.4}, mixloss {mixloss:.4}, wemix {wemix:.4}, initial {init:.4}"),
    )
}

fn c5() -> Outcome {
    let mut aug = Vec::new();
    let mut orig = Vec::new();
    for s in SEEDS {
        let p = problem(&TaskConfig::canonical(0.01), s, SourceKind::Pool);
        aug.push(run(&p, Scheme::Augmented { iters: ITERS }, s).final_gap());
        orig.push(run(&p, Scheme::Original { iters: ITERS }, s).final_gap());
    }
    let (a, o) = (median(aug), median(orig));
    outcome(a <= o, format!("augmented {a:.5} vs original {o:.5} (pool of 20n, equal steps and batch)"))
}

fn c6_c7(problems: &[Problem], augdrop: &[TrainTrace]) -> (Outcome, Outcome) {
    let (mut inside, mut total) = (0usize, 0usize);
    let mut mono = true;
    let mut detail7 = Vec::new();
    let mut gammas = Vec::new();
    for (p, t) in problems.iter().zip(augdrop) {
        let cloud: Vec<Vec<f64>> = t.snapshots.iter().map(|(_, w)| w.clone()).collect();
        let g = estimate_g(p.arch, &p.train.head(200), &cloud).unwrap();
        let mu_all = estimate_mu_from_records(&t.records, p.l_floor).unwrap();
        let stage2: Vec<_> = t.stage_records(STAGE_ORIGINAL).collect();
        let mu_two = estimate_mu_from_records(stage2.iter().copied(), p.l_floor).unwrap();
        let gamma = 8.0 * gamma0(p.delta_y, g, mu_all).unwrap();
        gammas.push(gamma);
        inside += stage2.iter().filter(|r| r.constraint <= gamma).count();
        total += stage2.len();
        mono &= mu_two >= mu_all;
        detail7.push(format!("{mu_two:.4}>={mu_all:.4}"));
    }
    let rate = inside as f64 / total as f64;
    (
        outcome(
            rate >= 0.95,
            format!("{:.1}% of {total} Stage-II iterates inside 8·gamma0 (gamma ~ {:.1})", 100.0 * rate, median(gammas)),
        ),
        outcome(mono, format!("Stage-II mu vs all-iterate mu per seed: {}", detail7.join(", "))),
    )
}

fn c8() -> Outcome {
    let mut rng = Rng::new(808);
    let mut worst = 0.0_f64;
    for (dim, spectrum) in [(2usize, vec![0.5, 2.0]), (3, vec![1.0, 2.5, 4.0])] {
        // A = Q diag(√λ) Qᵀ with a random orthogonal Q, so AᵀA has spectrum λ
        let qr = DMatrix::from_row_slice(dim, dim, &rng.normal_vec(dim * dim, 1.0)).qr();
        let basis = qr.q();
        let root = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(dim, spectrum.iter().map(|v: &f64| v.sqrt())));
        let planted = &basis * root * basis.transpose();
        let a = Mat::new(dim, dim, planted.transpose().as_slice().to_vec()).unwrap();
        let ata = DMatrix::from_row_slice(dim, dim, a.transpose().matmul(&a).unwrap().as_slice());
        let eig = SymmetricEigen::new(ata).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        let q = Quadratic::new(a, vec![0.0; dim]).unwrap();
        let pts: Vec<Vec<f64>> = (0..1000).map(|_| rng.normal_vec(dim, 1.0)).collect();
        let mu = estimate_mu(&q, 0.0, &pts).unwrap();
        let pairs: Vec<_> = (0..1000).map(|_| (rng.normal_vec(dim, 1.0), rng.normal_vec(dim, 1.0))).collect();
        let l = estimate_l_smooth(&q, &pairs).unwrap();
        worst = worst.max((mu - lo).abs() / lo).max((l - hi).abs() / hi);
    }
    // planted Gaussians sharing a covariance: KL = ½ Δμᵀ Σ⁻¹ Δμ
    let chol = [[1.0, 0.0, 0.0], [0.3, 0.8, 0.0], [-0.2, 0.1, 0.6]];
    let shift = [0.4, -0.3, 0.2];
    let n = 100_000;
    let draw = |rng: &mut Rng, mean: &[f64]| {
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let z = rng.normal_vec(3, 1.0);
            rows.push((0..3).map(|i| mean[i] + (0..3).map(|j| chol[i][j] * z[j]).sum::<f64>()).collect::<Vec<f64>>());
        }
        Mat::from_rows(&rows).unwrap()
    };
    let p = draw(&mut rng, &[0.0; 3]);
    let qs = draw(&mut rng, &shift);
    let l = DMatrix::from_fn(3, 3, |i, j| chol[i][j]);
    let sigma = &l * l.transpose();
    let dm = nalgebra::DVector::from_column_slice(&shift);
    let exact = 0.5 * (dm.transpose() * sigma.try_inverse().unwrap() * &dm)[(0, 0)];
    let est = estimate_delta_p(&p, &qs, KlFamily::Gaussian).unwrap();
    let kl_err = (est - exact).abs() / exact;
    outcome(
        worst <= 0.15 && kl_err <= 0.10,
        format!("spectral rel err {:.1}%, KL {est:.4} vs {exact:.4} ({:.1}%)", 100.0 * worst, 100.0 * kl_err),
    )
}

fn c9(p: &Problem) -> Outcome {
    let iters = 600;
    let bits = |t: &TrainTrace| t.to_csv_string();
    let aug_drop = run(p, Scheme::AugDrop { t1: 400, t2: 200 }, 7);
    let zero = MixWeights::new(0.0, 0.0, 32).unwrap();
    let we0 = run(p, Scheme::WeMix { t1: 400, t2: 200, mix: zero }, 7);
    let mix = MixWeights::new(LAMBDA, 0.4, 32).unwrap();
    let ml = run(p, Scheme::MixLoss { iters, mix }, 7);
    let we_t2 = run(p, Scheme::WeMix { t1: iters, t2: 0, mix }, 7);
    let a = bits(&aug_drop) == bits(&we0);
    let b = bits(&ml) == bits(&we_t2);
    outcome(a && b, format!("wemix(lambda=0, delta=0) == augdrop: {a}; wemix(T2=0) == mixloss: {b}"))
}

fn c10() -> Outcome {
    let mut aug = Vec::new();
    let mut drop02 = Vec::new();
    for dp in [0.05, 0.2] {
        let mut gaps = Vec::new();
        for s in SEEDS {
            let p = problem(&TaskConfig::input_shift(dp), s, SourceKind::Fresh);
            gaps.push(run(&p, Scheme::Augmented { iters: ITERS }, s).final_gap());
            if dp == 0.2 {
                drop02.push(run(&p, Scheme::AugDrop { t1: DROP, t2: ITERS - DROP }, s).final_gap());
            }
        }
        aug.push(median(gaps));
    }
    let d = median(drop02);
    outcome(
        aug[0] < aug[1] && d <= aug[1],
        format!("augmented {:.4} (0.05) < {:.4} (0.2); augdrop {d:.4} at 0.2", aug[0], aug[1]),
    )
}

fn c11() -> Outcome {
    let task = TaskConfig {
        n_train: 300,
        n_aug: 600,
        n_eval: 300,
        ..TaskConfig::canonical(0.3)
    };
    let p = problem(&task, 11, SourceKind::Fresh);
    let mix = MixWeights::new(0.3, 0.3, 16).unwrap();
    let a = run(&p, Scheme::WeMix { t1: 150, t2: 50, mix }, 5);
    let b = run(&p, Scheme::WeMix { t1: 150, t2: 50, mix }, 5);
    let same = a.to_csv_string() == b.to_csv_string();
    let back = read_records(a.to_csv_string().as_bytes()).unwrap();
    let lossless = back == a.records
        && back
            .iter()
            .zip(&a.records)
            .all(|(x, y)| x.l.to_bits() == y.l.to_bits() && x.constraint.to_bits() == y.constraint.to_bits());
    // the batch runner must also write identical trace files
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let text = format!(
            "output_dir = \"{}\"\nseeds = [1, 2]\n[task]\ndelta = 0.3\nn_train = 200\nn_aug = 400\nn_eval = 200\n[defaults]\niters = 120\n[[cell]]\nscheme = \"augdrop\"\n[[cell]]\nscheme = \"mixloss\"\n",
            dir.path().display()
        );
        let plan = parse_config(&text).unwrap();
        run_plan(&plan, RunOptions { jobs: 1 + i, seed_offset: 0 }).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(dir.path().join("runs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        names.sort();
        files.push(names.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
    }
    let runner_same = files[0] == files[1] && files[0].len() == 4;
    outcome(
        same && lossless && runner_same,
        format!("repeat identical: {same}; csv lossless: {lossless}; runner traces identical: {runner_same}"),
    )
}

fn main() {
    let mut out = std::io::stdout();
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, started: Instant, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "criterion {n:>2} [{tag}] {name}: {} ({:.1}s)",
            o.detail,
            started.elapsed().as_secs_f64()
        )
        .unwrap();
        out.flush().unwrap();
        if !o.pass {
            failed.push(n);
        }
    };

    let t = Instant::now();
    report(1, "corrected-loss oracle", t, c1());
    let t = Instant::now();
    report(2, "gradient finite differences", t, c2());

    let t = Instant::now();
    let mut plateaus = Vec::new();
    let mut strong = None;
    for delta in [0.1, 0.2, 0.4] {
        let c = canonical(delta);
        plateaus.push((delta, median_gap(&c.augmented)));
        if delta == 0.4 {
            strong = Some(c);
        }
    }
    report(3, "augmented plateau scaling", t, c3(&plateaus));

    let t = Instant::now();
    let strong = strong.unwrap();
    let mix = MixWeights::new(LAMBDA, 0.4, 32).unwrap();
    let mut augdrop = Vec::new();
    let (mut ml, mut wm) = (Vec::new(), Vec::new());
    for (p, s) in strong.problems.iter().zip(SEEDS) {
        augdrop.push(run(p, Scheme::AugDrop { t1: DROP, t2: ITERS - DROP }, s));
        ml.push(run(p, Scheme::MixLoss { iters: ITERS, mix }, s).final_gap());
        wm.push(run(p, Scheme::WeMix { t1: DROP, t2: ITERS - DROP, mix }, s).final_gap());
    }
    let init = median(augdrop.iter().map(|t| t.initial_gap()).collect());
    report(
        4,
        "bias-correction ordering",
        t,
        c4(median_gap(&strong.augmented), median_gap(&augdrop), median(ml), median(wm), init),
    );

    let t = Instant::now();
    report(5, "small-bias benefit", t, c5());

    let t = Instant::now();
    let (o6, o7) = c6_c7(&strong.problems, &augdrop);
    report(6, "Stage-II constraint membership", t, o6);
    report(7, "restricted PL monotonicity", t, o7);

    let t = Instant::now();
    report(8, "constant-estimator calibration", t, c8());
    let t = Instant::now();
    report(9, "reduction identities", t, c9(&strong.problems[0]));
    let t = Instant::now();
    report(10, "label-preserving study", t, c10());
    let t = Instant::now();
    report(11, "determinism and round trip", t, c11());

    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
