use std::path::Path;
use std::process::Command;

use augbias::augment::{gen_synthetic, TaskConfig};
use augbias::experiment::{parse_config, read_aggregate, report, run_plan, RunOptions};
use augbias::losses::MixWeights;
use augbias::problem::{FitOptions, Problem, SourceKind};
use augbias::trainers::{train, LrSchedule, Scheme, StageOpt, TrainConfig, STAGE_AUGMENTED, STAGE_INIT, STAGE_ORIGINAL};
use augbias::{Arch, Rng};

fn small_problem(seed: u64) -> Problem {
    let cfg = TaskConfig {
        dim: 4,
        classes: 3,
        n_train: 200,
        n_aug: 400,
        n_eval: 300,
        ..TaskConfig::canonical(0.3)
    };
    let task = gen_synthetic(&cfg, &Rng::new(seed)).unwrap();
    Problem::from_task(&task, Arch::SoftmaxLinear { dim: 4, classes: 3 }, SourceKind::Fresh, FitOptions::default()).unwrap()
}

fn cfg(scheme: Scheme) -> TrainConfig {
    TrainConfig {
        scheme,
        batch: 16,
        aug_batch: 16,
        stage1: StageOpt::plain(0.1),
        stage2: StageOpt {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        },
        seed: 9,
        resolved: Default::default(),
        snapshot_every: 0,
    }
}

#[test]
fn wemix_reduces_to_its_special_cases() {
    let p = small_problem(1);
    let init = p.arch.zeros();
    let zero = MixWeights::new(0.0, 0.0, 16).unwrap();
    let a = train(&init, &p, &cfg(Scheme::AugDrop { t1: 60, t2: 40 })).unwrap();
    let b = train(&init, &p, &cfg(Scheme::WeMix { t1: 60, t2: 40, mix: zero })).unwrap();
    assert_eq!(a.to_csv_string(), b.to_csv_string());
    assert_eq!(a.final_params, b.final_params);

    let mix = MixWeights::new(0.4, 0.3, 16).unwrap();
    let a = train(&init, &p, &cfg(Scheme::MixLoss { iters: 80, mix })).unwrap();
    let b = train(&init, &p, &cfg(Scheme::WeMix { t1: 80, t2: 0, mix })).unwrap();
    assert_eq!(a.to_csv_string(), b.to_csv_string());

    // AugDrop without a second stage is augmented training
    let a = train(&init, &p, &cfg(Scheme::Augmented { iters: 50 })).unwrap();
    let b = train(&init, &p, &cfg(Scheme::AugDrop { t1: 50, t2: 0 })).unwrap();
    assert_eq!(a.to_csv_string(), b.to_csv_string());
}

#[test]
fn stages_are_tagged_in_order() {
    let p = small_problem(2);
    let t = train(&p.arch.zeros(), &p, &cfg(Scheme::AugDrop { t1: 5, t2: 3 })).unwrap();
    let tags: Vec<u8> = t.records.iter().map(|r| r.stage).collect();
    let mut expect = vec![STAGE_INIT];
    expect.extend([STAGE_AUGMENTED; 5]);
    expect.extend([STAGE_ORIGINAL; 3]);
    assert_eq!(tags, expect);
}

#[test]
fn different_seeds_give_different_runs() {
    let p = small_problem(3);
    let mut c = cfg(Scheme::Original { iters: 20 });
    let a = train(&p.arch.zeros(), &p, &c).unwrap();
    c.seed += 1;
    let b = train(&p.arch.zeros(), &p, &c).unwrap();
    assert_ne!(a.to_csv_string(), b.to_csv_string());
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("plan.toml");
    let text = format!("output_dir = \"{}\"\n{body}", dir.join("out").display());
    std::fs::write(&path, text).unwrap();
    path
}

const SMALL: &str = "seeds = [0, 1]\n[task]\ndelta = 0.3\ndim = 3\nclasses = 3\nn_train = 80\nn_aug = 160\nn_eval = 80\n[defaults]\niters = 40\nbatch = 8\naug_batch = 8\n";

#[test]
fn report_reproduces_the_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let plan = parse_config(&format!(
        "output_dir = \"{}\"\n{SMALL}[[cell]]\nscheme = \"augdrop\"\n[[cell]]\nscheme = \"wemix\"\n",
        dir.path().display()
    ))
    .unwrap();
    let out = run_plan(&plan, RunOptions { jobs: 2, seed_offset: 3 }).unwrap();
    assert!(out.runs.iter().all(|r| r.seed >= 3));
    let written = read_aggregate(&dir.path().join("aggregate.csv")).unwrap();
    let rebuilt = report(dir.path()).unwrap();
    assert_eq!(written.len(), rebuilt.len());
    for (a, b) in written.iter().zip(&rebuilt) {
        assert_eq!(a.cell, b.cell);
        assert!((a.median_final_gap - b.median_final_gap).abs() <= 1e-12);
        assert!((a.mean_final_gap - b.mean_final_gap).abs() <= 1e-12);
        assert!((a.std_final_gap - b.std_final_gap).abs() <= 1e-12);
    }
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_augbias");
    let dir = tempfile::tempdir().unwrap();

    let ok = write_config(dir.path(), &format!("{SMALL}[[cell]]\nscheme = \"original\"\n"));
    let st = Command::new(bin).args(["run", ok.to_str().unwrap(), "--jobs", "2"]).output().unwrap();
    assert_eq!(st.status.code(), Some(0), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(dir.path().join("out/runs/original__seed0.csv").exists());
    assert!(dir.path().join("out/runs/original__seed1.json").exists());

    let st = Command::new(bin).args(["validate", ok.to_str().unwrap()]).output().unwrap();
    assert_eq!(st.status.code(), Some(0));

    let st = Command::new(bin).args(["report", dir.path().join("out").to_str().unwrap()]).output().unwrap();
    assert_eq!(st.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&st.stdout).contains("original"));

    let bad = write_config(dir.path(), &format!("{SMALL}[[cell]]\nscheme = \"mixloss\"\nlambda = 1.5\n"));
    let st = Command::new(bin).args(["run", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("lambda out of (0,1]"));

    let diverging = write_config(
        dir.path(),
        &format!("{SMALL}[[cell]]\nscheme = \"original\"\nlr = 1e300\nweight_decay = 1e10\nschedule = \"constant\"\n"),
    );
    let st = Command::new(bin).args(["run", diverging.to_str().unwrap()]).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
}
