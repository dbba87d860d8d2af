//! Estimates G, L and the PL constant over an AugDrop run, then evaluates
//! every bound and the theory step sizes.

use augbias::augment::{gen_synthetic, TaskConfig};
use augbias::problem::{FitOptions, Problem, SourceKind};
use augbias::theory::{bound_report, estimate_constants, estimate_mu_from_records, gamma0, theory_stepsizes, CloudOptions};
use augbias::trainers::{train, Scheme, StageOpt, TrainConfig, STAGE_ORIGINAL};
use augbias::{Arch, Rng};

fn main() -> augbias::Result<()> {
    let arch = Arch::SoftmaxLinear { dim: 10, classes: 5 };
    let task = gen_synthetic(&TaskConfig::canonical(0.4), &Rng::new(4))?;
    let problem = Problem::from_task(&task, arch, SourceKind::Fresh, FitOptions::default())?;
    let scheme = Scheme::AugDrop { t1: 1200, t2: 300 };
    let cfg = TrainConfig {
        scheme: scheme.clone(),
        batch: 32,
        aug_batch: 32,
        stage1: StageOpt::practical(0.05),
        stage2: StageOpt::practical(0.05),
        seed: 4,
        resolved: Default::default(),
        snapshot_every: 100,
    };
    let trace = train(&arch.zeros(), &problem, &cfg).expect("finite run");
    let cloud: Vec<Vec<f64>> = trace.snapshots.iter().map(|(_, w)| w.clone()).collect();
    let mut c = estimate_constants(&problem, &cloud, None, CloudOptions::default(), &mut Rng::new(40))?;
    c.mu = estimate_mu_from_records(&trace.records, problem.l_floor)?;
    c.mu_restricted = estimate_mu_from_records(trace.stage_records(STAGE_ORIGINAL), problem.l_floor)?;
    println!("G {:.3}  L {:.4}  mu {:.4}  mu(stage II) {:.4}  kappa {:.2}", c.g, c.l_smooth, c.mu, c.mu_restricted, c.kappa());
    println!("gamma0 {:.3}", gamma0(c.delta_y, c.g, c.mu)?);
    let report = bound_report(&c, &trace, &scheme);
    println!("measured final gap {:.4}", report.measured_final_gap);
    for (name, b) in &report.bounds {
        let value = b.value.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!("  {name:<8} {value:>12}  applies {:<5}  satisfied {}", b.applies, b.satisfied);
    }
    let sched = theory_stepsizes(&c, &scheme, problem.train.len(), None, 0.05)?;
    println!("theory schedule {:?}", sched.values);
    for w in sched.warnings {
        println!("  warning: {w}");
    }
    Ok(())
}
