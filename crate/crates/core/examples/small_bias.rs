//! With a tiny label bias and a pool twenty times the training set,
//! augmented data beats the original data at the same step budget.

use augbias::augment::{gen_synthetic, TaskConfig};
use augbias::problem::{FitOptions, Problem, SourceKind};
use augbias::trainers::{train, Scheme, StageOpt, TrainConfig};
use augbias::{Arch, Rng};

fn main() -> augbias::Result<()> {
    let arch = Arch::SoftmaxLinear { dim: 10, classes: 5 };
    let task = gen_synthetic(&TaskConfig::canonical(0.01), &Rng::new(2))?;
    let problem = Problem::from_task(&task, arch, SourceKind::Pool, FitOptions::default())?;
    for scheme in [Scheme::Original { iters: 3000 }, Scheme::Augmented { iters: 3000 }] {
        let cfg = TrainConfig {
            scheme,
            batch: 32,
            aug_batch: 32,
            stage1: StageOpt::practical(0.05),
            stage2: StageOpt::practical(0.05),
            seed: 2,
            resolved: Default::default(),
            snapshot_every: 0,
        };
        let trace = train(&arch.zeros(), &problem, &cfg).expect("finite run");
        println!("{:<10} final gap {:.5}", trace.scheme, trace.final_gap());
    }
    Ok(())
}
