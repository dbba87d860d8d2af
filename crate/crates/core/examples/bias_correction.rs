//! The five schemes on the strongly biased task with equal step budgets.

use augbias::augment::{gen_synthetic, TaskConfig};
use augbias::losses::MixWeights;
use augbias::problem::{FitOptions, Problem, SourceKind};
use augbias::trainers::{train, Scheme, StageOpt, TrainConfig};
use augbias::{Arch, Rng};

fn main() -> augbias::Result<()> {
    let arch = Arch::SoftmaxLinear { dim: 10, classes: 5 };
    let task = gen_synthetic(&TaskConfig::canonical(0.4), &Rng::new(1))?;
    let problem = Problem::from_task(&task, arch, SourceKind::Fresh, FitOptions::default())?;
    let (t, t1) = (2000, 1600);
    let mix = MixWeights::new(0.1, problem.delta_y, 32)?;
    for scheme in [
        Scheme::Original { iters: t },
        Scheme::Augmented { iters: t },
        Scheme::AugDrop { t1, t2: t - t1 },
        Scheme::MixLoss { iters: t, mix },
        Scheme::WeMix { t1, t2: t - t1, mix },
    ] {
        let cfg = TrainConfig {
            scheme,
            batch: 32,
            aug_batch: 32,
            stage1: StageOpt::practical(0.05),
            stage2: StageOpt::practical(0.05),
            seed: 1,
            resolved: Default::default(),
            snapshot_every: 0,
        };
        let trace = train(&arch.zeros(), &problem, &cfg).expect("finite run");
        println!("{:<10} final gap {:.4} (from {:.4})", trace.scheme, trace.final_gap(), trace.initial_gap());
    }
    Ok(())
}
