//! Training only on biased augmented data stalls at a gap that grows
//! roughly with the square of the label bias.

use augbias::augment::{gen_synthetic, TaskConfig};
use augbias::problem::{FitOptions, Problem, SourceKind};
use augbias::trainers::{train, Scheme, StageOpt, TrainConfig};
use augbias::{Arch, Rng};

fn main() -> augbias::Result<()> {
    let arch = Arch::SoftmaxLinear { dim: 10, classes: 5 };
    let mut prev: Option<f64> = None;
    for delta in [0.1, 0.2, 0.4] {
        let task = gen_synthetic(&TaskConfig::canonical(delta), &Rng::new(0))?;
        let problem = Problem::from_task(&task, arch, SourceKind::Fresh, FitOptions::default())?;
        let cfg = TrainConfig {
            scheme: Scheme::Augmented { iters: 1500 },
            batch: 32,
            aug_batch: 32,
            stage1: StageOpt::practical(0.05),
            stage2: StageOpt::practical(0.05),
            seed: 0,
            resolved: Default::default(),
            snapshot_every: 0,
        };
        let gap = train(&arch.zeros(), &problem, &cfg).expect("finite run").final_gap();
        match prev {
            Some(p) => println!("delta {delta}: plateau gap {gap:.4} ({:.2}x the previous)", gap / p),
            None => println!("delta {delta}: plateau gap {gap:.4}"),
        }
        prev = Some(gap);
    }
    Ok(())
}
