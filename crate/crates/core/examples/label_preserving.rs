//! Input-shift augmentation: the plateau of augmented training grows with
//! the input-distribution shift, which AugDrop removes.

use augbias::augment::{estimate_delta_p, gen_synthetic, KlFamily, TaskConfig};
use augbias::problem::{FitOptions, Problem, SourceKind};
use augbias::trainers::{train, Scheme, StageOpt, TrainConfig};
use augbias::{Arch, Rng};

fn main() -> augbias::Result<()> {
    let arch = Arch::SoftmaxLinear { dim: 10, classes: 5 };
    for delta_p in [0.05, 0.2] {
        let task = gen_synthetic(&TaskConfig::input_shift(delta_p), &Rng::new(5))?;
        let kl = estimate_delta_p(task.augmented.inputs(), task.original.inputs(), KlFamily::Gaussian)?;
        let problem = Problem::from_task(&task, arch, SourceKind::Fresh, FitOptions::default())?;
        for scheme in [Scheme::Augmented { iters: 2000 }, Scheme::AugDrop { t1: 1600, t2: 400 }] {
            let cfg = TrainConfig {
                scheme,
                batch: 32,
                aug_batch: 32,
                stage1: StageOpt::practical(0.05),
                stage2: StageOpt::practical(0.05),
                seed: 5,
                resolved: Default::default(),
                snapshot_every: 0,
            };
            let trace = train(&arch.zeros(), &problem, &cfg).expect("finite run");
            println!("delta_P {delta_p} (estimated {kl:.3}): {:<10} final gap {:.4}", trace.scheme, trace.final_gap());
        }
    }
    Ok(())
}
