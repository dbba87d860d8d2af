//! The corrected loss for one augmented label, over the plain ball and
//! over the ball intersected with the simplex.

use augbias::losses::{loss_a, loss_a_over, CorrectionSet};
use augbias::model::ce_loss;

fn main() -> augbias::Result<()> {
    let y_tilde = [0.6, 0.3, 0.1];
    let scores = [2.0, 0.5, -1.0];
    println!("cross-entropy on the augmented label: {:.6}", ce_loss(&y_tilde, &scores)?);
    for delta in [0.0, 0.1, 0.3, 0.6] {
        let ball = loss_a(&y_tilde, &scores, delta)?;
        let simplex = loss_a_over(&y_tilde, &scores, delta, CorrectionSet::BallSimplex)?;
        println!(
            "delta {delta:.1}: ball {:.6} z* {:?} | ball∩simplex {:.6} z* {:?}",
            ball.value,
            rounded(&ball.minimizer_z),
            simplex.value,
            rounded(&simplex.minimizer_z)
        );
    }
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
