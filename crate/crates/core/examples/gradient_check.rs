//! Central finite differences against the analytic gradients of both
//! architectures.

use augbias::losses::{grad_a, loss_a};
use augbias::model::{ce_grad, ce_loss};
use augbias::{Arch, Predictor, Rng};

fn numeric(f: impl Fn(&[f64]) -> f64, w: &[f64]) -> Vec<f64> {
    let h = 1e-5;
    let mut w = w.to_vec();
    (0..w.len())
        .map(|i| {
            let orig = w[i];
            w[i] = orig + h;
            let up = f(&w);
            w[i] = orig - h;
            let down = f(&w);
            w[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    d / s
}

fn main() -> augbias::Result<()> {
    let mut rng = Rng::new(3);
    let x = rng.normal_vec(4, 1.0);
    let y = [0.1, 0.7, 0.2];
    for arch in [Arch::SoftmaxLinear { dim: 4, classes: 3 }, Arch::Mlp { dim: 4, hidden: 6, classes: 3 }] {
        let m = arch.random(0.5, &mut rng);
        let at = |w: &[f64]| Predictor::new(arch, w.to_vec()).expect("same length");
        let g = ce_grad(&m, &x, &y)?.grad;
        let n = numeric(|w| ce_loss(&y, &at(w).forward(&x).unwrap()).unwrap(), m.params());
        let ga = grad_a(&m, &x, &y, 0.2)?.grad;
        let na = numeric(|w| loss_a(&y, &at(w).forward(&x).unwrap(), 0.2).unwrap().value, m.params());
        println!("{arch:?}: ce rel err {:.2e}, corrected rel err {:.2e}", rel_err(&n, &g), rel_err(&na, &ga));
    }
    Ok(())
}
