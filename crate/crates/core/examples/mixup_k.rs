//! k-example mixup with Dirichlet weights and the contrast transform.

use augbias::augment::{contrast, mixup_k};
use augbias::random::sample_dirichlet;
use augbias::Rng;

fn main() -> augbias::Result<()> {
    let mut rng = Rng::new(7);
    let xs = [vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]];
    let ys = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    for alpha in [0.2, 1.0, 5.0] {
        let w = sample_dirichlet(alpha, 3, &mut rng)?;
        let (x, y) = mixup_k(&xr, &yr, &w)?;
        println!("alpha {alpha}: weights {w:.3?} -> x {x:.3?}, y {y:.3?}");
    }
    let m = rng.uniform_in(0.1, 1.9);
    println!("contrast {m:.3}: {:.3?}", contrast(&[0.5, -1.0, 2.0], m, 0.1, 1.9)?);
    Ok(())
}
