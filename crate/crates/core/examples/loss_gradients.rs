//! Loss kernels on one patch, with a finite-difference check of each gradient.
//!
//!     cargo run --example loss_gradients

use fp_volseg::loss::{bce, combined_loss, dice_loss, soft_dice_loss, tversky_loss, LossValue, LossWeights, TverskyParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Kernel<'a> = Box<dyn Fn(&[f64]) -> fp_volseg::Result<LossValue> + 'a>;

fn main() -> fp_volseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 125;
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let g: Vec<f64> = (0..n).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
    let tv = TverskyParams::default();
    let weights = LossWeights::default();

    let kernels: [(&str, Kernel); 5] = [
        ("bce", Box::new(|p| bce(p, &g))),
        ("dice", Box::new(|p| dice_loss(p, &g, 1e-5))),
        ("soft dice", Box::new(|p| soft_dice_loss(p, &g, 1e-5))),
        ("tversky", Box::new(|p| tversky_loss(p, &g, &tv))),
        ("combined", Box::new(|p| combined_loss(p, &g, &weights, &tv))),
    ];
    let h = 1e-5;
    for (name, f) in &kernels {
        let lv = f(&p)?;
        let mut worst = 0.0f64;
        let mut x = p.clone();
        for i in 0..n {
            x[i] = p[i] + h;
            let up = f(&x)?.loss;
            x[i] = p[i] - h;
            let dn = f(&x)?.loss;
            x[i] = p[i];
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max((lv.grad[i] - fd).abs() / fd.abs().max(1e-12));
        }
        println!("{name:>9}: loss {:.6}  max relative gradient error {worst:.1e}", lv.loss);
    }

    // Tversky with α = β = ½ is dice with half the smoothing
    let half = TverskyParams::new(0.5, 0.5, 0.5e-5)?;
    println!(
        "dice {:.15}  tversky(0.5, 0.5) {:.15}",
        dice_loss(&p, &g, 1e-5)?.loss,
        tversky_loss(&p, &g, &half)?.loss
    );
    Ok(())
}
