//! Dice, false-positive and false-negative volume on a hand-built case.
//!
//!     cargo run --example lesion_metrics

use fp_volseg::metrics::{connected_components, evaluate_case, summarize, CaseReport, Connectivity};
use fp_volseg::{Volume3D, VolumeKind};

fn ball(c: [f64; 3], r: f64) -> impl Fn(usize, usize, usize) -> bool {
    move |z, y, x| (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2) <= r * r
}

fn main() -> fp_volseg::Result<()> {
    let shape = [40; 3];
    let a = ball([10.0, 10.0, 10.0], 4.0);
    let b = ball([28.0, 28.0, 28.0], 3.0);
    let c = ball([10.0, 30.0, 10.0], 2.0);
    // ground truth: lesions a and b; prediction: a (shifted a little) and a spurious c
    let gt = Volume3D::from_fn(shape, [2.0; 3], VolumeKind::Mask, |z, y, x| (a(z, y, x) || b(z, y, x)) as u8 as f32)?;
    let a2 = ball([11.0, 10.0, 10.0], 4.0);
    let pred = Volume3D::from_fn(shape, [2.0; 3], VolumeKind::Mask, |z, y, x| (a2(z, y, x) || c(z, y, x)) as u8 as f32)?;

    for conn in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
        let lab = connected_components(&pred, conn)?;
        println!("{}-connectivity: {} predicted components, sizes {:?}", conn.count(), lab.num_components, lab.sizes());
    }

    let m = evaluate_case(&pred, &gt, Connectivity::default())?;
    println!("dice {:.4}  fpv {:.3} ml  fnv {:.3} ml  score {:.4}", m.dice, m.fpv_ml, m.fnv_ml, m.score);
    let perfect = evaluate_case(&gt, &gt, Connectivity::default())?;
    let reports = [CaseReport::new("shifted", m), CaseReport::new("perfect", perfect)];
    for r in &reports {
        println!("{}", serde_json::to_string(r).unwrap());
    }
    println!("{}", serde_json::to_string(&summarize(&reports)?).unwrap());
    Ok(())
}
