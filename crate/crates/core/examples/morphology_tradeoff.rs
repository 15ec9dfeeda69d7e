//! Opening removes small false positives and, at larger radii, true lesion.
//!
//!     cargo run --example morphology_tradeoff

use fp_volseg::inference::{ball_offsets, postprocess_open};
use fp_volseg::metrics::{dice_coefficient, fpv, Connectivity};
use fp_volseg::{Volume3D, VolumeKind};

fn main() -> fp_volseg::Result<()> {
    let shape = [40; 3];
    let sphere = |c: f64, r: f64| {
        move |z: usize, y: usize, x: usize| {
            (z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2) <= r * r
        }
    };
    let big = sphere(20.0, 6.0);
    let small = sphere(8.0, 1.5);
    let gt = Volume3D::from_fn(shape, [1.5; 3], VolumeKind::Mask, |z, y, x| (big(z, y, x) || small(z, y, x)) as u8 as f32)?;
    let speckles = [[2, 2, 30], [35, 4, 3], [30, 33, 31], [3, 36, 36], [36, 36, 10]];
    let mut data = gt.data().to_vec();
    for [z, y, x] in speckles {
        data[(z * 40 + y) * 40 + x] = 1.0;
    }
    let pred = gt.with_data(data, VolumeKind::Mask)?;
    let conn = Connectivity::default();

    println!("radius  element  dice    fpv_ml   kept voxels");
    println!("{:>6}  {:>7}  {:.4}  {:.5}  {}", 0, 1, dice_coefficient(&pred, &gt)?, fpv(&pred, &gt, conn)?, pred.count_nonzero());
    for r in 1..=3 {
        let opened = postprocess_open(&pred, r)?;
        println!(
            "{r:>6}  {:>7}  {:.4}  {:.5}  {}",
            ball_offsets(r).len(),
            dice_coefficient(&opened, &gt)?,
            fpv(&opened, &gt, conn)?,
            opened.count_nonzero()
        );
    }
    Ok(())
}
