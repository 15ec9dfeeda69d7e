//! Patch grid, Gaussian weight map and sliding-window fusion on a 96³ case.
//!
//!     cargo run --release --example sliding_window_fusion

use fp_volseg::patch::{compute_grid, gaussian_weight_map, sliding_window_infer, PatchTensor, WeightMap};
use fp_volseg::volume::stack_channels;
use fp_volseg::{Volume3D, VolumeKind};

fn main() -> fp_volseg::Result<()> {
    let shape = [96, 96, 96];
    let patch = [64; 3];
    let grid = compute_grid(shape, patch, 0.5)?;
    println!("volume {shape:?}, patch {patch:?}, stride {:?}", grid.stride());
    for o in grid.origins() {
        println!("  origin {o:?}");
    }

    let wmap = gaussian_weight_map(patch, 1.0 / 8.0)?;
    let w = wmap.weights();
    println!("weight at centre {:.4}, at corner {:.2e}", w[(32 * 64 + 32) * 64 + 32], w[0]);

    // a "model" that reports the PET channel squashed into [0, 1]
    let ct = Volume3D::from_fn(shape, [1.5; 3], VolumeKind::Image, |z, _, _| z as f32)?;
    let pet = Volume3D::from_fn(shape, [1.5; 3], VolumeKind::Image, |_, y, x| ((x + y) % 10) as f32 / 10.0)?;
    let mc = stack_channels(ct, pet.clone())?;
    let echo = |p: &PatchTensor| p.channel(1).to_vec();

    for (name, map) in [("gaussian", wmap), ("uniform", WeightMap::uniform(patch))] {
        let fused = sliding_window_infer(&mc, &echo, 0.5, &map)?;
        let err = fused
            .data()
            .iter()
            .zip(pet.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        println!("{name:>8} fusion: max |fused - input| = {err:.2e}");
    }
    Ok(())
}
