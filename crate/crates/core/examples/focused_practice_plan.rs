//! Easy/hard split of recorded patch losses and the next epoch's plan.
//!
//!     cargo run --example focused_practice_plan

use fp_volseg::focused::{build_epoch_plan, classify, otsu_threshold, FpCheckpoint, LossRegistry, PatchId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fp_volseg::Result<()> {
    let s = otsu_threshold(&[0.10, 0.12, 0.11, 0.90, 0.95])?;
    println!("otsu: low class size {}, threshold {:.3}", s.split_index, s.threshold);

    let mut reg = LossRegistry::new();
    let losses = [0.08, 0.11, 0.09, 0.10, 0.12, 0.70, 0.95, 0.81, 1.40, 0.77];
    for (i, &l) in losses.iter().enumerate() {
        reg.record_loss(PatchId(i as u32), l)?;
    }
    let cls = classify(&reg)?;
    println!("threshold {:.3}", cls.threshold);
    println!("easy {:?}", cls.easy.iter().map(|p| p.0).collect::<Vec<_>>());
    println!("hard (hardest first) {:?}", cls.hard.iter().map(|p| p.0).collect::<Vec<_>>());

    let plan = build_epoch_plan(&reg, 2, 0.2, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("excluded {:?}", plan.excluded.iter().map(|p| p.0).collect::<Vec<_>>());
    println!("plan ({} visits) {:?}", plan.len(), plan.entries.iter().map(|p| p.0).collect::<Vec<_>>());

    // the hardest patch improves: it is reclassified on the next split
    reg.record_loss(PatchId(8), 0.1)?;
    let cls = classify(&reg)?;
    println!("after update, hard {:?}", cls.hard.iter().map(|p| p.0).collect::<Vec<_>>());

    println!("checkpoint {}", FpCheckpoint::new(&reg, Some(&plan)).to_json());
    Ok(())
}
