//! Training with and without the hard-patch curriculum on identical data.
//!
//!     cargo run --release --example fp_comparison

use fp_volseg::data::{generate_phantom, PhantomSpec};
use fp_volseg::train::{compare_fp, CaseVolumes, PatchStore, TrainConfig};

fn main() -> fp_volseg::Result<()> {
    let cases = (0..10u64)
        .map(|i| {
            let ph = generate_phantom(&PhantomSpec::desk([64; 3], 3, 700 + i))?;
            CaseVolumes::from_raw(format!("case{i}"), &ph.ct, &ph.pet, ph.mask)
        })
        .collect::<fp_volseg::Result<Vec<_>>>()?;
    let (train, val) = cases.split_at(8);
    let config = TrainConfig::default();
    let store = PatchStore::extract(train, config.patch_size, config.overlap)?;

    let report = compare_fp(&config, &store, val, &[0, 1, 2])?;
    println!("seed  fp     epochs to {}%  final dice", report.target_dice_pct);
    for r in &report.runs {
        let reached = r.epochs_to_target.map_or("never".to_string(), |e| e.to_string());
        println!("{:>4}  {:<5}  {:>15}  {:.2}%", r.seed, r.fp_enabled, reached, r.final_dice_pct);
    }
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}
