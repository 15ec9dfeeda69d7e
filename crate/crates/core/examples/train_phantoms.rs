//! Trains the toy logistic model on synthetic PET/CT phantoms with the
//! hard-patch curriculum on, and prints per-epoch statistics.
//!
//!     cargo run --release --example train_phantoms [epochs]

use std::time::Instant;

use fp_volseg::data::{generate_phantom, PhantomSpec};
use fp_volseg::train::{fit, CaseVolumes, PatchStore, TrainConfig};

fn main() -> fp_volseg::Result<()> {
    let epochs = std::env::args().nth(1).map_or(10, |s| s.parse().expect("epochs must be an integer"));
    let t0 = Instant::now();
    let cases = (0..10u64)
        .map(|i| {
            let ph = generate_phantom(&PhantomSpec::desk([64; 3], 3, 100 + i))?;
            CaseVolumes::from_raw(format!("case{i}"), &ph.ct, &ph.pet, ph.mask)
        })
        .collect::<fp_volseg::Result<Vec<_>>>()?;
    let (train, val) = cases.split_at(8);

    let config = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let store = PatchStore::extract(train, config.patch_size, config.overlap)?;
    println!("{} training patches, {} validation cases", store.len(), val.len());

    let out = fit(&config, &store, val)?;
    for s in &out.stats {
        println!(
            "epoch {:>2}  loss {:.4}  val dice {:6.2}%  lr {:.3e}  plan {:>3}  hard {:>3}  excluded {:>2}",
            s.epoch, s.mean_train_loss, s.val_dice_pct, s.lr_used, s.plan_len, s.hard_count, s.excluded_count
        );
    }
    println!("model {:?}", out.model);
    println!("elapsed {:.1?}", t0.elapsed());
    Ok(())
}
