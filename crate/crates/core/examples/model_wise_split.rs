//! Disjoint per-model validation sets drawn from one case manifest.
//!
//!     cargo run --example model_wise_split

use fp_volseg::data::{split_model_wise, CaseRecord};

fn main() -> fp_volseg::Result<()> {
    let cases: Vec<CaseRecord> = (0..200)
        .map(|i| CaseRecord {
            case_id: format!("case{i:04}"),
            has_lesion: i % 2 == 0,
        })
        .collect();
    let split = split_model_wise(&cases, 3, 30, 20, 42)?;
    for (k, set) in split.val_sets.iter().enumerate() {
        println!("model {k}: {} validation cases, first {:?}", set.len(), &set[..3]);
    }
    println!("shared training pool: {} cases", split.train_pool.len());

    let again = split_model_wise(&cases, 3, 30, 20, 42)?;
    println!("same seed reproduces the split: {}", again == split);
    match split_model_wise(&cases, 3, 40, 30, 42) {
        Ok(_) => println!("unexpectedly fit"),
        Err(e) => println!("3 × (40 + 30) cases: {e}"),
    }
    Ok(())
}
