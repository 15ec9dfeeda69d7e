//! Writes a phantom case to FPVOL files and reads it back.
//!
//!     cargo run --example fpvol_roundtrip [out_dir]

use fp_volseg::data::{generate_phantom, PhantomSpec};
use fp_volseg::volume::{encode_volume, load_volume, save_volume};

fn main() -> fp_volseg::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, Into::into);
    let ph = generate_phantom(&PhantomSpec::desk([32, 40, 48], 2, 3))?;
    for (name, v) in [("ct", &ph.ct), ("pet", &ph.pet), ("mask", &ph.mask)] {
        let path = dir.join(format!("roundtrip_{name}.fpvol"));
        save_volume(v, &path)?;
        let back = load_volume(&path)?;
        let bytes = encode_volume(v);
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        println!(
            "{:<4} {} bytes, header {}, identical after reload: {}",
            name,
            bytes.len(),
            String::from_utf8_lossy(&bytes[12..12 + header_len]),
            back == *v
        );
    }
    println!("lesions: {:?}", ph.lesions);
    Ok(())
}
