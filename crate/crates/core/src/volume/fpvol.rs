//! FPVOL on-disk format.
//!
//! ```text
//! 0..8        magic "FPVOL001"
//! 8..12       u32 LE, JSON header length H
//! 12..12+H    UTF-8 JSON: {"shape":[z,y,x],"spacing_mm":[z,y,x],"dtype":"f32"|"u8","kind":...}
//! 12+H..      payload, little-endian, C order
//! ```
//!
//! Masks are written as `u8`, everything else as `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{voxel_count, Shape, Spacing, Volume3D, VolumeKind};
use crate::{Error, Result};

pub const FPVOL_MAGIC: &[u8; 8] = b"FPVOL001";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Shape,
    spacing_mm: Spacing,
    dtype: Dtype,
    kind: VolumeKind,
}

pub fn encode_volume(v: &Volume3D) -> Vec<u8> {
    let dtype = match v.kind() {
        VolumeKind::Mask => Dtype::U8,
        _ => Dtype::F32,
    };
    let header = serde_json::to_vec(&Header {
        shape: v.shape(),
        spacing_mm: v.spacing(),
        dtype,
        kind: v.kind(),
    })
    .expect("header serialization cannot fail");

    let mut out = Vec::with_capacity(12 + header.len() + v.len() * dtype.width());
    out.extend_from_slice(FPVOL_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    match dtype {
        Dtype::U8 => out.extend(v.data().iter().map(|&x| x as u8)),
        Dtype::F32 => {
            for &x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() < 8 || &bytes[..8] != FPVOL_MAGIC {
        return Err(Error::Format("missing FPVOL001 magic".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Corrupt("truncated before header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Corrupt(format!(
            "header declares {hlen} bytes but only {} remain",
            body.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;
    if header.dtype == Dtype::U8 && header.kind != VolumeKind::Mask {
        return Err(Error::Format(format!("dtype u8 is only valid for masks, got {}", header.kind)));
    }
    if header.shape.contains(&0) {
        return Err(Error::Corrupt(format!("shape {:?} has a zero axis", header.shape)));
    }
    let n = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Corrupt("shape overflows".into()))?;
    debug_assert_eq!(n, voxel_count(header.shape));
    let payload = &body[hlen..];
    if payload.len() != n * header.dtype.width() {
        return Err(Error::Corrupt(format!(
            "shape {:?} {:?} needs {} payload bytes, found {}",
            header.shape,
            header.dtype,
            n * header.dtype.width(),
            payload.len()
        )));
    }
    let data: Vec<f32> = match header.dtype {
        Dtype::U8 => payload.iter().map(|&b| b as f32).collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Volume3D::new(header.shape, header.spacing_mm, data, header.kind).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::Corrupt(other.to_string()),
    })
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_volume(v))
}

/// Write `bytes` to a temp file next to `path`, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);

    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(path, e))?;
    let written = f.write_all(bytes).and_then(|_| f.sync_all());
    drop(f);
    if let Err(e) = written.and_then(|_| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
