//! EGV1 volume files.
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `EGV1` |
//! | 2 | format version, u16 little-endian (1) |
//! | 4 | header length `L`, u32 little-endian |
//! | L | UTF-8 JSON header: `id`, `modality`, `spacing`, `C`, `K`, `D`, `H`, `W` |
//! | 4·C·D·H·W | image, f32 little-endian, row-major, W fastest |
//! | D·H·W | labels, u8 |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::record::{Modality, VolumeRecord};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::Tensor;

pub const EGV1_MAGIC: &[u8; 4] = b"EGV1";
pub const EGV1_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    id: String,
    modality: Modality,
    spacing: [f64; 3],
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
}

pub fn encode_volume(record: &VolumeRecord) -> Vec<u8> {
    let [d, h, w] = record.extent();
    let header = Header {
        id: record.id.clone(),
        modality: record.modality,
        spacing: record.spacing,
        c: record.channels(),
        k: record.num_classes,
        d,
        h,
        w,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + header.len() + record.image().numel() * 4 + d * h * w);
    out.extend_from_slice(EGV1_MAGIC);
    out.extend_from_slice(&EGV1_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in record.image().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(record.labels().data());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.origin,
                format!("truncated {what}: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

/// Parses EGV1 bytes; `origin` names the source in error messages.
pub fn decode_volume(bytes: &[u8], origin: &str) -> Result<VolumeRecord> {
    let mut r = Reader { bytes, pos: 0, origin };
    let magic = r.take(4, "magic")?;
    if magic != EGV1_MAGIC {
        return Err(Error::format(origin, format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != EGV1_VERSION {
        return Err(Error::format(origin, format!("unknown format version {version}")));
    }
    let len = u32::from_le_bytes(r.take(4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| Error::format(origin, format!("invalid header: {e}")))?;
    let voxels = [header.d, header.h, header.w]
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format(origin, "volume size overflows"))?;
    let floats = voxels
        .checked_mul(header.c)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(origin, "volume size overflows"))?;
    let image: Vec<f64> = r
        .take(floats, "image payload")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    let labels = r.take(voxels, "label payload")?.to_vec();
    if r.pos != bytes.len() {
        return Err(Error::format(origin, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= header.k) {
        return Err(Error::format(origin, format!("label {bad} outside 0..{}", header.k)));
    }
    let image = Tensor::new(vec![header.c, header.d, header.h, header.w], image)?;
    let labels = LabelVolume::new([1, header.d, header.h, header.w], labels)?;
    VolumeRecord::new(header.id, header.modality, header.spacing, header.k, image, labels)
        .map_err(|e| Error::format(origin, e.to_string()))
}

pub fn save_volume(record: &VolumeRecord, path: &Path) -> Result<()> {
    fs::write(path, encode_volume(record)).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<VolumeRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, &path.display().to_string())
}
