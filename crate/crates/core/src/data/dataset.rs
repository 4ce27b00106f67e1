use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::egv::save_volume;
use crate::data::manifest::{Manifest, ManifestEntry, Split};
use crate::data::phantom::{generate_phantom, PhantomSpec};
use crate::data::record::{Modality, VolumeRecord};
use crate::data::split::split_dataset;
use crate::error::{Error, Result};

impl PhantomSpec {
    /// Default recipe with radii scaled from the 32-voxel defaults to `extent`;
    /// lesions keep a one-voxel margin inside the smallest organ.
    pub fn scaled(extent: usize, modality: Modality, classes: usize, seed: u64) -> Self {
        let f = extent as f64 / 32.0;
        let base = Self::new(modality, classes, seed);
        Self {
            extent,
            organ_radius: base.organ_radius.map(|r| r * f),
            lesion_radius: base.lesion_radius.map(|r| (r * f).min(base.organ_radius[0] * f - 1.0).max(0.5)),
            organ_jitter: base.organ_jitter * f,
            ..base
        }
    }
}

/// Phantoms `0..count` derived from one seed.
pub fn generate_phantoms(
    count: usize,
    extent: usize,
    classes: usize,
    modality: Modality,
    seed: u64,
) -> Result<Vec<VolumeRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let spec = PhantomSpec {
                id: format!("phantom_{i:04}"),
                ..PhantomSpec::scaled(extent, modality, classes, rng.next_u64())
            };
            generate_phantom(&spec)
        })
        .collect()
}

/// Writes records as EGV1 files plus `manifest.toml` with a seeded split;
/// `train_fraction >= 1` (or a single record) puts everything in training.
pub fn write_dataset(records: &[VolumeRecord], out_dir: &Path, train_fraction: f64, seed: u64) -> Result<Manifest> {
    let classes = records
        .first()
        .ok_or_else(|| Error::invalid("write_dataset", "no records"))?
        .num_classes;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let val = if train_fraction >= 1.0 || records.len() < 2 {
        Vec::new()
    } else {
        split_dataset(&(0..records.len()).collect::<Vec<_>>(), train_fraction, seed)?.1
    };
    let mut split = vec![Split::Train; records.len()];
    for &i in &val {
        split[i] = Split::Val;
    }
    let mut entries = Vec::with_capacity(records.len());
    for (rec, split) in records.iter().zip(split) {
        if rec.num_classes != classes {
            return Err(Error::Record {
                id: rec.id.clone(),
                source: Box::new(Error::invalid("write_dataset", "class counts differ between records")),
            });
        }
        let name = format!("{}.egv", rec.id);
        save_volume(rec, &out_dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name.into(),
            split,
        });
    }
    let manifest = Manifest::new(classes, entries, out_dir);
    manifest.save(&out_dir.join("manifest.toml"))?;
    Ok(manifest)
}
