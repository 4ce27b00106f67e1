//! Volume records, synthetic phantoms, normalization, splits and file formats.

mod dataset;
mod egv;
mod manifest;
mod normalize;
mod phantom;
mod record;
mod split;

pub use dataset::{generate_phantoms, write_dataset};
pub use egv::{decode_volume, encode_volume, load_volume, save_volume, EGV1_MAGIC, EGV1_VERSION};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use normalize::{normalize, normalize_ct, normalize_mri};
pub use phantom::{generate_phantom, PhantomSpec};
pub use record::{Modality, VolumeRecord};
pub use split::split_dataset;
