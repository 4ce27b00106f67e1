use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::egv::load_volume;
use crate::data::record::VolumeRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// EGV1 file, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub split: Split,
}

/// TOML list of volume files with their split assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub classes: usize,
    #[serde(rename = "records")]
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub const VERSION: u32 = 1;

    pub fn new(classes: usize, entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: Self::VERSION,
            classes,
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        if m.version != Self::VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", m.version)));
        }
        m.base_dir = base_dir.into();
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn paths(&self, split: Split) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| self.resolve(e))
            .collect()
    }

    /// Loads every record of `split`, checking the class count.
    pub fn load_split(&self, split: Split) -> Result<Vec<VolumeRecord>> {
        self.paths(split)
            .iter()
            .map(|p| {
                let rec = load_volume(p)?;
                if rec.num_classes != self.classes {
                    return Err(Error::Record {
                        id: rec.id.clone(),
                        source: Box::new(Error::Config(format!(
                            "record has {} classes, manifest declares {}",
                            rec.num_classes, self.classes
                        ))),
                    });
                }
                Ok(rec)
            })
            .collect()
    }
}
