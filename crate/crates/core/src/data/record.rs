use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "mri-like")]
    MriLike,
    #[serde(rename = "ct-like")]
    CtLike,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::MriLike => "mri-like",
            Modality::CtLike => "ct-like",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mri-like" => Ok(Modality::MriLike),
            "ct-like" => Ok(Modality::CtLike),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// One labelled volume: image `[C, D, H, W]` and labels `[D, H, W]`.
///
/// Image values are rounded to `f32` on construction, the precision they are
/// stored with on disk, so saving and loading a record is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub id: String,
    pub modality: Modality,
    /// Voxel spacing in mm; carried as metadata only.
    pub spacing: [f64; 3],
    pub num_classes: usize,
    image: Tensor,
    labels: LabelVolume,
}

impl VolumeRecord {
    pub fn new(
        id: impl Into<String>,
        modality: Modality,
        spacing: [f64; 3],
        num_classes: usize,
        image: Tensor,
        labels: LabelVolume,
    ) -> Result<Self> {
        let id = id.into();
        let [c, d, h, w] = image.shape()[..] else {
            return Err(Error::shape("volume_record", format!("image must be [C, D, H, W], got {:?}", image.shape())));
        };
        if c == 0 || labels.dims() != [1, d, h, w] {
            return Err(Error::shape(
                "volume_record",
                format!("image {:?} and labels {:?} are not congruent", image.shape(), labels.dims()),
            ));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::invalid("volume_record", format!("class count {num_classes} outside 1..=256")));
        }
        labels.check_range(num_classes)?;
        let image = image.map(|v| v as f32 as f64);
        if !image.all_finite() {
            return Err(Error::NonFinite { op: "volume_record" });
        }
        Ok(Self {
            id,
            modality,
            spacing,
            num_classes,
            image,
            labels,
        })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    /// Labels as a batch of one, `[1, D, H, W]`.
    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn extent(&self) -> [usize; 3] {
        let [_, d, h, w] = self.labels.dims();
        [d, h, w]
    }
}
