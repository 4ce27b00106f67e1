use crate::data::record::Modality;
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};

/// Standardizes non-zero voxels to zero mean and unit (population) standard
/// deviation; exact zeros are left in place.
pub fn normalize_mri(image: &Tensor) -> Result<Tensor> {
    let nonzero: Vec<f64> = image.data().iter().copied().filter(|&v| v != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::invalid("normalize_mri", "image has no non-zero voxels"));
    }
    let mean = pairwise_sum(&nonzero) / nonzero.len() as f64;
    let sq: Vec<f64> = nonzero.iter().map(|v| (v - mean) * (v - mean)).collect();
    let std = (pairwise_sum(&sq) / nonzero.len() as f64).sqrt();
    if !(std > 0.0) {
        return Err(Error::invalid("normalize_mri", "non-zero voxels have zero variance"));
    }
    Ok(image.map(|v| if v == 0.0 { 0.0 } else { (v - mean) / std }))
}

/// `clamp(x / 1000, -1, 1)`.
pub fn normalize_ct(image: &Tensor) -> Tensor {
    image.map(|v| (v / 1000.0).clamp(-1.0, 1.0))
}

/// The normalization scheme for `modality`.
pub fn normalize(image: &Tensor, modality: Modality) -> Result<Tensor> {
    match modality {
        Modality::MriLike => normalize_mri(image),
        Modality::CtLike => Ok(normalize_ct(image)),
    }
}
