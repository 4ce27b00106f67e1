use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::record::{Modality, VolumeRecord};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::Tensor;

/// Recipe for a synthetic volume of nested ellipsoids.
///
/// Class 1 ("organ") is a union of `organs` ellipsoids; class 2 ("lesion") is
/// a union of smaller ellipsoids clipped to the interior of the organ mask so
/// that every lesion voxel has only organ or lesion voxels as neighbours.
/// Classes beyond 2 are not generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub id: String,
    pub extent: usize,
    pub classes: usize,
    pub organs: usize,
    pub lesions_per_organ: usize,
    /// Per-axis semi-axis range in voxels.
    pub organ_radius: [f64; 2],
    pub lesion_radius: [f64; 2],
    /// Maximum offset of an organ centre from the volume centre.
    pub organ_jitter: f64,
    pub modality: Modality,
    /// Mean intensity per class; length must equal `classes`.
    pub intensity_means: Vec<f64>,
    /// Noise standard deviation per class; length must equal `classes`.
    pub noise_std: Vec<f64>,
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::new(Modality::MriLike, 3, 0)
    }
}

impl PhantomSpec {
    /// Default 32-voxel recipe with modality-typical intensities.
    pub fn new(modality: Modality, classes: usize, seed: u64) -> Self {
        let (means, noise) = match modality {
            Modality::MriLike => (vec![0.0, 100.0, 180.0], vec![0.0, 20.0, 20.0]),
            Modality::CtLike => (vec![-800.0, 40.0, 160.0], vec![30.0, 30.0, 30.0]),
        };
        let pad = |v: Vec<f64>, fill: f64| {
            let mut v = v;
            v.resize(classes, fill);
            v
        };
        Self {
            id: format!("phantom-{seed}"),
            extent: 32,
            classes,
            organs: 1,
            lesions_per_organ: 1,
            organ_radius: [8.0, 12.0],
            lesion_radius: [3.0, 6.0],
            organ_jitter: 3.0,
            modality,
            intensity_means: pad(means, 0.0),
            noise_std: pad(noise, 0.0),
            spacing: [1.0, 1.0, 1.0],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("generate_phantom", detail));
        if self.extent == 0 {
            return bad("extent must be positive".into());
        }
        if self.classes == 0 || self.classes > 256 {
            return bad(format!("class count {} outside 1..=256", self.classes));
        }
        if self.intensity_means.len() != self.classes || self.noise_std.len() != self.classes {
            return bad("intensity means and noise need one entry per class".into());
        }
        if self.noise_std.iter().any(|&s| !(s >= 0.0 && s.is_finite()))
            || self.intensity_means.iter().any(|m| !m.is_finite())
        {
            return bad("intensities must be finite with non-negative noise".into());
        }
        if self.modality == Modality::MriLike && (self.intensity_means[0] != 0.0 || self.noise_std[0] != 0.0) {
            return bad("mri-like background must be exactly zero".into());
        }
        for (name, [lo, hi]) in [("organ", self.organ_radius), ("lesion", self.lesion_radius)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("degenerate {name} radius range [{lo}, {hi}]"));
            }
        }
        if self.classes >= 2 && self.organs == 0 {
            return bad("at least one organ is required for a foreground class".into());
        }
        if self.classes >= 3 && self.lesions_per_organ > 0 && self.lesion_radius[1] + 1.0 > self.organ_radius[0] {
            return bad(format!(
                "lesion radius {} does not fit inside organ radius {}",
                self.lesion_radius[1], self.organ_radius[0]
            ));
        }
        if !(self.organ_jitter >= 0.0) {
            return bad("organ jitter must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.centre[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn radii(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> [f64; 3] {
    std::array::from_fn(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
}

fn offset(rng: &mut ChaCha8Rng, max: f64) -> [f64; 3] {
    std::array::from_fn(|_| if max == 0.0 { 0.0 } else { rng.random_range(-max..=max) })
}

fn rasterize(n: usize, shapes: &[Ellipsoid]) -> Vec<bool> {
    let mut mask = vec![false; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                mask[(z * n + y) * n + x] = shapes.iter().any(|e| e.contains([z, y, x]));
            }
        }
    }
    mask
}

/// Voxels whose whole 26-neighbourhood (clipped at the borders) lies in `mask`.
fn interior(n: usize, mask: &[bool]) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    let range = |c: usize| c.saturating_sub(1)..=(c + 1).min(n - 1);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                out[(z * n + y) * n + x] = range(z)
                    .all(|zz| range(y).all(|yy| range(x).all(|xx| mask[(zz * n + yy) * n + xx])));
            }
        }
    }
    out
}

/// Generates one single-channel phantom; deterministic in `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<VolumeRecord> {
    spec.validate()?;
    let n = spec.extent;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mid = (n as f64 - 1.0) / 2.0;
    let mut labels = vec![0u8; n * n * n];
    if spec.classes >= 2 {
        let mut organs = Vec::with_capacity(spec.organs);
        let mut lesions = Vec::new();
        for _ in 0..spec.organs {
            let jitter = offset(&mut rng, spec.organ_jitter);
            let organ = Ellipsoid {
                centre: std::array::from_fn(|a| mid + jitter[a]),
                radii: radii(&mut rng, spec.organ_radius),
            };
            for _ in 0..spec.lesions_per_organ {
                let r = radii(&mut rng, spec.lesion_radius);
                let slack: [f64; 3] = std::array::from_fn(|a| (organ.radii[a] - r[a] - 1.0).max(0.0) / 3.0_f64.sqrt());
                let centre = std::array::from_fn(|a| {
                    organ.centre[a] + if slack[a] == 0.0 { 0.0 } else { rng.random_range(-slack[a]..=slack[a]) }
                });
                lesions.push(Ellipsoid { centre, radii: r });
            }
            organs.push(organ);
        }
        let organ_mask = rasterize(n, &organs);
        for (l, &m) in labels.iter_mut().zip(&organ_mask) {
            if m {
                *l = 1;
            }
        }
        if spec.classes >= 3 && !lesions.is_empty() {
            let allowed = interior(n, &organ_mask);
            let lesion_mask = rasterize(n, &lesions);
            for ((l, &a), &m) in labels.iter_mut().zip(&allowed).zip(&lesion_mask) {
                if a && m {
                    *l = 2;
                }
            }
        }
        if labels.iter().all(|&l| l == 0) {
            return Err(Error::invalid("generate_phantom", "no foreground voxel inside the volume"));
        }
    }
    let noise: Vec<Normal<f64>> = spec
        .noise_std
        .iter()
        .map(|&s| Normal::new(0.0, s).expect("validated noise"))
        .collect();
    let image: Vec<f64> = labels
        .iter()
        .map(|&l| {
            let c = l as usize;
            let base = spec.intensity_means[c];
            if spec.noise_std[c] == 0.0 {
                base
            } else {
                base + noise[c].sample(&mut rng)
            }
        })
        .collect();
    VolumeRecord::new(
        spec.id.clone(),
        spec.modality,
        spec.spacing,
        spec.classes,
        Tensor::new(vec![1, n, n, n], image)?,
        LabelVolume::new([1, n, n, n], labels)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_has_all_classes() {
        let rec = generate_phantom(&PhantomSpec::default()).unwrap();
        for c in 0..3 {
            assert!(rec.labels().count(c) > 0, "class {c} missing");
        }
    }

    #[test]
    fn rejects_degenerate_radii() {
        let spec = PhantomSpec {
            organ_radius: [0.0, 4.0],
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec).is_err());
        let spec = PhantomSpec {
            lesion_radius: [5.0, 3.0],
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn mri_background_is_zero() {
        let rec = generate_phantom(&PhantomSpec::default()).unwrap();
        for (v, &l) in rec.image().data().iter().zip(rec.labels().data()) {
            assert_eq!(*v == 0.0, l == 0);
        }
    }
}
