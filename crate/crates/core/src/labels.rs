//! Integer label volumes `[N, D, H, W]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 4],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 4], data: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "labels",
                format!("dims {dims:?} need {} labels, got {}", dims.iter().product::<usize>(), data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> u8) -> Self {
        let [n, d, h, w] = dims;
        let mut data = Vec::with_capacity(n * d * h * w);
        for s in 0..n {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(s, z, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// Stacks single-sample volumes along the batch axis.
    pub fn stack(parts: &[&LabelVolume]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("labels", "empty stack"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.dims[1..] != first.dims[1..] {
                return Err(Error::shape("labels", format!("{:?} vs {:?}", p.dims, first.dims)));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Self::new([n, first.dims[1], first.dims[2], first.dims[3]], data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn spatial(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    /// Shape of a `channels`-channel tensor aligned with this volume.
    pub fn tensor_shape(&self, channels: usize) -> Vec<usize> {
        let [n, d, h, w] = self.dims;
        vec![n, channels, d, h, w]
    }

    pub fn check_range(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= num_classes) {
            Some(l) => Err(Error::invalid(
                "labels",
                format!("label {l} outside 0..{num_classes}"),
            )),
            None => Ok(()),
        }
    }

    /// `[N, K, D, H, W]` one-hot encoding.
    pub fn one_hot(&self, num_classes: usize) -> Result<Tensor> {
        self.check_range(num_classes)?;
        let spatial = self.spatial();
        let mut out = vec![0.0; self.batch() * num_classes * spatial];
        for (i, &l) in self.data.iter().enumerate() {
            let (s, v) = (i / spatial, i % spatial);
            out[(s * num_classes + l as usize) * spatial + v] = 1.0;
        }
        Tensor::new(self.tensor_shape(num_classes), out)
    }

    /// Class indices as a `[N, 1, D, H, W]` float field.
    pub fn as_field(&self) -> Tensor {
        Tensor::new(self.tensor_shape(1), self.data.iter().map(|&l| l as f64).collect())
            .expect("shape matches label count")
    }

    /// Voxel count of class `c`.
    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&l| l == class).count()
    }

    /// Single sample `n` as a batch of one.
    pub fn sample(&self, n: usize) -> LabelVolume {
        let s = self.spatial();
        LabelVolume {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * s..(n + 1) * s].to_vec(),
        }
    }
}

/// Per-voxel argmax over channels of `[N, K, D, H, W]`; ties go to the lowest class.
pub fn argmax_channels(scores: &Tensor) -> Result<LabelVolume> {
    let dims = scores.dims5("argmax_channels")?;
    if dims.c > 256 {
        return Err(Error::invalid("argmax_channels", "more than 256 classes"));
    }
    let spatial = dims.spatial();
    let mut out = Vec::with_capacity(dims.n * spatial);
    for s in 0..dims.n {
        for v in 0..spatial {
            let mut best = 0;
            let mut best_val = scores.data()[s * dims.c * spatial + v];
            for c in 1..dims.c {
                let val = scores.data()[(s * dims.c + c) * spatial + v];
                if val > best_val {
                    best = c;
                    best_val = val;
                }
            }
            out.push(best as u8);
        }
    }
    LabelVolume::new([dims.n, dims.d, dims.h, dims.w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_and_range() {
        let l = LabelVolume::new([1, 1, 1, 3], vec![0, 2, 1]).unwrap();
        let oh = l.one_hot(3).unwrap();
        assert_eq!(oh.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(l.one_hot(2).is_err());
        assert_eq!(l.as_field().data(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::new(vec![1, 3, 1, 1, 2], vec![0.5, 0.1, 0.5, 0.2, 0.0, 0.7]).unwrap();
        assert_eq!(argmax_channels(&t).unwrap().data(), &[0, 2]);
    }
}
