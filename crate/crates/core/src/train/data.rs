//! In-memory datasets, per-channel normalization and a synthetic source.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound on the divisor used by [`normalize`].
pub const STD_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct DatasetSource<T> {
    /// `N x C x H x W`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-channel statistics of these images.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub split: Split,
}

/// Per-channel population mean and standard deviation over N, H, W.
pub fn channel_stats<T: Scalar>(images: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, _, _) = images.dims4("channel_stats")?;
    let mut mean = alloc::vec![0.0; c];
    let mut std = alloc::vec![0.0; c];
    for ch in 0..c {
        let mut count = 0usize;
        let mut sum = 0.0;
        for i in 0..n {
            for v in images.plane(i, ch) {
                sum += v.as_f64();
                count += 1;
            }
        }
        let m = if count > 0 { sum / count as f64 } else { 0.0 };
        let mut sq = 0.0;
        for i in 0..n {
            for v in images.plane(i, ch) {
                let d = v.as_f64() - m;
                sq += d * d;
            }
        }
        mean[ch] = m;
        std[ch] = if count > 0 { num_traits::Float::sqrt(sq / count as f64) } else { 0.0 };
    }
    Ok((mean, std))
}

/// `(x - mean) / max(std, 1e-7)` per channel.
pub fn normalize<T: Scalar>(images: &Tensor<T>, mean: &[f64], std: &[f64]) -> Result<Tensor<T>> {
    let (n, c, h, w) = images.dims4("normalize")?;
    if mean.len() != c || std.len() != c {
        return Err(crate::error::dim_err(
            "normalize",
            format!("{} means and {} stds for channel axis C={c}", mean.len(), std.len()),
        ));
    }
    let plane = h * w;
    let mut out = images.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (idx / plane) % c;
        *v = T::lit((v.as_f64() - mean[ch]) / std[ch].max(STD_FLOOR));
    }
    debug_assert_eq!(out.numel(), n * c * plane);
    Ok(out)
}

impl<T: Scalar> DatasetSource<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let (n, _, _, _) = images.dims4("dataset")?;
        if n != labels.len() {
            return Err(Error::Input(format!("{n} images but {} labels", labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Input(format!("label {l} at record {i} outside [0, {num_classes})")));
        }
        let (mean, std) = channel_stats(&images)?;
        Ok(Self { images, labels, num_classes, mean, std, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Normalizes with the given statistics (normally the training split's).
    pub fn normalized_with(&self, mean: &[f64], std: &[f64]) -> Result<Self> {
        Self::new(normalize(&self.images, mean, std)?, self.labels.clone(), self.num_classes, self.split)
    }

    /// Gathers the listed records into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!("record {i} out of range for {} records", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }
}

/// Synthetic `classes`-way set of `size x size` images: noise in `[0, 0.5)`
/// plus a bright vertical band whose column range encodes the label. Classes
/// are balanced and interleaved.
pub fn synthetic_bands<T: Scalar, R: Rng + ?Sized>(
    count: usize,
    classes: usize,
    channels: usize,
    size: usize,
    split: Split,
    rng: &mut R,
) -> Result<DatasetSource<T>> {
    if classes < 2 || size < classes {
        return Err(Error::Usage(format!("cannot draw {classes} bands on {size} columns")));
    }
    let noise = Uniform::new(0.0, 0.5).expect("valid range");
    let band = size / classes;
    let mut data = Vec::with_capacity(count * channels * size * size);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        labels.push(label);
        for _ in 0..channels {
            for _ in 0..size {
                for col in 0..size {
                    let lit = col / band == label || (label == classes - 1 && col >= band * classes);
                    let v = noise.sample(rng) + if lit { 0.5 } else { 0.0 };
                    data.push(T::lit(v));
                }
            }
        }
    }
    DatasetSource::new(Tensor::new(&[count, channels, size, size], data)?, labels, classes, split)
}
