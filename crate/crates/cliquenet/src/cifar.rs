//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 32x32 red, green and blue planes.

use std::path::{Path, PathBuf};

use cliquenet_core::train::{DatasetSource, Split};
use cliquenet_core::Tensor;

use crate::error::{CliError, Result};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const RECORD: usize = 1 + PIXELS;
pub const CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

/// Parses concatenated records; pixels are scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<DatasetSource<f32>> {
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(CliError::format(
            "CIFAR-10 batch",
            format!("{} bytes is not a positive multiple of the {RECORD}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(CliError::format("CIFAR-10 batch", format!("record {i} has label {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(&[n, 3, SIDE, SIDE], pixels)?;
    Ok(DatasetSource::new(images, labels, CLASSES, split)?)
}

pub fn load_cifar10_file(path: &Path, split: Split) -> Result<DatasetSource<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_cifar10(&bytes, split).map_err(|e| match e {
        CliError::Format { what, detail } => CliError::Format { what, detail: format!("{}: {detail}", path.display()) },
        other => other,
    })
}

fn load_many(paths: &[PathBuf], split: Split) -> Result<DatasetSource<f32>> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
        if chunk.len() % RECORD != 0 {
            return Err(CliError::format("CIFAR-10 batch", format!("{}: truncated ({} bytes)", p.display(), chunk.len())));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes, split)
}

/// Loads a CIFAR-10 directory (`data_batch_{1..5}.bin`, `test_batch.bin`)
/// and normalizes both splits with the training statistics.
pub fn load_cifar10(dir: &Path) -> Result<(DatasetSource<f32>, DatasetSource<f32>)> {
    let train_paths: Vec<PathBuf> = TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    let train = load_many(&train_paths, Split::Train)?;
    let test = load_cifar10_file(&dir.join(TEST_FILE), Split::Test)?;
    let (mean, std) = (train.mean.clone(), train.std.clone());
    Ok((train.normalized_with(&mean, &std)?, test.normalized_with(&mean, &std)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_zero_record() {
        let mut rec = vec![0u8; RECORD];
        rec[0] = 3;
        let ds = parse_cifar10(&rec, Split::Test).unwrap();
        assert_eq!(ds.labels, [3]);
        assert!(ds.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn record_count_from_size() {
        assert_eq!(30_730_000 / RECORD, 10_000);
        assert_eq!(30_730_000 % RECORD, 0);
        let bytes = vec![1u8; 4 * RECORD];
        assert_eq!(parse_cifar10(&bytes, Split::Train).unwrap().len(), 4);
    }

    #[test]
    fn malformed_batches() {
        assert!(matches!(parse_cifar10(&vec![0u8; RECORD + 1], Split::Train), Err(CliError::Format { .. })));
        let mut rec = vec![0u8; RECORD];
        rec[0] = 10;
        assert!(matches!(parse_cifar10(&rec, Split::Train), Err(CliError::Format { .. })));
    }

    #[test]
    fn planes_are_channel_major_and_scaled() {
        let mut rec = vec![0u8; RECORD];
        rec[1] = 255; // first red pixel
        rec[1 + SIDE * SIDE] = 51; // first green pixel
        let ds = parse_cifar10(&rec, Split::Train).unwrap();
        assert_eq!(ds.images.plane(0, 0)[0], 1.0);
        assert!((ds.images.plane(0, 1)[0] - 0.2).abs() < 1e-7);
    }
}
