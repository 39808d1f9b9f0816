//! CIFAR-10 binary batches: 10000 records of 3073 bytes, one label byte
//! (0-9) followed by 1024 red, 1024 green and 1024 blue bytes, each plane
//! row-major 32x32.

use std::fs;
use std::path::Path;

use super::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_BYTES: usize = 3073;
pub const PIXELS: usize = 3072;
pub const RECORDS_PER_BATCH: usize = 10_000;
pub const BATCH_BYTES: usize = RECORD_BYTES * RECORDS_PER_BATCH;
pub const CLASSES: usize = 10;

/// Parses whole records, appending pixels scaled by 1/255 and labels.
/// `first_record` only affects error messages.
pub fn parse_records(
    bytes: &[u8],
    first_record: usize,
    pixels: &mut Vec<f64>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    for (k, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label as usize >= CLASSES {
            return Err(Error::Format(format!(
                "record {} has label byte {label} (expected 0-9)",
                first_record + k
            )));
        }
        labels.push(label as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

fn read_batch(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() != BATCH_BYTES {
        return Err(Error::Format(format!(
            "{} has {} bytes, expected {BATCH_BYTES}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn assemble(name: &str, files: &[std::path::PathBuf]) -> Result<LabeledDataset> {
    let mut pixels = Vec::with_capacity(files.len() * RECORDS_PER_BATCH * PIXELS);
    let mut labels = Vec::with_capacity(files.len() * RECORDS_PER_BATCH);
    for (b, path) in files.iter().enumerate() {
        let bytes = read_batch(path)?;
        parse_records(&bytes, b * RECORDS_PER_BATCH, &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    let mut ds = LabeledDataset::new(name, Tensor::matrix(n, PIXELS, pixels)?, labels, CLASSES)?;
    ds.image = true;
    Ok(ds)
}

/// Loads the 50000-example training split (`data_batch_1.bin` .. `data_batch_5.bin`).
pub fn load_cifar10(dir: &Path) -> Result<LabeledDataset> {
    let files: Vec<_> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    assemble("cifar10-train", &files)
}

/// Loads `test_batch.bin`.
pub fn load_cifar10_test(dir: &Path) -> Result<LabeledDataset> {
    assemble("cifar10-test", &[dir.join("test_batch.bin")])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; RECORD_BYTES];
        r[0] = label;
        r
    }

    #[test]
    fn parses_label_and_channel_planes() {
        let mut rec = record(7, 0);
        rec[1] = 255; // red (0,0)
        rec[1 + 1024 + 33] = 51; // green (1,1)
        rec[1 + 2048 + 1023] = 102; // blue (31,31)
        let (mut px, mut lb) = (Vec::new(), Vec::new());
        parse_records(&rec, 0, &mut px, &mut lb).unwrap();
        assert_eq!(lb, vec![7]);
        assert_eq!(px.len(), PIXELS);
        assert_eq!(px[0], 1.0);
        assert_eq!(px[1024 + 33], 0.2);
        assert_eq!(px[2048 + 1023], 0.4);
    }

    #[test]
    fn zero_record_is_zero_vector() {
        let (mut px, mut lb) = (Vec::new(), Vec::new());
        parse_records(&record(0, 0), 0, &mut px, &mut lb).unwrap();
        assert!(px.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_label_names_record() {
        let mut bytes = record(1, 3);
        bytes.extend(record(11, 3));
        let err = parse_records(&bytes, 20_000, &mut Vec::new(), &mut Vec::new()).unwrap_err();
        assert!(err.to_string().contains("record 20001"), "{err}");
        assert!(err.to_string().contains("11"));
    }

    #[test]
    fn partial_record_rejected() {
        let err = parse_records(&[0u8; 100], 0, &mut Vec::new(), &mut Vec::new()).unwrap_err();
        assert!(err.to_string().contains("100 bytes"));
    }
}
