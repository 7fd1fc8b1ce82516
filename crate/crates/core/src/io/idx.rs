//! IDX (MNIST-style) image and label files.
//!
//! Header is big-endian: two zero bytes, a type code (`0x08` = u8), the
//! number of dimensions, then one u32 per dimension.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct IdxData {
    pub rows: usize,
    pub cols: usize,
    /// One image per row, pixels scaled to `[0, 1]`.
    pub images: Matrix,
    pub labels: Vec<usize>,
}

fn header(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, usize)> {
    let ndim = (magic & 0xff) as usize;
    let len = 4 + 4 * ndim;
    let truncated = || Error::Format(format!("{what}: truncated header ({} bytes)", bytes.len()));
    let got = u32::from_be_bytes(bytes.get(0..4).ok_or_else(truncated)?.try_into().unwrap());
    if got != magic {
        return Err(Error::Format(format!("{what}: magic {got:#010x}, expected {magic:#010x}")));
    }
    if bytes.len() < len {
        return Err(truncated());
    }
    let dims = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    Ok((dims, len))
}

pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Matrix)> {
    let (dims, off) = header(bytes, IMAGES_MAGIC, "images")?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("images: empty dimensions {n}x{h}x{w}")));
    }
    let body = &bytes[off..];
    if body.len() != n * h * w {
        return Err(Error::Format(format!(
            "images: header promises {} pixels, file has {}",
            n * h * w,
            body.len()
        )));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((h, w, Matrix::new(n, h * w, data)?))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (dims, off) = header(bytes, LABELS_MAGIC, "labels")?;
    let body = &bytes[off..];
    if body.len() != dims[0] {
        return Err(Error::Format(format!(
            "labels: header promises {}, file has {}",
            dims[0],
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<IdxData> {
    let (rows, cols, images) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != images.rows() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    Ok(IdxData {
        rows,
        cols,
        images,
        labels,
    })
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<IdxData> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    parse_idx(&img, &lab)
}

/// Serializes images (values in `[0, 255]`) and labels; used for fixtures.
pub fn encode_idx(n: usize, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [n, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = LABELS_MAGIC.to_be_bytes().to_vec();
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_two_images() {
        let (img, lab) = encode_idx(2, 2, 3, &[0, 255, 51, 0, 0, 0, 1, 2, 3, 4, 5, 255], &[7, 1]);
        let d = parse_idx(&img, &lab).unwrap();
        assert_eq!((d.rows, d.cols), (2, 3));
        assert_eq!(d.labels, vec![7, 1]);
        assert_eq!(d.images[(0, 1)], 1.0);
        assert_eq!(d.images[(0, 2)], 0.2);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let (img, lab) = encode_idx(1, 2, 2, &[1, 2, 3, 4], &[0]);
        let mut bad = img.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_images(&bad), Err(Error::Format(_))));
        assert!(matches!(parse_images(&img[..img.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(parse_images(&img[..6]), Err(Error::Format(_))));
        assert!(matches!(parse_labels(&img), Err(Error::Format(_))));
        let (_, lab2) = encode_idx(1, 2, 2, &[1, 2, 3, 4], &[0, 1]);
        assert!(parse_idx(&img, &lab2).is_err());
        assert!(parse_idx(&img, &lab).is_ok());
    }
}
