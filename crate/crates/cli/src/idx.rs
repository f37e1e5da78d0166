//! IDX image/label files (the MNIST distribution format), optionally gzipped.

use std::io::Read;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use flate2::read::GzDecoder;
use scotopic::IntensityImage;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Reads a file, decompressing it when it starts with the gzip signature.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .with_context(|| format!("decompressing {}", path.display()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes
        .get(at..at + 4)
        .with_context(|| format!("header truncated: expected at least {} bytes, got {}", at + 4, bytes.len()))?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// `(rows, cols, pixels)` with pixels scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let magic = be_u32(bytes, 0)?;
    ensure!(magic == IMAGE_MAGIC, "bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}");
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        bail!("truncated image file: expected {expected} bytes, got {}", bytes.len());
    }
    let images = bytes[16..expected]
        .chunks_exact((rows * cols).max(1))
        .take(n)
        .map(|px| px.iter().map(|&p| f64::from(p) / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    ensure!(magic == LABEL_MAGIC, "bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}");
    let n = be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        bail!("truncated label file: expected {expected} bytes, got {}", bytes.len());
    }
    Ok(bytes[8..expected].iter().map(|&l| usize::from(l)).collect())
}

/// Loads labeled images; `limit` keeps only the first `limit` of them.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Vec<IntensityImage>> {
    let (rows, cols, pixels) =
        parse_images(&read_bytes(images)?).with_context(|| format!("parsing {}", images.display()))?;
    let labels =
        parse_labels(&read_bytes(labels)?).with_context(|| format!("parsing {}", labels.display()))?;
    ensure!(
        pixels.len() == labels.len(),
        "count mismatch: {} images but {} labels",
        pixels.len(),
        labels.len()
    );
    let keep = limit.unwrap_or(pixels.len()).min(pixels.len());
    pixels
        .into_iter()
        .zip(labels)
        .take(keep)
        .map(|(px, l)| Ok(IntensityImage::new(rows, cols, 1, px, Some(l))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn pixels_are_scaled() {
        let (r, c, imgs) = parse_images(&image_file(1, 1, 2, &[255, 0])).unwrap();
        assert_eq!((r, c), (1, 2));
        assert_eq!(imgs, vec![vec![1.0, 0.0]]);
    }

    #[test]
    fn truncation_names_byte_counts() {
        let err = parse_images(&image_file(2, 2, 2, &[0; 5])).unwrap_err().to_string();
        assert!(err.contains("expected 24 bytes, got 21"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut f = image_file(1, 1, 1, &[0]);
        f[3] = 0x01;
        assert!(parse_images(&f).is_err());
        assert!(parse_labels(&image_file(1, 1, 1, &[0])).is_err());
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, image_file(2, 1, 1, &[1, 2])).unwrap();
        let mut labels = LABEL_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&1u32.to_be_bytes());
        labels.push(3);
        std::fs::write(&lp, labels).unwrap();
        let err = load_idx(&ip, &lp, None).unwrap_err().to_string();
        assert!(err.contains("2 images but 1 labels"), "{err}");
    }
}
