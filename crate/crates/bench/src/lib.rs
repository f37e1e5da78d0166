//! Synthetic fixtures shared by the benchmarks.

use scotopic::IntensityImage;

/// A bright ring on a dark background, `size x size`, labeled `label`.
pub fn ring(size: usize, label: usize) -> IntensityImage {
    let c = (size as f64 - 1.0) / 2.0;
    let r = size as f64 / 3.0;
    let pixels = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let d = ((y - c).powi(2) + (x - c).powi(2)).sqrt();
            (1.0 - (d - r).abs() / 2.0).clamp(0.0, 1.0)
        })
        .collect();
    IntensityImage::new(size, size, 1, pixels, Some(label)).expect("valid ring image")
}

/// A vertical bar, the second class of the toy problem.
pub fn bar(size: usize, label: usize) -> IntensityImage {
    let pixels = (0..size * size)
        .map(|i| {
            let x = (i % size) as f64 - (size as f64 - 1.0) / 2.0;
            (1.0 - x.abs() / 2.0).clamp(0.0, 1.0)
        })
        .collect();
    IntensityImage::new(size, size, 1, pixels, Some(label)).expect("valid bar image")
}
