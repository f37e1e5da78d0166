//! Photon-counting sensor simulation.
//!
//! Pixel `i` of an intensity image emits photons at rate
//! `illuminance * (I_i + dark_current) / (1 + dark_current)`. A stream holds the
//! per-bin photon counts; readout corrupts an accumulated count image with
//! additive read noise followed by a per-pixel multiplicative gain (fixed-pattern
//! noise). Optional rotational jitter re-renders the scene every bin.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, SimRng};
use crate::REFERENCE_PPP;

const FPN_GAIN_FLOOR: f64 = 1e-3;

/// Ground-truth intensities in `[0, 1]`, stored channel-major (`c, y, x`).
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
    label: Option<usize>,
}

impl IntensityImage {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
        label: Option<usize>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Empty("image"));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("pixel intensity", format!("{v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            label,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    /// Per-pixel mean over a non-empty set of equally sized images.
    pub fn mean_pixels(images: &[IntensityImage]) -> Result<Vec<f64>> {
        let first = images.first().ok_or(Error::Empty("image set"))?;
        let mut mean = vec![0.0; first.len()];
        for img in images {
            if img.len() != mean.len() {
                return Err(Error::shape(mean.len(), img.len()));
            }
            for (m, p) in mean.iter_mut().zip(&img.pixels) {
                *m += p;
            }
        }
        let n = images.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(mean)
    }
}

/// Sensor and scene parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Dark current as a fraction of the brightest pixel's rate.
    pub dark_current: f64,
    /// Standard deviation of additive readout noise, in photons.
    pub read_noise_std: f64,
    /// Standard deviation of the multiplicative fixed-pattern gain.
    pub fpn_std: f64,
    /// Rotation std in degrees reached at 220 PPP.
    pub jitter_std: f64,
    /// Photons per unit time at a pixel of intensity one.
    pub illuminance: f64,
    /// Duration of one time bin.
    pub bin_width: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            dark_current: 0.03,
            read_noise_std: 0.0,
            fpn_std: 0.0,
            jitter_std: 0.0,
            illuminance: 1.0,
            bin_width: 0.022,
        }
    }
}

impl NoiseConfig {
    /// Baseline used by the robustness sweeps: 3% dark current, read noise
    /// 0.15, 3% fixed-pattern noise, no jitter.
    pub fn robustness_baseline() -> Self {
        Self {
            dark_current: 0.03,
            read_noise_std: 0.15,
            fpn_std: 0.03,
            jitter_std: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("dark_current", self.dark_current),
            ("read_noise_std", self.read_noise_std),
            ("fpn_std", self.fpn_std),
            ("jitter_std", self.jitter_std),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} must be a finite value >= 0")));
            }
        }
        if !(self.illuminance > 0.0 && self.illuminance.is_finite()) {
            return Err(Error::invalid("illuminance", format!("{} must be > 0", self.illuminance)));
        }
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return Err(Error::invalid("bin_width", format!("{} must be > 0", self.bin_width)));
        }
        Ok(())
    }

    /// PPP gained per time bin.
    pub fn ppp_per_bin(&self) -> f64 {
        self.illuminance * self.bin_width
    }

    /// `PPP = illuminance * t * bin_width`.
    pub fn ppp_of_bins(&self, bins: usize) -> f64 {
        self.illuminance * bins as f64 * self.bin_width
    }

    /// Nearest whole number of bins reaching `ppp`.
    pub fn bins_for_ppp(&self, ppp: f64) -> usize {
        (ppp / self.ppp_per_bin()).round().max(0.0) as usize
    }

    /// Photon rate of a pixel relative to the illuminance, `(I + dc) / (1 + dc)`.
    pub fn relative_rate(&self, intensity: f64) -> f64 {
        (intensity + self.dark_current) / (1.0 + self.dark_current)
    }
}

/// Photon arrival rate of a pixel with the given intensity.
pub fn pixel_rate(intensity: f64, cfg: &NoiseConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::invalid("intensity", format!("{intensity} outside [0, 1]")));
    }
    if !(cfg.illuminance > 0.0) {
        return Err(Error::invalid("illuminance", format!("{} must be > 0", cfg.illuminance)));
    }
    Ok(cfg.illuminance * cfg.relative_rate(intensity))
}

/// Cumulative (or read-out) photon counts and the exposure they represent.
#[derive(Debug, Clone, PartialEq)]
pub struct CountImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub counts: Vec<f64>,
    pub num_bins: usize,
    pub ppp: f64,
}

impl CountImage {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        counts: Vec<f64>,
        num_bins: usize,
        ppp: f64,
    ) -> Result<Self> {
        if counts.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, counts.len()));
        }
        if !(ppp >= 0.0) {
            return Err(Error::invalid("ppp", format!("{ppp} must be >= 0")));
        }
        Ok(Self {
            height,
            width,
            channels,
            counts,
            num_bins,
            ppp,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Per-bin photon counts for one scene, stored sparsely.
///
/// Bin `t` (1-based) owns entries `offsets[t - 1]..offsets[t]` of `pixels` and
/// `counts`, sorted by pixel index.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonStream {
    height: usize,
    width: usize,
    channels: usize,
    illuminance: f64,
    bin_width: f64,
    offsets: Vec<usize>,
    pixels: Vec<u32>,
    counts: Vec<u32>,
    fpn_gains: Vec<f64>,
    source_label: Option<usize>,
}

/// Nonzero entries of one time bin.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub pixels: &'a [u32],
    pub counts: &'a [u32],
}

impl Frame<'_> {
    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.pixels.iter().map(|&p| p as usize).zip(self.counts.iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.pixels.len()
    }
}

impl PhotonStream {
    /// Builds a stream from dense frames. Gains are all one.
    pub fn from_frames(
        height: usize,
        width: usize,
        channels: usize,
        frames: &[Vec<u32>],
        cfg: &NoiseConfig,
        source_label: Option<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        if frames.is_empty() {
            return Err(Error::Empty("frame list"));
        }
        let n = height * width * channels;
        if n == 0 {
            return Err(Error::Empty("image"));
        }
        let mut offsets = vec![0];
        let mut pixels = Vec::new();
        let mut counts = Vec::new();
        for frame in frames {
            if frame.len() != n {
                return Err(Error::shape(n, frame.len()));
            }
            for (i, &c) in frame.iter().enumerate() {
                if c > 0 {
                    pixels.push(i as u32);
                    counts.push(c);
                }
            }
            offsets.push(pixels.len());
        }
        Ok(Self {
            height,
            width,
            channels,
            illuminance: cfg.illuminance,
            bin_width: cfg.bin_width,
            offsets,
            pixels,
            counts,
            fpn_gains: vec![1.0; n],
            source_label,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn num_bins(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn source_label(&self) -> Option<usize> {
        self.source_label
    }

    pub fn fpn_gains(&self) -> &[f64] {
        &self.fpn_gains
    }

    pub fn ppp_per_bin(&self) -> f64 {
        self.illuminance * self.bin_width
    }

    pub fn ppp_of(&self, bins: usize) -> f64 {
        self.illuminance * bins as f64 * self.bin_width
    }

    pub fn bins_for_ppp(&self, ppp: f64) -> usize {
        (ppp / self.ppp_per_bin()).round().max(0.0) as usize
    }

    pub fn max_ppp(&self) -> f64 {
        self.ppp_of(self.num_bins())
    }

    pub fn total_photons(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Nonzero counts of bin `t`, `1 <= t <= num_bins`.
    pub fn frame(&self, t: usize) -> Frame<'_> {
        assert!(t >= 1 && t <= self.num_bins(), "bin {t} outside 1..={}", self.num_bins());
        let range = self.offsets[t - 1]..self.offsets[t];
        Frame {
            pixels: &self.pixels[range.clone()],
            counts: &self.counts[range],
        }
    }

    pub fn dense_frame(&self, t: usize) -> Vec<u32> {
        let mut out = vec![0; self.num_pixels()];
        for (p, c) in self.frame(t).iter() {
            out[p] = c;
        }
        out
    }

    /// Adds frames `from + 1 ..= to` into `counts`.
    pub fn add_frames(&self, counts: &mut [f64], from: usize, to: usize) {
        debug_assert!(from <= to && to <= self.num_bins());
        for i in self.offsets[from]..self.offsets[to] {
            counts[self.pixels[i] as usize] += f64::from(self.counts[i]);
        }
    }

    /// Count image over bins `1..=t` whose counts are already summed.
    pub(crate) fn count_image(&self, counts: Vec<f64>, t: usize) -> CountImage {
        CountImage {
            height: self.height,
            width: self.width,
            channels: self.channels,
            counts,
            num_bins: t,
            ppp: self.ppp_of(t),
        }
    }
}

/// Simulates `num_bins` bins of photon arrivals from `img`.
///
/// Without jitter the per-pixel total over the whole stream is drawn first and
/// each photon is assigned a uniformly random bin; conditioned on the total this
/// is exactly the multinomial split, so every bin count is an independent
/// Poisson variate with mean `rate * bin_width`. With jitter the scene is
/// rotated by a Gaussian random walk whose std at PPP `p` is
/// `jitter_std * p / 220` and each bin is drawn from the rotated scene.
pub fn simulate_stream(
    img: &IntensityImage,
    cfg: &NoiseConfig,
    num_bins: usize,
    seed: u64,
) -> Result<PhotonStream> {
    cfg.validate()?;
    if num_bins == 0 {
        return Err(Error::invalid("num_bins", "a stream needs at least one bin"));
    }
    if img.is_empty() {
        return Err(Error::Empty("image"));
    }
    let n = img.len();
    let mut photon_rng = stream_rng(seed, 0);
    let fpn_gains = draw_fpn_gains(n, cfg.fpn_std, &mut stream_rng(seed, 1));

    let (offsets, pixels, counts) = if cfg.jitter_std > 0.0 {
        simulate_jittered(img, cfg, num_bins, &mut photon_rng, &mut stream_rng(seed, 2))
    } else {
        simulate_static(img, cfg, num_bins, &mut photon_rng)
    };

    Ok(PhotonStream {
        height: img.height,
        width: img.width,
        channels: img.channels,
        illuminance: cfg.illuminance,
        bin_width: cfg.bin_width,
        offsets,
        pixels,
        counts,
        fpn_gains,
        source_label: img.label,
    })
}

type SparseFrames = (Vec<usize>, Vec<u32>, Vec<u32>);

fn simulate_static(
    img: &IntensityImage,
    cfg: &NoiseConfig,
    num_bins: usize,
    rng: &mut SimRng,
) -> SparseFrames {
    let per_bin = cfg.bin_width * num_bins as f64;
    // (bin, pixel) pairs, generated in pixel order.
    let mut arrivals: Vec<(u32, u32)> = Vec::new();
    for (i, &intensity) in img.pixels.iter().enumerate() {
        let mean = cfg.illuminance * cfg.relative_rate(intensity) * per_bin;
        let total = poisson(rng, mean);
        for _ in 0..total {
            arrivals.push((rng.random_range(0..num_bins) as u32, i as u32));
        }
    }

    // Counting sort by bin keeps pixel order within each bin.
    let mut offsets = vec![0usize; num_bins + 1];
    for &(b, _) in &arrivals {
        offsets[b as usize + 1] += 1;
    }
    for t in 0..num_bins {
        offsets[t + 1] += offsets[t];
    }
    let mut cursor = offsets.clone();
    let mut sorted = vec![0u32; arrivals.len()];
    for &(b, p) in &arrivals {
        sorted[cursor[b as usize]] = p;
        cursor[b as usize] += 1;
    }

    // Merge repeated pixels inside a bin.
    let mut out_offsets = Vec::with_capacity(num_bins + 1);
    let mut pixels = Vec::with_capacity(sorted.len());
    let mut counts: Vec<u32> = Vec::with_capacity(sorted.len());
    out_offsets.push(0);
    for t in 0..num_bins {
        let start = pixels.len();
        for &p in &sorted[offsets[t]..offsets[t + 1]] {
            if pixels.len() > start && *pixels.last().unwrap() == p {
                *counts.last_mut().unwrap() += 1;
            } else {
                pixels.push(p);
                counts.push(1);
            }
        }
        out_offsets.push(pixels.len());
    }
    (out_offsets, pixels, counts)
}

fn simulate_jittered(
    img: &IntensityImage,
    cfg: &NoiseConfig,
    num_bins: usize,
    photon_rng: &mut SimRng,
    angle_rng: &mut SimRng,
) -> SparseFrames {
    let scale = cfg.jitter_std / REFERENCE_PPP;
    let mut angle = 0.0;
    let mut prev_ppp: f64 = 0.0;
    let mut offsets = vec![0];
    let mut pixels = Vec::new();
    let mut counts = Vec::new();
    for t in 1..=num_bins {
        let ppp = cfg.ppp_of_bins(t);
        let step_std = scale * (ppp * ppp - prev_ppp * prev_ppp).sqrt();
        angle += step_std * standard_normal(angle_rng);
        prev_ppp = ppp;
        let scene = rotate(img, angle);
        for (i, &intensity) in scene.pixels.iter().enumerate() {
            let mean = cfg.illuminance * cfg.relative_rate(intensity) * cfg.bin_width;
            let k = poisson(photon_rng, mean);
            if k > 0 {
                pixels.push(i as u32);
                counts.push(k);
            }
        }
        offsets.push(pixels.len());
    }
    (offsets, pixels, counts)
}

fn draw_fpn_gains(n: usize, std: f64, rng: &mut SimRng) -> Vec<f64> {
    if std == 0.0 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|_| (1.0 + std * standard_normal(rng)).max(FPN_GAIN_FLOOR))
        .collect()
}

pub(crate) fn standard_normal(rng: &mut SimRng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Poisson variate. Small means use multiplication of uniforms, which is exact
/// and cheap for the sub-photon rates of a single bin.
pub(crate) fn poisson(rng: &mut SimRng, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    if mean < 12.0 {
        let limit = (-mean).exp();
        let mut k = 0;
        let mut p: f64 = rng.random();
        while p > limit {
            k += 1;
            p *= rng.random::<f64>();
        }
        return k;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u32
}

/// Sum of frames `1..=t`.
pub fn accumulate(stream: &PhotonStream, t: usize) -> Result<CountImage> {
    if t > stream.num_bins() {
        return Err(Error::invalid(
            "t",
            format!("{t} exceeds stream length {}", stream.num_bins()),
        ));
    }
    let mut counts = vec![0.0; stream.num_pixels()];
    stream.add_frames(&mut counts, 0, t);
    Ok(stream.count_image(counts, t))
}

/// Applies read noise then the stream's fixed-pattern gains; clamps at zero.
pub fn readout(
    counts: &CountImage,
    stream: &PhotonStream,
    cfg: &NoiseConfig,
    seed: u64,
) -> Result<CountImage> {
    if counts.len() != stream.fpn_gains.len() {
        return Err(Error::shape(stream.fpn_gains.len(), counts.len()));
    }
    if !(cfg.read_noise_std >= 0.0) {
        return Err(Error::invalid("read_noise_std", "must be >= 0"));
    }
    let mut out = counts.clone();
    if cfg.read_noise_std > 0.0 {
        let mut rng = stream_rng(seed, 0x5EAD);
        let noise = Normal::new(0.0, cfg.read_noise_std).expect("valid std");
        for c in out.counts.iter_mut() {
            *c += noise.sample(&mut rng);
        }
    }
    for (c, g) in out.counts.iter_mut().zip(&stream.fpn_gains) {
        *c = (*c * g).max(0.0);
    }
    Ok(out)
}

/// Rotates `img` about its center by an angle drawn from
/// `Normal(0, (sigma_deg * ppp / 220)^2)` degrees.
pub fn apply_jitter(
    img: &IntensityImage,
    sigma_deg: f64,
    ppp: f64,
    seed: u64,
) -> Result<IntensityImage> {
    if !(ppp >= 0.0) {
        return Err(Error::invalid("ppp", format!("{ppp} must be >= 0")));
    }
    if sigma_deg == 0.0 {
        return Ok(img.clone());
    }
    Ok(rotate(img, jitter_angle(sigma_deg, ppp, seed)))
}

/// Rotation in degrees used by [`apply_jitter`] for this seed.
pub fn jitter_angle(sigma_deg: f64, ppp: f64, seed: u64) -> f64 {
    sigma_deg * ppp / REFERENCE_PPP * standard_normal(&mut stream_rng(seed, 3))
}

/// Bilinear rotation about the image center with zero padding.
pub fn rotate(img: &IntensityImage, degrees: f64) -> IntensityImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut pixels = vec![0.0; img.len()];
    for c in 0..img.channels {
        let plane = &img.pixels[c * h * w..(c + 1) * h * w];
        let out = &mut pixels[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                out[y * w + x] = bilinear(plane, h, w, sy, sx);
            }
        }
    }
    IntensityImage {
        pixels,
        ..img.clone()
    }
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let fetch = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let v = fetch(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + fetch(y0, x0 + 1.0) * (1.0 - fy) * fx
        + fetch(y0 + 1.0, x0) * fy * (1.0 - fx)
        + fetch(y0 + 1.0, x0 + 1.0) * fy * fx;
    v.clamp(0.0, 1.0)
}

/// Draws a count image at exposure `ppp` directly from the Poisson model.
///
/// Equivalent in distribution to accumulating a static stream, without
/// materializing bins. Used to render training data.
pub fn render_counts(
    img: &IntensityImage,
    cfg: &NoiseConfig,
    ppp: f64,
    rng: &mut SimRng,
) -> Result<CountImage> {
    if !(ppp >= 0.0 && ppp.is_finite()) {
        return Err(Error::invalid("ppp", format!("{ppp} must be finite and >= 0")));
    }
    let counts = img
        .pixels
        .iter()
        .map(|&i| f64::from(poisson(rng, cfg.relative_rate(i) * ppp)))
        .collect();
    Ok(CountImage {
        height: img.height,
        width: img.width,
        channels: img.channels,
        counts,
        num_bins: cfg.bins_for_ppp(ppp),
        ppp,
    })
}

/// Approximate bits of signal per pixel after exposing `seconds` under
/// illuminance `lux`: `5 + log2(t)/2 + log2(E_v)/2`.
pub fn bits_of_signal(seconds: f64, lux: f64) -> Result<f64> {
    if !(seconds > 0.0) {
        return Err(Error::invalid("exposure time", format!("{seconds} must be > 0")));
    }
    if !(lux > 0.0) {
        return Err(Error::invalid("illuminance", format!("{lux} must be > 0")));
    }
    Ok(5.0 + 0.5 * seconds.log2() + 0.5 * lux.log2())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dc: f64, lambda: f64) -> NoiseConfig {
        NoiseConfig {
            dark_current: dc,
            illuminance: lambda,
            bin_width: 1.0,
            ..NoiseConfig::default()
        }
    }

    #[test]
    fn pixel_rate_examples() {
        assert_eq!(pixel_rate(1.0, &cfg(0.03, 1.0)).unwrap(), 1.0);
        assert!((pixel_rate(0.0, &cfg(0.03, 1.0)).unwrap() - 0.03 / 1.03).abs() < 1e-12);
        assert_eq!(pixel_rate(0.5, &cfg(0.0, 2.0)).unwrap(), 1.0);
        assert!(pixel_rate(1.5, &cfg(0.0, 1.0)).is_err());
        assert!(pixel_rate(0.5, &cfg(0.0, 0.0)).is_err());
    }

    #[test]
    fn rejects_empty_streams() {
        let img = IntensityImage::new(1, 1, 1, vec![0.5], None).unwrap();
        assert!(simulate_stream(&img, &cfg(0.0, 1.0), 0, 1).is_err());
    }

    #[test]
    fn accumulate_sums_frames() {
        let frames = vec![vec![1, 0], vec![2, 3]];
        let s = PhotonStream::from_frames(1, 2, 1, &frames, &cfg(0.0, 1.0), None).unwrap();
        let zero = accumulate(&s, 0).unwrap();
        assert_eq!(zero.counts, vec![0.0, 0.0]);
        assert_eq!(zero.ppp, 0.0);
        assert_eq!(accumulate(&s, 2).unwrap().counts, vec![3.0, 3.0]);
        assert!(accumulate(&s, 3).is_err());
    }

    #[test]
    fn accumulate_ppp_follows_exposure() {
        let frames = vec![vec![0]; 5];
        let s = PhotonStream::from_frames(1, 1, 1, &frames, &cfg(0.0, 1.0), None).unwrap();
        assert_eq!(accumulate(&s, 5).unwrap().ppp, 5.0);
    }

    #[test]
    fn readout_identity_without_noise() {
        let img = IntensityImage::new(2, 2, 1, vec![0.1, 0.4, 0.9, 1.0], None).unwrap();
        let c = cfg(0.03, 1.0);
        let s = simulate_stream(&img, &c, 50, 4).unwrap();
        let n = accumulate(&s, 50).unwrap();
        assert_eq!(readout(&n, &s, &c, 9).unwrap(), n);
    }

    #[test]
    fn readout_rejects_dimension_mismatch() {
        let img = IntensityImage::new(1, 2, 1, vec![0.1, 0.4], None).unwrap();
        let c = cfg(0.03, 1.0);
        let s = simulate_stream(&img, &c, 3, 4).unwrap();
        let wrong = CountImage::new(1, 3, 1, vec![1.0; 3], 3, 3.0).unwrap();
        assert!(readout(&wrong, &s, &c, 0).is_err());
    }

    #[test]
    fn readout_noise_std_matches_config() {
        // Single pixel with 100 counts, read noise 0.15 and a fixed gain.
        let c = NoiseConfig {
            read_noise_std: 0.15,
            fpn_std: 0.03,
            ..cfg(0.0, 1.0)
        };
        let img = IntensityImage::new(1, 1, 1, vec![1.0], None).unwrap();
        let s = simulate_stream(&img, &c, 1, 11).unwrap();
        let gain = s.fpn_gains()[0];
        let counts = CountImage::new(1, 1, 1, vec![100.0], 1, 1.0).unwrap();
        let trials = 10_000;
        let samples: Vec<f64> = (0..trials)
            .map(|k| readout(&counts, &s, &c, k).unwrap().counts[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let expected = 0.15 * gain;
        assert!((var.sqrt() - expected).abs() < 0.1 * expected, "std {} vs {expected}", var.sqrt());
    }

    #[test]
    fn readout_clamps_at_zero() {
        let c = NoiseConfig {
            read_noise_std: 5.0,
            ..cfg(0.0, 1.0)
        };
        let img = IntensityImage::new(1, 4, 1, vec![0.0; 4], None).unwrap();
        let s = simulate_stream(&img, &c, 1, 2).unwrap();
        let zero = CountImage::new(1, 4, 1, vec![0.0; 4], 1, 1.0).unwrap();
        for seed in 0..20 {
            assert!(readout(&zero, &s, &c, seed).unwrap().counts.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn fpn_gains_are_positive_even_when_huge() {
        let c = NoiseConfig {
            fpn_std: 3.0,
            ..cfg(0.0, 1.0)
        };
        let img = IntensityImage::new(4, 4, 1, vec![0.5; 16], None).unwrap();
        let s = simulate_stream(&img, &c, 1, 5).unwrap();
        assert!(s.fpn_gains().iter().all(|&g| g >= FPN_GAIN_FLOOR));
    }

    #[test]
    fn jitter_zero_is_identity() {
        let img = IntensityImage::new(3, 3, 1, (0..9).map(|v| v as f64 / 9.0).collect(), None)
            .unwrap();
        assert_eq!(apply_jitter(&img, 0.0, 220.0, 1).unwrap(), img);
    }

    #[test]
    fn jitter_angle_std_scales_with_ppp() {
        let std_at = |ppp: f64| {
            let draws: Vec<f64> = (0..4000).map(|s| jitter_angle(22.0, ppp, s)).collect();
            (draws.iter().map(|d| d * d).sum::<f64>() / draws.len() as f64).sqrt()
        };
        assert!((std_at(220.0) - 22.0).abs() < 1.0);
        assert!((std_at(22.0) - 2.2).abs() < 0.1);
    }

    #[test]
    fn rotation_by_180_flips_image() {
        let img = IntensityImage::new(1, 3, 1, vec![0.1, 0.5, 0.9], None).unwrap();
        let r = rotate(&img, 180.0);
        for (a, b) in r.pixels().iter().zip([0.9, 0.5, 0.1]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_keeps_center_and_pads_with_zero() {
        let img = IntensityImage::new(3, 3, 1, vec![1.0; 9], None).unwrap();
        let r = rotate(&img, 45.0);
        assert!((r.pixels()[4] - 1.0).abs() < 1e-12);
        // Corners rotate out of the frame and pick up zero padding.
        assert!(r.pixels()[0] < 1.0);
    }

    #[test]
    fn bits_of_signal_table_cells() {
        assert!((bits_of_signal(1.0 / 8.0, 250.0).unwrap() - 7.5).abs() < 0.5);
        assert_eq!(bits_of_signal(1.0, 1.0).unwrap(), 5.0);
        assert!((bits_of_signal(8.0, 1e-3).unwrap() - 1.5).abs() < 0.5);
        assert!(bits_of_signal(0.0, 1.0).is_err());
        assert!(bits_of_signal(1.0, -1.0).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let img = IntensityImage::new(4, 4, 1, (0..16).map(|v| v as f64 / 16.0).collect(), None)
            .unwrap();
        let c = NoiseConfig {
            fpn_std: 0.03,
            jitter_std: 10.0,
            ..cfg(0.03, 1.0)
        };
        assert_eq!(
            simulate_stream(&img, &c, 30, 77).unwrap(),
            simulate_stream(&img, &c, 30, 77).unwrap()
        );
        let still = NoiseConfig { jitter_std: 0.0, ..c };
        assert_eq!(
            simulate_stream(&img, &still, 30, 77).unwrap(),
            simulate_stream(&img, &still, 30, 77).unwrap()
        );
        assert_ne!(
            simulate_stream(&img, &still, 30, 77).unwrap(),
            simulate_stream(&img, &still, 30, 78).unwrap()
        );
    }

    #[test]
    fn invalid_images_are_rejected() {
        assert!(IntensityImage::new(0, 2, 1, vec![], None).is_err());
        assert!(IntensityImage::new(1, 2, 1, vec![0.5], None).is_err());
        assert!(IntensityImage::new(1, 1, 1, vec![-0.1], None).is_err());
    }
}
