//! Illuminance estimation from a single count image.
//!
//! Counts are box-filtered, the median of the `k` strongest responses is taken
//! as a brightness proxy `R`, and `ln PPP` is regressed on a quadratic in
//! `r = ln(1 + R)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photon_sim::CountImage;

pub const DEFAULT_BOX_SIZES: [usize; 6] = [1, 2, 3, 4, 5, 7];
pub const DEFAULT_TOP_K: [usize; 5] = [1, 3, 5, 10, 25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightEstimator {
    pub box_size: usize,
    pub top_k: usize,
    /// `[a, b, c]` of `ln PPP = a r^2 + b r + c`.
    pub coeffs: [f64; 3],
    /// Smallest and largest PPP seen during fitting.
    pub ppp_min: f64,
    pub ppp_max: f64,
    /// Median relative error on the held-out split used for selection.
    pub holdout_error: f64,
}

/// All `s x s` box sums at valid positions, summed over channels.
pub fn box_sums(counts: &CountImage, s: usize) -> Result<Vec<f64>> {
    let (h, w) = (counts.height, counts.width);
    if s == 0 || s > h || s > w {
        return Err(Error::invalid(
            "box_size",
            format!("{s} does not fit a {h}x{w} image"),
        ));
    }
    if counts.counts.len() != h * w * counts.channels {
        return Err(Error::shape(h * w * counts.channels, counts.counts.len()));
    }
    // Integral image over the channel-summed plane, with a zero border.
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += (0..counts.channels)
                .map(|c| counts.counts[(c * h + y) * w + x])
                .sum::<f64>();
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let at = |y: usize, x: usize| integral[y * (w + 1) + x];
    let mut out = Vec::with_capacity((h + 1 - s) * (w + 1 - s));
    for y in 0..=h - s {
        for x in 0..=w - s {
            out.push(at(y + s, x + s) - at(y, x + s) - at(y + s, x) + at(y, x));
        }
    }
    Ok(out)
}

/// Median of the `k` largest `s x s` box sums.
pub fn pooled_response(counts: &CountImage, s: usize, k: usize) -> Result<f64> {
    let mut sums = box_sums(counts, s)?;
    if k == 0 || k > sums.len() {
        return Err(Error::invalid(
            "top_k",
            format!("{k} outside 1..={} filter positions", sums.len()),
        ));
    }
    sums.sort_by(|a, b| b.total_cmp(a));
    let top = &sums[..k];
    Ok(if k % 2 == 1 {
        top[k / 2]
    } else {
        0.5 * (top[k / 2 - 1] + top[k / 2])
    })
}

fn features(response: f64) -> [f64; 3] {
    let r = response.max(0.0).ln_1p();
    [r * r, r, 1.0]
}

fn fit_quadratic(responses: &[f64], ppps: &[f64]) -> Result<[f64; 3]> {
    let first = responses[0];
    if responses.iter().all(|&r| r == first) {
        return Err(Error::invalid("training responses", "all responses are equal"));
    }
    let rows: Vec<f64> = responses.iter().flat_map(|&r| features(r)).collect();
    let a = DMatrix::from_row_slice(responses.len(), 3, &rows);
    let b = DVector::from_iterator(ppps.len(), ppps.iter().map(|p| p.ln()));
    let coeffs = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::invalid("least squares", e.to_string()))?;
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Diverged("light regression produced non-finite coefficients".into()));
    }
    Ok([coeffs[0], coeffs[1], coeffs[2]])
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl LightEstimator {
    /// Grid-searches `(s, k)` on a held-out fifth of the pairs (every index
    /// with `i % 5 == 4`), then refits the chosen pair on all data.
    pub fn fit(pairs: &[(CountImage, f64)], sizes: &[usize], ks: &[usize]) -> Result<Self> {
        if pairs.len() < 10 {
            return Err(Error::invalid(
                "training pairs",
                format!("need at least 10, got {}", pairs.len()),
            ));
        }
        if pairs.iter().any(|(_, p)| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::invalid("training ppp", "must be finite and > 0"));
        }
        let ppps: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ppp_min = ppps.iter().copied().fold(f64::INFINITY, f64::min);
        let ppp_max = ppps.iter().copied().fold(0.0, f64::max);
        if ppp_max < 10.0 * ppp_min {
            return Err(Error::invalid(
                "training ppp",
                "pairs must span at least one decade",
            ));
        }

        let mut best: Option<Self> = None;
        for &s in sizes {
            for &k in ks {
                let responses: Result<Vec<f64>> =
                    pairs.iter().map(|(img, _)| pooled_response(img, s, k)).collect();
                let Ok(responses) = responses else { continue };
                let (mut tr_r, mut tr_p, mut ho) = (Vec::new(), Vec::new(), Vec::new());
                for (i, (&r, &p)) in responses.iter().zip(&ppps).enumerate() {
                    if i % 5 == 4 {
                        ho.push((r, p));
                    } else {
                        tr_r.push(r);
                        tr_p.push(p);
                    }
                }
                let Ok(coeffs) = fit_quadratic(&tr_r, &tr_p) else { continue };
                let candidate = Self {
                    box_size: s,
                    top_k: k,
                    coeffs,
                    ppp_min,
                    ppp_max,
                    holdout_error: 0.0,
                };
                let err = median(
                    ho.iter()
                        .map(|&(r, p)| (candidate.ppp_from_response(r) - p).abs() / p)
                        .collect(),
                );
                if best.as_ref().is_none_or(|b| err < b.holdout_error) {
                    best = Some(Self {
                        holdout_error: err,
                        ..candidate
                    });
                }
            }
        }
        let mut chosen = best.ok_or_else(|| {
            Error::invalid("light estimator", "no (box size, top-k) pair produced a fit")
        })?;
        let responses: Vec<f64> = pairs
            .iter()
            .map(|(img, _)| pooled_response(img, chosen.box_size, chosen.top_k))
            .collect::<Result<_>>()?;
        chosen.coeffs = fit_quadratic(&responses, &ppps)?;
        Ok(chosen)
    }

    pub fn fit_default(pairs: &[(CountImage, f64)]) -> Result<Self> {
        Self::fit(pairs, &DEFAULT_BOX_SIZES, &DEFAULT_TOP_K)
    }

    /// Clamped polynomial prediction for a pooled response.
    pub fn ppp_from_response(&self, response: f64) -> f64 {
        let lo = self.ppp_min / 10.0;
        if response <= 0.0 {
            return lo;
        }
        let f = features(response);
        let log_ppp = self.coeffs.iter().zip(f).map(|(c, x)| c * x).sum::<f64>();
        log_ppp.exp().clamp(lo, self.ppp_max * 10.0)
    }

    pub fn estimate_ppp(&self, counts: &CountImage) -> Result<f64> {
        Ok(self.ppp_from_response(pooled_response(counts, self.box_size, self.top_k)?))
    }

    pub const CSV_HEADER: &'static str = "box_size,top_k,a,b,c,ppp_min,ppp_max,holdout_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.box_size,
            self.top_k,
            self.coeffs[0],
            self.coeffs[1],
            self.coeffs[2],
            self.ppp_min,
            self.ppp_max,
            self.holdout_error
        )
    }
}

/// Exposure time equivalent to an estimated PPP, `ppp / (illuminance * bin_width)`.
pub fn equivalent_time(ppp_hat: f64, illuminance: f64, bin_width: f64) -> Result<f64> {
    if !(illuminance > 0.0) {
        return Err(Error::invalid("illuminance", format!("{illuminance} must be > 0")));
    }
    if !(bin_width > 0.0) {
        return Err(Error::invalid("bin_width", format!("{bin_width} must be > 0")));
    }
    Ok(ppp_hat / (illuminance * bin_width))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, counts: Vec<f64>) -> CountImage {
        CountImage {
            height: h,
            width: w,
            channels: 1,
            counts,
            num_bins: 0,
            ppp: 0.0,
        }
    }

    #[test]
    fn pooled_response_examples() {
        let img = image(3, 3, (1..=9).map(f64::from).collect());
        // Box sums are 12, 16, 24 and 28; the top two have median 26.
        assert_eq!(pooled_response(&img, 2, 2).unwrap(), 26.0);
        assert_eq!(pooled_response(&img, 1, 1).unwrap(), 9.0);
        assert_eq!(pooled_response(&image(3, 3, vec![0.0; 9]), 2, 3).unwrap(), 0.0);
        assert!(pooled_response(&img, 4, 1).is_err());
        assert!(pooled_response(&img, 2, 5).is_err());
    }

    #[test]
    fn equivalent_time_round_trips() {
        assert_eq!(equivalent_time(22.0, 1.0, 1.0).unwrap(), 22.0);
        assert_eq!(equivalent_time(0.0, 1.0, 0.022).unwrap(), 0.0);
        let p: f64 = 3.7;
        let t = equivalent_time(p, 1.0, 0.022).unwrap();
        assert!((t * 0.022 - p).abs() < 1e-12);
        assert!(equivalent_time(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn exact_scaling_is_recovered() {
        let base: Vec<f64> = (0..64).map(|i| ((i * 29) % 17) as f64 + 1.0).collect();
        let pairs: Vec<(CountImage, f64)> = (0..20)
            .map(|i| {
                let c = 10f64.powf(i as f64 / 19.0 * 3.0 - 1.0);
                (image(8, 8, base.iter().map(|b| b * c * 10.0).collect()), c)
            })
            .collect();
        let est = LightEstimator::fit_default(&pairs).unwrap();
        for (img, p) in &pairs {
            let e = est.estimate_ppp(img).unwrap();
            assert!((e - p).abs() / p < 0.01, "{e} vs {p}");
        }
        assert_eq!(est.estimate_ppp(&image(8, 8, vec![0.0; 64])).unwrap(), est.ppp_min / 10.0);
    }

    #[test]
    fn too_few_pairs_rejected() {
        let one = vec![(image(2, 2, vec![1.0; 4]), 1.0)];
        assert!(LightEstimator::fit_default(&one).is_err());
    }
}
