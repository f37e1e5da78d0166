//! Minibatch SGD for the adapted network and the plain baselines.
//!
//! Every epoch re-renders each training image at fresh exposures, so the
//! photon noise is never reused. Per-image gradients are averaged over that
//! image's exposures and summed over the images of a minibatch.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{AdaptedNetwork, Ensemble, PriorPooling, RateClassifier};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Architecture, Gradients, Network, Shape};
use crate::photon_sim::{render_counts, IntensityImage, NoiseConfig};
use crate::rng::{derive_seed, stream_rng, SimRng};
use crate::REFERENCE_PPP;

/// Smallest value `t0` may take during training.
pub const T0_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub exposures_per_image: usize,
    /// Log-uniform exposure range `[min, max]` in PPP.
    pub ppp_range: [f64; 2],
    pub seed: u64,
    pub architecture: Architecture,
    pub prior_pooling: PriorPooling,
    pub t0_init: f64,
    pub learn_t0: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.004,
            batch_size: 100,
            epochs: 20,
            weight_decay: 5e-4,
            exposures_per_image: 4,
            ppp_range: [0.22, 220.0],
            seed: 0,
            architecture: Architecture::Conv,
            prior_pooling: PriorPooling::PerPixel,
            t0_init: 1.0,
            learn_t0: true,
        }
    }
}

impl TrainConfig {
    /// Defaults for the plain baselines, which use a smaller learning rate.
    pub fn baseline() -> Self {
        Self {
            learning_rate: 0.001,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("t0_init", self.t0_init),
            ("ppp_range[0]", self.ppp_range[0]),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} must be finite and > 0")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.exposures_per_image == 0 {
            return Err(Error::invalid(
                "train config",
                "batch_size, epochs and exposures_per_image must be >= 1",
            ));
        }
        if !(self.ppp_range[0] < self.ppp_range[1] && self.ppp_range[1].is_finite()) {
            return Err(Error::invalid("ppp_range", "min must be below a finite max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-exposure loss of each epoch, without the decay penalty.
    pub epoch_losses: Vec<f64>,
    /// `t0` after each epoch (empty for plain networks).
    pub t0_trajectory: Vec<f64>,
}

/// `n` exposures log-uniform over `range`, one per stratum.
pub fn stratified_exposures(n: usize, range: [f64; 2], rng: &mut SimRng) -> Vec<f64> {
    let (lo, hi) = (range[0].ln(), range[1].ln());
    (0..n)
        .map(|j| {
            let u = (j as f64 + rng.random::<f64>()) / n as f64;
            (lo + u * (hi - lo)).exp()
        })
        .collect()
}

/// Prior rate per pixel: the mean training intensity through the sensor model.
pub fn prior_mean(data: &[IntensityImage], noise: &NoiseConfig) -> Result<Vec<f64>> {
    Ok(IntensityImage::mean_pixels(data)?
        .into_iter()
        .map(|i| noise.relative_rate(i))
        .collect())
}

fn check_data(data: &[IntensityImage]) -> Result<(Shape, usize)> {
    let first = data.first().ok_or(Error::Empty("training set"))?;
    let shape = Shape::new(first.channels(), first.height(), first.width());
    let mut classes = std::collections::BTreeSet::new();
    for img in data {
        if Shape::new(img.channels(), img.height(), img.width()) != shape {
            return Err(Error::shape(shape, format!("{}x{}x{}", img.channels(), img.height(), img.width())));
        }
        classes.insert(img.label().ok_or(Error::invalid("label", "training images need labels"))?);
    }
    if classes.len() < 2 {
        return Err(Error::invalid("training set", "needs at least two classes"));
    }
    Ok((shape, classes.last().copied().unwrap_or(0) + 1))
}

/// How a training image is turned into network inputs.
enum Mode<'a> {
    Adapted(&'a mut AdaptedNetwork),
    /// Rate input `N / ppp` at log-uniform exposures.
    Rate(&'a mut Network),
    /// Rate input at one fixed exposure.
    Fixed(&'a mut Network, f64),
}

fn run_sgd(
    data: &[IntensityImage],
    cfg: &TrainConfig,
    noise: &NoiseConfig,
    mut mode: Mode<'_>,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per = 1.0 / cfg.exposures_per_image as f64;
    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        order.shuffle(&mut stream_rng(epoch_seed, u64::MAX));
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let net = match &mode {
                Mode::Adapted(a) => &a.network,
                Mode::Rate(n) | Mode::Fixed(n, _) => &**n,
            };
            let mut grads = Gradients::zeros(net);
            let mut dt0 = 0.0;
            let mut batch_loss = 0.0;
            for &idx in batch {
                let img = &data[idx];
                let label = img.label().expect("checked");
                let mut rng = stream_rng(epoch_seed, idx as u64);
                let ppps = match mode {
                    Mode::Fixed(_, p) => vec![p; cfg.exposures_per_image],
                    _ => stratified_exposures(cfg.exposures_per_image, cfg.ppp_range, &mut rng),
                };
                for ppp in ppps {
                    let counts = render_counts(img, noise, ppp, &mut rng)?;
                    let (x, adapted) = match &mode {
                        Mode::Adapted(a) => (a.adapted_input(&counts.counts, ppp), Some(&**a)),
                        _ => (counts.counts.iter().map(|n| n / ppp).collect(), None),
                    };
                    let acts = net.trace(&x);
                    let (loss, mut dlogits) = softmax_cross_entropy(acts.last().unwrap(), label);
                    batch_loss += loss * per;
                    dlogits.iter_mut().for_each(|g| *g *= per);
                    let want_dx = adapted.is_some_and(|_| cfg.learn_t0);
                    let dx = net.backward(&acts, &dlogits, &mut grads, want_dx);
                    if let (Some(a), Some(dx)) = (adapted, dx) {
                        dt0 += t0_gradient(a, &counts.counts, ppp, &dx);
                    }
                }
            }
            if !batch_loss.is_finite() || grads.flatten().iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {b} (loss {batch_loss})"
                )));
            }
            epoch_loss += batch_loss;
            match &mut mode {
                Mode::Adapted(a) => {
                    a.network.sgd_step(&grads, cfg.learning_rate, cfg.weight_decay);
                    if cfg.learn_t0 {
                        a.t0 = (a.t0 - cfg.learning_rate * dt0).max(T0_FLOOR);
                    }
                }
                Mode::Rate(n) | Mode::Fixed(n, _) => {
                    n.sgd_step(&grads, cfg.learning_rate, cfg.weight_decay)
                }
            }
        }
        report.epoch_losses.push(epoch_loss / data.len() as f64);
        if let Mode::Adapted(a) = &mode {
            report.t0_trajectory.push(a.t0);
        }
    }
    Ok(report)
}

/// Derivative of the loss with respect to `t0`, given `dL/dz`.
pub fn t0_gradient(net: &AdaptedNetwork, counts: &[f64], ppp: f64, dz: &[f64]) -> f64 {
    let (da, dc) = net.t0_derivatives(ppp);
    let prior = net.effective_prior();
    dz.iter()
        .zip(counts)
        .zip(&prior)
        .map(|((g, n), m)| g * (da * n + dc * m))
        .sum::<f64>()
        / net.reference_ppp
}

/// Trains the exposure-adaptive network.
pub fn train_posterior(
    data: &[IntensityImage],
    cfg: &TrainConfig,
    noise: &NoiseConfig,
) -> Result<(AdaptedNetwork, TrainReport)> {
    cfg.validate()?;
    noise.validate()?;
    let (shape, classes) = check_data(data)?;
    let network = Network::build(cfg.architecture, shape, classes, derive_seed(cfg.seed, 0xA11))?;
    let mut net = AdaptedNetwork::new(
        network,
        prior_mean(data, noise)?,
        cfg.t0_init,
        REFERENCE_PPP,
        cfg.prior_pooling,
    )?;
    let report = run_sgd(data, cfg, noise, Mode::Adapted(&mut net))?;
    Ok((net, report))
}

/// Trains a plain network on rate images at log-uniform exposures.
pub fn train_rate(
    data: &[IntensityImage],
    cfg: &TrainConfig,
    noise: &NoiseConfig,
) -> Result<(RateClassifier, TrainReport)> {
    cfg.validate()?;
    noise.validate()?;
    let (shape, classes) = check_data(data)?;
    let mut network = Network::build(cfg.architecture, shape, classes, derive_seed(cfg.seed, 0xB22))?;
    let report = run_sgd(data, cfg, noise, Mode::Rate(&mut network))?;
    Ok((RateClassifier { network }, report))
}

/// Trains a plain network on rate images rendered at a single exposure.
pub fn train_specialist(
    data: &[IntensityImage],
    ppp: f64,
    cfg: &TrainConfig,
    noise: &NoiseConfig,
) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    noise.validate()?;
    if !(ppp > 0.0 && ppp.is_finite()) {
        return Err(Error::invalid("anchor ppp", format!("{ppp} must be finite and > 0")));
    }
    let (shape, classes) = check_data(data)?;
    let seed = derive_seed(cfg.seed, ppp.to_bits());
    let mut network = Network::build(cfg.architecture, shape, classes, seed)?;
    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let report = run_sgd(data, &cfg, noise, Mode::Fixed(&mut network, ppp))?;
    Ok((network, report))
}

/// One specialist per anchor exposure.
pub fn train_ensemble(
    data: &[IntensityImage],
    anchors: &[f64],
    cfg: &TrainConfig,
    noise: &NoiseConfig,
) -> Result<(Ensemble, Vec<TrainReport>)> {
    if !anchors.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::invalid("anchors", "must be sorted ascending"));
    }
    let mut members = Vec::with_capacity(anchors.len());
    let mut reports = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let (net, report) = train_specialist(data, a, cfg, noise)?;
        members.push((a, net));
        reports.push(report);
    }
    Ok((Ensemble::new(members)?, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two classes: a bright left half or a bright right half, with noise.
    fn toy_set(n: usize, seed: u64) -> Vec<IntensityImage> {
        let mut rng = stream_rng(seed, 0);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let px: Vec<f64> = (0..36)
                    .map(|p| {
                        let left = p % 6 < 3;
                        let on = (label == 0) == left;
                        let base = if on { 0.8 } else { 0.1 };
                        (base + 0.2 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)
                    })
                    .collect();
                IntensityImage::new(6, 6, 1, px, Some(label)).unwrap()
            })
            .collect()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            architecture: Architecture::Fc,
            batch_size: 20,
            epochs: 20,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn toy_training_loss_decreases() {
        let data = toy_set(200, 1);
        let (_, report) = train_posterior(&data, &toy_cfg(), &NoiseConfig::default()).unwrap();
        let l = &report.epoch_losses;
        assert!(l[4] < l[0], "{l:?}");
        assert!(l[19] < 0.5 * l[0], "{l:?}");
        assert_eq!(report.t0_trajectory.len(), 20);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_set(60, 2);
        let cfg = TrainConfig {
            epochs: 2,
            ..toy_cfg()
        };
        let a = train_posterior(&data, &cfg, &NoiseConfig::default()).unwrap();
        let b = train_posterior(&data, &cfg, &NoiseConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stratified_exposures_cover_each_stratum() {
        let mut rng = stream_rng(3, 0);
        let p = stratified_exposures(4, [0.22, 220.0], &mut rng);
        for (j, v) in p.iter().enumerate() {
            let lo = 0.22 * 1000f64.powf(j as f64 / 4.0);
            let hi = 0.22 * 1000f64.powf((j + 1) as f64 / 4.0);
            assert!(*v >= lo && *v <= hi, "{p:?}");
        }
    }

    #[test]
    fn rejects_single_class_and_empty() {
        let data: Vec<_> = toy_set(10, 4).into_iter().filter(|i| i.label() == Some(0)).collect();
        assert!(train_posterior(&data, &toy_cfg(), &NoiseConfig::default()).is_err());
        assert!(train_posterior(&[], &toy_cfg(), &NoiseConfig::default()).is_err());
    }
}
