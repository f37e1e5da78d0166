//! Exposure-adaptive classifier and the baselines it is compared against.
//!
//! All networks take inputs on the intensity scale of training images. A plain
//! network sees the rate image `N / ppp`. The adapted network sees
//! `z = (alpha(t) N + c(t) mu) / T`, where `alpha(t) = (T + t0) / (t + t0)`,
//! `c(t) = t0 (T - t) / (t + t0)` and `mu` is the prior photon rate per pixel.
//! Its first layer therefore computes `alpha(t) W N / T + beta(t)` with
//! `beta(t) = c(t) W mu / T + b`. At `t = T` this is the plain input `N / T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::light::LightEstimator;
use crate::nn::{softmax, Layer, Network};
use crate::photon_sim::CountImage;

/// Lower clamp applied to probabilities before taking log-ratios.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub probabilities: Vec<f64>,
    /// `ln(p / (1 - p))` per class.
    pub log_ratios: Vec<f64>,
}

impl ClassPosterior {
    pub fn from_logits(logits: &[f64]) -> Self {
        let probabilities = softmax(logits);
        let log_ratios = probabilities
            .iter()
            .map(|&p| {
                let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                p.ln() - (-p).ln_1p()
            })
            .collect();
        Self {
            probabilities,
            log_ratios,
        }
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probabilities)
    }

    pub fn max_log_ratio(&self) -> f64 {
        self.log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when `class` is the unique most probable class.
    pub fn is_unique_argmax(&self, class: usize) -> bool {
        let p = self.probabilities[class];
        self.probabilities
            .iter()
            .enumerate()
            .all(|(c, &q)| c == class || q < p)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Anything that maps a count image to class probabilities.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    fn input_len(&self) -> usize;
    fn posterior(&self, counts: &CountImage) -> Result<ClassPosterior>;
}

fn check_len(expected: usize, counts: &CountImage) -> Result<()> {
    if counts.counts.len() != expected {
        return Err(Error::shape(expected, counts.counts.len()));
    }
    Ok(())
}

/// How the prior mean enters a convolutional first layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorPooling {
    /// Per-pixel prior mean.
    #[default]
    PerPixel,
    /// One scalar mean per image, giving a single bias correction per map.
    PerMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedNetwork {
    pub network: Network,
    /// Per-pixel prior rate, relative to the brightest pixel.
    pub prior_mean: Vec<f64>,
    pub t0: f64,
    pub reference_ppp: f64,
    pub pooling: PriorPooling,
}

impl AdaptedNetwork {
    pub fn new(
        network: Network,
        prior_mean: Vec<f64>,
        t0: f64,
        reference_ppp: f64,
        pooling: PriorPooling,
    ) -> Result<Self> {
        if prior_mean.len() != network.input.len() {
            return Err(Error::shape(network.input.len(), prior_mean.len()));
        }
        if !(t0 > 0.0 && t0.is_finite()) {
            return Err(Error::invalid("t0", format!("{t0} must be finite and > 0")));
        }
        if !(reference_ppp > 0.0 && reference_ppp.is_finite()) {
            return Err(Error::invalid(
                "reference_ppp",
                format!("{reference_ppp} must be finite and > 0"),
            ));
        }
        Ok(Self {
            network,
            prior_mean,
            t0,
            reference_ppp,
            pooling,
        })
    }

    /// `(T + t0) / (t + t0)`.
    pub fn alpha(&self, ppp: f64) -> f64 {
        (self.reference_ppp + self.t0) / (ppp + self.t0)
    }

    /// Weight of the prior mean, `t0 (T - t) / (t + t0)`.
    pub fn prior_weight(&self, ppp: f64) -> f64 {
        self.t0 * (self.reference_ppp - ppp) / (ppp + self.t0)
    }

    /// `(d alpha / d t0, d c / d t0)`.
    pub fn t0_derivatives(&self, ppp: f64) -> (f64, f64) {
        let d = (ppp + self.t0).powi(2);
        ((ppp - self.reference_ppp) / d, (self.reference_ppp - ppp) * ppp / d)
    }

    /// Prior mean after pooling.
    pub fn effective_prior(&self) -> Vec<f64> {
        match self.pooling {
            PriorPooling::PerPixel => self.prior_mean.clone(),
            PriorPooling::PerMap => {
                let n = self.prior_mean.len();
                let c = self.network.input.channels.max(1);
                let plane = n / c;
                let mut out = vec![0.0; n];
                for ch in 0..c {
                    let s = &self.prior_mean[ch * plane..(ch + 1) * plane];
                    let m = s.iter().sum::<f64>() / plane as f64;
                    out[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = m);
                }
                out
            }
        }
    }

    /// Network input `z` for counts observed at `ppp`.
    pub fn adapted_input(&self, counts: &[f64], ppp: f64) -> Vec<f64> {
        let (a, c, t) = (self.alpha(ppp), self.prior_weight(ppp), self.reference_ppp);
        if c == 0.0 {
            return counts.iter().map(|n| a * n / t).collect();
        }
        let prior = self.effective_prior();
        counts.iter().zip(&prior).map(|(n, m)| (a * n + c * m) / t).collect()
    }

    pub fn logits_at(&self, counts: &[f64], ppp: f64) -> Vec<f64> {
        self.network.logits(&self.adapted_input(counts, ppp))
    }

    pub fn posterior_at(&self, counts: &CountImage, ppp: f64) -> Result<ClassPosterior> {
        check_len(self.network.input.len(), counts)?;
        if !(ppp >= 0.0 && ppp.is_finite()) {
            return Err(Error::invalid("ppp", format!("{ppp} must be finite and >= 0")));
        }
        Ok(ClassPosterior::from_logits(&self.logits_at(&counts.counts, ppp)))
    }

    /// First-layer pre-activation computed in the `alpha W N / T + beta` form.
    pub fn first_layer_preactivation(&self, counts: &[f64], ppp: f64) -> Vec<f64> {
        let wn = linear_part(self.network.first_layer(), counts);
        let beta = self.beta(ppp);
        let a = self.alpha(ppp) / self.reference_ppp;
        wn.iter().zip(&beta).map(|(w, b)| a * w + b).collect()
    }

    /// Per-unit adapted first-layer bias `beta(t)`.
    pub fn beta(&self, ppp: f64) -> Vec<f64> {
        let layer = self.network.first_layer();
        let c = self.prior_weight(ppp) / self.reference_ppp;
        let wm = linear_part(layer, &self.effective_prior());
        let bias = unit_bias(layer);
        wm.iter().zip(&bias).map(|(w, b)| c * w + b).collect()
    }
}

/// First-layer weights applied without bias.
pub fn linear_part(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; layer.output_len()];
    layer.forward(x, &mut y);
    let bias = unit_bias(layer);
    y.iter_mut().zip(&bias).for_each(|(v, b)| *v -= b);
    y
}

/// Bias of every output unit of a linear layer.
pub fn unit_bias(layer: &Layer) -> Vec<f64> {
    match layer {
        Layer::Dense(d) => d.bias.clone(),
        Layer::Conv(c) => {
            let per_map = c.output().height * c.output().width;
            c.bias
                .iter()
                .flat_map(|&b| std::iter::repeat_n(b, per_map))
                .collect()
        }
        _ => vec![0.0; layer.output_len()],
    }
}

impl Classifier for AdaptedNetwork {
    fn num_classes(&self) -> usize {
        self.network.num_classes()
    }

    fn input_len(&self) -> usize {
        self.network.input.len()
    }

    fn posterior(&self, counts: &CountImage) -> Result<ClassPosterior> {
        self.posterior_at(counts, counts.ppp)
    }
}

/// Rate image `N / ppp`; rejects empty exposures.
pub fn rate_input(counts: &CountImage) -> Result<Vec<f64>> {
    if !(counts.ppp > 0.0) {
        return Err(Error::invalid(
            "ppp",
            "rate normalization needs a positive exposure",
        ));
    }
    Ok(counts.counts.iter().map(|n| n / counts.ppp).collect())
}

/// Plain network applied to the time-normalized image.
#[derive(Debug, Clone, PartialEq)]
pub struct RateClassifier {
    pub network: Network,
}

impl Classifier for RateClassifier {
    fn num_classes(&self) -> usize {
        self.network.num_classes()
    }

    fn input_len(&self) -> usize {
        self.network.input.len()
    }

    fn posterior(&self, counts: &CountImage) -> Result<ClassPosterior> {
        check_len(self.input_len(), counts)?;
        Ok(ClassPosterior::from_logits(&self.network.logits(&rate_input(counts)?)))
    }
}

/// Specialist trained at the reference exposure, applied to rescaled counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Photopic {
    pub network: Network,
    pub reference_ppp: f64,
}

impl Photopic {
    /// Counts scaled to the reference exposure, `N * T / ppp`.
    pub fn rescale(&self, counts: &CountImage) -> Result<Vec<f64>> {
        if !(counts.ppp > 0.0) {
            return Err(Error::invalid("ppp", "rescaling needs a positive exposure"));
        }
        let k = self.reference_ppp / counts.ppp;
        Ok(counts.counts.iter().map(|n| n * k).collect())
    }
}

impl Classifier for Photopic {
    fn num_classes(&self) -> usize {
        self.network.num_classes()
    }

    fn input_len(&self) -> usize {
        self.network.input.len()
    }

    fn posterior(&self, counts: &CountImage) -> Result<ClassPosterior> {
        check_len(self.input_len(), counts)?;
        let scaled = self.rescale(counts)?;
        let x: Vec<f64> = scaled.iter().map(|n| n / self.reference_ppp).collect();
        Ok(ClassPosterior::from_logits(&self.network.logits(&x)))
    }
}

/// Specialists trained at fixed exposures, sorted by anchor PPP.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<(f64, Network)>,
}

impl Ensemble {
    pub fn new(members: Vec<(f64, Network)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("ensemble"));
        }
        if !members.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(Error::invalid("anchors", "must be strictly ascending"));
        }
        if members.iter().any(|(p, _)| !(*p > 0.0)) {
            return Err(Error::invalid("anchors", "must be positive"));
        }
        Ok(Self { members })
    }

    /// Index of the anchor nearest to `ppp` in log scale; ties go to the
    /// lower anchor.
    pub fn route(&self, ppp: f64) -> usize {
        route(self.members.iter().map(|m| m.0), ppp)
    }
}

pub(crate) fn route(anchors: impl Iterator<Item = f64>, ppp: f64) -> usize {
    let lp = ppp.ln();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, a) in anchors.enumerate() {
        let d = (a.ln() - lp).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

impl Classifier for Ensemble {
    fn num_classes(&self) -> usize {
        self.members[0].1.num_classes()
    }

    fn input_len(&self) -> usize {
        self.members[0].1.input.len()
    }

    fn posterior(&self, counts: &CountImage) -> Result<ClassPosterior> {
        check_len(self.input_len(), counts)?;
        let (_, net) = &self.members[self.route(counts.ppp)];
        // Counts rescaled to the anchor's expected total, `N * a / ppp`, and
        // divided by `a` for the network input, which is the rate image.
        Ok(ClassPosterior::from_logits(&net.logits(&rate_input(counts)?)))
    }
}

/// Adapted network driven by a PPP estimated from the image itself.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedLight {
    pub network: AdaptedNetwork,
    pub estimator: LightEstimator,
}

impl Classifier for EstimatedLight {
    fn num_classes(&self) -> usize {
        self.network.num_classes()
    }

    fn input_len(&self) -> usize {
        self.network.input_len()
    }

    fn posterior(&self, counts: &CountImage) -> Result<ClassPosterior> {
        let ppp = self.estimator.estimate_ppp(counts)?;
        self.network.posterior_at(counts, ppp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, Dense, Shape};

    fn scalar_net(w: f64, b: f64) -> Network {
        Network::from_layers(
            Shape::flat(1),
            vec![Layer::Dense(Dense {
                inputs: 1,
                outputs: 1,
                weights: vec![w],
                bias: vec![b],
            })],
        )
        .unwrap()
    }

    fn adapted_scalar(t0: f64, t: f64, mu: f64) -> AdaptedNetwork {
        AdaptedNetwork::new(scalar_net(1.0, 0.0), vec![mu], t0, t, PriorPooling::PerPixel).unwrap()
    }

    fn image(counts: Vec<f64>, ppp: f64) -> CountImage {
        CountImage {
            height: 1,
            width: counts.len(),
            channels: 1,
            counts,
            num_bins: 0,
            ppp,
        }
    }

    #[test]
    fn alpha_examples() {
        let net = adapted_scalar(1.0, 9.0, 0.0);
        assert_eq!(net.alpha(9.0), 1.0);
        assert_eq!(net.alpha(0.0), 10.0);
        assert!(net.alpha(100.0) < net.alpha(10.0));
    }

    #[test]
    fn beta_examples() {
        // Unnormalized form: t0 (T - t)/(t + t0) * W mu + b with W = 1 is
        // 1 * 3 / 2 = 1.5; the network sees W / T, so scale back by T.
        let net = adapted_scalar(1.0, 4.0, 1.0);
        assert!((net.beta(1.0)[0] * 4.0 - 1.5).abs() < 1e-12);
        assert_eq!(net.beta(4.0), vec![0.0]);
        let zero_mu = adapted_scalar(1.0, 4.0, 0.0);
        assert_eq!(zero_mu.beta(0.5), vec![0.0]);
    }

    #[test]
    fn adapted_equals_plain_at_reference() {
        let plain = Network::build(Architecture::Fc, Shape::new(1, 4, 4), 3, 5).unwrap();
        let mu: Vec<f64> = (0..16).map(|i| i as f64 / 20.0).collect();
        let net = AdaptedNetwork::new(plain.clone(), mu, 1.7, 220.0, PriorPooling::PerPixel).unwrap();
        let counts: Vec<f64> = (0..16).map(|i| ((i * 13) % 7) as f64 * 30.0).collect();
        let a = net.logits_at(&counts, 220.0);
        let x: Vec<f64> = counts.iter().map(|c| c / 220.0).collect();
        assert_eq!(a, plain.logits(&x));
    }

    #[test]
    fn zero_counts_at_zero_exposure_use_prior_image() {
        let plain = Network::build(Architecture::Fc, Shape::new(1, 3, 3), 2, 1).unwrap();
        let mu: Vec<f64> = (0..9).map(|i| 0.1 * i as f64).collect();
        let net = AdaptedNetwork::new(plain.clone(), mu.clone(), 1.0, 220.0, PriorPooling::PerPixel)
            .unwrap();
        let z = net.adapted_input(&[0.0; 9], 0.0);
        for (a, b) in z.iter().zip(&mu) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptation_depends_on_time_not_only_rate() {
        let plain = Network::build(Architecture::Fc, Shape::new(1, 3, 3), 2, 2).unwrap();
        let mu = vec![0.3; 9];
        let net = AdaptedNetwork::new(plain.clone(), mu, 1.0, 220.0, PriorPooling::PerPixel).unwrap();
        let n: Vec<f64> = (0..9).map(|i| i as f64 % 3.0).collect();
        let n2: Vec<f64> = n.iter().map(|v| 2.0 * v).collect();
        let a = net.posterior_at(&image(n.clone(), 2.0), 2.0).unwrap();
        let b = net.posterior_at(&image(n2, 4.0), 4.0).unwrap();
        assert_ne!(a.probabilities, b.probabilities);
        let rate = RateClassifier { network: plain };
        let n2: Vec<f64> = n.iter().map(|v| 2.0 * v).collect();
        let ra = rate.posterior(&image(n, 2.0)).unwrap();
        let rb = rate.posterior(&image(n2, 4.0)).unwrap();
        assert_eq!(ra.probabilities, rb.probabilities);
    }

    #[test]
    fn first_layer_forms_agree() {
        let plain = Network::build(Architecture::Conv, Shape::new(1, 16, 16), 3, 9).unwrap();
        let mu: Vec<f64> = (0..256).map(|i| (i % 11) as f64 / 10.0).collect();
        for pooling in [PriorPooling::PerPixel, PriorPooling::PerMap] {
            let net = AdaptedNetwork::new(plain.clone(), mu.clone(), 2.0, 220.0, pooling).unwrap();
            let counts: Vec<f64> = (0..256).map(|i| (i % 3) as f64).collect();
            for ppp in [0.0, 0.5, 7.0, 220.0] {
                let direct = net.first_layer_preactivation(&counts, ppp);
                let mut via_input = vec![0.0; direct.len()];
                net.network
                    .first_layer()
                    .forward(&net.adapted_input(&counts, ppp), &mut via_input);
                for (a, b) in direct.iter().zip(&via_input) {
                    assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
                }
            }
        }
    }

    #[test]
    fn per_map_pooling_gives_one_bias_per_map() {
        let plain = Network::build(Architecture::Conv, Shape::new(1, 16, 16), 3, 9).unwrap();
        let mu: Vec<f64> = (0..256).map(|i| (i % 5) as f64 / 4.0).collect();
        let net = AdaptedNetwork::new(plain, mu, 1.0, 220.0, PriorPooling::PerMap).unwrap();
        let beta = net.beta(1.0);
        let per_map = 12 * 12;
        for map in beta.chunks(per_map) {
            assert!(map.iter().all(|b| (b - map[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn posterior_invariants() {
        let p = ClassPosterior::from_logits(&[0.0, 50.0, -3.0]);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p.argmax(), 1);
        assert_eq!(argmax(&p.log_ratios), 1);
        assert!(p.log_ratios.iter().all(|s| s.is_finite()));
        let tie = ClassPosterior::from_logits(&[1.0, 1.0]);
        assert_eq!(tie.argmax(), 0);
        assert!(!tie.is_unique_argmax(0));
    }

    #[test]
    fn routing_uses_log_distance_with_lower_tie_break() {
        assert_eq!(route([2.2, 22.0].into_iter(), 5.0), 0);
        assert_eq!(route([1.0, 100.0].into_iter(), 10.0), 0);
        assert_eq!(route([1.0, 100.0].into_iter(), 10.5), 1);
        assert_eq!(route([0.22, 2.2, 22.0, 220.0].into_iter(), 1000.0), 3);
    }

    #[test]
    fn photopic_scales_counts_to_reference() {
        let net = Network::build(Architecture::Fc, Shape::new(1, 2, 2), 2, 3).unwrap();
        let ph = Photopic {
            network: net.clone(),
            reference_ppp: 220.0,
        };
        let img = image(vec![1.0, 2.0, 0.0, 3.0], 22.0);
        assert_eq!(ph.rescale(&img).unwrap(), vec![10.0, 20.0, 0.0, 30.0]);
        let at_ref = image(vec![220.0, 0.0, 110.0, 5.0], 220.0);
        let x: Vec<f64> = at_ref.counts.iter().map(|c| c / 220.0).collect();
        assert_eq!(
            ph.posterior(&at_ref).unwrap().probabilities,
            ClassPosterior::from_logits(&net.logits(&x)).probabilities
        );
        assert!(ph.posterior(&image(vec![0.0; 4], 0.0)).is_err());
    }
}
