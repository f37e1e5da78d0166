//! Checks against oracles that recompute each quantity independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scotopic::classifier::{ClassPosterior, Classifier};
use scotopic::nn::{softmax_cross_entropy, Dense, Gradients, Layer, Shape};
use scotopic::photon_sim::{accumulate, simulate_stream};
use scotopic::spiking::MembraneLayer;
use scotopic::sprt::{decide_fr, error_bound, log_grid};
use scotopic::threshold::{bayes_risk, risk_gradient};
use scotopic::train::t0_gradient;
use scotopic::{
    AdaptedNetwork, CountImage, IntensityImage, Network, NoiseConfig, PhotonStream, PriorPooling,
    Result, RiskDataset, ThresholdSchedule, TimeCost,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dense(inputs: usize, outputs: usize, r: &mut ChaCha8Rng) -> Layer {
    Layer::Dense(Dense {
        inputs,
        outputs,
        weights: (0..inputs * outputs).map(|_| r.random_range(-1.0..1.0)).collect(),
        bias: (0..outputs).map(|_| r.random_range(-0.5..0.5)).collect(),
    })
}

fn tiny_adapted(seed: u64, inputs: usize, hidden: usize, classes: usize) -> AdaptedNetwork {
    let mut r = rng(seed);
    let net = Network::from_layers(
        Shape::new(1, 1, inputs),
        vec![dense(inputs, hidden, &mut r), Layer::Relu { len: hidden }, dense(hidden, classes, &mut r)],
    )
    .unwrap();
    let prior = (0..inputs).map(|_| r.random_range(0.05..1.0)).collect();
    AdaptedNetwork::new(net, prior, 1.7, 220.0, PriorPooling::PerPixel).unwrap()
}

fn adapted_loss(net: &AdaptedNetwork, counts: &[f64], ppp: f64, label: usize) -> f64 {
    softmax_cross_entropy(&net.logits_at(counts, ppp), label).0
}

#[test]
fn training_gradients_match_finite_differences() {
    let net = tiny_adapted(11, 6, 4, 3);
    assert!(net.network.param_count() <= 50);
    let counts = [3.0, 0.0, 1.0, 7.0, 2.0, 0.0];
    for (ppp, label) in [(0.5, 0), (5.0, 1), (60.0, 2)] {
        let x = net.adapted_input(&counts, ppp);
        let acts = net.network.trace(&x);
        let (_, dlogits) = softmax_cross_entropy(acts.last().unwrap(), label);
        let mut grads = Gradients::zeros(&net.network);
        let dx = net.network.backward(&acts, &dlogits, &mut grads, true).unwrap();
        let analytic = grads.flatten();
        let params = net.network.flat_params();
        let h = 1e-6;
        for i in 0..params.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p[i] += delta;
                let mut n = net.clone();
                n.network.set_flat_params(&p).unwrap();
                adapted_loss(&n, &counts, ppp, label)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(analytic[i].abs()) + 1e-8;
            assert!((fd - analytic[i]).abs() <= tol, "param {i} at ppp {ppp}: {fd} vs {}", analytic[i]);
        }
        let dt0 = t0_gradient(&net, &counts, ppp, &dx);
        let at = |t0: f64| adapted_loss(&AdaptedNetwork { t0, ..net.clone() }, &counts, ppp, label);
        let fd = (at(net.t0 + h) - at(net.t0 - h)) / (2.0 * h);
        assert!((fd - dt0).abs() <= 1e-4 * fd.abs().max(dt0.abs()) + 1e-8, "t0: {fd} vs {dt0}");
    }
}

fn random_dataset(seed: u64, n: usize, g: usize, time_cost: TimeCost) -> RiskDataset {
    let mut r = rng(seed);
    let grid = log_grid(0.22, 220.0, g);
    let s_max = (0..n)
        .map(|_| {
            let mut s = r.random_range(-1.0..1.0);
            (0..g)
                .map(|_| {
                    s += r.random_range(-0.5..1.5);
                    s
                })
                .collect()
        })
        .collect();
    let errors = (0..n).map(|_| (0..g).map(|_| r.random_bool(0.3)).collect()).collect();
    RiskDataset::new(s_max, errors, grid, 0.022, time_cost).unwrap()
}

/// Simulates the stopping rule directly and charges each query's time cost.
fn enumerated_risk(data: &RiskDataset, tau: &[f64], eta: f64) -> f64 {
    let g = data.grid.len();
    let mut total = 0.0;
    for (s, e) in data.s_max.iter().zip(&data.errors) {
        let stop = (0..g - 1).find(|&k| s[k] > tau[k]).unwrap_or(g - 1);
        let time = match data.time_cost {
            TimeCost::PppIncrement => eta * data.grid[stop],
            TimeCost::ConstantPerStep => eta * data.bin_width * (stop + 1) as f64,
        };
        total += time + if e[stop] { 1.0 } else { 0.0 };
    }
    total / data.len() as f64
}

#[test]
fn hard_risk_equals_stopping_time_enumeration() {
    for seed in 0..20 {
        for time_cost in [TimeCost::PppIncrement, TimeCost::ConstantPerStep] {
            let data = random_dataset(seed, 10, 8, time_cost);
            let mut r = rng(seed + 100);
            let tau: Vec<f64> = (0..8).map(|_| r.random_range(0.0..4.0)).collect();
            let sched = ThresholdSchedule::new(data.grid.clone(), tau.clone(), 0.01).unwrap();
            for eta in [0.0, 0.001, 0.01, 1.0] {
                let got = bayes_risk(&data, &sched, eta, 0.0).unwrap();
                let want = enumerated_risk(&data, &tau, eta);
                assert!((got - want).abs() <= 1e-9, "seed {seed}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn risk_gradient_matches_finite_differences() {
    let data = random_dataset(7, 10, 8, TimeCost::PppIncrement);
    let tau: Vec<f64> = (0..8).map(|k| 0.5 + 0.3 * k as f64).collect();
    let (eta, smooth) = (0.01, 0.02);
    for sigma in [0.5, 0.1, 0.05] {
        let sched = ThresholdSchedule::new(data.grid.clone(), tau.clone(), eta).unwrap();
        let grad = risk_gradient(&data, &sched, eta, sigma, smooth).unwrap();
        let h = 1e-6;
        for k in 0..tau.len() {
            let at = |d: f64| {
                let mut t = tau.clone();
                t[k] += d;
                let s = ThresholdSchedule::new(data.grid.clone(), t, eta).unwrap();
                scotopic::threshold::objective(&data, &s, eta, sigma, smooth).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!(
                (fd - grad[k]).abs() <= 1e-4 * fd.abs().max(grad[k].abs()) + 1e-8,
                "sigma {sigma}, k {k}: {fd} vs {}",
                grad[k]
            );
        }
    }
}

#[test]
fn sensor_counts_have_poisson_mean_and_fano() {
    let bins = 100_000;
    for dc in [0.0, 0.03, 0.11] {
        let cfg = NoiseConfig {
            dark_current: dc,
            bin_width: 1.0,
            ..NoiseConfig::default()
        };
        let img = IntensityImage::new(1, 1, 3, vec![0.0, 0.5, 1.0], None).unwrap();
        let stream = simulate_stream(&img, &cfg, bins, 42).unwrap();
        for (p, &i) in [0.0, 0.5, 1.0].iter().enumerate() {
            let mu = (i + dc) / (1.0 + dc);
            let xs: Vec<f64> = (1..=bins).map(|t| f64::from(stream.dense_frame(t)[p])).collect();
            let mean = xs.iter().sum::<f64>() / bins as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (bins - 1) as f64;
            if mu == 0.0 {
                assert_eq!(mean, 0.0);
                continue;
            }
            let mean_se = (mu / bins as f64).sqrt();
            assert!((mean - mu).abs() <= 4.0 * mean_se, "I={i} dc={dc}: mean {mean} vs {mu}");
            let fano_se = ((1.0 / mu + 2.0) / bins as f64).sqrt();
            assert!((var / mean - 1.0).abs() <= 4.0 * fano_se, "I={i} dc={dc}: fano {}", var / mean);
        }
    }
}

/// Exact posterior for two known rate patterns under Poisson counts.
struct TwoPatterns {
    rates: [[f64; 4]; 2],
}

impl Classifier for TwoPatterns {
    fn num_classes(&self) -> usize {
        2
    }

    fn input_len(&self) -> usize {
        4
    }

    fn posterior(&self, counts: &CountImage) -> Result<ClassPosterior> {
        let loglik: Vec<f64> = self
            .rates
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&counts.counts)
                    .map(|(l, n)| n * (l * counts.ppp).ln() - l * counts.ppp)
                    .sum()
            })
            .collect();
        Ok(ClassPosterior::from_logits(&loglik))
    }
}

#[test]
fn sprt_error_respects_wald_bound() {
    let rates = [[1.0, 0.6, 0.3, 0.1], [0.1, 0.3, 0.6, 1.0]];
    let clf = TwoPatterns { rates };
    let cfg = NoiseConfig {
        dark_current: 0.0,
        bin_width: 0.05,
        ..NoiseConfig::default()
    };
    let max_ppp = 20.0;
    let bins = cfg.bins_for_ppp(max_ppp);
    let grid: Vec<f64> = (1..=bins).map(|b| cfg.ppp_of_bins(b)).collect();
    let trials = 2000;
    for tau in [1.0, 2.0, 3.0] {
        let sched = ThresholdSchedule::constant(tau);
        let mut wrong = 0;
        for n in 0..trials {
            let label = n % 2;
            let img = IntensityImage::new(1, 2, 2, rates[label].to_vec(), Some(label)).unwrap();
            let stream: PhotonStream = simulate_stream(&img, &cfg, bins, 1000 + n as u64).unwrap();
            let trace = decide_fr(&stream, &clf, &sched, &grid, max_ppp, &cfg, 0).unwrap();
            wrong += usize::from(trace.declared != label);
        }
        let bound = error_bound(tau);
        let se = (bound * (1.0 - bound) / trials as f64).sqrt();
        let err = wrong as f64 / trials as f64;
        assert!(err <= bound + 3.0 * se, "tau {tau}: error {err} above bound {bound}");
    }
}

#[test]
fn membrane_recurrence_equals_dense_first_layer() {
    let mut r = rng(5);
    let inputs = 12;
    let net = {
        let n = tiny_adapted(3, inputs, 20, 2);
        AdaptedNetwork { t0: 0.8, ..n }
    };
    let cfg = NoiseConfig {
        bin_width: 0.5,
        ..NoiseConfig::default()
    };
    let frames: Vec<Vec<u32>> = (0..50)
        .map(|_| (0..inputs).map(|_| if r.random_bool(0.3) { r.random_range(1..4) } else { 0 }).collect())
        .collect();
    let stream = PhotonStream::from_frames(1, 1, inputs, &frames, &cfg, None).unwrap();
    let mut layer = MembraneLayer::new(&net, &stream).unwrap();
    let first = net.network.first_layer();
    for t in 1..=50 {
        layer.step(stream.frame(t).iter(), t).unwrap();
        let counts = accumulate(&stream, t).unwrap();
        // Dense oracle: the plain first layer applied to the adapted input.
        let mut want = vec![0.0; first.output_len()];
        first.forward(&net.adapted_input(&counts.counts, counts.ppp), &mut want);
        for (v, w) in layer.potentials.iter().zip(&want) {
            assert!((v - w).abs() <= 1e-6 * w.abs().max(1e-3), "bin {t}: {v} vs {w}");
        }
    }

    // Multi-bin jumps with aggregated photons reach the same potentials.
    let mut jumping = MembraneLayer::new(&net, &stream).unwrap();
    let mut last = 0;
    for t in [3, 4, 11, 30, 50] {
        let mut agg = vec![0u32; inputs];
        for b in last + 1..=t {
            for (p, c) in stream.frame(b).iter() {
                agg[p] += c;
            }
        }
        let photons = agg.iter().enumerate().filter(|(_, &c)| c > 0).map(|(p, &c)| (p, c));
        jumping.advance_to(photons, t).unwrap();
        last = t;
        let counts = accumulate(&stream, t).unwrap();
        let mut want = vec![0.0; first.output_len()];
        first.forward(&net.adapted_input(&counts.counts, counts.ppp), &mut want);
        for (v, w) in jumping.potentials.iter().zip(&want) {
            assert!((v - w).abs() <= 1e-6 * w.abs().max(1e-3), "jump to {t}: {v} vs {w}");
        }
    }
    assert!(jumping.advance_to(std::iter::empty(), 50).is_err());
}

#[test]
fn scalar_membrane_example() {
    let net = Network::from_layers(
        Shape::new(1, 1, 1),
        vec![Layer::Dense(Dense {
            inputs: 1,
            outputs: 1,
            weights: vec![1.0],
            bias: vec![0.0],
        })],
    )
    .unwrap();
    let net = AdaptedNetwork::new(net, vec![1.0], 1.0, 4.0, PriorPooling::PerPixel).unwrap();
    let cfg = NoiseConfig {
        bin_width: 1.0,
        ..NoiseConfig::default()
    };
    let frames = vec![vec![1], vec![0], vec![2], vec![1]];
    let stream = PhotonStream::from_frames(1, 1, 1, &frames, &cfg, None).unwrap();
    let mut layer = MembraneLayer::new(&net, &stream).unwrap();
    for t in 1..=4 {
        layer.step(stream.frame(t).iter(), t).unwrap();
    }
    // At t = T the input is N / T with N = 4.
    assert!((layer.potentials[0] - 1.0).abs() < 1e-12);
}

#[test]
fn adapted_network_matches_plain_at_reference() {
    let net = tiny_adapted(9, 10, 8, 3);
    let mut r = rng(1);
    for _ in 0..20 {
        let counts: Vec<f64> = (0..10).map(|_| f64::from(r.random_range(0u32..300))).collect();
        let plain = net.network.logits(&counts.iter().map(|n| n / 220.0).collect::<Vec<_>>());
        assert_eq!(net.logits_at(&counts, 220.0), plain);
    }
}
