//! Property tests for invariants that must hold on arbitrary inputs.

use proptest::prelude::*;
use scotopic::classifier::{ClassPosterior, Classifier};
use scotopic::light::pooled_response;
use scotopic::model_io::{read_model, write_model, Model};
use scotopic::photon_sim::{accumulate, simulate_stream};
use scotopic::spiking::emit_spikes;
use scotopic::sprt::{log_grid, Trajectory};
use scotopic::threshold::{bayes_risk, optimize};
use scotopic::nn::Shape;
use scotopic::{
    AnnealConfig, Architecture, CountImage, IntensityImage, Network, NoiseConfig, RateClassifier,
    RiskDataset, ThresholdSchedule, TimeCost,
};

fn image(h: usize, w: usize, counts: Vec<f64>, ppp: f64) -> CountImage {
    CountImage {
        height: h,
        width: w,
        channels: 1,
        counts,
        num_bins: 0,
        ppp,
    }
}

fn brute_force_pooled(counts: &[f64], h: usize, w: usize, s: usize, k: usize) -> f64 {
    let mut sums = Vec::new();
    for y in 0..=h - s {
        for x in 0..=w - s {
            let mut total = 0.0;
            for dy in 0..s {
                for dx in 0..s {
                    total += counts[(y + dy) * w + x + dx];
                }
            }
            sums.push(total);
        }
    }
    sums.sort_by(|a, b| b.total_cmp(a));
    let top = &sums[..k];
    if k % 2 == 1 {
        top[k / 2]
    } else {
        (top[k / 2 - 1] + top[k / 2]) / 2.0
    }
}

fn risk_data(s_max: Vec<Vec<f64>>, errors: Vec<Vec<bool>>) -> RiskDataset {
    let g = s_max[0].len();
    RiskDataset::new(s_max, errors, log_grid(0.22, 220.0, g), 0.022, TimeCost::PppIncrement).unwrap()
}

fn dataset_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<bool>>)> {
    (1usize..8, 2usize..8).prop_flat_map(|(n, g)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0f64..8.0, g), n),
            prop::collection::vec(prop::collection::vec(any::<bool>(), g), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooled_response_matches_brute_force(
        h in 3usize..=8,
        w in 3usize..=8,
        s in 1usize..=3,
        k in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let counts: Vec<f64> = (0..h * w)
            .map(|i| (seed.rotate_left(i as u32 % 64) % 7) as f64)
            .collect();
        let img = image(h, w, counts.clone(), 1.0);
        let k = k.min((h + 1 - s) * (w + 1 - s));
        let got = pooled_response(&img, s, k).unwrap();
        prop_assert_eq!(got, brute_force_pooled(&counts, h, w, s, k));
    }

    #[test]
    fn accumulation_is_additive(seed in any::<u64>(), t1 in 1usize..20, t2 in 1usize..20) {
        let img = IntensityImage::new(3, 3, 1, (0..9).map(|i| i as f64 / 8.0).collect(), None).unwrap();
        let cfg = NoiseConfig { bin_width: 0.3, ..NoiseConfig::default() };
        let stream = simulate_stream(&img, &cfg, t1 + t2, seed).unwrap();
        let mut sum = accumulate(&stream, t1).unwrap().counts;
        stream.add_frames(&mut sum, t1, t1 + t2);
        prop_assert_eq!(sum, accumulate(&stream, t1 + t2).unwrap().counts);
    }

    #[test]
    fn free_response_stop_is_monotone_in_threshold(
        s in prop::collection::vec(-3.0f64..10.0, 2..30),
        a in -3.0f64..10.0,
        b in -3.0f64..10.0,
    ) {
        let g = s.len();
        let posts: Vec<ClassPosterior> = s
            .iter()
            .map(|&v| ClassPosterior::from_logits(&[v, 0.0]))
            .collect();
        let traj = Trajectory::from_posteriors(log_grid(0.22, 220.0, g), &posts, 0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let stop = |t: f64| traj.outcome(&ThresholdSchedule::constant(t)).0;
        prop_assert!(stop(lo) <= stop(hi));
    }

    #[test]
    fn risk_is_invariant_to_common_shifts(
        (s_max, errors) in dataset_strategy(),
        shift in -5.0f64..5.0,
        tau0 in -3.0f64..6.0,
        sigma in 0.05f64..1.0,
    ) {
        let g = s_max[0].len();
        let tau: Vec<f64> = (0..g).map(|k| tau0 + 0.1 * k as f64).collect();
        let base = risk_data(s_max.clone(), errors.clone());
        let moved = risk_data(
            s_max.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect(),
            errors,
        );
        let sched = |t: &[f64]| ThresholdSchedule::new(base.grid.clone(), t.to_vec(), 0.01).unwrap();
        let shifted: Vec<f64> = tau.iter().map(|t| t + shift).collect();
        let r0 = bayes_risk(&base, &sched(&tau), 0.01, sigma).unwrap();
        let r1 = bayes_risk(&moved, &sched(&shifted), 0.01, sigma).unwrap();
        prop_assert!((r0 - r1).abs() < 1e-9);
    }

    #[test]
    fn optimization_never_worsens_the_initialization(
        (s_max, errors) in dataset_strategy(),
        tau0 in -3.0f64..6.0,
    ) {
        let data = risk_data(s_max, errors);
        let init = ThresholdSchedule::new(data.grid.clone(), vec![tau0; data.grid.len()], 0.01).unwrap();
        let cfg = AnnealConfig { iterations: 30, ..AnnealConfig::default() };
        let out = optimize(&data, 0.01, &cfg, &init).unwrap();
        prop_assert!(out.hard_risk <= bayes_risk(&data, &init, 0.01, 0.0).unwrap());
        prop_assert_eq!(out.hard_risk, bayes_risk(&data, &out.schedule, 0.01, 0.0).unwrap());
    }

    #[test]
    fn spike_residuals_stay_inside_the_quantum(
        v in prop::collection::vec(-50.0f64..50.0, 1..20),
        tau in 0.01f64..2.0,
    ) {
        let mut counts = vec![0i64; v.len()];
        emit_spikes(&v, &mut counts, tau).unwrap();
        for (x, c) in v.iter().zip(&counts) {
            let r = x - tau * *c as f64;
            prop_assert!(r.abs() < tau, "residual {} for tau {}", r, tau);
        }
    }

    #[test]
    fn rate_classifier_depends_only_on_rates(scale in 1u32..6, seed in any::<u64>()) {
        let net = Network::build(Architecture::Fc, Shape::new(1, 3, 3), 3, seed).unwrap();
        let clf = RateClassifier { network: net };
        let counts: Vec<f64> = (0..9).map(|i| ((seed >> i) % 5) as f64).collect();
        let a = image(3, 3, counts.clone(), 2.0);
        let k = f64::from(scale);
        let b = image(3, 3, counts.iter().map(|c| c * k).collect(), 2.0 * k);
        let (pa, pb) = (clf.posterior(&a).unwrap(), clf.posterior(&b).unwrap());
        for (x, y) in pa.probabilities.iter().zip(&pb.probabilities) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn schedules_round_trip_through_csv(
        values in prop::collection::vec(-5.0f64..5.0, 2..12),
        eta in 0.0f64..1.0,
    ) {
        let sched = ThresholdSchedule::new(log_grid(0.22, 220.0, values.len()), values, eta).unwrap();
        let mut buf = Vec::new();
        sched.write_csv(&mut buf, &[("sigma0", "0.5".into())]).unwrap();
        let back = ThresholdSchedule::read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        prop_assert_eq!(back, sched);
    }

    #[test]
    fn models_round_trip(seed in any::<u64>(), classes in 2usize..5) {
        let net = Network::build(Architecture::Fc, Shape::new(1, 4, 5), classes, seed).unwrap();
        let model = Model::Plain(net);
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        prop_assert_eq!(read_model(&mut buf.as_slice()).unwrap(), model);
    }
}
