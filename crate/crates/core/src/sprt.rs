//! Sequential decisions: race-to-threshold on log posterior ratios (free
//! response) and fixed-exposure decisions (interrogation), plus
//! speed/accuracy sweeps with bootstrap standard errors.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassPosterior, Classifier};
use crate::error::{Error, Result};
use crate::photon_sim::{readout, CountImage, NoiseConfig, PhotonStream};
use crate::rng::{derive_seed, stream_rng};

pub const DEFAULT_GRID_POINTS: usize = 50;
pub const DEFAULT_GRID_RANGE: [f64; 2] = [0.22, 220.0];
pub const DEFAULT_BOOTSTRAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "FR")]
    Fr,
    #[serde(rename = "INT")]
    Int,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Fr => "FR",
            Regime::Int => "INT",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    ThresholdCrossing,
    Cutoff,
}

/// Thresholds on a PPP grid, interpolated linearly in `(ln ppp, tau)` and held
/// constant beyond the ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Cost of time the schedule was fitted for.
    pub cost_of_time: f64,
}

impl ThresholdSchedule {
    pub fn new(times: Vec<f64>, values: Vec<f64>, cost_of_time: f64) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Empty("threshold grid"));
        }
        if times.len() != values.len() {
            return Err(Error::shape(times.len(), values.len()));
        }
        if times.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::invalid("times", "grid points must be finite and > 0"));
        }
        if !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("times", "grid must be strictly ascending"));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("values", "thresholds must not be NaN"));
        }
        Ok(Self {
            times,
            values,
            cost_of_time,
        })
    }

    /// The same threshold at every exposure.
    pub fn constant(tau: f64) -> Self {
        Self {
            times: vec![1.0],
            values: vec![tau],
            cost_of_time: 0.0,
        }
    }

    pub fn constant_on(grid: &[f64], tau: f64) -> Result<Self> {
        Self::new(grid.to_vec(), vec![tau; grid.len()], 0.0)
    }

    pub fn at(&self, ppp: f64) -> f64 {
        let n = self.times.len();
        if n == 1 || ppp <= self.times[0] {
            return self.values[0];
        }
        if ppp >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let i = self.times.partition_point(|&t| t <= ppp) - 1;
        let (t0, t1) = (self.times[i].ln(), self.times[i + 1].ln());
        let w = (ppp.ln() - t0) / (t1 - t0);
        self.values[i] + w * (self.values[i + 1] - self.values[i])
    }

    /// `ppp,tau` rows preceded by `#`-prefixed metadata lines.
    pub fn write_csv<W: Write>(&self, w: &mut W, metadata: &[(&str, String)]) -> Result<()> {
        writeln!(w, "# eta={}", self.cost_of_time)?;
        for (k, v) in metadata {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "ppp,tau")?;
        for (t, v) in self.times.iter().zip(&self.values) {
            writeln!(w, "{t},{v}")?;
        }
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let mut eta = 0.0;
        let (mut times, mut values) = (Vec::new(), Vec::new());
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(v) = meta.trim().strip_prefix("eta=") {
                    eta = v.parse().map_err(|_| Error::Format(format!("bad eta {v:?}")))?;
                }
                continue;
            }
            if line == "ppp,tau" {
                continue;
            }
            let (t, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("bad schedule row {line:?}")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number {s:?}")))
            };
            times.push(parse(t)?);
            values.push(parse(v)?);
        }
        Self::new(times, values, eta)
    }
}

/// `n` points log-spaced from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
            .collect(),
    }
}

/// Log-spaced grid snapped to whole bins (at least one), deduplicated.
pub fn query_grid(cfg: &NoiseConfig, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(n);
    for p in log_grid(lo, hi, n) {
        let q = cfg.ppp_of_bins(cfg.bins_for_ppp(p).max(1));
        if out.last().is_none_or(|&l| q > l) {
            out.push(q);
        }
    }
    out
}

pub fn default_query_grid(cfg: &NoiseConfig) -> Vec<f64> {
    query_grid(cfg, DEFAULT_GRID_RANGE[0], DEFAULT_GRID_RANGE[1], DEFAULT_GRID_POINTS)
}

/// Upper bound on the error of a race stopped at threshold `tau` with exact
/// posteriors: `1 - Sigm(tau)`.
pub fn error_bound(tau: f64) -> f64 {
    1.0 / (1.0 + tau.exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTrace {
    pub query_ppps: Vec<f64>,
    /// Log ratios of every class at each evaluated query.
    pub log_ratios: Vec<Vec<f64>>,
    pub stop_ppp: f64,
    pub declared: usize,
    pub true_class: Option<usize>,
    pub stopped_by: StopReason,
    pub regime: Regime,
}

impl DecisionTrace {
    pub fn is_correct(&self) -> Option<bool> {
        self.true_class.map(|c| c == self.declared)
    }
}

/// Reads a stream at increasing exposures, applying readout corruption.
///
/// The readout seed of a query depends only on its bin, so two decisions
/// that look at the same bin see identical corrupted counts.
pub struct Sensor<'a> {
    stream: &'a PhotonStream,
    noise: &'a NoiseConfig,
    readout_seed: u64,
    counts: Vec<f64>,
    bin: usize,
}

impl<'a> Sensor<'a> {
    pub fn new(stream: &'a PhotonStream, noise: &'a NoiseConfig, readout_seed: u64) -> Self {
        Self {
            stream,
            noise,
            readout_seed,
            counts: vec![0.0; stream.num_pixels()],
            bin: 0,
        }
    }

    /// Counts at bin `bin` (not earlier than the previous query).
    pub fn read(&mut self, bin: usize) -> Result<CountImage> {
        if bin > self.stream.num_bins() {
            return Err(Error::invalid(
                "query",
                format!("bin {bin} beyond stream length {}", self.stream.num_bins()),
            ));
        }
        if bin < self.bin {
            return Err(Error::invalid("query", "queries must not go back in time"));
        }
        self.stream.add_frames(&mut self.counts, self.bin, bin);
        self.bin = bin;
        let raw = self.stream.count_image(self.counts.clone(), bin);
        if self.noise.read_noise_std > 0.0 || self.noise.fpn_std > 0.0 {
            readout(&raw, self.stream, self.noise, derive_seed(self.readout_seed, bin as u64))
        } else {
            Ok(raw)
        }
    }
}

fn check_queries(stream: &PhotonStream, query_ppps: &[f64], max_ppp: f64) -> Result<()> {
    if query_ppps.is_empty() {
        return Err(Error::Empty("query grid"));
    }
    if !query_ppps.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::invalid("query_ppps", "must be strictly ascending"));
    }
    if query_ppps[query_ppps.len() - 1] > max_ppp * (1.0 + 1e-12) {
        return Err(Error::invalid("query_ppps", "queries exceed max_ppp"));
    }
    if stream.bins_for_ppp(max_ppp) > stream.num_bins() {
        return Err(Error::invalid(
            "max_ppp",
            format!("{max_ppp} exceeds stream capacity {}", stream.max_ppp()),
        ));
    }
    Ok(())
}

/// Free-response decision: stop at the first query where the largest log
/// ratio strictly exceeds the schedule, otherwise answer at `max_ppp`.
pub fn decide_fr<C: Classifier + ?Sized>(
    stream: &PhotonStream,
    classifier: &C,
    schedule: &ThresholdSchedule,
    query_ppps: &[f64],
    max_ppp: f64,
    noise: &NoiseConfig,
    readout_seed: u64,
) -> Result<DecisionTrace> {
    check_queries(stream, query_ppps, max_ppp)?;
    let mut sensor = Sensor::new(stream, noise, readout_seed);
    let mut trace = DecisionTrace {
        query_ppps: Vec::new(),
        log_ratios: Vec::new(),
        stop_ppp: 0.0,
        declared: 0,
        true_class: stream.source_label(),
        stopped_by: StopReason::Cutoff,
        regime: Regime::Fr,
    };
    let mut last: Option<(usize, ClassPosterior)> = None;
    for &q in query_ppps {
        let bin = stream.bins_for_ppp(q);
        let counts = sensor.read(bin)?;
        let post = classifier.posterior(&counts)?;
        trace.query_ppps.push(counts.ppp);
        trace.log_ratios.push(post.log_ratios.clone());
        if post.max_log_ratio() > schedule.at(counts.ppp) {
            trace.stop_ppp = counts.ppp;
            trace.declared = post.argmax();
            trace.stopped_by = StopReason::ThresholdCrossing;
            return Ok(trace);
        }
        last = Some((bin, post));
    }
    let cutoff_bin = stream.bins_for_ppp(max_ppp);
    let post = match last {
        Some((bin, post)) if bin == cutoff_bin => post,
        _ => {
            let counts = sensor.read(cutoff_bin)?;
            let post = classifier.posterior(&counts)?;
            trace.query_ppps.push(counts.ppp);
            trace.log_ratios.push(post.log_ratios.clone());
            post
        }
    };
    trace.stop_ppp = stream.ppp_of(cutoff_bin);
    trace.declared = post.argmax();
    Ok(trace)
}

/// Interrogation decision at a fixed exposure.
pub fn decide_int<C: Classifier + ?Sized>(
    stream: &PhotonStream,
    classifier: &C,
    ppp: f64,
    noise: &NoiseConfig,
    readout_seed: u64,
) -> Result<DecisionTrace> {
    let bin = stream.bins_for_ppp(ppp);
    let counts = Sensor::new(stream, noise, readout_seed).read(bin)?;
    let post = classifier.posterior(&counts)?;
    Ok(DecisionTrace {
        query_ppps: vec![counts.ppp],
        log_ratios: vec![post.log_ratios.clone()],
        stop_ppp: counts.ppp,
        declared: post.argmax(),
        true_class: stream.source_label(),
        stopped_by: StopReason::Cutoff,
        regime: Regime::Int,
    })
}

/// Per-query summary of one stream, enough to replay any threshold offline.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub ppps: Vec<f64>,
    pub max_log_ratio: Vec<f64>,
    pub declared: Vec<usize>,
    /// True class is the unique argmax.
    pub unique_correct: Vec<bool>,
    pub true_class: usize,
}

impl Trajectory {
    pub fn from_posteriors(ppps: Vec<f64>, posts: &[ClassPosterior], true_class: usize) -> Self {
        Self {
            max_log_ratio: posts.iter().map(ClassPosterior::max_log_ratio).collect(),
            declared: posts.iter().map(ClassPosterior::argmax).collect(),
            unique_correct: posts.iter().map(|p| p.is_unique_argmax(true_class)).collect(),
            ppps,
            true_class,
        }
    }

    /// Index where a race against `thresholds` (one per query) stops.
    pub fn stop_index(&self, thresholds: impl Fn(usize, f64) -> f64) -> (usize, StopReason) {
        for (i, (&s, &p)) in self.max_log_ratio.iter().zip(&self.ppps).enumerate() {
            if s > thresholds(i, p) {
                return (i, StopReason::ThresholdCrossing);
            }
        }
        (self.ppps.len() - 1, StopReason::Cutoff)
    }

    /// `(stop ppp, error)` for a schedule.
    pub fn outcome(&self, schedule: &ThresholdSchedule) -> (f64, bool) {
        let (i, _) = self.stop_index(|_, p| schedule.at(p));
        (self.ppps[i], self.declared[i] != self.true_class)
    }
}

/// Evaluates every stream at every grid point (the last point is the cutoff).
pub fn trajectories<C: Classifier + ?Sized>(
    streams: &[PhotonStream],
    classifier: &C,
    grid: &[f64],
    noise: &NoiseConfig,
    readout_seed: u64,
) -> Result<Vec<Trajectory>> {
    streams
        .par_iter()
        .enumerate()
        .map(|(n, stream)| {
            let label = stream
                .source_label()
                .ok_or(Error::invalid("stream", "evaluation streams need labels"))?;
            let max = *grid.last().ok_or(Error::Empty("query grid"))?;
            check_queries(stream, grid, max)?;
            let mut sensor = Sensor::new(stream, noise, derive_seed(readout_seed, n as u64));
            let mut ppps = Vec::with_capacity(grid.len());
            let mut posts = Vec::with_capacity(grid.len());
            for &q in grid {
                let counts = sensor.read(stream.bins_for_ppp(q))?;
                ppps.push(counts.ppp);
                posts.push(classifier.posterior(&counts)?);
            }
            Ok(Trajectory::from_posteriors(ppps, &posts, label))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatRow {
    pub regime: Regime,
    pub threshold_or_ppp: f64,
    pub median_ppp: f64,
    pub mean_ppp: f64,
    pub error_rate: f64,
    pub median_ppp_se: f64,
    pub error_se: f64,
    pub n_examples: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Summarizes `(stop ppp, error)` outcomes with bootstrap standard errors.
pub fn summarize(
    regime: Regime,
    value: f64,
    outcomes: &[(f64, bool)],
    resamples: usize,
    seed: u64,
) -> Result<SatRow> {
    let n = outcomes.len();
    if n == 0 {
        return Err(Error::Empty("outcomes"));
    }
    let mut ppps: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    let mean_ppp = ppps.iter().sum::<f64>() / n as f64;
    let error_rate = outcomes.iter().filter(|o| o.1).count() as f64 / n as f64;
    let median_ppp = median(&mut ppps);

    let mut rng = stream_rng(seed, 0xB007);
    let mut medians = Vec::with_capacity(resamples);
    let mut errors = Vec::with_capacity(resamples);
    let mut sample = vec![0.0; n];
    for _ in 0..resamples {
        let mut wrong = 0usize;
        for s in sample.iter_mut() {
            let (p, e) = outcomes[rng.random_range(0..n)];
            *s = p;
            wrong += usize::from(e);
        }
        medians.push(median(&mut sample));
        errors.push(wrong as f64 / n as f64);
    }
    Ok(SatRow {
        regime,
        threshold_or_ppp: value,
        median_ppp,
        mean_ppp,
        error_rate,
        median_ppp_se: std_dev(&medians),
        error_se: std_dev(&errors),
        n_examples: n,
    })
}

/// Free-response rows, one per constant threshold, replayed on precomputed
/// trajectories.
pub fn fr_sweep(
    trajs: &[Trajectory],
    thresholds: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<Vec<SatRow>> {
    thresholds
        .iter()
        .enumerate()
        .map(|(i, &tau)| {
            let schedule = ThresholdSchedule::constant(tau);
            let outcomes: Vec<_> = trajs.iter().map(|t| t.outcome(&schedule)).collect();
            summarize(Regime::Fr, tau, &outcomes, resamples, derive_seed(seed, i as u64))
        })
        .collect()
}

/// Free-response row for one (possibly time-varying) schedule.
pub fn fr_schedule_row(
    trajs: &[Trajectory],
    schedule: &ThresholdSchedule,
    resamples: usize,
    seed: u64,
) -> Result<SatRow> {
    let outcomes: Vec<_> = trajs.iter().map(|t| t.outcome(schedule)).collect();
    summarize(Regime::Fr, schedule.cost_of_time, &outcomes, resamples, seed)
}

/// Interrogation rows, one per exposure; `trajs` must be evaluated on exactly
/// the exposures in `ppps`.
pub fn int_sweep(
    trajs: &[Trajectory],
    ppps: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<Vec<SatRow>> {
    ppps.iter()
        .enumerate()
        .map(|(i, &p)| {
            let outcomes: Vec<_> = trajs
                .iter()
                .map(|t| (t.ppps[i], t.declared[i] != t.true_class))
                .collect();
            summarize(Regime::Int, p, &outcomes, resamples, derive_seed(seed, i as u64))
        })
        .collect()
}

/// Streams, classifier and regime in one call. For FR, `values` are constant
/// thresholds raced on the default query grid up to `max_ppp`; for INT they
/// are exposures.
#[allow(clippy::too_many_arguments)]
pub fn sat_sweep<C: Classifier + ?Sized>(
    streams: &[PhotonStream],
    classifier: &C,
    regime: Regime,
    values: &[f64],
    max_ppp: f64,
    noise: &NoiseConfig,
    readout_seed: u64,
    bootstrap_seed: u64,
) -> Result<Vec<SatRow>> {
    if values.is_empty() {
        return Ok(Vec::new());
    }
    if streams.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    match regime {
        Regime::Fr => {
            let grid = query_grid(noise, DEFAULT_GRID_RANGE[0], max_ppp, DEFAULT_GRID_POINTS);
            let trajs = trajectories(streams, classifier, &grid, noise, readout_seed)?;
            fr_sweep(&trajs, values, DEFAULT_BOOTSTRAP, bootstrap_seed)
        }
        Regime::Int => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            let trajs = trajectories(streams, classifier, &sorted, noise, readout_seed)?;
            let rows = int_sweep(&trajs, &sorted, DEFAULT_BOOTSTRAP, bootstrap_seed)?;
            Ok(values
                .iter()
                .map(|v| rows[sorted.iter().position(|s| s == v).expect("present")].clone())
                .collect())
        }
    }
}

pub fn write_sat_csv<W: Write>(w: W, rows: &[SatRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record([
            "regime",
            "threshold_or_ppp",
            "median_ppp",
            "mean_ppp",
            "error_rate",
            "median_ppp_se",
            "error_se",
            "n_examples",
        ])?;
    }
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

/// Error rate of the argmax class at each grid index, across trajectories.
pub fn error_by_index(trajs: &[Trajectory]) -> Vec<f64> {
    let Some(first) = trajs.first() else {
        return Vec::new();
    };
    (0..first.ppps.len())
        .map(|i| {
            trajs.iter().filter(|t| t.declared[i] != t.true_class).count() as f64
                / trajs.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_bound_examples() {
        assert_eq!(error_bound(0.0), 0.5);
        assert!(error_bound(800.0) < 1e-300);
        assert!((error_bound(99f64.ln()) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn schedule_interpolates_in_log_ppp() {
        let s = ThresholdSchedule::new(vec![1.0, 100.0], vec![0.0, 2.0], 0.0).unwrap();
        assert!((s.at(10.0) - 1.0).abs() < 1e-12);
        assert_eq!(s.at(0.1), 0.0);
        assert_eq!(s.at(1e4), 2.0);
        assert_eq!(ThresholdSchedule::constant(3.0).at(17.0), 3.0);
        assert!(ThresholdSchedule::new(vec![2.0, 1.0], vec![0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn schedule_csv_round_trips() {
        let s = ThresholdSchedule::new(vec![0.22, 2.2, 220.0], vec![1.5, -0.25, 3.0], 0.01).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf, &[("seed", "7".into())]).unwrap();
        let back = ThresholdSchedule::read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn default_grid_is_snapped_and_spans_range() {
        let g = default_query_grid(&NoiseConfig::default());
        assert_eq!(g.len(), 50);
        assert!((g[0] - 0.22).abs() < 1e-12);
        assert!((g[49] - 220.0).abs() < 1e-9);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bootstrap_of_constant_outcomes_has_zero_se() {
        let row = summarize(Regime::Int, 2.2, &[(2.2, false); 10], 100, 1).unwrap();
        assert!(row.median_ppp_se < 1e-12);
        assert_eq!(row.error_se, 0.0);
        assert_eq!(row.error_rate, 0.0);
    }

    #[test]
    fn empty_sat_csv_has_header() {
        let mut buf = Vec::new();
        write_sat_csv(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().trim(),
            "regime,threshold_or_ppp,median_ppp,mean_ppp,error_rate,median_ppp_se,error_se,n_examples"
        );
    }

    #[test]
    fn trajectory_replay_respects_strict_crossing() {
        let t = Trajectory {
            ppps: vec![1.0, 2.0, 3.0],
            max_log_ratio: vec![0.0, 1.0, 2.0],
            declared: vec![1, 0, 0],
            unique_correct: vec![false, true, true],
            true_class: 0,
        };
        assert_eq!(t.outcome(&ThresholdSchedule::constant(1.0)), (3.0, false));
        assert_eq!(t.outcome(&ThresholdSchedule::constant(-1.0)), (1.0, true));
        assert_eq!(t.outcome(&ThresholdSchedule::constant(5.0)), (3.0, false));
    }
}
