//! Event-driven evaluation of an adapted network.
//!
//! The first layer is a leaky membrane updated once per time bin,
//! `V(t) = r(t) V(t-1) + alpha(t) W X_t / T + l(t)` with
//! `r(t) = alpha(t) / alpha(t-1)` and `l(t) = beta(t) - r(t) beta(t-1)`, which
//! reproduces `alpha(t) W N_t / T + beta(t)` exactly. Each unit transmits its
//! potential as signed spikes of size `tau_dis`. Higher layers keep their
//! pre-activations in accumulators that are only touched when an input unit's
//! reconstructed activation changes. Multiplications are tallied as a power
//! proxy; additions and comparisons are free.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{linear_part, unit_bias, AdaptedNetwork, ClassPosterior};
use crate::error::{Error, Result};
use crate::nn::Layer;
use crate::photon_sim::{NoiseConfig, PhotonStream};
use crate::sprt::{decide_fr, DecisionTrace, Regime, StopReason, ThresholdSchedule};

/// Adds `value * W[:, input]` into `out`; returns the multiplications used.
pub fn scatter_column(layer: &Layer, input: usize, value: f64, out: &mut [f64]) -> u64 {
    match layer {
        Layer::Dense(d) => {
            for (o, v) in out.iter_mut().enumerate() {
                *v += value * d.weights[o * d.inputs + input];
            }
            d.outputs as u64
        }
        Layer::Conv(c) => {
            let out_shape = c.output();
            let (ih, iw) = (c.input.height, c.input.width);
            let ch = input / (ih * iw);
            let y = (input / iw) % ih;
            let x = input % iw;
            let mut mults = 0;
            for ky in 0..c.kernel.min(y + 1) {
                let oy = y - ky;
                if oy >= out_shape.height {
                    continue;
                }
                for kx in 0..c.kernel.min(x + 1) {
                    let ox = x - kx;
                    if ox >= out_shape.width {
                        continue;
                    }
                    for o in 0..c.out_channels {
                        out[(o * out_shape.height + oy) * out_shape.width + ox] +=
                            value * c.weights[c.weight_index(o, ch, ky, kx)];
                        mults += 1;
                    }
                }
            }
            mults
        }
        _ => 0,
    }
}

/// Emits signed spikes until every residual `V - tau * count` lies in
/// `(-tau, tau)`. Returns the units whose count changed, with the change.
pub fn emit_spikes(potentials: &[f64], counts: &mut [i64], tau: f64) -> Result<Vec<(usize, i64)>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau_dis", format!("{tau} must be finite and > 0")));
    }
    let mut changes = Vec::new();
    for (j, (&v, c)) in potentials.iter().zip(counts.iter_mut()).enumerate() {
        let mut residual = v - tau * *c as f64;
        let mut k = 0i64;
        if residual.abs() >= tau {
            // Jump close to the answer, then settle by repeated subtraction.
            let jump = (residual / tau).trunc() as i64 - (residual / tau).signum() as i64;
            k += jump;
            residual -= tau * jump as f64;
        }
        while residual >= tau {
            residual -= tau;
            k += 1;
        }
        while residual <= -tau {
            residual += tau;
            k -= 1;
        }
        if k != 0 {
            *c += k;
            changes.push((j, k));
        }
    }
    Ok(changes)
}

/// Multiplication tallies of one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PowerMeter {
    /// Multiplications per linear layer.
    pub per_layer: Vec<u64>,
    /// Multiplications the dense reference would have used.
    pub baseline: u64,
}

impl PowerMeter {
    pub fn total(&self) -> u64 {
        self.per_layer.iter().sum()
    }

    pub fn ratio(&self) -> f64 {
        self.total() as f64 / self.baseline as f64
    }
}

/// First-layer membrane potentials driven by a photon stream.
pub struct MembraneLayer<'a> {
    net: &'a AdaptedNetwork,
    gains: &'a [f64],
    ppp_per_bin: f64,
    /// `W mu` and the bias of each unit.
    wm: Vec<f64>,
    bias: Vec<f64>,
    pub potentials: Vec<f64>,
    pub last_bin: usize,
    pub mults: u64,
}

impl<'a> MembraneLayer<'a> {
    /// Starts at `V(0) = beta(0)`.
    pub fn new(net: &'a AdaptedNetwork, stream: &'a PhotonStream) -> Result<Self> {
        if stream.num_pixels() != net.network.input.len() {
            return Err(Error::shape(net.network.input.len(), stream.num_pixels()));
        }
        let layer = net.network.first_layer();
        Ok(Self {
            net,
            gains: stream.fpn_gains(),
            ppp_per_bin: stream.ppp_per_bin(),
            wm: linear_part(layer, &net.effective_prior()),
            bias: unit_bias(layer),
            potentials: net.beta(0.0),
            last_bin: 0,
            mults: 0,
        })
    }

    /// Applies bin `t`, whose nonzero pixels are `frame`.
    pub fn step(&mut self, frame: impl Iterator<Item = (usize, u32)>, t: usize) -> Result<()> {
        if t != self.last_bin + 1 {
            return Err(Error::invalid(
                "t",
                format!("expected bin {}, got {t}", self.last_bin + 1),
            ));
        }
        self.advance_to(frame, t)
    }

    /// Jumps from the last bin to bin `t`; `photons` holds each pixel's count
    /// over the skipped bins. The recurrence is exact for any jump length.
    pub fn advance_to(&mut self, photons: impl Iterator<Item = (usize, u32)>, t: usize) -> Result<()> {
        if t <= self.last_bin {
            return Err(Error::invalid(
                "t",
                format!("bin {t} is not after {}", self.last_bin),
            ));
        }
        let net = self.net;
        let (prev, now) = (self.last_bin as f64 * self.ppp_per_bin, t as f64 * self.ppp_per_bin);
        let r = net.alpha(now) / net.alpha(prev);
        let tr = net.reference_ppp;
        // l(t) = (c(t) - r c(t-1)) W mu / T + (1 - r) b
        let lw = (net.prior_weight(now) - r * net.prior_weight(prev)) / tr;
        let lb = 1.0 - r;
        for ((v, wm), b) in self.potentials.iter_mut().zip(&self.wm).zip(&self.bias) {
            *v = r * *v + lw * wm + lb * b;
        }
        self.mults += 3 * self.potentials.len() as u64;
        let a = net.alpha(now) / tr;
        let layer = net.network.first_layer();
        for (p, c) in photons {
            let x = a * f64::from(c) * self.gains[p];
            self.mults += 2 + scatter_column(layer, p, x, &mut self.potentials);
        }
        self.last_bin = t;
        Ok(())
    }
}

/// Elementwise layers between two linear layers, with cached activations.
struct Chain {
    /// Indices into the network's layers.
    layers: Vec<usize>,
    /// `bufs[0]` is the reconstructed pre-activation; `bufs[i + 1]` the output
    /// of `layers[i]`.
    bufs: Vec<Vec<f64>>,
}

impl Chain {
    /// Propagates changed entries of `bufs[0]`; returns the changed outputs.
    fn propagate(&mut self, net_layers: &[Layer], mut changed: Vec<usize>) -> Vec<usize> {
        for (i, &li) in self.layers.iter().enumerate() {
            let (head, tail) = self.bufs.split_at_mut(i + 1);
            let input = &head[i];
            let output = &mut tail[0];
            let mut next = Vec::new();
            match &net_layers[li] {
                Layer::Relu { .. } => {
                    for u in changed {
                        let v = input[u].max(0.0);
                        if v != output[u] {
                            output[u] = v;
                            next.push(u);
                        }
                    }
                }
                Layer::Pool(p) => {
                    let mut windows: Vec<usize> =
                        changed.iter().filter_map(|&u| p.window_of(u)).collect();
                    windows.sort_unstable();
                    windows.dedup();
                    for w in windows {
                        let v = input[p.argmax(input, w)];
                        if v != output[w] {
                            output[w] = v;
                            next.push(w);
                        }
                    }
                }
                _ => unreachable!("chains hold only elementwise layers"),
            }
            changed = next;
        }
        changed
    }
}

/// Linear layer fed by spikes from the stage below.
struct Stage {
    linear: usize,
    chain_in: Chain,
    /// Activation fed to `linear` before the latest update.
    fed: Vec<f64>,
    acc: Vec<f64>,
    counts: Vec<i64>,
}

/// Per-stream result of a spiking run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikingRun {
    pub trace: DecisionTrace,
    pub power: PowerMeter,
    pub spikes: u64,
    /// Largest `|V - tau * count|` seen at the first layer after emission.
    pub max_first_layer_residual: f64,
}

/// Runs the event-driven network on `stream` with an SPRT readout at
/// `query_ppps`. The network is refreshed at the query instants, like the
/// continuous baseline, with each pixel's photons since the previous refresh
/// applied as one update. The baseline count charges one dense pass per query
/// reached.
#[allow(clippy::too_many_arguments)]
pub fn run_stream_spiking(
    stream: &PhotonStream,
    net: &AdaptedNetwork,
    schedule: &ThresholdSchedule,
    query_ppps: &[f64],
    max_ppp: f64,
    tau_dis: f64,
) -> Result<SpikingRun> {
    if !(tau_dis > 0.0 && tau_dis.is_finite()) {
        return Err(Error::invalid("tau_dis", format!("{tau_dis} must be finite and > 0")));
    }
    if query_ppps.is_empty() {
        return Err(Error::Empty("query grid"));
    }
    let cutoff = stream.bins_for_ppp(max_ppp);
    if cutoff > stream.num_bins() || cutoff == 0 {
        return Err(Error::invalid(
            "max_ppp",
            format!("{max_ppp} outside stream capacity {}", stream.max_ppp()),
        ));
    }
    let layers = &net.network.layers;
    let linear: Vec<usize> = (0..layers.len()).filter(|&i| layers[i].is_linear()).collect();

    let mut membrane = MembraneLayer::new(net, stream)?;
    let mut first_counts = vec![0i64; membrane.potentials.len()];
    let mut stages: Vec<Stage> = linear
        .windows(2)
        .map(|w| {
            let chain_layers: Vec<usize> = (w[0] + 1..w[1]).collect();
            let mut bufs = vec![vec![0.0; layers[w[0]].output_len()]];
            for &li in &chain_layers {
                bufs.push(vec![0.0; layers[li].output_len()]);
            }
            let fed = bufs.last().unwrap().clone();
            Stage {
                linear: w[1],
                chain_in: Chain {
                    layers: chain_layers,
                    bufs,
                },
                fed,
                acc: unit_bias(&layers[w[1]]),
                counts: vec![0; layers[w[1]].output_len()],
            }
        })
        .collect();
    let mut per_layer = vec![0u64; linear.len()];
    let mut spikes = 0u64;
    let mut max_residual: f64 = 0.0;

    let mut queries: BTreeSet<usize> = query_ppps
        .iter()
        .map(|&q| stream.bins_for_ppp(q))
        .filter(|&b| b >= 1 && b <= cutoff)
        .collect();
    queries.insert(cutoff);

    let mut trace = DecisionTrace {
        query_ppps: Vec::new(),
        log_ratios: Vec::new(),
        stop_ppp: 0.0,
        declared: 0,
        true_class: stream.source_label(),
        stopped_by: StopReason::Cutoff,
        regime: Regime::Fr,
    };
    let n_stages = stages.len();
    let mut pending = vec![0u32; stream.num_pixels()];
    let mut touched: Vec<usize> = Vec::new();
    for &t in &queries {
        for b in membrane.last_bin + 1..=t {
            for (p, c) in stream.frame(b).iter() {
                if pending[p] == 0 {
                    touched.push(p);
                }
                pending[p] += c;
            }
        }
        touched.sort_unstable();
        membrane.advance_to(touched.iter().map(|&p| (p, pending[p])), t)?;
        for &p in &touched {
            pending[p] = 0;
        }
        touched.clear();
        let mut changes = emit_spikes(&membrane.potentials, &mut first_counts, tau_dis)?;
        spikes += changes.iter().map(|c| c.1.unsigned_abs()).sum::<u64>();
        for (j, &v) in membrane.potentials.iter().enumerate() {
            max_residual = max_residual.max((v - tau_dis * first_counts[j] as f64).abs());
        }
        for (si, stage) in stages.iter_mut().enumerate() {
            if changes.is_empty() {
                break;
            }
            let recon = &mut stage.chain_in.bufs[0];
            let mut touched = Vec::with_capacity(changes.len());
            for &(u, k) in &changes {
                recon[u] += tau_dis * k as f64;
                touched.push(u);
            }
            per_layer[si] += changes.len() as u64;
            let changed = stage.chain_in.propagate(layers, touched);
            let act = stage.chain_in.bufs.last().unwrap();
            for u in changed {
                let delta = act[u] - stage.fed[u];
                if delta != 0.0 {
                    stage.fed[u] = act[u];
                    per_layer[si + 1] += scatter_column(&layers[stage.linear], u, delta, &mut stage.acc);
                }
            }
            changes = if si + 1 < n_stages {
                emit_spikes(&stage.acc, &mut stage.counts, tau_dis)?
            } else {
                Vec::new()
            };
            spikes += changes.iter().map(|c| c.1.unsigned_abs()).sum::<u64>();
        }
        {
            let logits = match stages.last() {
                Some(s) => s.acc.clone(),
                None => membrane.potentials.clone(),
            };
            let post = ClassPosterior::from_logits(&logits);
            let ppp = stream.ppp_of(t);
            trace.query_ppps.push(ppp);
            trace.log_ratios.push(post.log_ratios.clone());
            let crossed = post.max_log_ratio() > schedule.at(ppp);
            if crossed || t == cutoff {
                trace.stop_ppp = ppp;
                trace.declared = post.argmax();
                if crossed {
                    trace.stopped_by = StopReason::ThresholdCrossing;
                }
                break;
            }
        }
    }
    per_layer[0] = membrane.mults;
    let baseline = net.network.dense_mults() * trace.query_ppps.len() as u64;
    Ok(SpikingRun {
        trace,
        power: PowerMeter {
            per_layer,
            baseline,
        },
        spikes,
        max_first_layer_residual: max_residual,
    })
}

/// Dense evaluation at every query, the reference for accuracy and power.
pub fn continuous_baseline(
    stream: &PhotonStream,
    net: &AdaptedNetwork,
    schedule: &ThresholdSchedule,
    query_ppps: &[f64],
    max_ppp: f64,
) -> Result<(DecisionTrace, PowerMeter)> {
    let noise = NoiseConfig {
        dark_current: 0.0,
        read_noise_std: 0.0,
        fpn_std: 0.0,
        jitter_std: 0.0,
        illuminance: 1.0,
        bin_width: stream.ppp_per_bin(),
    };
    let trace = decide_fr(stream, net, schedule, query_ppps, max_ppp, &noise, 0)?;
    let mults = net.network.dense_mults() * trace.query_ppps.len() as u64;
    Ok((
        trace,
        PowerMeter {
            per_layer: vec![mults],
            baseline: mults,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikingRow {
    /// Zero marks the continuous reference.
    pub tau_dis: f64,
    pub error_rate: f64,
    pub median_ppp: f64,
    pub mult_ratio: f64,
    pub spikes_total: u64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Continuous reference row followed by one row per discretization threshold.
pub fn spiking_sweep(
    streams: &[PhotonStream],
    net: &AdaptedNetwork,
    schedule: &ThresholdSchedule,
    query_ppps: &[f64],
    max_ppp: f64,
    taus: &[f64],
) -> Result<Vec<SpikingRow>> {
    if streams.is_empty() {
        return Err(Error::Empty("streams"));
    }
    let wrong = |t: &DecisionTrace| t.is_correct() == Some(false);
    let reference: Vec<(DecisionTrace, PowerMeter)> = streams
        .par_iter()
        .map(|s| continuous_baseline(s, net, schedule, query_ppps, max_ppp))
        .collect::<Result<_>>()?;
    let n = streams.len() as f64;
    let mut rows = vec![SpikingRow {
        tau_dis: 0.0,
        error_rate: reference.iter().filter(|r| wrong(&r.0)).count() as f64 / n,
        median_ppp: median(reference.iter().map(|r| r.0.stop_ppp).collect()),
        mult_ratio: 1.0,
        spikes_total: 0,
    }];
    let baseline: u64 = reference.iter().map(|r| r.1.baseline).sum();
    for &tau in taus {
        let runs: Vec<SpikingRun> = streams
            .par_iter()
            .map(|s| run_stream_spiking(s, net, schedule, query_ppps, max_ppp, tau))
            .collect::<Result<_>>()?;
        rows.push(SpikingRow {
            tau_dis: tau,
            error_rate: runs.iter().filter(|r| wrong(&r.trace)).count() as f64 / n,
            median_ppp: median(runs.iter().map(|r| r.trace.stop_ppp).collect()),
            mult_ratio: runs.iter().map(|r| r.power.total()).sum::<u64>() as f64 / baseline as f64,
            spikes_total: runs.iter().map(|r| r.spikes).sum(),
        });
    }
    Ok(rows)
}

pub fn write_spiking_csv<W: std::io::Write>(w: W, rows: &[SpikingRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(["tau_dis", "error_rate", "median_ppp", "mult_ratio", "spikes_total"])?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
