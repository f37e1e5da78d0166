//! Learns a time-varying decision threshold by minimizing a smoothed Bayes
//! risk (time cost plus error rate) over recorded log-ratio trajectories.
//!
//! For one example on a grid of `G` queries the risk from query `k` onward is
//! `R_k = cost_k + q_k e_k + (1 - q_k) R_{k+1}` with `R_{G-1} = cost_{G-1} + e_{G-1}`,
//! where `q_k` is the (soft) event that the largest log ratio crosses `tau_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sprt::{ThresholdSchedule, Trajectory};

/// Below this temperature crossings are treated as hard indicators.
pub const HARD_SIGMA: f64 = 1e-6;

/// How time is charged between queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeCost {
    /// `eta * (ppp_k - ppp_{k-1})`, so the total charge is `eta * stop_ppp`.
    #[default]
    PppIncrement,
    /// `eta * bin_width` for every query.
    ConstantPerStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskDataset {
    /// Largest log ratio of each example at each grid point.
    pub s_max: Vec<Vec<f64>>,
    /// Whether the prediction of each example at each grid point is wrong.
    pub errors: Vec<Vec<bool>>,
    pub grid: Vec<f64>,
    pub bin_width: f64,
    pub time_cost: TimeCost,
}

impl RiskDataset {
    pub fn new(
        s_max: Vec<Vec<f64>>,
        errors: Vec<Vec<bool>>,
        grid: Vec<f64>,
        bin_width: f64,
        time_cost: TimeCost,
    ) -> Result<Self> {
        if s_max.is_empty() {
            return Err(Error::Empty("risk dataset"));
        }
        if grid.is_empty() {
            return Err(Error::Empty("risk grid"));
        }
        if s_max.len() != errors.len() {
            return Err(Error::shape(s_max.len(), errors.len()));
        }
        for (s, e) in s_max.iter().zip(&errors) {
            if s.len() != grid.len() || e.len() != grid.len() {
                return Err(Error::shape(grid.len(), s.len().min(e.len())));
            }
        }
        Ok(Self {
            s_max,
            errors,
            grid,
            bin_width,
            time_cost,
        })
    }

    /// Errors count unless the true class is the unique argmax.
    pub fn from_trajectories(
        trajs: &[Trajectory],
        bin_width: f64,
        time_cost: TimeCost,
    ) -> Result<Self> {
        let first = trajs.first().ok_or(Error::Empty("trajectories"))?;
        Self::new(
            trajs.iter().map(|t| t.max_log_ratio.clone()).collect(),
            trajs
                .iter()
                .map(|t| t.unique_correct.iter().map(|c| !c).collect())
                .collect(),
            first.ppps.clone(),
            bin_width,
            time_cost,
        )
    }

    pub fn len(&self) -> usize {
        self.s_max.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_max.is_empty()
    }

    /// Charge of each query for cost of time `eta`.
    pub fn step_costs(&self, eta: f64) -> Vec<f64> {
        match self.time_cost {
            TimeCost::PppIncrement => {
                let mut prev = 0.0;
                self.grid
                    .iter()
                    .map(|&p| {
                        let c = eta * (p - prev);
                        prev = p;
                        c
                    })
                    .collect()
            }
            TimeCost::ConstantPerStep => vec![eta * self.bin_width; self.grid.len()],
        }
    }

    fn thresholds(&self, schedule: &ThresholdSchedule) -> Result<Vec<f64>> {
        if schedule.times.len() == 1 {
            return Ok(vec![schedule.values[0]; self.grid.len()]);
        }
        if schedule.times.len() != self.grid.len()
            || schedule
                .times
                .iter()
                .zip(&self.grid)
                .any(|(a, b)| (a - b).abs() > 1e-9 * b.abs())
        {
            return Err(Error::invalid("schedule", "grid does not match the dataset grid"));
        }
        Ok(schedule.values.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealConfig {
    pub initial_temperature: f64,
    pub decay: f64,
    pub floor: f64,
    pub iterations: usize,
    pub smoothness_weight: f64,
    pub step_size: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            initial_temperature: 0.5,
            decay: 0.99,
            floor: 0.01,
            iterations: 500,
            smoothness_weight: 0.01,
            step_size: 10.0,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.floor <= self.initial_temperature) {
            return Err(Error::invalid("floor", "must satisfy 0 < floor <= initial_temperature"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::invalid("decay", "must lie in (0, 1)"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be >= 1"));
        }
        if !(self.smoothness_weight >= 0.0 && self.step_size > 0.0) {
            return Err(Error::invalid(
                "anneal config",
                "smoothness_weight must be >= 0 and step_size > 0",
            ));
        }
        Ok(())
    }

    /// Temperature at iteration `k`.
    pub fn temperature(&self, k: usize) -> f64 {
        (self.initial_temperature * self.decay.powi(k as i32)).max(self.floor)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smoothed crossing probability `Sigm((s_max - tau) / sigma)`.
pub fn soft_crossing(s_max: f64, tau: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma", format!("{sigma} must be > 0")));
    }
    Ok(crossing(s_max, tau, sigma))
}

fn crossing(s_max: f64, tau: f64, sigma: f64) -> f64 {
    if sigma <= HARD_SIGMA {
        f64::from(u8::from(s_max > tau))
    } else {
        sigmoid((s_max - tau) / sigma)
    }
}

/// `q (1 - q) / sigma`, evaluated without cancellation.
fn crossing_slope(s_max: f64, tau: f64, sigma: f64) -> f64 {
    let x = (s_max - tau) / sigma;
    sigmoid(x) * sigmoid(-x) / sigma
}

fn example_risk(s: &[f64], e: &[bool], tau: &[f64], costs: &[f64], sigma: f64) -> f64 {
    let g = s.len();
    let mut r = costs[g - 1] + f64::from(u8::from(e[g - 1]));
    for k in (0..g - 1).rev() {
        let q = crossing(s[k], tau[k], sigma);
        r = costs[k] + q * f64::from(u8::from(e[k])) + (1.0 - q) * r;
    }
    r
}

/// Mean risk over examples (no smoothness penalty).
pub fn bayes_risk(data: &RiskDataset, schedule: &ThresholdSchedule, eta: f64, sigma: f64) -> Result<f64> {
    let tau = data.thresholds(schedule)?;
    Ok(risk_of(data, &tau, eta, sigma))
}

fn risk_of(data: &RiskDataset, tau: &[f64], eta: f64, sigma: f64) -> f64 {
    let costs = data.step_costs(eta);
    data.s_max
        .iter()
        .zip(&data.errors)
        .map(|(s, e)| example_risk(s, e, tau, &costs, sigma))
        .sum::<f64>()
        / data.len() as f64
}

/// `weight * sum_k (tau_k - tau_{k+1})^2`.
pub fn smoothness_penalty(tau: &[f64], weight: f64) -> f64 {
    weight * tau.windows(2).map(|w| (w[0] - w[1]).powi(2)).sum::<f64>()
}

/// Relaxed risk plus smoothness penalty: the quantity `optimize` descends.
pub fn objective(
    data: &RiskDataset,
    schedule: &ThresholdSchedule,
    eta: f64,
    sigma: f64,
    smoothness_weight: f64,
) -> Result<f64> {
    let tau = data.thresholds(schedule)?;
    Ok(risk_of(data, &tau, eta, sigma) + smoothness_penalty(&tau, smoothness_weight))
}

/// Gradient of [`objective`] with respect to every threshold value, by
/// reverse accumulation through the recursion. Zero for hard crossings.
pub fn risk_gradient(
    data: &RiskDataset,
    schedule: &ThresholdSchedule,
    eta: f64,
    sigma: f64,
    smoothness_weight: f64,
) -> Result<Vec<f64>> {
    let tau = data.thresholds(schedule)?;
    let mut grad = gradient_of(data, &tau, eta, sigma);
    add_smoothness_gradient(&tau, smoothness_weight, &mut grad);
    if schedule.times.len() == 1 {
        return Ok(vec![grad.iter().sum()]);
    }
    Ok(grad)
}

fn add_smoothness_gradient(tau: &[f64], weight: f64, grad: &mut [f64]) {
    for k in 0..tau.len().saturating_sub(1) {
        let d = 2.0 * weight * (tau[k] - tau[k + 1]);
        grad[k] += d;
        grad[k + 1] -= d;
    }
}

fn gradient_of(data: &RiskDataset, tau: &[f64], eta: f64, sigma: f64) -> Vec<f64> {
    let g = data.grid.len();
    let mut grad = vec![0.0; g];
    if sigma <= HARD_SIGMA {
        return grad;
    }
    let costs = data.step_costs(eta);
    let n = data.len() as f64;
    let mut tail = vec![0.0; g];
    for (s, e) in data.s_max.iter().zip(&data.errors) {
        // Backward pass for R_{k+1}, forward pass for the survival product.
        tail[g - 1] = costs[g - 1] + f64::from(u8::from(e[g - 1]));
        for k in (0..g - 1).rev() {
            let q = crossing(s[k], tau[k], sigma);
            tail[k] = costs[k] + q * f64::from(u8::from(e[k])) + (1.0 - q) * tail[k + 1];
        }
        let mut survive = 1.0;
        for k in 0..g - 1 {
            let q = crossing(s[k], tau[k], sigma);
            let dq = -crossing_slope(s[k], tau[k], sigma);
            grad[k] += survive * (f64::from(u8::from(e[k])) - tail[k + 1]) * dq / n;
            survive *= 1.0 - q;
        }
    }
    grad
}

/// Best constant threshold among `candidates` under hard crossings.
pub fn best_constant(data: &RiskDataset, eta: f64, candidates: &[f64]) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &c in candidates {
        let r = risk_of(data, &vec![c; data.grid.len()], eta, 0.0);
        if best.is_none_or(|(_, br)| r < br) {
            best = Some((c, r));
        }
    }
    best.ok_or(Error::Empty("candidate thresholds"))
}

/// `n` evenly spaced thresholds covering the observed log ratios, plus one
/// below and one above them.
pub fn constant_candidates(data: &RiskDataset, n: usize) -> Vec<f64> {
    let (lo, hi) = data
        .s_max
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() || n < 2 {
        return vec![0.0];
    }
    let pad = 1e-6 * (1.0 + hi.abs().max(lo.abs()));
    let (lo, hi) = (lo - pad, hi + pad);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub schedule: ThresholdSchedule,
    /// Hard-crossing risk of the returned schedule.
    pub hard_risk: f64,
    pub initial_hard_risk: f64,
    /// Relaxed objective after each iteration.
    pub objective_trace: Vec<f64>,
}

/// Annealed gradient descent from `init`; returns the schedule with the
/// lowest hard-crossing risk seen (the initialization included).
pub fn optimize(
    data: &RiskDataset,
    eta: f64,
    cfg: &AnnealConfig,
    init: &ThresholdSchedule,
) -> Result<OptimizeResult> {
    cfg.validate()?;
    let mut tau = data.thresholds(init)?;
    let initial_hard_risk = risk_of(data, &tau, eta, 0.0);
    let mut best = (tau.clone(), initial_hard_risk);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for k in 1..=cfg.iterations {
        let sigma = cfg.temperature(k);
        let mut grad = gradient_of(data, &tau, eta, sigma);
        add_smoothness_gradient(&tau, cfg.smoothness_weight, &mut grad);
        for (t, g) in tau.iter_mut().zip(&grad) {
            *t -= cfg.step_size * g;
        }
        let obj = risk_of(data, &tau, eta, sigma) + smoothness_penalty(&tau, cfg.smoothness_weight);
        if !obj.is_finite() || tau.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged(format!(
                "threshold optimization diverged at iteration {k} (sigma {sigma})"
            )));
        }
        trace.push(obj);
        let hard = risk_of(data, &tau, eta, 0.0);
        if hard < best.1 {
            best = (tau.clone(), hard);
        }
    }
    Ok(OptimizeResult {
        schedule: ThresholdSchedule::new(data.grid.clone(), best.0, eta)?,
        hard_risk: best.1,
        initial_hard_risk,
        objective_trace: trace,
    })
}

/// Best constant from a 50-point sweep, then annealed descent.
pub fn fit_schedule(data: &RiskDataset, eta: f64, cfg: &AnnealConfig) -> Result<(OptimizeResult, f64)> {
    let (tau, constant_risk) = best_constant(data, eta, &constant_candidates(data, 50))?;
    let init = ThresholdSchedule::new(data.grid.clone(), vec![tau; data.grid.len()], eta)?;
    Ok((optimize(data, eta, cfg, &init)?, constant_risk))
}
