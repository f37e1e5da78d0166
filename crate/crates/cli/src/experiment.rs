//! Pipelines behind each subcommand. Every stage is timed and its errors are
//! tagged with the stage name; every emitted file is hashed into the manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;

use scotopic::model_io::{read_model, write_model, Model};
use scotopic::photon_sim::{render_counts, simulate_stream};
use scotopic::rng::{derive_seed, stream_rng};
use scotopic::sprt::{fr_schedule_row, fr_sweep, int_sweep, query_grid, trajectories, write_sat_csv, Trajectory};
use scotopic::threshold::fit_schedule;
use scotopic::train::{stratified_exposures, train_ensemble, train_posterior, train_rate, train_specialist};
use scotopic::{
    AdaptedNetwork, Classifier, CountImage, Ensemble, EstimatedLight, IntensityImage, LightEstimator,
    NoiseConfig, Photopic, PhotonStream, RateClassifier, Regime, RiskDataset, ThresholdSchedule,
    TimeCost, TrainConfig, TrainReport, REFERENCE_PPP,
};

use crate::config::{ExperimentConfig, ModelKind};
use crate::idx::load_idx;
use crate::manifest::{sha256_hex, Artifact, ExperimentManifest, Seeds, StageTiming};

pub const SAT_CSV: &str = "sat.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const TRAIN_REPORT_CSV: &str = "train_report.csv";
pub const THRESHOLDS_CSV: &str = "thresholds.csv";
pub const NOISE_CSV: &str = "noise_sweep.csv";
pub const LIGHT_CSV: &str = "light.csv";
pub const LIGHT_EVAL_CSV: &str = "light_eval.csv";
pub const SPIKING_CSV: &str = "spiking.csv";
pub const EXPOSURE_CSV: &str = "exposure_table.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Train,
    TuneThresholds,
    SweepSat,
    SweepNoise,
    FitLight,
    SpikingBench,
    ExposureTable,
    /// Train, tune thresholds when free-responding, then sweep.
    Run,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::Train,
        Task::TuneThresholds,
        Task::SweepSat,
        Task::SweepNoise,
        Task::FitLight,
        Task::SpikingBench,
        Task::ExposureTable,
        Task::Run,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::TuneThresholds => "tune-thresholds",
            Task::SweepSat => "sweep-sat",
            Task::SweepNoise => "sweep-noise",
            Task::FitLight => "fit-light",
            Task::SpikingBench => "spiking-bench",
            Task::ExposureTable => "exposure-table",
            Task::Run => "run",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .with_context(|| format!("unknown task {name:?}"))
    }
}

pub fn seeds(cfg: &ExperimentConfig) -> Seeds {
    let run = cfg.run.seed;
    Seeds {
        run,
        train: cfg.train.seed,
        train_streams: derive_seed(run, 0x7124),
        validation_streams: derive_seed(run, 0x7A11),
        test_streams: derive_seed(run, 0x7E57),
        readout: derive_seed(run, 0x2EAD),
        bootstrap: derive_seed(run, 0xB007),
    }
}

pub struct Datasets {
    pub train: Vec<IntensityImage>,
    pub validation: Vec<IntensityImage>,
    pub test: Vec<IntensityImage>,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let limit = (d.train_subset > 0 && d.validation_subset > 0).then(|| d.train_subset + d.validation_subset);
    let mut all = load_idx(&d.train_images, &d.train_labels, limit)?;
    let n_train = if d.train_subset == 0 {
        all.len().saturating_sub(d.validation_subset)
    } else {
        d.train_subset.min(all.len())
    };
    let mut validation = all.split_off(n_train);
    if d.validation_subset > 0 {
        validation.truncate(d.validation_subset);
    }
    let test = load_idx(&d.test_images, &d.test_labels, (d.test_subset > 0).then_some(d.test_subset))?;
    Ok(Datasets { train: all, validation, test })
}

/// One stream per image, long enough for `max_ppp`; stream `i` is seeded by
/// `(seed, i)`.
pub fn simulate_streams(
    images: &[IntensityImage],
    noise: &NoiseConfig,
    max_ppp: f64,
    seed: u64,
) -> Result<Vec<PhotonStream>> {
    let bins = noise.bins_for_ppp(max_ppp).max(1);
    Ok(images
        .par_iter()
        .enumerate()
        .map(|(i, img)| simulate_stream(img, noise, bins, derive_seed(seed, i as u64)))
        .collect::<scotopic::Result<_>>()?)
}

/// A trained model together with how it is applied.
#[derive(Debug, Clone, PartialEq)]
pub enum Trained {
    Waldnet(AdaptedNetwork),
    Rate(RateClassifier),
    Photopic(Photopic),
    Ensemble(Ensemble),
    EstimatedLight(EstimatedLight),
}

impl Trained {
    pub fn classifier(&self) -> &dyn Classifier {
        match self {
            Trained::Waldnet(m) => m,
            Trained::Rate(m) => m,
            Trained::Photopic(m) => m,
            Trained::Ensemble(m) => m,
            Trained::EstimatedLight(m) => m,
        }
    }

    /// The exposure-adapted network, for models that have one.
    pub fn adapted(&self) -> Option<&AdaptedNetwork> {
        match self {
            Trained::Waldnet(m) => Some(m),
            Trained::EstimatedLight(m) => Some(&m.network),
            _ => None,
        }
    }

    pub fn to_model(&self) -> Model {
        match self {
            Trained::Waldnet(m) => Model::Adapted(m.clone()),
            Trained::EstimatedLight(m) => Model::Adapted(m.network.clone()),
            Trained::Rate(m) => Model::Plain(m.network.clone()),
            Trained::Photopic(m) => Model::Plain(m.network.clone()),
            Trained::Ensemble(m) => Model::Ensemble(m.clone()),
        }
    }
}

pub fn baseline_train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.model.baseline_learning_rate,
        ..cfg.train.clone()
    }
}

/// Trains the configured model kind; reports are labeled by member.
pub fn train_model(
    cfg: &ExperimentConfig,
    train: &[IntensityImage],
    light: Option<LightEstimator>,
) -> Result<(Trained, Vec<(String, TrainReport)>)> {
    let noise = &cfg.noise;
    let base = baseline_train_config(cfg);
    Ok(match cfg.model.kind {
        ModelKind::Waldnet | ModelKind::WaldnetEstimatedLight => {
            let (net, report) = train_posterior(train, &cfg.train, noise)?;
            let model = match light {
                Some(estimator) if cfg.model.kind == ModelKind::WaldnetEstimatedLight => {
                    Trained::EstimatedLight(EstimatedLight { network: net, estimator })
                }
                None if cfg.model.kind == ModelKind::WaldnetEstimatedLight => {
                    bail!("estimated-light model needs a fitted light estimator")
                }
                _ => Trained::Waldnet(net),
            };
            (model, vec![("waldnet".into(), report)])
        }
        ModelKind::Rate => {
            let (m, report) = train_rate(train, &base, noise)?;
            (Trained::Rate(m), vec![("rate".into(), report)])
        }
        ModelKind::Photopic => {
            let (network, report) = train_specialist(train, REFERENCE_PPP, &base, noise)?;
            let m = Photopic { network, reference_ppp: REFERENCE_PPP };
            (Trained::Photopic(m), vec![("photopic".into(), report)])
        }
        ModelKind::Ensemble => {
            let (m, reports) = train_ensemble(train, &cfg.model.anchors, &base, noise)?;
            let labels = cfg.model.anchors.iter().map(|a| format!("specialist_{a}"));
            (Trained::Ensemble(m), labels.zip(reports).collect())
        }
    })
}

/// Wraps a loaded container according to the configured kind.
pub fn wrap_model(kind: ModelKind, model: Model, light: Option<LightEstimator>) -> Result<Trained> {
    Ok(match (kind, model) {
        (ModelKind::Waldnet, Model::Adapted(n)) => Trained::Waldnet(n),
        (ModelKind::WaldnetEstimatedLight, Model::Adapted(network)) => {
            let estimator = light.context("estimated-light model needs a fitted light estimator")?;
            Trained::EstimatedLight(EstimatedLight { network, estimator })
        }
        (ModelKind::Rate, Model::Plain(network)) => Trained::Rate(RateClassifier { network }),
        (ModelKind::Photopic, Model::Plain(network)) => {
            Trained::Photopic(Photopic { network, reference_ppp: REFERENCE_PPP })
        }
        (ModelKind::Ensemble, Model::Ensemble(e)) => Trained::Ensemble(e),
        (kind, _) => bail!("model container does not hold a {kind:?} model"),
    })
}

/// Count images at log-uniform exposures, paired with their exposure.
pub fn light_pairs(
    images: &[IntensityImage],
    noise: &NoiseConfig,
    per_image: usize,
    range: [f64; 2],
    seed: u64,
) -> Result<Vec<(CountImage, f64)>> {
    Ok(images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = stream_rng(seed, i as u64);
            stratified_exposures(per_image, range, &mut rng)
                .into_iter()
                .map(|p| Ok((render_counts(img, noise, p, &mut rng)?, p)))
                .collect::<scotopic::Result<Vec<_>>>()
        })
        .collect::<scotopic::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

pub fn fit_light(cfg: &ExperimentConfig, train: &[IntensityImage]) -> Result<LightEstimator> {
    let n = if cfg.light.images == 0 { train.len() } else { cfg.light.images.min(train.len()) };
    let pairs = light_pairs(
        &train[..n],
        &cfg.noise,
        cfg.light.exposures_per_image,
        cfg.light.ppp_range,
        seeds(cfg).train_streams,
    )?;
    Ok(LightEstimator::fit(&pairs, &cfg.light.box_sizes, &cfg.light.top_k)?)
}

/// Median relative PPP error of the estimator on `images` rendered at `ppp`.
pub fn light_error_at(
    estimator: &LightEstimator,
    images: &[IntensityImage],
    noise: &NoiseConfig,
    ppp: f64,
    seed: u64,
) -> Result<f64> {
    let mut errors = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = stream_rng(seed, i as u64);
            let est = estimator.estimate_ppp(&render_counts(img, noise, ppp, &mut rng)?)?;
            Ok((est - ppp).abs() / ppp)
        })
        .collect::<scotopic::Result<Vec<f64>>>()?;
    ensure!(!errors.is_empty(), "no images to evaluate the light estimator on");
    errors.sort_by(f64::total_cmp);
    let n = errors.len();
    Ok(if n % 2 == 1 { errors[n / 2] } else { 0.5 * (errors[n / 2 - 1] + errors[n / 2]) })
}

/// Canonical noise parameter name for a sweep, accepting symbol aliases.
pub fn noise_parameter(name: &str) -> Result<&'static str> {
    Ok(match name {
        "dark_current" | "eps_dc" => "dark_current",
        "fpn_std" | "sigma_fpn" => "fpn_std",
        "read_noise_std" | "sigma_r" => "read_noise_std",
        "jitter_std" | "sigma_theta" => "jitter_std",
        other => bail!(
            "unknown noise parameter {other:?}; expected dark_current, fpn_std, read_noise_std or jitter_std"
        ),
    })
}

/// Robustness baseline with one parameter replaced; the clock comes from `base`.
pub fn noise_with(base: &NoiseConfig, parameter: &str, value: f64) -> Result<NoiseConfig> {
    let mut n = NoiseConfig {
        illuminance: base.illuminance,
        bin_width: base.bin_width,
        ..NoiseConfig::robustness_baseline()
    };
    match noise_parameter(parameter)? {
        "dark_current" => n.dark_current = value,
        "fpn_std" => n.fpn_std = value,
        "read_noise_std" => n.read_noise_std = value,
        _ => n.jitter_std = value,
    }
    n.validate()?;
    Ok(n)
}

pub const NOISE_HEADER: [&str; 10] = [
    "parameter",
    "value",
    "regime",
    "threshold_or_ppp",
    "median_ppp",
    "mean_ppp",
    "error_rate",
    "median_ppp_se",
    "error_se",
    "n_examples",
];

/// Free-response tradeoff of `model` on `test` for each value of one noise
/// parameter, the others held at the robustness baseline.
pub fn noise_sweep(
    cfg: &ExperimentConfig,
    model: &Trained,
    test: &[IntensityImage],
    parameter: &str,
    values: &[f64],
) -> Result<String> {
    let name = noise_parameter(parameter)?;
    let s = seeds(cfg);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(NOISE_HEADER)?;
    for (i, &v) in values.iter().enumerate() {
        let noise = noise_with(&cfg.noise, name, v)?;
        let streams = simulate_streams(test, &noise, cfg.sweep.max_ppp, s.test_streams)?;
        let grid = query_grid(&noise, 0.22, cfg.sweep.max_ppp, cfg.sweep.query_points);
        let trajs = trajectories(&streams, model.classifier(), &grid, &noise, s.readout)?;
        let rows = fr_sweep(&trajs, &cfg.sweep.thresholds, cfg.sweep.bootstrap, derive_seed(s.bootstrap, i as u64))?;
        for r in rows {
            w.write_record([
                name.to_string(),
                v.to_string(),
                r.regime.to_string(),
                r.threshold_or_ppp.to_string(),
                r.median_ppp.to_string(),
                r.mean_ppp.to_string(),
                r.error_rate.to_string(),
                r.median_ppp_se.to_string(),
                r.error_se.to_string(),
                r.n_examples.to_string(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Bits of signal per pixel on an illuminance-by-exposure-time grid.
pub fn exposure_table(lux: &[f64], seconds: &[f64]) -> Result<String> {
    for v in lux.iter().chain(seconds) {
        ensure!(*v > 0.0 && v.is_finite(), "exposure table entries must be positive, got {v}");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["lux".to_string()];
    header.extend(seconds.iter().map(|t| format!("t_{t}")));
    w.write_record(&header)?;
    for &e in lux {
        let mut row = vec![e.to_string()];
        for &t in seconds {
            row.push(scotopic::photon_sim::bits_of_signal(t, e)?.to_string());
        }
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Trajectories of `model` on `images` at the free-response query grid.
pub fn fr_trajectories(
    cfg: &ExperimentConfig,
    model: &Trained,
    images: &[IntensityImage],
    stream_seed: u64,
) -> Result<Vec<Trajectory>> {
    let streams = simulate_streams(images, &cfg.noise, cfg.sweep.max_ppp, stream_seed)?;
    let grid = query_grid(&cfg.noise, 0.22, cfg.sweep.max_ppp, cfg.sweep.query_points);
    Ok(trajectories(&streams, model.classifier(), &grid, &cfg.noise, seeds(cfg).readout)?)
}

/// Runs one task and writes its outputs and manifest to `cfg.run.out`.
pub fn run_task(task: Task, cfg: &ExperimentConfig) -> Result<ExperimentManifest> {
    cfg.validate()?;
    let mut r = Runner::new(cfg.clone())?;
    match task {
        Task::Train => {
            r.model()?;
        }
        Task::TuneThresholds => r.tune()?,
        Task::SweepSat => r.sweep_sat()?,
        Task::SweepNoise => r.sweep_noise()?,
        Task::FitLight => r.light_report()?,
        Task::SpikingBench => r.spiking()?,
        Task::ExposureTable => r.stage("exposure-table", |r| {
            let csv = exposure_table(&r.cfg.sweep.exposure_lux, &r.cfg.sweep.exposure_seconds)?;
            r.emit(EXPOSURE_CSV, csv.into_bytes())
        })?,
        Task::Run => {
            r.model()?;
            if r.cfg.sweep.regime == Regime::Fr && !r.cfg.sweep.etas.is_empty() {
                r.tune()?;
            }
            r.sweep_sat()?;
        }
    }
    r.finish(task)
}

/// Full pipeline: simulate, train, tune thresholds when free-responding,
/// sweep and emit CSVs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentManifest> {
    run_task(Task::Run, cfg)
}

/// Re-runs the task recorded in a manifest into `out` (or the recorded
/// directory) and returns the new manifest with the files whose hashes differ.
pub fn rerun(manifest: &Path, out: Option<PathBuf>) -> Result<(ExperimentManifest, Vec<String>)> {
    let old = ExperimentManifest::load(manifest)?;
    let mut cfg = old.config.clone();
    if let Some(out) = out {
        cfg.run.out = out;
    }
    let new = run_task(Task::from_name(&old.task)?, &cfg)?;
    let differing = old
        .artifacts
        .iter()
        .filter(|a| new.artifact(&a.file).is_none_or(|b| b.sha256 != a.sha256))
        .map(|a| a.file.clone())
        .collect();
    Ok((new, differing))
}

struct Runner {
    cfg: ExperimentConfig,
    out: PathBuf,
    stages: Vec<StageTiming>,
    artifacts: Vec<Artifact>,
    data: Option<Datasets>,
    light: Option<LightEstimator>,
    trained: Option<Trained>,
}

impl Runner {
    fn new(cfg: ExperimentConfig) -> Result<Self> {
        let out = cfg.run.out.clone();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            out,
            stages: Vec::new(),
            artifacts: Vec::new(),
            data: None,
            light: None,
            trained: None,
        })
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self).with_context(|| format!("stage `{name}` failed"));
        self.stages.push(StageTiming { name: name.into(), seconds: start.elapsed().as_secs_f64() });
        out
    }

    fn emit(&mut self, file: &str, bytes: Vec<u8>) -> Result<()> {
        let path = self.out.join(file);
        std::fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(Artifact { file: file.into(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    fn finish(self, task: Task) -> Result<ExperimentManifest> {
        let manifest = ExperimentManifest {
            task: task.name().into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seeds: seeds(&self.cfg),
            stages: self.stages,
            artifacts: self.artifacts,
            config: self.cfg,
        };
        manifest.save(&self.out)?;
        Ok(manifest)
    }

    fn data(&mut self) -> Result<&Datasets> {
        if self.data.is_none() {
            let d = self.stage("load", |r| load_datasets(&r.cfg))?;
            self.data = Some(d);
        }
        Ok(self.data.as_ref().expect("loaded"))
    }

    fn light(&mut self) -> Result<LightEstimator> {
        if self.light.is_none() {
            self.data()?;
            let est = self.stage("fit-light", |r| {
                let est = fit_light(&r.cfg, &r.data.as_ref().expect("loaded").train)?;
                let csv = format!("{}\n{}\n", LightEstimator::CSV_HEADER, est.csv_row());
                r.emit(LIGHT_CSV, csv.into_bytes())?;
                Ok(est)
            })?;
            self.light = Some(est);
        }
        Ok(self.light.clone().expect("fitted"))
    }

    fn model(&mut self) -> Result<Trained> {
        if let Some(m) = &self.trained {
            return Ok(m.clone());
        }
        let light = match self.cfg.model.kind {
            ModelKind::WaldnetEstimatedLight => Some(self.light()?),
            _ => None,
        };
        let model = if let Some(path) = self.cfg.model.path.clone() {
            self.stage("load-model", |r| {
                let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                wrap_model(r.cfg.model.kind, read_model(&mut bytes.as_slice())?, light)
            })?
        } else {
            self.data()?;
            self.stage("train", |r| {
                let train = &r.data.as_ref().expect("loaded").train;
                let (model, reports) = train_model(&r.cfg, train, light)?;
                let mut bytes = Vec::new();
                write_model(&mut bytes, &model.to_model())?;
                r.emit(MODEL_FILE, bytes)?;
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["member", "epoch", "loss", "t0"])?;
                for (member, rep) in &reports {
                    for (e, loss) in rep.epoch_losses.iter().enumerate() {
                        let t0 = rep.t0_trajectory.get(e).map(f64::to_string).unwrap_or_default();
                        w.write_record([member.clone(), (e + 1).to_string(), loss.to_string(), t0])?;
                    }
                }
                r.emit(TRAIN_REPORT_CSV, w.into_inner()?)?;
                Ok(model)
            })?
        };
        self.trained = Some(model.clone());
        Ok(model)
    }

    fn tune(&mut self) -> Result<()> {
        let model = self.model()?;
        self.data()?;
        self.stage("tune-thresholds", |r| {
            let cfg = &r.cfg;
            let s = seeds(cfg);
            let data = r.data.as_ref().expect("loaded");
            ensure!(!data.validation.is_empty(), "validation split is empty");
            let val = fr_trajectories(cfg, &model, &data.validation, s.validation_streams)?;
            let test = fr_trajectories(cfg, &model, &data.test, s.test_streams)?;
            let risk = RiskDataset::from_trajectories(&val, cfg.noise.bin_width, TimeCost::PppIncrement)?;
            let mut summary = csv::Writer::from_writer(Vec::new());
            summary.write_record([
                "eta",
                "constant_risk",
                "optimized_risk",
                "error_rate",
                "median_ppp",
                "mean_ppp",
                "error_se",
                "median_ppp_se",
                "schedule_file",
            ])?;
            let mut files = Vec::new();
            for (i, &eta) in cfg.sweep.etas.iter().enumerate() {
                let (fit, constant_risk) = fit_schedule(&risk, eta, &cfg.anneal)?;
                let row = fr_schedule_row(&test, &fit.schedule, cfg.sweep.bootstrap, derive_seed(s.bootstrap, i as u64))?;
                let file = format!("schedule_eta_{eta}.csv");
                let mut bytes = Vec::new();
                fit.schedule.write_csv(
                    &mut bytes,
                    &[("hard_risk", fit.hard_risk.to_string()), ("constant_risk", constant_risk.to_string())],
                )?;
                summary.write_record([
                    eta.to_string(),
                    constant_risk.to_string(),
                    fit.hard_risk.to_string(),
                    row.error_rate.to_string(),
                    row.median_ppp.to_string(),
                    row.mean_ppp.to_string(),
                    row.error_se.to_string(),
                    row.median_ppp_se.to_string(),
                    file.clone(),
                ])?;
                files.push((file, bytes));
            }
            for (file, bytes) in files {
                r.emit(&file, bytes)?;
            }
            r.emit(THRESHOLDS_CSV, summary.into_inner()?)
        })
    }

    fn sweep_sat(&mut self) -> Result<()> {
        let model = self.model()?;
        self.data()?;
        self.stage("sweep-sat", |r| {
            let cfg = &r.cfg;
            let s = seeds(cfg);
            let test = &r.data.as_ref().expect("loaded").test;
            let rows = match cfg.sweep.regime {
                Regime::Fr => {
                    let trajs = fr_trajectories(cfg, &model, test, s.test_streams)?;
                    fr_sweep(&trajs, &cfg.sweep.thresholds, cfg.sweep.bootstrap, s.bootstrap)?
                }
                Regime::Int => {
                    let mut ppps = cfg.sweep.ppps.clone();
                    ppps.sort_by(f64::total_cmp);
                    ppps.dedup();
                    let max = ppps.last().copied().unwrap_or(cfg.sweep.max_ppp);
                    let streams = simulate_streams(test, &cfg.noise, max, s.test_streams)?;
                    let trajs = trajectories(&streams, model.classifier(), &ppps, &cfg.noise, s.readout)?;
                    int_sweep(&trajs, &ppps, cfg.sweep.bootstrap, s.bootstrap)?
                }
            };
            let mut bytes = Vec::new();
            write_sat_csv(&mut bytes, &rows)?;
            r.emit(SAT_CSV, bytes)
        })
    }

    fn sweep_noise(&mut self) -> Result<()> {
        let name = noise_parameter(&self.cfg.sweep.noise_parameter).context("stage `sweep-noise` failed")?;
        if self.cfg.sweep.noise_values.is_empty() {
            return self.stage("sweep-noise", |r| {
                r.emit(NOISE_CSV, format!("{}\n", NOISE_HEADER.join(",")).into_bytes())
            });
        }
        let model = self.model()?;
        self.data()?;
        self.stage("sweep-noise", |r| {
            let test = &r.data.as_ref().expect("loaded").test;
            let csv = noise_sweep(&r.cfg, &model, test, name, &r.cfg.sweep.noise_values)?;
            r.emit(NOISE_CSV, csv.into_bytes())
        })
    }

    fn light_report(&mut self) -> Result<()> {
        let est = self.light()?;
        self.stage("evaluate-light", |r| {
            let s = seeds(&r.cfg);
            let test = &r.data.as_ref().expect("loaded").test;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["ppp", "median_relative_error", "n_examples"])?;
            for (i, &p) in r.cfg.sweep.ppps.iter().enumerate() {
                let err = light_error_at(&est, test, &r.cfg.noise, p, derive_seed(s.test_streams, i as u64))?;
                w.write_record([p.to_string(), err.to_string(), test.len().to_string()])?;
            }
            r.emit(LIGHT_EVAL_CSV, w.into_inner()?)
        })
    }

    fn spiking(&mut self) -> Result<()> {
        let model = self.model()?;
        self.data()?;
        self.stage("spiking-bench", |r| {
            let cfg = &r.cfg;
            let net = model.adapted().context("spiking-bench needs an exposure-adapted (waldnet) model")?;
            let schedule = match &cfg.sweep.schedule {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    ThresholdSchedule::read_csv(&text)?
                }
                None => ThresholdSchedule::constant(cfg.sweep.spiking_threshold),
            };
            let test = &r.data.as_ref().expect("loaded").test;
            let n = if cfg.sweep.spiking_streams == 0 { test.len() } else { cfg.sweep.spiking_streams.min(test.len()) };
            let streams = simulate_streams(&test[..n], &cfg.noise, cfg.sweep.max_ppp, seeds(cfg).test_streams)?;
            let grid = query_grid(&cfg.noise, 0.22, cfg.sweep.max_ppp, cfg.sweep.query_points);
            let rows = scotopic::spiking::spiking_sweep(&streams, net, &schedule, &grid, cfg.sweep.max_ppp, &cfg.sweep.taus)?;
            let mut bytes = Vec::new();
            scotopic::spiking::write_spiking_csv(&mut bytes, &rows)?;
            r.emit(SPIKING_CSV, bytes)
        })
    }
}
