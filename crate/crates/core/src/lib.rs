//! Scotopic classification toolkit.
//!
//! Simulates photon-counting sensors, trains exposure-adaptive classifiers on
//! simulated photon streams, and makes sequential (SPRT) decisions that trade
//! photon-collection time against accuracy.
//!
//! Exposure is measured in photons per pixel (PPP): the expected count of the
//! brightest pixel, `illuminance * bins * bin_width`. Networks use PPP as their
//! clock so a trained model does not depend on the simulator's bin width.

pub mod classifier;
pub mod error;
pub mod light;
pub mod model_io;
pub mod nn;
pub mod photon_sim;
pub mod rng;
pub mod spiking;
pub mod sprt;
pub mod threshold;
pub mod train;

pub use classifier::{
    AdaptedNetwork, ClassPosterior, Classifier, Ensemble, EstimatedLight, Photopic, PriorPooling,
    RateClassifier,
};
pub use error::{Error, Result};
pub use light::LightEstimator;
pub use nn::{Architecture, Network};
pub use photon_sim::{CountImage, IntensityImage, NoiseConfig, PhotonStream};
pub use sprt::{DecisionTrace, Regime, SatRow, StopReason, ThresholdSchedule};
pub use threshold::{AnnealConfig, RiskDataset, TimeCost};
pub use train::{TrainConfig, TrainReport};

/// Reference exposure (PPP) of the photopic specialist and of the jitter model.
pub const REFERENCE_PPP: f64 = 220.0;

/// The four light levels used for specialists and interrogation sweeps.
pub const ANCHOR_PPPS: [f64; 4] = [0.22, 2.2, 22.0, 220.0];
