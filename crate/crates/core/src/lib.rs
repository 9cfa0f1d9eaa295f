//! Surname-and-geography race estimation with raking to known margins.
//!
//! The crate works on three-way `surname × geolocation × race` count tables.
//! [`bisg`] builds predictions from Census-style factors, [`raking`] adjusts
//! them to match known margins, [`calibmap`] solves the label-shift
//! calibration map, and [`metrics`] scores predictions against truth.

pub mod bisg;
pub mod calibmap;
pub mod ingest;
pub mod metrics;
pub mod race;
pub mod raking;
pub mod synth;
pub mod table;

pub use bisg::{BisgError, BisgFactors, Method, Prediction, VoterAdjustment};
pub use calibmap::{CalibError, CalibrationMap};
pub use ingest::IngestError;
pub use metrics::{MetricsError, Orientation};
pub use race::{Race, RaceVec, N_RACES};
pub use raking::{RakingConfig, RakingError, RakingResult};
pub use synth::{SynthConfig, SynthError};
pub use table::{AxisLabels, ContingencyTable, MarginSet, PredictionTable, TableError, ThreeWayTable};

use thiserror::Error;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Bisg(#[from] BisgError),
    #[error(transparent)]
    Raking(#[from] RakingError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}
