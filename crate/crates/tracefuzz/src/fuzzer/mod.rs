//! The fuzzer proper: mutation stages, the campaign loop, and slice-length
//! calibration.

pub mod calibrate;
pub mod campaign;
pub mod mutate;

pub use calibrate::{calibrate_max_tip, CalibrationReport, CandidateReport};
pub use campaign::{Artifact, Campaign, CampaignConfig, DetMode, Seed, StatsRow};
