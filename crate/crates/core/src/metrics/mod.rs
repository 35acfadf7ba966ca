//! Quality, rate-distortion and entropy measurements.

pub mod bd;
pub mod differential;
pub mod quality;
pub mod rqsi;

pub use bd::{bd_quality, bd_rate, QualityAxis, RDCurve, RDPoint};
pub use differential::{entropy_trace, kl_entropy, kl_entropy_vectors, EntropyRow, EntropyTrace};
pub use quality::{msssim, msssim_db, psnr};
pub use rqsi::{rqs, rqsi, LevelPair, RqsiMetric, DEFAULT_EPSILON};
