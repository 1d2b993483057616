//! Region-based energy profiling toolkit.
//!
//! The pipeline has three stages:
//!
//! 1. **Measurement** — a [`meter::Sampler`] polls a power backend
//!    ([`backend`]) for every sensor in a [`model::Topology`] and integrates
//!    the readings into per-sensor cumulative energy. Application code (or the
//!    [`synthload`] driver) brackets named regions per rank through a
//!    [`meter::RankContext`], producing [`meter::RegionRecord`]s.
//! 2. **Persistence** — each rank writes its records to a line-oriented trace
//!    file ([`tracefmt`]); per-rank files are merged into a single run file.
//! 3. **Analysis** — [`attribution`] deduplicates shared sensors and splits
//!    energy by device; [`analysis`] builds device/function breakdowns,
//!    validates against job-level accounting, and computes energy-delay
//!    products across GPU frequencies.

pub mod analysis;
pub mod attribution;
pub mod backend;
pub mod cli;
pub mod error;
pub mod hash;
pub mod meter;
pub mod model;
pub mod synthload;
pub mod tracefmt;

pub use error::{Error, Result};
