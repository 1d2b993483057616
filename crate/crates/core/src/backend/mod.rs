//! Pluggable power-reading backends behind one interface.
//!
//! A backend answers "what does every sensor read at time `t`". Three
//! implementations cover the measurement paths: [`CounterFilesBackend`]
//! reads vendor counter files (the layout `pm_counters`-style BMCs expose),
//! [`ReplayBackend`] replays a recorded trace deterministically, and
//! [`SyntheticBackend`] evaluates a configurable power model driven by the
//! currently active region per rank.

mod counters;
mod replay;
mod synthetic;

pub use counters::CounterFilesBackend;
pub use replay::{ReplayBackend, ReplayTrace};
pub use synthetic::{ActiveRegions, RegionPower, SyntheticBackend, SyntheticModel};

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{PowerSample, Topology};

/// A source of power/energy samples used by exactly one sampler.
pub trait PowerBackend: Send {
    /// Verifies every sensor in `topo` is resolvable. Called once before
    /// sampling starts.
    fn init(&mut self, topo: &Topology) -> Result<()> {
        let _ = topo;
        Ok(())
    }

    /// Returns exactly one sample per sensor in `topo`, all stamped `t_us`.
    fn read_all(&mut self, topo: &Topology, t_us: u64) -> Result<Vec<PowerSample>>;

    /// Drains warnings accumulated since the last call (clamped replay
    /// queries, model lookup misses, ...).
    fn take_warnings(&mut self) -> Vec<String> {
        Vec::new()
    }

    fn label(&self) -> String;

    /// `(origin_us, scale)` mapping wall-clock seconds onto this backend's
    /// timeline; used by the threaded sampler. Replay reports its trace
    /// start and speed factor, everything else is identity.
    fn clock_hint(&self) -> (u64, f64) {
        (0, 1.0)
    }
}

/// Which backend a meter session runs against. Exactly one kind is active
/// per session.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    CounterFiles(PathBuf),
    Replay { trace: PathBuf, speed_factor: f64 },
    Synthetic(PathBuf),
}

impl BackendKind {
    /// Parses the CLI form `counters:DIR` or `replay:TRACE`.
    pub fn parse_cli(s: &str) -> Result<BackendKind> {
        match s.split_once(':') {
            Some(("counters", dir)) if !dir.is_empty() => {
                Ok(BackendKind::CounterFiles(PathBuf::from(dir)))
            }
            Some(("replay", path)) if !path.is_empty() => Ok(BackendKind::Replay {
                trace: PathBuf::from(path),
                speed_factor: 1.0,
            }),
            _ => Err(Error::data(format!(
                "unknown backend '{s}' (expected counters:DIR or replay:TRACE)"
            ))),
        }
    }

    pub fn build(&self) -> Result<Box<dyn PowerBackend>> {
        Ok(match self {
            BackendKind::CounterFiles(dir) => Box::new(CounterFilesBackend::new(dir.clone())),
            BackendKind::Replay {
                trace,
                speed_factor,
            } => Box::new(ReplayBackend::from_file(trace, *speed_factor)?),
            BackendKind::Synthetic(model_path) => {
                let text =
                    std::fs::read_to_string(model_path).map_err(|e| Error::io(model_path, e))?;
                Box::new(SyntheticBackend::new(SyntheticModel::parse(&text)?))
            }
        })
    }
}
