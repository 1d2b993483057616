//! Counter-file backend.
//!
//! Reads the one-file-per-sensor layout that BMC-style power interfaces
//! expose: `node_power`, `cpu<i>_power`, `memory<i>_power`, `accel<i>_power`
//! (with `_energy` variants for cumulative counters), each containing a
//! single line `<value> <unit> <timestamp_us>`. Files live either directly
//! in the counter directory or under a per-node subdirectory.
//!
//! Files are re-read whole on every sample; a partial or garbled read is
//! retried once and then reported as an error naming the path.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{DeviceKind, PowerSample, SensorMeta, SensorMode, Topology};

use super::PowerBackend;

pub struct CounterFilesBackend {
    dir: PathBuf,
}

impl CounterFilesBackend {
    pub fn new(dir: PathBuf) -> CounterFilesBackend {
        CounterFilesBackend { dir }
    }

    fn file_name(meta: &SensorMeta) -> String {
        let base = match meta.id.kind {
            DeviceKind::Node => "node".to_string(),
            DeviceKind::Cpu => format!("cpu{}", meta.id.index),
            DeviceKind::Memory => format!("memory{}", meta.id.index),
            DeviceKind::GpuCard => format!("accel{}", meta.id.index),
        };
        let suffix = match meta.mode {
            SensorMode::Power => "power",
            SensorMode::CumulativeEnergy => "energy",
        };
        format!("{base}_{suffix}")
    }

    fn resolve(&self, meta: &SensorMeta) -> PathBuf {
        let name = Self::file_name(meta);
        let nested = self.dir.join(&meta.id.node).join(&name);
        if nested.exists() {
            nested
        } else {
            self.dir.join(&name)
        }
    }

    fn read_value(path: &Path, meta: &SensorMeta) -> Result<f64> {
        let mut last_err = String::new();
        for _ in 0..2 {
            match Self::try_read(path, meta) {
                Ok(v) => return Ok(v),
                Err(msg) => last_err = msg,
            }
        }
        Err(Error::CounterFile {
            path: path.display().to_string(),
            msg: last_err,
        })
    }

    fn try_read(path: &Path, meta: &SensorMeta) -> std::result::Result<f64, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(format!(
                "garbled counter file (got {} fields, want 3)",
                fields.len()
            ));
        }
        let value: f64 = fields[0]
            .parse()
            .map_err(|_| format!("bad value '{}'", fields[0]))?;
        if !value.is_finite() {
            return Err(format!("bad value '{}'", fields[0]));
        }
        if fields[1] != meta.mode.unit() {
            return Err(format!(
                "unit '{}' does not match sensor mode {} ({})",
                fields[1],
                meta.mode.token(),
                meta.mode.unit()
            ));
        }
        fields[2]
            .parse::<u64>()
            .map_err(|_| format!("bad timestamp '{}'", fields[2]))?;
        Ok(value)
    }
}

impl PowerBackend for CounterFilesBackend {
    fn init(&mut self, topo: &Topology) -> Result<()> {
        for meta in &topo.sensors {
            Self::read_value(&self.resolve(meta), meta)?;
        }
        Ok(())
    }

    fn read_all(&mut self, topo: &Topology, t_us: u64) -> Result<Vec<PowerSample>> {
        let mut out = Vec::with_capacity(topo.sensors.len());
        for meta in &topo.sensors {
            let value = Self::read_value(&self.resolve(meta), meta)?;
            out.push(PowerSample {
                sensor: meta.id.clone(),
                t_us,
                value,
            });
        }
        Ok(out)
    }

    fn label(&self) -> String {
        format!("counters:{}", self.dir.display())
    }
}
