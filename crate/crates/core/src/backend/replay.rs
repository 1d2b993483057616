//! Deterministic trace replay.
//!
//! Trace files are text with a header line followed by
//! `timestamp_us,node,kind,index,value,unit` rows; timestamps must be
//! strictly increasing per sensor. Queries between trace points are
//! step-hold (sample-and-hold), matching how hardware counter files expose
//! the latest reading. Identical trace plus identical query times yields
//! identical samples.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DeviceKind, PowerSample, SensorId, SensorMode, Topology};

use super::PowerBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Clamp {
    None,
    Before,
    After,
}

/// A parsed replay trace, independent of any meter session. Also used by
/// job-level validation to integrate node power over the setup window.
#[derive(Debug, Clone)]
pub struct ReplayTrace {
    series: BTreeMap<SensorId, Vec<(u64, f64)>>,
    units: BTreeMap<SensorId, String>,
}

impl ReplayTrace {
    pub fn parse(text: &str) -> Result<ReplayTrace> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim_start().starts_with("timestamp_us") => {}
            _ => {
                return Err(Error::syntax(
                    1,
                    "missing trace header line 'timestamp_us,...'",
                ));
            }
        }

        let mut series: BTreeMap<SensorId, Vec<(u64, f64)>> = BTreeMap::new();
        let mut units: BTreeMap<SensorId, String> = BTreeMap::new();
        for (idx, raw) in lines {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(Error::syntax(lineno, "expected 6 comma-separated fields"));
            }
            let t_us: u64 = fields[0]
                .parse()
                .map_err(|_| Error::syntax(lineno, format!("bad timestamp '{}'", fields[0])))?;
            let kind = DeviceKind::from_token(fields[2])
                .ok_or_else(|| Error::syntax(lineno, format!("unknown kind '{}'", fields[2])))?;
            let index: u32 = fields[3]
                .parse()
                .map_err(|_| Error::syntax(lineno, format!("bad index '{}'", fields[3])))?;
            let value: f64 = fields[4]
                .parse()
                .map_err(|_| Error::syntax(lineno, format!("bad value '{}'", fields[4])))?;
            if !value.is_finite() {
                return Err(Error::syntax(lineno, format!("bad value '{}'", fields[4])));
            }
            let unit = fields[5];
            if unit != "W" && unit != "J" {
                return Err(Error::syntax(lineno, format!("unknown unit '{unit}'")));
            }
            let id = SensorId::new(fields[1], kind, index);
            match units.entry(id.clone()) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(unit.to_string());
                }
                std::collections::btree_map::Entry::Occupied(e) => {
                    if e.get() != unit {
                        return Err(Error::syntax(
                            lineno,
                            format!("unit change for sensor {id}"),
                        ));
                    }
                }
            }
            let points = series.entry(id.clone()).or_default();
            if let Some((last_t, _)) = points.last() {
                if t_us <= *last_t {
                    return Err(Error::syntax(
                        lineno,
                        format!("timestamps not strictly increasing for sensor {id}"),
                    ));
                }
            }
            points.push((t_us, value));
        }

        if series.is_empty() {
            return Err(Error::data("replay trace has no samples"));
        }
        Ok(ReplayTrace { series, units })
    }

    pub fn from_file(path: &Path) -> Result<ReplayTrace> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ReplayTrace::parse(&text)
    }

    pub fn contains(&self, id: &SensorId) -> bool {
        self.series.contains_key(id)
    }

    pub fn unit(&self, id: &SensorId) -> Option<&str> {
        self.units.get(id).map(String::as_str)
    }

    /// Earliest timestamp across all sensors.
    pub fn start_us(&self) -> u64 {
        self.series
            .values()
            .filter_map(|pts| pts.first().map(|(t, _)| *t))
            .min()
            .unwrap_or(0)
    }

    pub fn end_us(&self) -> u64 {
        self.series
            .values()
            .filter_map(|pts| pts.last().map(|(t, _)| *t))
            .max()
            .unwrap_or(0)
    }

    fn value_at(&self, id: &SensorId, t_us: u64) -> Option<(f64, Clamp)> {
        let pts = self.series.get(id)?;
        let first = pts.first()?;
        if t_us < first.0 {
            return Some((first.1, Clamp::Before));
        }
        let idx = pts.partition_point(|(t, _)| *t <= t_us);
        let (_, v) = pts[idx - 1];
        let clamp = if t_us > pts.last().unwrap().0 {
            Clamp::After
        } else {
            Clamp::None
        };
        Some((v, clamp))
    }

    /// Exact integral of the step-held node-level power over
    /// `[from_us, to_us]`, summed across all node-kind sensors, in joules.
    pub fn integrate_node_power(&self, from_us: u64, to_us: u64) -> Result<f64> {
        if to_us < from_us {
            return Err(Error::data("integration window end before start"));
        }
        let node_series: Vec<(&SensorId, &Vec<(u64, f64)>)> = self
            .series
            .iter()
            .filter(|(id, _)| id.kind == DeviceKind::Node)
            .collect();
        if node_series.is_empty() {
            return Err(Error::data("trace has no node-level sensor"));
        }
        let mut total = 0.0;
        for (id, pts) in node_series {
            if self.units[id] != "W" {
                return Err(Error::data(format!(
                    "node sensor {id} is not a power (W) series"
                )));
            }
            for (i, (t, v)) in pts.iter().enumerate() {
                // Value holds from its timestamp to the next point; the
                // first value also back-fills before the trace, the last
                // holds forever.
                let seg_start = if i == 0 { 0 } else { *t };
                let seg_end = pts.get(i + 1).map(|(t2, _)| *t2).unwrap_or(u64::MAX);
                let lo = seg_start.max(from_us);
                let hi = seg_end.min(to_us);
                if hi > lo {
                    total += v * (hi - lo) as f64 / 1e6;
                }
            }
        }
        Ok(total)
    }
}

/// Backend that replays a [`ReplayTrace`]. The speed factor only matters to
/// the threaded sampler, which maps wall time onto trace time; record
/// timestamps are always trace time.
pub struct ReplayBackend {
    trace: ReplayTrace,
    speed_factor: f64,
    warned: std::collections::BTreeSet<(SensorId, bool)>,
    warnings: Vec<String>,
}

impl ReplayBackend {
    pub fn new(trace: ReplayTrace, speed_factor: f64) -> ReplayBackend {
        ReplayBackend {
            trace,
            speed_factor,
            warned: Default::default(),
            warnings: Vec::new(),
        }
    }

    pub fn from_file(path: &Path, speed_factor: f64) -> Result<ReplayBackend> {
        Ok(ReplayBackend::new(
            ReplayTrace::from_file(path)?,
            speed_factor,
        ))
    }

    pub fn trace(&self) -> &ReplayTrace {
        &self.trace
    }
}

impl PowerBackend for ReplayBackend {
    fn init(&mut self, topo: &Topology) -> Result<()> {
        for meta in &topo.sensors {
            if !self.trace.contains(&meta.id) {
                return Err(Error::data(format!(
                    "replay trace has no samples for sensor {}",
                    meta.id
                )));
            }
            let want = match meta.mode {
                SensorMode::Power => "W",
                SensorMode::CumulativeEnergy => "J",
            };
            let got = self.trace.unit(&meta.id).unwrap();
            if got != want {
                return Err(Error::data(format!(
                    "sensor {} is {} mode but trace unit is {got}",
                    meta.id,
                    meta.mode.token()
                )));
            }
        }
        Ok(())
    }

    fn read_all(&mut self, topo: &Topology, t_us: u64) -> Result<Vec<PowerSample>> {
        let mut out = Vec::with_capacity(topo.sensors.len());
        for meta in &topo.sensors {
            let (value, clamp) = self.trace.value_at(&meta.id, t_us).ok_or_else(|| {
                Error::data(format!(
                    "replay trace has no samples for sensor {}",
                    meta.id
                ))
            })?;
            if clamp != Clamp::None {
                let after = clamp == Clamp::After;
                if self.warned.insert((meta.id.clone(), after)) {
                    self.warnings.push(format!(
                        "query {} trace range for sensor {}, clamped",
                        if after { "after" } else { "before" },
                        meta.id
                    ));
                }
            }
            out.push(PowerSample {
                sensor: meta.id.clone(),
                t_us,
                value,
            });
        }
        Ok(out)
    }

    fn take_warnings(&mut self) -> Vec<String> {
        std::mem::take(&mut self.warnings)
    }

    fn label(&self) -> String {
        "replay".into()
    }

    fn clock_hint(&self) -> (u64, f64) {
        (self.trace.start_us(), self.speed_factor)
    }
}
