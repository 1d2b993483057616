//! Synthetic power model and backend.
//!
//! Powers a desk-scale stand-in for an instrumented GPU application: each
//! (region, device kind) pair has a static and a dynamic power term, the
//! dynamic term scales with GPU frequency as `(f / f_ref)^power_exponent`
//! (cubic by default), and region execution time stretches as
//! `alpha * f_ref / f + (1 - alpha)` where `alpha` is the region's compute
//! intensity.
//!
//! Device sensors read their idle floor plus the contribution of every rank
//! sharing them. Node sensors meter the whole node: the sum of all device
//! sensors on the node, plus node-kind region entries (auxiliary draw beyond
//! the device counters), plus the node idle floor. This keeps node totals
//! consistent with the device totals by construction.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::model::{DeviceKind, PowerSample, RankId, SensorId, SensorMode, Topology};

use super::PowerBackend;

/// Power draw of one (region, device kind) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionPower {
    pub static_w: f64,
    /// Watts at the reference frequency.
    pub dynamic_w: f64,
    /// Compute intensity in [0, 1]: 1 = fully frequency-bound.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    entries: BTreeMap<(String, DeviceKind), RegionPower>,
    idle_w: BTreeMap<DeviceKind, f64>,
    pub reference_freq_mhz: f64,
    pub current_freq_mhz: f64,
    pub power_exponent: f64,
}

impl SyntheticModel {
    /// Parses a model config document. Grammar (line-oriented, `#` comments):
    ///
    /// ```text
    /// region <name> <kind> <static_w> <dynamic_w> <alpha>
    /// idle <kind> <watts>
    /// freq <reference_mhz> <current_mhz>
    /// exponents <power_exp> affine
    /// ```
    pub fn parse(text: &str) -> Result<SyntheticModel> {
        let mut entries = BTreeMap::new();
        let mut idle_w = BTreeMap::new();
        let mut freq: Option<(f64, f64)> = None;
        let mut power_exponent = 3.0;

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.is_empty() {
                continue;
            }
            match tokens[0] {
                "region" => {
                    if tokens.len() != 6 {
                        return Err(Error::syntax(lineno, "region takes 5 arguments"));
                    }
                    let name = tokens[1].to_string();
                    if !crate::model::valid_name(&name) {
                        return Err(Error::syntax(lineno, format!("bad region name '{name}'")));
                    }
                    let kind = DeviceKind::from_token(tokens[2]).ok_or_else(|| {
                        Error::syntax(lineno, format!("unknown kind '{}'", tokens[2]))
                    })?;
                    let entry = RegionPower {
                        static_w: parse_f64(lineno, tokens[3], "static_w")?,
                        dynamic_w: parse_f64(lineno, tokens[4], "dynamic_w")?,
                        alpha: parse_f64(lineno, tokens[5], "alpha")?,
                    };
                    if entry.static_w < 0.0 || entry.dynamic_w < 0.0 {
                        return Err(Error::Invariant(format!(
                            "region '{name}' {kind}: powers must be >= 0"
                        )));
                    }
                    if !(0.0..=1.0).contains(&entry.alpha) {
                        return Err(Error::Invariant(format!(
                            "region '{name}' {kind}: alpha must be in [0, 1]"
                        )));
                    }
                    if entries.insert((name.clone(), kind), entry).is_some() {
                        return Err(Error::syntax(
                            lineno,
                            format!("duplicate region entry '{name}' {kind}"),
                        ));
                    }
                }
                "idle" => {
                    if tokens.len() != 3 {
                        return Err(Error::syntax(lineno, "idle takes 2 arguments"));
                    }
                    let kind = DeviceKind::from_token(tokens[1]).ok_or_else(|| {
                        Error::syntax(lineno, format!("unknown kind '{}'", tokens[1]))
                    })?;
                    let w = parse_f64(lineno, tokens[2], "idle watts")?;
                    if w < 0.0 {
                        return Err(Error::Invariant("idle power must be >= 0".into()));
                    }
                    idle_w.insert(kind, w);
                }
                "freq" => {
                    if tokens.len() != 3 {
                        return Err(Error::syntax(lineno, "freq takes 2 arguments"));
                    }
                    freq = Some((
                        parse_f64(lineno, tokens[1], "reference_mhz")?,
                        parse_f64(lineno, tokens[2], "current_mhz")?,
                    ));
                }
                "exponents" => {
                    if tokens.len() != 3 {
                        return Err(Error::syntax(lineno, "exponents takes 2 arguments"));
                    }
                    power_exponent = parse_f64(lineno, tokens[1], "power exponent")?;
                    if tokens[2] != "affine" {
                        return Err(Error::syntax(
                            lineno,
                            format!("unsupported time model '{}' (only affine)", tokens[2]),
                        ));
                    }
                }
                other => {
                    return Err(Error::syntax(
                        lineno,
                        format!("unknown directive '{other}'"),
                    ));
                }
            }
        }

        let (reference_freq_mhz, current_freq_mhz) =
            freq.ok_or_else(|| Error::Invariant("model config missing freq line".into()))?;
        if reference_freq_mhz <= 0.0 || current_freq_mhz <= 0.0 {
            return Err(Error::Invariant("frequencies must be > 0".into()));
        }
        if power_exponent <= 0.0 {
            return Err(Error::Invariant("power exponent must be > 0".into()));
        }
        Ok(SyntheticModel {
            entries,
            idle_w,
            reference_freq_mhz,
            current_freq_mhz,
            power_exponent,
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<SyntheticModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SyntheticModel::parse(&text)
    }

    pub fn with_frequency(&self, f_mhz: f64) -> Result<SyntheticModel> {
        if f_mhz <= 0.0 {
            return Err(Error::Invariant("frequencies must be > 0".into()));
        }
        let mut m = self.clone();
        m.current_freq_mhz = f_mhz;
        Ok(m)
    }

    pub fn idle(&self, kind: DeviceKind) -> f64 {
        self.idle_w.get(&kind).copied().unwrap_or(0.0)
    }

    pub fn entry(&self, region: &str, kind: DeviceKind) -> Option<&RegionPower> {
        self.entries.get(&(region.to_string(), kind))
    }

    pub fn knows_region(&self, region: &str) -> bool {
        self.entries.keys().any(|(name, _)| name == region)
    }

    pub fn region_names(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|(name, _)| name.as_str()).collect()
    }

    fn eval(&self, entry: &RegionPower, f_mhz: f64) -> f64 {
        entry.static_w
            + entry.dynamic_w * (f_mhz / self.reference_freq_mhz).powf(self.power_exponent)
    }

    /// Power of one (region, kind) pair at `f_mhz`:
    /// `static + dynamic * (f / f_ref)^exp`. Unknown pairs fall back to the
    /// kind's idle power.
    pub fn power(&self, region: &str, kind: DeviceKind, f_mhz: f64) -> f64 {
        match self.entry(region, kind) {
            Some(e) => self.eval(e, f_mhz),
            None => self.idle(kind),
        }
    }

    /// The compute intensity governing a region's time scaling: the GPU-card
    /// entry's alpha (frequency scaling targets the GPU), 0 when the region
    /// has no GPU entry.
    pub fn region_alpha(&self, region: &str) -> f64 {
        self.entry(region, DeviceKind::GpuCard)
            .map_or(0.0, |e| e.alpha)
    }

    /// Region execution time at `f_mhz`:
    /// `base * (alpha * f_ref / f + (1 - alpha))`.
    pub fn duration(&self, region: &str, base_duration_s: f64, f_mhz: f64) -> f64 {
        let alpha = self.region_alpha(region);
        base_duration_s * (alpha * self.reference_freq_mhz / f_mhz + (1.0 - alpha))
    }

    /// Instantaneous power of every sensor in `topo` given the active region
    /// per rank. Returns the per-sensor map plus the set of active regions
    /// the model knows nothing about (they contribute idle only).
    pub fn sensor_powers(
        &self,
        topo: &Topology,
        active: &BTreeMap<RankId, String>,
        f_mhz: f64,
    ) -> (BTreeMap<SensorId, f64>, BTreeSet<String>) {
        let mut by_sensor: BTreeMap<SensorId, f64> = BTreeMap::new();
        let mut unknown: BTreeSet<String> = BTreeSet::new();

        for meta in topo
            .sensors
            .iter()
            .filter(|s| s.id.kind != DeviceKind::Node)
        {
            // CPU and memory sensors on a node split the node-wide draw
            // evenly (one sensor per socket); card sensors meter their
            // own ranks.
            let split = match meta.id.kind {
                DeviceKind::Cpu | DeviceKind::Memory => topo
                    .sensors
                    .iter()
                    .filter(|s| s.id.node == meta.id.node && s.id.kind == meta.id.kind)
                    .count() as f64,
                _ => 1.0,
            };
            let mut p = self.idle(meta.id.kind);
            for rank in &meta.shared_by_ranks {
                if let Some(region) = active.get(rank) {
                    match self.entry(region, meta.id.kind) {
                        Some(e) => p += self.eval(e, f_mhz) / split,
                        None => {
                            if !self.knows_region(region) {
                                unknown.insert(region.clone());
                            }
                        }
                    }
                }
            }
            by_sensor.insert(meta.id.clone(), p);
        }

        for meta in topo
            .sensors
            .iter()
            .filter(|s| s.id.kind == DeviceKind::Node)
        {
            let mut p = self.idle(DeviceKind::Node);
            for rank in &meta.shared_by_ranks {
                if let Some(region) = active.get(rank) {
                    match self.entry(region, DeviceKind::Node) {
                        Some(e) => p += self.eval(e, f_mhz),
                        None => {
                            if !self.knows_region(region) {
                                unknown.insert(region.clone());
                            }
                        }
                    }
                }
            }
            p += by_sensor
                .iter()
                .filter(|(id, _)| id.node == meta.id.node)
                .map(|(_, w)| w)
                .sum::<f64>();
            by_sensor.insert(meta.id.clone(), p);
        }

        (by_sensor, unknown)
    }
}

fn parse_f64(lineno: usize, s: &str, what: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::syntax(lineno, format!("bad {what} '{s}'")))?;
    if !v.is_finite() {
        return Err(Error::syntax(lineno, format!("bad {what} '{s}'")));
    }
    Ok(v)
}

/// Shared handle the workload driver uses to tell the backend which region
/// each rank is executing.
#[derive(Clone, Default)]
pub struct ActiveRegions(Arc<Mutex<BTreeMap<RankId, String>>>);

impl ActiveRegions {
    pub fn set(&self, rank: RankId, region: Option<&str>) {
        let mut map = self.0.lock().unwrap();
        match region {
            Some(r) => {
                map.insert(rank, r.to_string());
            }
            None => {
                map.remove(&rank);
            }
        }
    }

    pub fn set_all(&self, ranks: &[RankId], region: Option<&str>) {
        let mut map = self.0.lock().unwrap();
        for rank in ranks {
            match region {
                Some(r) => {
                    map.insert(*rank, r.to_string());
                }
                None => {
                    map.remove(rank);
                }
            }
        }
    }

    fn snapshot(&self) -> BTreeMap<RankId, String> {
        self.0.lock().unwrap().clone()
    }
}

/// Backend evaluating a [`SyntheticModel`] at the model's current frequency.
pub struct SyntheticBackend {
    model: SyntheticModel,
    active: ActiveRegions,
    /// Step-hold integration state for CumulativeEnergy-mode sensors.
    energy_state: BTreeMap<SensorId, (u64, f64, f64)>,
    reported_unknown: BTreeSet<String>,
    warnings: Vec<String>,
}

impl SyntheticBackend {
    pub fn new(model: SyntheticModel) -> SyntheticBackend {
        SyntheticBackend {
            model,
            active: ActiveRegions::default(),
            energy_state: BTreeMap::new(),
            reported_unknown: BTreeSet::new(),
            warnings: Vec::new(),
        }
    }

    pub fn active_regions(&self) -> ActiveRegions {
        self.active.clone()
    }

    pub fn model(&self) -> &SyntheticModel {
        &self.model
    }
}

impl PowerBackend for SyntheticBackend {
    fn read_all(&mut self, topo: &Topology, t_us: u64) -> Result<Vec<PowerSample>> {
        let active = self.active.snapshot();
        let (powers, unknown) =
            self.model
                .sensor_powers(topo, &active, self.model.current_freq_mhz);
        for region in unknown {
            if self.reported_unknown.insert(region.clone()) {
                self.warnings
                    .push(format!("region '{region}' not in model, using idle power"));
            }
        }
        let mut out = Vec::with_capacity(topo.sensors.len());
        for meta in &topo.sensors {
            let p = powers[&meta.id];
            let value = match meta.mode {
                SensorMode::Power => p,
                SensorMode::CumulativeEnergy => {
                    // Advance the counter with the power held since the
                    // previous read.
                    let state = self
                        .energy_state
                        .entry(meta.id.clone())
                        .or_insert((t_us, p, 0.0));
                    let (last_t, last_p, cum) = *state;
                    let cum = cum + last_p * (t_us.saturating_sub(last_t)) as f64 / 1e6;
                    *state = (t_us, p, cum);
                    cum
                }
            };
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
        "synthetic".into()
    }
}
