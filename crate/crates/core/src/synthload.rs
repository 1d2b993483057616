//! Synthetic workload driver and trace generator.
//!
//! Executes a configurable sequence of named regions (DomainDecompAndSync,
//! MomentumEnergy, ...) over the synthetic backend on a simulated clock:
//! virtual time is driven by the region schedule, so runs take milliseconds
//! and are perfectly reproducible. Every rank executes the same schedule in
//! lock step, which matches a bulk-synchronous time-stepping loop.
//!
//! [`ground_truth`] computes the same run's per-region energies in closed
//! form (power times duration, no sampler involved), bounding the sampled
//! pipeline's integration error in tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backend::{SyntheticBackend, SyntheticModel};
use crate::error::{Error, Result};
use crate::meter::{RankContext, Sampler, SamplerConfig};
use crate::model::{DeviceKind, RankId, SensorId, Topology};
use crate::tracefmt::{self, RunHeader};

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    pub steps: u32,
    pub ranks: u32,
    /// Particle-scale label, cosmetic only.
    pub label: String,
    /// Region sequence executed every step, with base durations in seconds
    /// at the reference frequency.
    pub regions: Vec<(String, f64)>,
    /// Frequencies (MHz) for sweep experiments.
    pub freqs: Vec<f64>,
}

impl WorkloadConfig {
    /// Grammar (line-oriented, `#` comments): `steps <n>`, `ranks <n>`,
    /// `region <name> <base_duration_s>`, `freqs <mhz>...`, `label <text>`.
    pub fn parse(text: &str) -> Result<WorkloadConfig> {
        let mut steps = 100u32;
        let mut ranks = None;
        let mut label = String::new();
        let mut regions = Vec::new();
        let mut freqs = Vec::new();

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
                "steps" if tokens.len() == 2 => {
                    steps = tokens[1]
                        .parse()
                        .map_err(|_| Error::syntax(lineno, format!("bad steps '{}'", tokens[1])))?;
                }
                "ranks" if tokens.len() == 2 => {
                    ranks = Some(tokens[1].parse().map_err(|_| {
                        Error::syntax(lineno, format!("bad ranks '{}'", tokens[1]))
                    })?);
                }
                "label" if tokens.len() >= 2 => {
                    label = tokens[1..].join(" ");
                }
                "region" if tokens.len() == 3 => {
                    if !crate::model::valid_name(tokens[1]) {
                        return Err(Error::syntax(
                            lineno,
                            format!("bad region name '{}'", tokens[1]),
                        ));
                    }
                    let dur: f64 = tokens[2].parse().map_err(|_| {
                        Error::syntax(lineno, format!("bad duration '{}'", tokens[2]))
                    })?;
                    regions.push((tokens[1].to_string(), dur));
                }
                "freqs" if tokens.len() >= 2 => {
                    for t in &tokens[1..] {
                        freqs.push(
                            t.parse().map_err(|_| {
                                Error::syntax(lineno, format!("bad frequency '{t}'"))
                            })?,
                        );
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

        let cfg = WorkloadConfig {
            steps,
            ranks: ranks.ok_or_else(|| Error::Invariant("workload missing ranks line".into()))?,
            label,
            regions,
            freqs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<WorkloadConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        WorkloadConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Invariant("steps must be >= 1".into()));
        }
        if self.ranks < 1 {
            return Err(Error::Invariant("ranks must be >= 1".into()));
        }
        if self.regions.is_empty() {
            return Err(Error::Invariant("workload has no regions".into()));
        }
        if self
            .regions
            .iter()
            .any(|(_, d)| *d <= 0.0 || !d.is_finite())
        {
            return Err(Error::Invariant("region durations must be > 0".into()));
        }
        if self.freqs.is_empty() {
            return Err(Error::Invariant("frequency list must be non-empty".into()));
        }
        for (i, f) in self.freqs.iter().enumerate() {
            if *f <= 0.0 || !f.is_finite() {
                return Err(Error::Invariant("frequencies must be > 0".into()));
            }
            if self.freqs[..i].contains(f) {
                return Err(Error::Invariant(format!("duplicate frequency {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub run_id: String,
    /// Overrides the model's current frequency and labels the run files.
    pub freq_mhz: Option<f64>,
    pub sampler: SamplerConfig,
}

#[derive(Debug)]
pub struct SimulatedRun {
    pub rank_files: Vec<PathBuf>,
    pub freq_mhz: f64,
    pub warnings: Vec<String>,
}

/// Runs the workload on the simulated clock: every rank steps through the
/// region sequence with durations from the model's time law and powers from
/// its power law; the meter records every region and one file per rank is
/// written under `opts.out_dir`. Deterministic given (config, model,
/// topology, period).
pub fn run_workload(
    cfg: &WorkloadConfig,
    model: &SyntheticModel,
    topo: &Topology,
    opts: &RunOptions,
) -> Result<SimulatedRun> {
    cfg.validate()?;
    if cfg.ranks as usize != topo.ranks.len() {
        return Err(Error::data(format!(
            "workload declares {} ranks but topology has {}",
            cfg.ranks,
            topo.ranks.len()
        )));
    }
    let freq = opts.freq_mhz.unwrap_or(model.current_freq_mhz);
    let model = model.with_frequency(freq)?;

    let backend = SyntheticBackend::new(model.clone());
    let active = backend.active_regions();
    let sampler = Sampler::manual(Box::new(backend), topo, opts.sampler, 0)?;
    let rank_ids: Vec<RankId> = topo.ranks.keys().copied().collect();
    let mut ctxs = rank_ids
        .iter()
        .map(|r| RankContext::new(&opts.run_id, *r, topo, sampler.clone()))
        .collect::<Result<Vec<_>>>()?;

    let mut t_us = 0u64;
    for _step in 0..cfg.steps {
        for (region, base) in &cfg.regions {
            let duration_s = model.duration(region, *base, freq);
            let duration_us = ((duration_s * 1e6).round() as u64).max(1);
            let end_us = t_us + duration_us;
            for ctx in &mut ctxs {
                ctx.region_begin(region, t_us);
            }
            // Switch the model's active region only after the boundary
            // sample, then resample at the same instant so the
            // piecewise-constant power integrates exactly.
            active.set_all(&rank_ids, Some(region));
            sampler.resample_at(t_us);
            for ctx in &mut ctxs {
                ctx.region_end(region, end_us)?;
            }
            t_us = end_us;
        }
    }

    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let header = RunHeader::new(
        &opts.run_id,
        topo.digest(),
        "synthetic",
        opts.sampler.period_ms,
    )
    .with_freq(freq);
    let mut rank_files = Vec::new();
    for (rank, ctx) in rank_ids.iter().zip(&mut ctxs) {
        let records = ctx.flush()?;
        let path = opts.out_dir.join(format!("rank{rank:04}.rec"));
        tracefmt::write_rank_file(&records, &header, &path)?;
        rank_files.push(path);
    }
    if let Some(err) = sampler.error_state() {
        return Err(Error::data(format!("sampler entered error state: {err}")));
    }
    Ok(SimulatedRun {
        rank_files,
        freq_mhz: freq,
        warnings: sampler.take_warnings(),
    })
}

/// Closed-form energies of one region across all steps.
#[derive(Debug, Clone)]
pub struct RegionTruth {
    /// Total per-rank time inside the region over the whole run.
    pub duration_s: f64,
    pub per_sensor_j: BTreeMap<SensorId, f64>,
    /// Deduplicated per-device totals (each sensor counted once).
    pub per_kind_j: BTreeMap<DeviceKind, f64>,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub per_region: BTreeMap<String, RegionTruth>,
    /// Deduplicated node-level total for the run.
    pub total_j: f64,
    pub wall_s: f64,
}

/// Analytic twin of [`run_workload`]: power times duration per region,
/// computed without the sampler.
pub fn ground_truth(
    cfg: &WorkloadConfig,
    model: &SyntheticModel,
    topo: &Topology,
    freq_mhz: Option<f64>,
) -> Result<GroundTruth> {
    cfg.validate()?;
    let freq = freq_mhz.unwrap_or(model.current_freq_mhz);
    let model = model.with_frequency(freq)?;

    let mut per_region = BTreeMap::new();
    let mut total_j = 0.0;
    let mut wall_s = 0.0;
    for (region, base) in &cfg.regions {
        let step_duration_s = model.duration(region, *base, freq);
        // Match the driver's microsecond rounding of each step's duration.
        let step_duration_s = ((step_duration_s * 1e6).round() as u64).max(1) as f64 / 1e6;
        let duration_s = step_duration_s * cfg.steps as f64;
        wall_s += duration_s;

        let all_active: BTreeMap<RankId, String> =
            topo.ranks.keys().map(|r| (*r, region.clone())).collect();
        let (powers, _) = model.sensor_powers(topo, &all_active, freq);
        let per_sensor_j: BTreeMap<SensorId, f64> = powers
            .into_iter()
            .map(|(id, w)| (id, w * duration_s))
            .collect();
        let mut per_kind_j: BTreeMap<DeviceKind, f64> = BTreeMap::new();
        for (id, j) in &per_sensor_j {
            *per_kind_j.entry(id.kind).or_insert(0.0) += j;
        }
        total_j += per_kind_j.get(&DeviceKind::Node).copied().unwrap_or(0.0);
        per_region.insert(
            region.clone(),
            RegionTruth {
                duration_s,
                per_sensor_j,
                per_kind_j,
            },
        );
    }
    Ok(GroundTruth {
        per_region,
        total_j,
        wall_s,
    })
}
