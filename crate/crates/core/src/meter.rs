//! Region-based measurement engine.
//!
//! A [`Sampler`] owns a power backend and integrates its readings into a
//! monotone cumulative-energy accumulator per sensor: trapezoidal
//! integration for power-mode sensors, wrap-corrected differencing for
//! cumulative-energy counters. [`RankContext`] brackets named regions per
//! rank; closing a region yields a [`RegionRecord`] with the energy each of
//! the rank's sensors accumulated between begin and end, interpolated to
//! the exact boundary timestamps.
//!
//! Two drive modes share the same core. `Sampler::manual` runs on a virtual
//! clock advanced explicitly by the caller (deterministic, no sleeping);
//! `Sampler::start` spawns the background sampling thread used against live
//! counter files.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::backend::PowerBackend;
use crate::error::{Error, Result};
use crate::model::{RankId, SensorId, SensorMode, Topology};

pub const DEFAULT_PERIOD_MS: u64 = 100;
pub const PERIOD_ENV_VAR: &str = "EMETER_PERIOD_MS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub period_ms: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            period_ms: DEFAULT_PERIOD_MS,
        }
    }
}

impl SamplerConfig {
    pub fn new(period_ms: u64) -> Result<SamplerConfig> {
        if period_ms < 1 {
            return Err(Error::Invariant("sampler period must be >= 1 ms".into()));
        }
        Ok(SamplerConfig { period_ms })
    }

    /// Default period, overridden by `EMETER_PERIOD_MS` when set.
    pub fn from_env() -> Result<SamplerConfig> {
        match std::env::var(PERIOD_ENV_VAR) {
            Ok(v) => {
                let ms: u64 = v
                    .parse()
                    .map_err(|_| Error::data(format!("bad {PERIOD_ENV_VAR} value '{v}'")))?;
                SamplerConfig::new(ms)
            }
            Err(_) => Ok(SamplerConfig::default()),
        }
    }
}

struct Track {
    mode: SensorMode,
    width_bits: u32,
    /// Sampled cumulative-energy curve, strictly increasing in time.
    curve: Vec<(u64, f64)>,
    last_power_w: f64,
    last_raw_j: f64,
    max_power_w: f64,
}

struct MeterCore {
    backend: Box<dyn PowerBackend>,
    topo: Topology,
    period_us: u64,
    next_tick_us: u64,
    tracks: BTreeMap<SensorId, Track>,
    error: Option<String>,
    warnings: Vec<String>,
}

impl MeterCore {
    fn new(
        mut backend: Box<dyn PowerBackend>,
        topo: &Topology,
        cfg: SamplerConfig,
    ) -> Result<MeterCore> {
        backend.init(topo)?;
        let tracks = topo
            .sensors
            .iter()
            .map(|s| {
                (
                    s.id.clone(),
                    Track {
                        mode: s.mode,
                        width_bits: s.counter_width_bits,
                        curve: Vec::new(),
                        last_power_w: 0.0,
                        last_raw_j: 0.0,
                        max_power_w: 0.0,
                    },
                )
            })
            .collect();
        Ok(MeterCore {
            backend,
            topo: topo.clone(),
            period_us: cfg.period_ms * 1000,
            next_tick_us: 0,
            tracks,
            error: None,
            warnings: Vec::new(),
        })
    }

    fn fail(&mut self, msg: String) {
        if self.error.is_none() {
            self.error = Some(msg);
        }
    }

    /// Samples the backend at `t_us` and advances every accumulator. On
    /// backend failure the sampler enters an error state and accumulators
    /// freeze at their last good value.
    fn tick(&mut self, t_us: u64) {
        if self.error.is_some() {
            return;
        }
        let samples = match self.backend.read_all(&self.topo, t_us) {
            Ok(s) => s,
            Err(e) => {
                self.fail(format!("backend failure: {e}"));
                return;
            }
        };
        let drained = self.backend.take_warnings();
        self.warnings.extend(drained);
        let mut failure: Option<String> = None;
        'samples: for s in samples {
            let Some(track) = self.tracks.get_mut(&s.sensor) else {
                failure = Some(format!("backend returned unknown sensor {}", s.sensor));
                break;
            };
            if !s.value.is_finite() {
                failure = Some(format!("non-finite reading on sensor {}", s.sensor));
                break;
            }
            match track.mode {
                SensorMode::Power => {
                    if s.value < 0.0 {
                        failure = Some(format!("negative power reading on sensor {}", s.sensor));
                        break;
                    }
                    track.max_power_w = track.max_power_w.max(s.value);
                    match track.curve.last() {
                        None => {
                            track.curve.push((t_us, 0.0));
                            track.last_power_w = s.value;
                        }
                        Some(&(last_t, last_cum)) => {
                            if t_us < last_t {
                                failure =
                                    Some(format!("time went backwards on sensor {}", s.sensor));
                                break;
                            }
                            if t_us == last_t {
                                // Re-sample at the same instant: adopt the new
                                // power for the next interval, no energy moves.
                                track.last_power_w = s.value;
                            } else {
                                let dt_s = (t_us - last_t) as f64 / 1e6;
                                let cum = last_cum + dt_s * (track.last_power_w + s.value) / 2.0;
                                track.curve.push((t_us, cum));
                                track.last_power_w = s.value;
                            }
                        }
                    }
                }
                SensorMode::CumulativeEnergy => match track.curve.last() {
                    None => {
                        track.curve.push((t_us, 0.0));
                        track.last_raw_j = s.value;
                    }
                    Some(&(last_t, last_cum)) => {
                        if t_us < last_t {
                            failure = Some(format!("time went backwards on sensor {}", s.sensor));
                            break;
                        }
                        if t_us == last_t {
                            continue 'samples;
                        }
                        let mut delta = s.value - track.last_raw_j;
                        if delta < 0.0 {
                            if track.width_bits == 0 {
                                failure = Some(format!(
                                    "counter decreased on non-wrapping sensor {}",
                                    s.sensor
                                ));
                                break;
                            }
                            // At most one wrap between consecutive samples.
                            delta += (track.width_bits as f64).exp2();
                            if delta < 0.0 {
                                failure = Some(format!(
                                    "counter decreased by more than one wrap on sensor {}",
                                    s.sensor
                                ));
                                break;
                            }
                        }
                        let dt_s = (t_us - last_t) as f64 / 1e6;
                        track.max_power_w = track.max_power_w.max(delta / dt_s);
                        track.curve.push((t_us, last_cum + delta));
                        track.last_raw_j = s.value;
                    }
                },
            }
        }
        if let Some(msg) = failure {
            self.fail(msg);
        }
    }

    fn advance_to(&mut self, t_us: u64) {
        while self.next_tick_us <= t_us {
            let t = self.next_tick_us;
            self.tick(t);
            self.next_tick_us += self.period_us;
        }
    }

    fn last_sample_us(&self) -> Option<u64> {
        self.tracks
            .values()
            .filter_map(|t| t.curve.last().map(|(t, _)| *t))
            .max()
    }

    /// Cumulative energy of one sensor at `t_us`, linearly interpolated
    /// between the two bracketing samples.
    fn accumulator_at(&mut self, id: &SensorId, t_us: u64) -> f64 {
        let Some(track) = self.tracks.get(id) else {
            self.warnings
                .push(format!("accumulator query for unknown sensor {id}"));
            return 0.0;
        };
        let curve = &track.curve;
        let Some(&(first_t, _)) = curve.first() else {
            self.warnings
                .push(format!("no samples yet for sensor {id}"));
            return 0.0;
        };
        if t_us < first_t {
            self.warnings
                .push(format!("query at {t_us} us before first sample of {id}"));
            return 0.0;
        }
        let &(last_t, last_cum) = curve.last().unwrap();
        if t_us >= last_t {
            if t_us > last_t {
                self.warnings
                    .push(format!("query at {t_us} us after last sample of {id}"));
            }
            return last_cum;
        }
        let idx = curve.partition_point(|(t, _)| *t <= t_us);
        let (t0, c0) = curve[idx - 1];
        if t0 == t_us {
            return c0;
        }
        let (t1, c1) = curve[idx];
        c0 + (c1 - c0) * (t_us - t0) as f64 / (t1 - t0) as f64
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum DriveMode {
    Manual,
    Threaded,
}

struct ThreadCtl {
    stop: Arc<AtomicBool>,
    handle: Mutex<Option<std::thread::JoinHandle<()>>>,
}

impl Drop for ThreadCtl {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.lock().unwrap().take() {
            let _ = h.join();
        }
    }
}

/// Handle to one meter session. Cheap to clone; all clones share the same
/// accumulators behind a lock.
#[derive(Clone)]
pub struct Sampler {
    core: Arc<Mutex<MeterCore>>,
    mode: DriveMode,
    ctl: Option<Arc<ThreadCtl>>,
    clock: Option<Arc<(Instant, u64, f64)>>,
    period_ms: u64,
}

impl Sampler {
    /// Virtual-clock sampler: takes an initial sample at `start_us` and
    /// advances only when told to. Fully deterministic.
    pub fn manual(
        backend: Box<dyn PowerBackend>,
        topo: &Topology,
        cfg: SamplerConfig,
        start_us: u64,
    ) -> Result<Sampler> {
        let mut core = MeterCore::new(backend, topo, cfg)?;
        core.next_tick_us = start_us;
        core.advance_to(start_us);
        Ok(Sampler {
            core: Arc::new(Mutex::new(core)),
            mode: DriveMode::Manual,
            ctl: None,
            clock: None,
            period_ms: cfg.period_ms,
        })
    }

    /// Background sampling loop reading the backend every period. The meter
    /// timeline follows the backend's clock hint (wall time for counter
    /// files, scaled trace time for replay).
    pub fn start(
        backend: Box<dyn PowerBackend>,
        topo: &Topology,
        cfg: SamplerConfig,
    ) -> Result<Sampler> {
        let (origin, scale) = backend.clock_hint();
        let mut core = MeterCore::new(backend, topo, cfg)?;
        core.tick(origin);
        core.next_tick_us = origin + cfg.period_ms * 1000;
        let core = Arc::new(Mutex::new(core));
        let stop = Arc::new(AtomicBool::new(false));
        let started = Instant::now();

        let thread_core = Arc::clone(&core);
        let thread_stop = Arc::clone(&stop);
        let wall_period = Duration::from_secs_f64(cfg.period_ms as f64 / 1000.0 / scale.max(1e-9));
        let handle = std::thread::spawn(move || {
            while !thread_stop.load(Ordering::Relaxed) {
                std::thread::sleep(wall_period);
                // Sample time is computed under the lock so tick times stay
                // monotone with respect to ensure_time samples.
                let mut core = thread_core.lock().unwrap();
                let t = origin + (started.elapsed().as_secs_f64() * scale * 1e6) as u64;
                core.tick(t);
            }
        });

        Ok(Sampler {
            core,
            mode: DriveMode::Threaded,
            ctl: Some(Arc::new(ThreadCtl {
                stop,
                handle: Mutex::new(Some(handle)),
            })),
            clock: Some(Arc::new((started, origin, scale))),
            period_ms: cfg.period_ms,
        })
    }

    pub fn period_ms(&self) -> u64 {
        self.period_ms
    }

    /// Ticks every period boundary up to `t_us` (manual mode only).
    pub fn advance_to(&self, t_us: u64) {
        debug_assert!(self.mode == DriveMode::Manual);
        self.core.lock().unwrap().advance_to(t_us);
    }

    /// Makes the accumulators well-defined at `t_us`: in manual mode by
    /// sampling all period boundaries up to `t_us` plus `t_us` itself, in
    /// threaded mode by taking one immediate sample at the current time.
    pub fn ensure_time(&self, t_us: u64) {
        let mut core = self.core.lock().unwrap();
        match self.mode {
            DriveMode::Manual => {
                core.advance_to(t_us);
                if core.last_sample_us().is_none_or(|last| last < t_us) {
                    core.tick(t_us);
                }
            }
            DriveMode::Threaded => {
                // Computed under the lock held above, keeping tick times
                // monotone with the sampling thread's.
                let (started, origin, scale) = **self.clock.as_ref().unwrap();
                let now = origin + (started.elapsed().as_secs_f64() * scale * 1e6) as u64;
                core.tick(now.max(t_us));
            }
        }
    }

    /// Takes an extra sample at exactly `t_us` (manual mode). Used after
    /// a step change in the underlying power so the piecewise-constant
    /// source integrates exactly.
    pub fn resample_at(&self, t_us: u64) {
        debug_assert!(self.mode == DriveMode::Manual);
        self.core.lock().unwrap().tick(t_us);
    }

    pub fn accumulator_at(&self, id: &SensorId, t_us: u64) -> f64 {
        self.core.lock().unwrap().accumulator_at(id, t_us)
    }

    /// Highest power observed on a sensor so far, in watts.
    pub fn max_power(&self, id: &SensorId) -> f64 {
        self.core
            .lock()
            .unwrap()
            .tracks
            .get(id)
            .map_or(0.0, |t| t.max_power_w)
    }

    pub fn error_state(&self) -> Option<String> {
        self.core.lock().unwrap().error.clone()
    }

    pub fn take_warnings(&self) -> Vec<String> {
        std::mem::take(&mut self.core.lock().unwrap().warnings)
    }

    pub fn last_sample_us(&self) -> Option<u64> {
        self.core.lock().unwrap().last_sample_us()
    }

    /// Stops the background thread, if any. Manual samplers are unaffected.
    pub fn stop(&self) {
        if let Some(ctl) = &self.ctl {
            ctl.stop.store(true, Ordering::Relaxed);
            if let Some(h) = ctl.handle.lock().unwrap().take() {
                let _ = h.join();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordFlags {
    /// The sampler was in an error state while this region was open.
    pub degraded: bool,
    /// Energy attributed by an even split of a shared sensor.
    pub approximate: bool,
}

impl RecordFlags {
    pub fn render(&self) -> String {
        let mut parts = Vec::new();
        if self.degraded {
            parts.push("degraded");
        }
        if self.approximate {
            parts.push("approximate");
        }
        if parts.is_empty() {
            "-".to_string()
        } else {
            parts.join(",")
        }
    }

    pub fn parse(s: &str) -> Result<RecordFlags> {
        let mut flags = RecordFlags::default();
        if s == "-" {
            return Ok(flags);
        }
        for part in s.split(',') {
            match part {
                "degraded" => flags.degraded = true,
                "approximate" => flags.approximate = true,
                other => return Err(Error::data(format!("unknown record flag '{other}'"))),
            }
        }
        Ok(flags)
    }
}

/// One instrumented region invocation on one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRecord {
    pub run_id: String,
    pub rank: RankId,
    pub region: String,
    /// Per-rank invocation counter, strictly increasing in close order.
    pub seq: u64,
    pub start_us: u64,
    pub end_us: u64,
    pub duration_s: f64,
    pub energy_j: BTreeMap<SensorId, f64>,
    pub flags: RecordFlags,
}

struct OpenRegion {
    region: String,
    start_us: u64,
    snapshot: Vec<f64>,
    degraded: bool,
}

/// Per-rank instrumentation context. Regions form a strict stack (LIFO
/// close order); one context is confined to one thread at a time.
pub struct RankContext {
    run_id: String,
    rank: RankId,
    sensors: Vec<SensorId>,
    sampler: Sampler,
    stack: Vec<OpenRegion>,
    records: Vec<RegionRecord>,
    next_seq: u64,
}

impl RankContext {
    pub fn new(
        run_id: &str,
        rank: RankId,
        topo: &Topology,
        sampler: Sampler,
    ) -> Result<RankContext> {
        Ok(RankContext {
            run_id: run_id.to_string(),
            rank,
            sensors: topo.sensors_for_rank(rank)?,
            sampler,
            stack: Vec::new(),
            records: Vec::new(),
            next_seq: 0,
        })
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn sensors(&self) -> &[SensorId] {
        &self.sensors
    }

    pub fn depth(&self) -> usize {
        self.stack.len()
    }

    pub fn open_regions(&self) -> Vec<&str> {
        self.stack.iter().map(|r| r.region.as_str()).collect()
    }

    fn snapshot(&self, t_us: u64) -> Vec<f64> {
        self.sensors
            .iter()
            .map(|s| self.sampler.accumulator_at(s, t_us))
            .collect()
    }

    /// Opens a region at `t_us`, snapshotting every relevant sensor's
    /// accumulator interpolated to that instant.
    pub fn region_begin(&mut self, region: &str, t_us: u64) {
        self.sampler.ensure_time(t_us);
        let snapshot = self.snapshot(t_us);
        self.stack.push(OpenRegion {
            region: region.to_string(),
            start_us: t_us,
            snapshot,
            degraded: self.sampler.error_state().is_some(),
        });
    }

    /// Closes the top region, producing its record. The name must match the
    /// top of the stack.
    pub fn region_end(&mut self, region: &str, t_us: u64) -> Result<RegionRecord> {
        let top = match self.stack.last() {
            Some(r) => r,
            None => {
                return Err(Error::StackDiscipline {
                    expected: "(no open region)".into(),
                    actual: region.to_string(),
                })
            }
        };
        if top.region != region {
            return Err(Error::StackDiscipline {
                expected: top.region.clone(),
                actual: region.to_string(),
            });
        }
        if t_us <= top.start_us {
            return Err(Error::data(format!(
                "region '{region}' end {t_us} us not after start {} us",
                top.start_us
            )));
        }
        let open = self.stack.pop().unwrap();
        self.sampler.ensure_time(t_us);
        let end_snapshot = self.snapshot(t_us);
        let energy_j = self
            .sensors
            .iter()
            .cloned()
            .zip(
                end_snapshot
                    .iter()
                    .zip(&open.snapshot)
                    .map(|(e, s)| (e - s).max(0.0)),
            )
            .collect();
        let record = RegionRecord {
            run_id: self.run_id.clone(),
            rank: self.rank,
            region: open.region,
            seq: self.next_seq,
            start_us: open.start_us,
            end_us: t_us,
            duration_s: (t_us - open.start_us) as f64 / 1e6,
            energy_j,
            flags: RecordFlags {
                degraded: open.degraded || self.sampler.error_state().is_some(),
                approximate: false,
            },
        };
        self.next_seq += 1;
        self.records.push(record.clone());
        Ok(record)
    }

    /// Returns and clears the record buffer. All regions must be closed.
    pub fn flush(&mut self) -> Result<Vec<RegionRecord>> {
        if !self.stack.is_empty() {
            return Err(Error::OpenRegions(
                self.stack
                    .iter()
                    .map(|r| r.region.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            ));
        }
        Ok(std::mem::take(&mut self.records))
    }
}
