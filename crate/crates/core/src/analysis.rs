//! Post-hoc reports over merged run files: device breakdown, per-function
//! breakdown, validation against job-level accounting, and energy-delay
//! product across GPU frequencies.
//!
//! Every report renders a fixed-width human table followed by
//! machine-readable lines carrying the same numbers (`DEV|`, `FUNC|`,
//! `EDP|`, `VAL|` prefixed), so golden-file tests pin exact formatting.

use std::collections::BTreeMap;

use crate::attribution::{self, DeviceBreakdown};
use crate::backend::ReplayTrace;
use crate::error::{Error, Result};
use crate::meter::RegionRecord;
use crate::model::{DeviceKind, RankId, Topology};
use crate::tracefmt::{fmt6, RunFile};

fn check_topology(run: &RunFile, topo: &Topology) -> Result<()> {
    if run.header.topology_digest != topo.digest() {
        return Err(Error::data(format!(
            "topology digest mismatch: run has {:016x}, topology is {:016x}",
            run.header.topology_digest,
            topo.digest()
        )));
    }
    Ok(())
}

fn require_records(run: &RunFile) -> Result<()> {
    if run.records.is_empty() {
        return Err(Error::data("empty run"));
    }
    Ok(())
}

/// Deduplicated node-level energy of a record set: what the toolkit counts
/// as "total energy consumed".
fn total_energy_j<'a, I>(records: I) -> f64
where
    I: IntoIterator<Item = &'a RegionRecord>,
{
    let totals = attribution::sensor_totals(records).totals;
    let node: f64 = totals
        .iter()
        .filter(|(id, _)| id.kind == DeviceKind::Node)
        .map(|(_, j)| j)
        .sum();
    if node > 0.0 {
        node
    } else {
        totals.values().sum()
    }
}

/// Whole-run device breakdown (dedupe + subtraction over the run window).
pub fn report_devices(run: &RunFile, topo: &Topology) -> Result<DeviceBreakdown> {
    check_topology(run, topo)?;
    require_records(run)?;
    attribution::device_breakdown(&run.records, topo)
}

pub fn render_device_report(run: &RunFile, breakdown: &DeviceBreakdown) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "Device breakdown for run '{}'\n\n",
        run.header.run_id
    ));
    out.push_str(&format!(
        "{:<16}{:<10}{:>16}{:>12}\n",
        "node", "device", "energy_j", "fraction"
    ));
    let mut machine = String::new();
    for n in breakdown
        .per_node
        .iter()
        .chain(std::iter::once(&breakdown.run))
    {
        let mut rows: Vec<(&str, f64)> = vec![("gpu", n.gpu_j), ("cpu", n.cpu_j)];
        if let Some(mem) = n.memory_j {
            rows.push(("memory", mem));
        }
        rows.push(("other", n.other_j));
        for (label, j) in &rows {
            out.push_str(&format!(
                "{:<16}{:<10}{:>16}{:>12}\n",
                n.node,
                label,
                fmt6(*j),
                fmt6(n.fraction(*j))
            ));
            machine.push_str(&format!(
                "DEV|{}|{}|{}|{}\n",
                n.node,
                label,
                fmt6(*j),
                fmt6(n.fraction(*j))
            ));
        }
        out.push_str(&format!(
            "{:<16}{:<10}{:>16}{:>12}\n",
            n.node,
            "total",
            fmt6(n.node_total_j),
            fmt6(n.fraction(n.component_sum()))
        ));
        machine.push_str(&format!(
            "DEV|{}|node|{}|{}\n",
            n.node,
            fmt6(n.node_total_j),
            fmt6(n.fraction(n.component_sum()))
        ));
    }
    out.push('\n');
    out.push_str(&machine);
    out
}

/// Per-region, per-device deduplicated energies.
#[derive(Debug, Clone)]
pub struct FunctionRow {
    pub region: String,
    pub per_kind: BTreeMap<DeviceKind, f64>,
    /// Node-level energy measured while the region was open; the region's
    /// "total" in reports and shares.
    pub total_j: f64,
    /// Per-rank time in the region (max across ranks, which execute in
    /// parallel).
    pub duration_s: f64,
}

#[derive(Debug, Clone)]
pub struct FunctionBreakdown {
    /// Sorted by descending total energy.
    pub rows: Vec<FunctionRow>,
    pub run_total_j: f64,
    pub warnings: Vec<String>,
}

fn region_rows(records: &[RegionRecord]) -> (Vec<FunctionRow>, Vec<String>) {
    let mut by_region: BTreeMap<&str, Vec<&RegionRecord>> = BTreeMap::new();
    for r in records {
        by_region.entry(&r.region).or_default().push(r);
    }
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for (region, recs) in by_region {
        let totals = attribution::sensor_totals(recs.iter().copied());
        warnings.extend(totals.warnings);
        let mut per_kind: BTreeMap<DeviceKind, f64> = BTreeMap::new();
        for (id, j) in &totals.totals {
            *per_kind.entry(id.kind).or_insert(0.0) += j;
        }
        let total_j = match per_kind.get(&DeviceKind::Node) {
            Some(j) => *j,
            None => per_kind.values().sum(),
        };
        let mut per_rank_duration: BTreeMap<RankId, f64> = BTreeMap::new();
        for r in &recs {
            *per_rank_duration.entry(r.rank).or_insert(0.0) += r.duration_s;
        }
        let duration_s = per_rank_duration.values().cloned().fold(0.0, f64::max);
        rows.push(FunctionRow {
            region: region.to_string(),
            per_kind,
            total_j,
            duration_s,
        });
    }
    rows.sort_by(|a, b| {
        b.total_j
            .partial_cmp(&a.total_j)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.region.cmp(&b.region))
    });
    (rows, warnings)
}

pub fn report_functions(run: &RunFile, topo: &Topology) -> Result<FunctionBreakdown> {
    check_topology(run, topo)?;
    require_records(run)?;
    let run_total_j = total_energy_j(&run.records);
    let (rows, warnings) = region_rows(&run.records);
    Ok(FunctionBreakdown {
        rows,
        run_total_j,
        warnings,
    })
}

/// Display order for per-function device rows: node first (the region
/// total), then the device classes.
const FUNC_KIND_ORDER: [DeviceKind; 4] = [
    DeviceKind::Node,
    DeviceKind::GpuCard,
    DeviceKind::Cpu,
    DeviceKind::Memory,
];

pub fn render_function_report(run: &RunFile, fb: &FunctionBreakdown, top_k: usize) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "Function breakdown for run '{}' (run total {} J)\n",
        run.header.run_id,
        fmt6(fb.run_total_j)
    ));
    out.push_str(&format!(
        "(top {top_k} regions by total energy marked with *)\n\n"
    ));
    out.push_str(&format!(
        "  {:<26}{:<10}{:>16}{:>12}{:>14}\n",
        "region", "device", "energy_j", "fraction", "duration_s"
    ));
    let frac = |j: f64| {
        if fb.run_total_j > 0.0 {
            j / fb.run_total_j
        } else {
            0.0
        }
    };
    let mut machine = String::new();
    for (i, row) in fb.rows.iter().enumerate() {
        let marker = if i < top_k { "* " } else { "  " };
        let mut first = true;
        for kind in FUNC_KIND_ORDER {
            let Some(j) = row.per_kind.get(&kind) else {
                continue;
            };
            let label = if kind == DeviceKind::Node {
                "total"
            } else {
                kind.token()
            };
            if first {
                out.push_str(&format!(
                    "{marker}{:<26}{:<10}{:>16}{:>12}{:>14}\n",
                    row.region,
                    label,
                    fmt6(*j),
                    fmt6(frac(*j)),
                    fmt6(row.duration_s)
                ));
                first = false;
            } else {
                out.push_str(&format!(
                    "  {:<26}{:<10}{:>16}{:>12}\n",
                    "",
                    label,
                    fmt6(*j),
                    fmt6(frac(*j))
                ));
            }
            machine.push_str(&format!(
                "FUNC|{}|{}|{}|{}\n",
                row.region,
                kind.token(),
                fmt6(*j),
                fmt6(frac(*j))
            ));
        }
    }
    out.push('\n');
    out.push_str(&machine);
    out
}

/// One run's energy-delay product at one frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct EdpPoint {
    pub freq_mhz: f64,
    pub energy_j: f64,
    pub time_s: f64,
    /// `energy_j * time_s`, joule-seconds.
    pub edp: f64,
    /// EDP relative to the baseline frequency's point (1 at the baseline).
    pub normalized_edp: f64,
}

fn run_freq(run: &RunFile) -> Result<f64> {
    run.header.freq_mhz.ok_or_else(|| {
        Error::data(format!(
            "run '{}' has no frequency label (simulate with --freq)",
            run.header.run_id
        ))
    })
}

fn wall_time_s(records: &[RegionRecord]) -> f64 {
    let start = records.iter().map(|r| r.start_us).min().unwrap_or(0);
    let end = records.iter().map(|r| r.end_us).max().unwrap_or(0);
    (end - start) as f64 / 1e6
}

/// Run-level EDP per frequency, normalized to the baseline frequency.
/// Wall time is the span max(end) - min(start): ranks execute in parallel.
pub fn edp_table(runs: &[RunFile], baseline_mhz: f64) -> Result<Vec<EdpPoint>> {
    if runs.is_empty() {
        return Err(Error::data("no runs given"));
    }
    let mut points = Vec::new();
    for run in runs {
        require_records(run)?;
        let freq_mhz = run_freq(run)?;
        if points.iter().any(|p: &EdpPoint| p.freq_mhz == freq_mhz) {
            return Err(Error::data(format!(
                "duplicate frequency label {freq_mhz} MHz"
            )));
        }
        let energy_j = total_energy_j(&run.records);
        let time_s = wall_time_s(&run.records);
        points.push(EdpPoint {
            freq_mhz,
            energy_j,
            time_s,
            edp: energy_j * time_s,
            normalized_edp: 0.0,
        });
    }
    points.sort_by(|a, b| b.freq_mhz.partial_cmp(&a.freq_mhz).unwrap());
    let base = points
        .iter()
        .find(|p| (p.freq_mhz - baseline_mhz).abs() < 1e-9)
        .ok_or_else(|| Error::data(format!("missing baseline run at {baseline_mhz} MHz")))?;
    let base_edp = base.edp;
    if base_edp <= 0.0 {
        return Err(Error::data("baseline run has zero energy-delay product"));
    }
    for p in &mut points {
        p.normalized_edp = p.edp / base_edp;
    }
    Ok(points)
}

#[derive(Debug, Clone)]
pub struct PerFunctionEdp {
    /// Region name -> EDP points across frequencies, regions sorted by name.
    pub regions: Vec<(String, Vec<EdpPoint>)>,
    pub warnings: Vec<String>,
}

/// Per-region EDP across frequencies: region energy times the region's
/// total duration, normalized per region at the baseline. Regions are
/// matched by name across runs; a region missing at some frequency is
/// omitted there with a warning.
pub fn edp_per_function(runs: &[RunFile], baseline_mhz: f64) -> Result<PerFunctionEdp> {
    if runs.is_empty() {
        return Err(Error::data("no runs given"));
    }
    // Per-region (energy, duration) of one run.
    type RegionEnergies = BTreeMap<String, (f64, f64)>;
    let mut warnings = Vec::new();
    let mut per_run: Vec<(f64, RegionEnergies)> = Vec::new();
    for run in runs {
        require_records(run)?;
        let freq = run_freq(run)?;
        if per_run.iter().any(|(f, _)| *f == freq) {
            return Err(Error::data(format!("duplicate frequency label {freq} MHz")));
        }
        let (rows, w) = region_rows(&run.records);
        warnings.extend(w);
        per_run.push((
            freq,
            rows.into_iter()
                .map(|r| (r.region, (r.total_j, r.duration_s)))
                .collect(),
        ));
    }
    per_run.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let (_, baseline_regions) = per_run
        .iter()
        .find(|(f, _)| (f - baseline_mhz).abs() < 1e-9)
        .ok_or_else(|| Error::data(format!("missing baseline run at {baseline_mhz} MHz")))?;

    let mut regions = Vec::new();
    for (region, (base_e, base_d)) in baseline_regions {
        let base_edp = base_e * base_d;
        if base_edp <= 0.0 {
            warnings.push(format!("region '{region}' has zero baseline EDP, omitted"));
            continue;
        }
        let mut points = Vec::new();
        for (freq, by_region) in &per_run {
            let Some((e, d)) = by_region.get(region) else {
                warnings.push(format!("region '{region}' missing at {freq} MHz, omitted"));
                continue;
            };
            points.push(EdpPoint {
                freq_mhz: *freq,
                energy_j: *e,
                time_s: *d,
                edp: e * d,
                normalized_edp: (e * d) / base_edp,
            });
        }
        regions.push((region.clone(), points));
    }
    for (freq, by_region) in &per_run {
        for region in by_region.keys() {
            if !baseline_regions.contains_key(region) {
                warnings.push(format!(
                    "region '{region}' at {freq} MHz is absent from the baseline run, omitted"
                ));
            }
        }
    }
    Ok(PerFunctionEdp { regions, warnings })
}

pub fn render_edp_report(
    total: &[EdpPoint],
    per_function: Option<&PerFunctionEdp>,
    baseline_mhz: f64,
) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "Energy-delay product (baseline {} MHz)\n\n",
        baseline_mhz
    ));
    out.push_str(&format!(
        "{:<26}{:>12}{:>16}{:>12}{:>18}{:>12}\n",
        "region", "freq_mhz", "energy_j", "time_s", "edp", "normalized"
    ));
    let mut machine = String::new();
    let mut emit = |name: &str, points: &[EdpPoint]| {
        for p in points {
            out.push_str(&format!(
                "{:<26}{:>12}{:>16}{:>12}{:>18}{:>12}\n",
                name,
                fmt6(p.freq_mhz),
                fmt6(p.energy_j),
                fmt6(p.time_s),
                fmt6(p.edp),
                fmt6(p.normalized_edp)
            ));
            machine.push_str(&format!(
                "EDP|{}|{}|{}|{}|{}|{}\n",
                name,
                fmt6(p.freq_mhz),
                fmt6(p.energy_j),
                fmt6(p.time_s),
                fmt6(p.edp),
                fmt6(p.normalized_edp)
            ));
        }
    };
    emit("TOTAL", total);
    if let Some(pf) = per_function {
        for (region, points) in &pf.regions {
            emit(region, points);
        }
    }
    out.push('\n');
    out.push_str(&machine);
    out
}

/// Comparison of tool-measured energy against scheduler-reported job energy.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub tool_total_j: f64,
    pub job_total_j: f64,
    /// Job energy spent before the first region began (job and application
    /// setup, which the tool does not measure).
    pub setup_window_j: f64,
    pub residual_j: f64,
    pub ratio: f64,
    pub warnings: Vec<String>,
}

/// Explains the gap between tool and job-level accounting by integrating
/// node power over the setup window (job start to first region start).
/// `tool_total + setup_window + residual = job_total` exactly.
pub fn validate_against_job(
    run: &RunFile,
    job_total_j: f64,
    job_window: (u64, u64),
    node_trace: &ReplayTrace,
) -> Result<ValidationReport> {
    require_records(run)?;
    if job_total_j <= 0.0 {
        return Err(Error::data("job energy must be > 0"));
    }
    let (job_start, job_end) = job_window;
    if job_end <= job_start {
        return Err(Error::data("job window end must be after its start"));
    }
    let run_start = run.records.iter().map(|r| r.start_us).min().unwrap();
    let run_end = run.records.iter().map(|r| r.end_us).max().unwrap();
    if job_start > run_start || job_end < run_end {
        return Err(Error::data(format!(
            "job window [{job_start}, {job_end}] us smaller than run span [{run_start}, {run_end}] us"
        )));
    }
    let tool_total_j = total_energy_j(&run.records);
    let setup_window_j = node_trace.integrate_node_power(job_start, run_start)?;
    let residual_j = job_total_j - tool_total_j - setup_window_j;
    let ratio = tool_total_j / job_total_j;
    let mut warnings = Vec::new();
    if tool_total_j > job_total_j * 1.01 {
        warnings.push(format!(
            "inconsistency: tool energy {} J exceeds job energy {} J by more than 1%",
            fmt6(tool_total_j),
            fmt6(job_total_j)
        ));
    }
    Ok(ValidationReport {
        tool_total_j,
        job_total_j,
        setup_window_j,
        residual_j,
        ratio,
        warnings,
    })
}

pub fn render_validation_report(v: &ValidationReport) -> String {
    let mut out = String::new();
    out.push_str("Validation against job-level accounting\n\n");
    out.push_str(&format!(
        "{:<18}{:>16}\n",
        "tool_total_j",
        fmt6(v.tool_total_j)
    ));
    out.push_str(&format!(
        "{:<18}{:>16}\n",
        "job_total_j",
        fmt6(v.job_total_j)
    ));
    out.push_str(&format!(
        "{:<18}{:>16}\n",
        "setup_window_j",
        fmt6(v.setup_window_j)
    ));
    out.push_str(&format!("{:<18}{:>16}\n", "residual_j", fmt6(v.residual_j)));
    out.push_str(&format!("{:<18}{:>16}\n", "ratio", fmt6(v.ratio)));
    out.push('\n');
    out.push_str(&format!(
        "VAL|{}|{}|{}|{}|{}\n",
        fmt6(v.tool_total_j),
        fmt6(v.job_total_j),
        fmt6(v.setup_window_j),
        fmt6(v.residual_j),
        fmt6(v.ratio)
    ));
    out
}
