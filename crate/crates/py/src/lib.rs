//! Python bindings for the emeter toolkit.
//!
//! Exposes the main types (topology, synthetic model, workload) and the
//! pipeline operations (simulate, merge, reports, EDP, validation) so
//! analysis scripts can drive everything in-process. Reports come back as
//! the same text the CLI prints, machine-readable lines included.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use emeter::analysis;
use emeter::backend::{ReplayTrace, SyntheticModel as CoreModel};
use emeter::meter::SamplerConfig;
use emeter::model::{DeviceKind, Topology as CoreTopology};
use emeter::synthload::{self, RunOptions, WorkloadConfig as CoreWorkload};
use emeter::tracefmt;

fn err(e: emeter::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_kind(kind: &str) -> PyResult<DeviceKind> {
    DeviceKind::from_token(kind)
        .ok_or_else(|| PyValueError::new_err(format!("unknown device kind '{kind}'")))
}

/// Nodes, sensors, and the rank-to-GPU assignment of a run.
#[pyclass(frozen)]
struct Topology {
    inner: CoreTopology,
}

#[pymethods]
impl Topology {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Topology> {
        Ok(Topology {
            inner: CoreTopology::parse(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Topology> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?;
        Self::parse(&text)
    }

    /// Canonical rendering; `Topology.parse(t.render())` reproduces `t`.
    fn render(&self) -> String {
        self.inner.render()
    }

    /// Topology digest as 16 hex digits.
    fn digest(&self) -> String {
        format!("{:016x}", self.inner.digest())
    }

    fn nodes(&self) -> Vec<String> {
        self.inner.nodes.clone()
    }

    fn num_ranks(&self) -> usize {
        self.inner.ranks.len()
    }

    fn gcds_per_card(&self) -> u32 {
        self.inner.gcds_per_card
    }

    /// Sensor keys covering one rank, in (node, cpu, memory, gpu) order.
    fn sensors_for_rank(&self, rank: u32) -> PyResult<Vec<String>> {
        Ok(self
            .inner
            .sensors_for_rank(rank)
            .map_err(err)?
            .iter()
            .map(|s| s.key())
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Topology(nodes={}, sensors={}, ranks={}, gcds_per_card={})",
            self.inner.nodes.len(),
            self.inner.sensors.len(),
            self.inner.ranks.len(),
            self.inner.gcds_per_card
        )
    }
}

/// Synthetic power/time model for desk-scale experiments.
#[pyclass(frozen)]
struct SyntheticModel {
    inner: CoreModel,
}

#[pymethods]
impl SyntheticModel {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<SyntheticModel> {
        Ok(SyntheticModel {
            inner: CoreModel::parse(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: &str) -> PyResult<SyntheticModel> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?;
        Self::parse(&text)
    }

    fn reference_freq_mhz(&self) -> f64 {
        self.inner.reference_freq_mhz
    }

    fn current_freq_mhz(&self) -> f64 {
        self.inner.current_freq_mhz
    }

    /// Power of one (region, kind) pair at a frequency, in watts.
    fn power(&self, region: &str, kind: &str, f_mhz: f64) -> PyResult<f64> {
        Ok(self.inner.power(region, parse_kind(kind)?, f_mhz))
    }

    /// Region execution time at a frequency, in seconds.
    fn duration(&self, region: &str, base_duration_s: f64, f_mhz: f64) -> f64 {
        self.inner.duration(region, base_duration_s, f_mhz)
    }
}

/// Region schedule for the synthetic workload driver.
#[pyclass(frozen)]
struct Workload {
    inner: CoreWorkload,
}

#[pymethods]
impl Workload {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Workload> {
        Ok(Workload {
            inner: CoreWorkload::parse(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Workload> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?;
        Self::parse(&text)
    }

    fn steps(&self) -> u32 {
        self.inner.steps
    }

    fn ranks(&self) -> u32 {
        self.inner.ranks
    }

    fn label(&self) -> String {
        self.inner.label.clone()
    }

    fn freqs(&self) -> Vec<f64> {
        self.inner.freqs.clone()
    }

    fn regions(&self) -> Vec<(String, f64)> {
        self.inner.regions.clone()
    }
}

/// Runs the synthetic workload, writing one record file per rank into
/// `out_dir`. Returns the written paths.
#[pyfunction]
#[pyo3(signature = (workload, model, topology, out_dir, run_id="run", freq=None, period_ms=None))]
fn simulate(
    workload: &Workload,
    model: &SyntheticModel,
    topology: &Topology,
    out_dir: &str,
    run_id: &str,
    freq: Option<f64>,
    period_ms: Option<u64>,
) -> PyResult<Vec<String>> {
    let sampler = match period_ms {
        Some(ms) => SamplerConfig::new(ms).map_err(err)?,
        None => SamplerConfig::from_env().map_err(err)?,
    };
    let run = synthload::run_workload(
        &workload.inner,
        &model.inner,
        &topology.inner,
        &RunOptions {
            out_dir: PathBuf::from(out_dir),
            run_id: run_id.to_string(),
            freq_mhz: freq,
            sampler,
        },
    )
    .map_err(err)?;
    Ok(run
        .rank_files
        .iter()
        .map(|p| p.display().to_string())
        .collect())
}

/// Merges per-rank record files into one run file. Returns the record count.
#[pyfunction]
fn merge(paths: Vec<String>, out: &str) -> PyResult<usize> {
    let paths: Vec<PathBuf> = paths.into_iter().map(PathBuf::from).collect();
    let merged = tracefmt::merge(&paths).map_err(err)?;
    tracefmt::write_run_file(&merged, std::path::Path::new(out)).map_err(err)?;
    Ok(merged.records.len())
}

/// Device breakdown report text for a merged run file.
#[pyfunction]
fn report_devices(run: &str, topology: &Topology) -> PyResult<String> {
    let run = tracefmt::read_run_file(std::path::Path::new(run)).map_err(err)?;
    let b = analysis::report_devices(&run, &topology.inner).map_err(err)?;
    Ok(analysis::render_device_report(&run, &b))
}

/// Per-function breakdown report text for a merged run file.
#[pyfunction]
#[pyo3(signature = (run, topology, top=5))]
fn report_functions(run: &str, topology: &Topology, top: usize) -> PyResult<String> {
    let run = tracefmt::read_run_file(std::path::Path::new(run)).map_err(err)?;
    let fb = analysis::report_functions(&run, &topology.inner).map_err(err)?;
    Ok(analysis::render_function_report(&run, &fb, top))
}

/// Energy-delay product report across runs at distinct frequencies.
#[pyfunction]
#[pyo3(signature = (runs, baseline, per_function=false))]
fn edp(runs: Vec<String>, baseline: f64, per_function: bool) -> PyResult<String> {
    let runs = runs
        .iter()
        .map(|p| tracefmt::read_run_file(std::path::Path::new(p)))
        .collect::<emeter::Result<Vec<_>>>()
        .map_err(err)?;
    let total = analysis::edp_table(&runs, baseline).map_err(err)?;
    let pf = if per_function {
        Some(analysis::edp_per_function(&runs, baseline).map_err(err)?)
    } else {
        None
    };
    Ok(analysis::render_edp_report(&total, pf.as_ref(), baseline))
}

/// Per-function normalized EDP as {region: {freq_mhz: normalized}}.
#[pyfunction]
fn edp_per_function_values(
    runs: Vec<String>,
    baseline: f64,
) -> PyResult<BTreeMap<String, BTreeMap<String, f64>>> {
    let runs = runs
        .iter()
        .map(|p| tracefmt::read_run_file(std::path::Path::new(p)))
        .collect::<emeter::Result<Vec<_>>>()
        .map_err(err)?;
    let pf = analysis::edp_per_function(&runs, baseline).map_err(err)?;
    Ok(pf
        .regions
        .into_iter()
        .map(|(region, points)| {
            (
                region,
                points
                    .into_iter()
                    .map(|p| (tracefmt::fmt6(p.freq_mhz), p.normalized_edp))
                    .collect(),
            )
        })
        .collect())
}

/// Validation report text against job-level accounting.
#[pyfunction]
fn validate(
    run: &str,
    job_energy_j: f64,
    job_window: (u64, u64),
    node_trace: &str,
) -> PyResult<String> {
    let run = tracefmt::read_run_file(std::path::Path::new(run)).map_err(err)?;
    let trace = ReplayTrace::from_file(std::path::Path::new(node_trace)).map_err(err)?;
    let v = analysis::validate_against_job(&run, job_energy_j, job_window, &trace).map_err(err)?;
    Ok(analysis::render_validation_report(&v))
}

#[pymodule]
fn emeter_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Topology>()?;
    m.add_class::<SyntheticModel>()?;
    m.add_class::<Workload>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(report_devices, m)?)?;
    m.add_function(wrap_pyfunction!(report_functions, m)?)?;
    m.add_function(wrap_pyfunction!(edp, m)?)?;
    m.add_function(wrap_pyfunction!(edp_per_function_values, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    Ok(())
}
