//! Sensor deduplication and per-device energy attribution.
//!
//! Ranks sharing a sensor (two GCD ranks on one GPU card, every rank on a
//! node for the CPU counter) all report the same underlying measurement, so
//! totals must count each sensor once. Reconciliation takes the maximum of
//! the ranks' concurrently-measured values: boundary interpolation only
//! ever loses energy, so the larger concurrent reading is closer to truth.
//! Auxiliary ("other") energy is derived by subtracting GPU, CPU, and
//! memory energy from the node-level measurement.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::meter::RegionRecord;
use crate::model::{DeviceKind, RankId, SensorId, Topology};

/// Deduplicated per-sensor energy totals.
#[derive(Debug, Clone, Default)]
pub struct SensorTotals {
    pub totals: BTreeMap<SensorId, f64>,
    pub warnings: Vec<String>,
}

/// Relative disagreement between ranks sharing a sensor above which the
/// inconsistency is reported.
const SHARED_SENSOR_TOLERANCE: f64 = 0.01;

/// Sums record energies per sensor counting each sensor once: per-rank sums
/// are reconciled by taking the maximum, flagging ranks that disagree by
/// more than 1% relative.
pub fn sensor_totals<'a, I>(records: I) -> SensorTotals
where
    I: IntoIterator<Item = &'a RegionRecord>,
{
    let mut per_rank: BTreeMap<SensorId, BTreeMap<RankId, f64>> = BTreeMap::new();
    for rec in records {
        for (sensor, j) in &rec.energy_j {
            *per_rank
                .entry(sensor.clone())
                .or_default()
                .entry(rec.rank)
                .or_insert(0.0) += j;
        }
    }

    let mut out = SensorTotals::default();
    for (sensor, by_rank) in per_rank {
        let max = by_rank.values().cloned().fold(0.0, f64::max);
        let min = by_rank.values().cloned().fold(f64::INFINITY, f64::min);
        if by_rank.len() > 1 && max > 0.0 && (max - min) / max > SHARED_SENSOR_TOLERANCE {
            out.warnings.push(format!(
                "ranks disagree on shared sensor {sensor}: {min:.6} .. {max:.6} J, using the larger"
            ));
        }
        out.totals.insert(sensor, max);
    }
    out
}

/// Naive (non-deduplicated) summation: every rank's report counts.
pub fn naive_totals(records: &[RegionRecord]) -> BTreeMap<SensorId, f64> {
    let mut out: BTreeMap<SensorId, f64> = BTreeMap::new();
    for rec in records {
        for (sensor, j) in &rec.energy_j {
            *out.entry(sensor.clone()).or_insert(0.0) += j;
        }
    }
    out
}

/// Deduplicated totals, with the records checked against the topology.
pub fn dedupe(records: &[RegionRecord], topo: &Topology) -> Result<SensorTotals> {
    for rec in records {
        for sensor in rec.energy_j.keys() {
            if topo.sensor(sensor).is_none() {
                return Err(Error::data(format!(
                    "record for rank {} references sensor {sensor} not in topology",
                    rec.rank
                )));
            }
        }
    }
    Ok(sensor_totals(records))
}

/// Energy of one node split by device class, plus the derived remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeBreakdown {
    pub node: String,
    pub gpu_j: f64,
    pub cpu_j: f64,
    /// `None` when the node has no memory sensors; its draw then folds
    /// into `other_j`.
    pub memory_j: Option<f64>,
    pub other_j: f64,
    pub node_total_j: f64,
}

impl NodeBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.gpu_j + self.cpu_j + self.memory_j.unwrap_or(0.0) + self.other_j
    }

    /// Fraction of this node's energy. The denominator is the component sum,
    /// which equals the node total except when a small negative remainder
    /// was clamped to zero; this keeps fractions summing to one.
    pub fn fraction(&self, energy_j: f64) -> f64 {
        let denom = self.component_sum();
        if denom > 0.0 {
            energy_j / denom
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeviceBreakdown {
    pub per_node: Vec<NodeBreakdown>,
    /// Run-level sums across nodes, derived with the same subtraction rule.
    pub run: NodeBreakdown,
    pub warnings: Vec<String>,
}

/// Negative remainder beyond this fraction of the node total is a
/// configuration error; smaller negatives clamp to zero.
const OTHER_TOLERANCE: f64 = 0.01;

fn derive_other(
    label: &str,
    node_total: f64,
    devices: f64,
    warnings: &mut Vec<String>,
) -> Result<f64> {
    let other = node_total - devices;
    if other < -OTHER_TOLERANCE * node_total.max(f64::MIN_POSITIVE) {
        return Err(Error::data(format!(
            "inconsistent sensors: gpu+cpu+memory ({devices:.6} J) exceed node total \
             ({node_total:.6} J) on {label}"
        )));
    }
    if other < 0.0 {
        warnings.push(format!(
            "small negative remainder {other:.6} J on {label} clamped to 0 (sensor noise)"
        ));
        return Ok(0.0);
    }
    Ok(other)
}

/// Splits deduplicated sensor energy by device kind per node and derives
/// the auxiliary remainder by subtraction.
pub fn device_breakdown(records: &[RegionRecord], topo: &Topology) -> Result<DeviceBreakdown> {
    let SensorTotals { totals, warnings } = dedupe(records, topo)?;
    let mut warnings = warnings;

    let mut nodes: Vec<&str> = totals.keys().map(|s| s.node.as_str()).collect();
    nodes.sort_unstable();
    nodes.dedup();

    let mut per_node = Vec::new();
    for node in nodes {
        let sum_kind = |kind: DeviceKind| -> f64 {
            totals
                .iter()
                .filter(|(id, _)| id.node == node && id.kind == kind)
                .map(|(_, j)| j)
                .sum()
        };
        let node_total_j = match totals.get(&SensorId::new(node, DeviceKind::Node, 0)) {
            Some(j) => *j,
            None => {
                return Err(Error::data(format!(
                    "no node-level energy recorded for node '{node}'"
                )))
            }
        };
        let gpu_j = sum_kind(DeviceKind::GpuCard);
        let cpu_j = sum_kind(DeviceKind::Cpu);
        let has_memory_sensor = topo
            .sensors
            .iter()
            .any(|s| s.id.node == node && s.id.kind == DeviceKind::Memory);
        let memory_j = has_memory_sensor.then(|| sum_kind(DeviceKind::Memory));
        let other_j = derive_other(
            &format!("node '{node}'"),
            node_total_j,
            gpu_j + cpu_j + memory_j.unwrap_or(0.0),
            &mut warnings,
        )?;
        per_node.push(NodeBreakdown {
            node: node.to_string(),
            gpu_j,
            cpu_j,
            memory_j,
            other_j,
            node_total_j,
        });
    }

    if per_node.is_empty() {
        return Err(Error::data("no sensor energy in records"));
    }

    let gpu_j: f64 = per_node.iter().map(|n| n.gpu_j).sum();
    let cpu_j: f64 = per_node.iter().map(|n| n.cpu_j).sum();
    let memory_j = per_node
        .iter()
        .any(|n| n.memory_j.is_some())
        .then(|| per_node.iter().filter_map(|n| n.memory_j).sum());
    let node_total_j: f64 = per_node.iter().map(|n| n.node_total_j).sum();
    let other_j = derive_other(
        "the whole run",
        node_total_j,
        gpu_j + cpu_j + memory_j.unwrap_or(0.0),
        &mut warnings,
    )?;
    let run = NodeBreakdown {
        node: "TOTAL".to_string(),
        gpu_j,
        cpu_j,
        memory_j,
        other_j,
        node_total_j,
    };

    Ok(DeviceBreakdown {
        per_node,
        run,
        warnings,
    })
}

/// Evenly splits a shared card's energy across the `k` ranks driving it.
/// The split is an explicit approximation (no per-GCD model is attempted);
/// the flag is set whenever `k > 1`. Shares always sum to the input exactly.
pub fn split_card_energy(card_energy_j: f64, k: usize) -> (Vec<f64>, bool) {
    assert!(k >= 1, "split_card_energy requires k >= 1");
    let share = card_energy_j / k as f64;
    let mut out = vec![share; k];
    // Absorb rounding in the last share so a left-to-right sum reproduces
    // the input exactly. The head sum is accumulated the same way a
    // consumer sums the vector.
    let head_sum: f64 = out[..k - 1].iter().sum();
    out[k - 1] = card_energy_j - head_sum;
    (out, k > 1)
}
