//! Acceptance suite: every criterion runs at its stated tolerance and
//! prints one pass/fail line (visible with `--nocapture`).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use emeter::analysis;
use emeter::attribution;
use emeter::backend::{PowerBackend, ReplayBackend, ReplayTrace, SyntheticModel};
use emeter::meter::{RankContext, RegionRecord, Sampler, SamplerConfig};
use emeter::model::{DeviceKind, PowerSample, SensorId, Topology};
use emeter::synthload::{self, RunOptions, WorkloadConfig};
use emeter::tracefmt::{self, RunHeader};

fn criterion(n: u32, desc: &str, f: impl FnOnce() + std::panic::UnwindSafe) {
    match std::panic::catch_unwind(f) {
        Ok(()) => println!("criterion {n}: PASS  {desc}"),
        Err(e) => {
            println!("criterion {n}: FAIL  {desc}");
            std::panic::resume_unwind(e);
        }
    }
}

fn node_sensor(node: &str) -> SensorId {
    SensorId::new(node, DeviceKind::Node, 0)
}

/// Runs the same sequential region schedule on every rank of `topo` against
/// a replay trace, returning all records.
fn run_schedule_over_replay(
    topo: &Topology,
    trace: &str,
    schedule: &[(&str, u64, u64)],
    run_id: &str,
) -> Vec<RegionRecord> {
    let backend = ReplayBackend::new(ReplayTrace::parse(trace).unwrap(), 1.0);
    let start = schedule.first().map(|(_, s, _)| *s).unwrap_or(0);
    let sampler =
        Sampler::manual(Box::new(backend), topo, SamplerConfig::default(), start).unwrap();
    let mut ctxs: Vec<RankContext> = topo
        .ranks
        .keys()
        .map(|r| RankContext::new(run_id, *r, topo, sampler.clone()).unwrap())
        .collect();
    for (region, s, e) in schedule {
        for ctx in &mut ctxs {
            ctx.region_begin(region, *s);
        }
        for ctx in &mut ctxs {
            ctx.region_end(region, *e).unwrap();
        }
    }
    let mut records = Vec::new();
    for ctx in &mut ctxs {
        records.extend(ctx.flush().unwrap());
    }
    records
}

struct RampBackend;

impl PowerBackend for RampBackend {
    fn read_all(&mut self, topo: &Topology, t_us: u64) -> emeter::Result<Vec<PowerSample>> {
        // 0 -> 100 W over 10 s.
        Ok(topo
            .sensors
            .iter()
            .map(|s| PowerSample {
                sensor: s.id.clone(),
                t_us,
                value: 10.0 * t_us as f64 / 1e6,
            })
            .collect())
    }

    fn label(&self) -> String {
        "ramp".into()
    }
}

fn single_node_topo() -> Topology {
    Topology::parse("node a\nsensor a node 0 power 0\nrank 0 a 0 0\n").unwrap()
}

#[test]
fn criterion_1_integration_oracle() {
    criterion(
        1,
        "trapezoidal integration oracle (constant and ramp)",
        || {
            let started = Instant::now();
            let topo = single_node_topo();

            // Constant 300 W over 10 s simulated time at 100 ms period.
            let trace = "timestamp_us,node,kind,index,value,unit\n0,a,node,0,300,W\n";
            let backend = ReplayBackend::new(ReplayTrace::parse(trace).unwrap(), 1.0);
            let sampler =
                Sampler::manual(Box::new(backend), &topo, SamplerConfig::default(), 0).unwrap();
            let mut ctx = RankContext::new("c1", 0, &topo, sampler).unwrap();
            ctx.region_begin("window", 0);
            let rec = ctx.region_end("window", 10_000_000).unwrap();
            let e = rec.energy_j[&node_sensor("a")];
            assert!((e - 3000.0).abs() <= 3000.0 * 1e-6, "constant: {e} J");

            // Linear ramp 0 -> 100 W over 10 s: trapezoid is exact.
            let sampler =
                Sampler::manual(Box::new(RampBackend), &topo, SamplerConfig::default(), 0).unwrap();
            let mut ctx = RankContext::new("c1", 0, &topo, sampler).unwrap();
            ctx.region_begin("window", 0);
            let rec = ctx.region_end("window", 10_000_000).unwrap();
            let e = rec.energy_j[&node_sensor("a")];
            assert!((e - 500.0).abs() <= 500.0 * 1e-12, "ramp: {e} J");

            assert!(
                started.elapsed().as_secs_f64() < 1.0,
                "criterion 1 took too long"
            );
        },
    );
}

fn dual_gcd_topology() -> Topology {
    let mut t = String::from("node nid000001\ngcds_per_card 2\n");
    t.push_str("sensor nid000001 node 0 power 0\n");
    t.push_str("sensor nid000001 cpu 0 power 0\n");
    t.push_str("sensor nid000001 memory 0 power 0\n");
    for card in 0..4 {
        t.push_str(&format!("sensor nid000001 gpu {card} power 0\n"));
    }
    for rank in 0..8 {
        t.push_str(&format!(
            "rank {rank} nid000001 {} {}\n",
            rank / 2,
            rank % 2
        ));
    }
    Topology::parse(&t).unwrap()
}

fn single_gcd_topology() -> Topology {
    let mut t = String::from("node nid000001\ngcds_per_card 1\n");
    t.push_str("sensor nid000001 node 0 power 0\n");
    t.push_str("sensor nid000001 cpu 0 power 0\n");
    for card in 0..4 {
        t.push_str(&format!("sensor nid000001 gpu {card} power 0\n"));
    }
    for rank in 0..4 {
        t.push_str(&format!("rank {rank} nid000001 {rank} 0\n"));
    }
    Topology::parse(&t).unwrap()
}

fn conservation_model() -> SyntheticModel {
    SyntheticModel::parse(
        "freq 1410 1410\n\
         idle node 40\nidle gpu 25\nidle cpu 15\nidle memory 8\n\
         region DomainDecompAndSync gpu 50 30 0.2\n\
         region DomainDecompAndSync cpu 22 0 0\n\
         region DomainDecompAndSync node 11 0 0\n\
         region MomentumEnergy gpu 80 220 1.0\n\
         region MomentumEnergy cpu 18 0 0\n\
         region MomentumEnergy memory 12 0 0\n\
         region MomentumEnergy node 7 0 0\n\
         region IADVelocityDivCurl gpu 70 160 0.8\n\
         region IADVelocityDivCurl memory 9 0 0\n",
    )
    .unwrap()
}

fn sweep_workload(ranks: u32) -> WorkloadConfig {
    WorkloadConfig::parse(&format!(
        "steps 2\nranks {ranks}\nlabel 450^3\n\
         region DomainDecompAndSync 1.5\nregion MomentumEnergy 4.0\nregion IADVelocityDivCurl 2.5\n\
         freqs 1410 1005\n"
    ))
    .unwrap()
}

fn simulate_to(
    dir: &std::path::Path,
    cfg: &WorkloadConfig,
    model: &SyntheticModel,
    topo: &Topology,
    run_id: &str,
    freq: Option<f64>,
) -> Vec<PathBuf> {
    synthload::run_workload(
        cfg,
        model,
        topo,
        &RunOptions {
            out_dir: dir.to_path_buf(),
            run_id: run_id.to_string(),
            freq_mhz: freq,
            sampler: SamplerConfig::default(),
        },
    )
    .unwrap()
    .rank_files
}

#[test]
fn criterion_2_conservation() {
    criterion(
        2,
        "gpu+cpu+memory+other equals node total within 1e-9",
        || {
            // Two-node topology with shared cards and memory sensors, plus the
            // single-GCD one without memory.
            let mut text = String::new();
            for node in ["na", "nb"] {
                text.push_str(&format!("node {node}\n"));
                text.push_str(&format!("sensor {node} node 0 power 0\n"));
                text.push_str(&format!("sensor {node} cpu 0 power 0\n"));
                text.push_str(&format!("sensor {node} memory 0 power 0\n"));
                text.push_str(&format!("sensor {node} gpu 0 power 0\n"));
                text.push_str(&format!("sensor {node} gpu 1 power 0\n"));
            }
            text.push_str("gcds_per_card 2\n");
            for rank in 0..8 {
                let node = if rank < 4 { "na" } else { "nb" };
                text.push_str(&format!(
                    "rank {rank} {node} {} {}\n",
                    (rank % 4) / 2,
                    rank % 2
                ));
            }
            let two_node = Topology::parse(&text).unwrap();

            for (name, topo, ranks) in [
                ("two-node", two_node, 8),
                ("single-gcd", single_gcd_topology(), 4),
            ] {
                let dir = tempfile::tempdir().unwrap();
                let files = simulate_to(
                    dir.path(),
                    &sweep_workload(ranks),
                    &conservation_model(),
                    &topo,
                    "c2",
                    None,
                );
                let run = tracefmt::merge(&files).unwrap();
                let b = analysis::report_devices(&run, &topo).unwrap();
                for n in b.per_node.iter().chain(std::iter::once(&b.run)) {
                    let gap = (n.component_sum() - n.node_total_j).abs();
                    assert!(
                        gap <= 1e-9 * n.node_total_j,
                        "{name}/{}: conservation gap {gap}",
                        n.node
                    );
                }

                // Per-region device energies never exceed the run's device
                // totals (gaps between regions are allowed, overlap is not).
                let fb = analysis::report_functions(&run, &topo).unwrap();
                let device_total = |kind: DeviceKind| -> f64 {
                    match kind {
                        DeviceKind::GpuCard => b.run.gpu_j,
                        DeviceKind::Cpu => b.run.cpu_j,
                        DeviceKind::Memory => b.run.memory_j.unwrap_or(0.0),
                        DeviceKind::Node => b.run.node_total_j,
                    }
                };
                let mut summed: BTreeMap<DeviceKind, f64> = BTreeMap::new();
                for row in &fb.rows {
                    for (kind, j) in &row.per_kind {
                        *summed.entry(*kind).or_insert(0.0) += j;
                    }
                }
                for (kind, sum) in summed {
                    let total = device_total(kind);
                    assert!(
                        sum <= total * (1.0 + 1e-9),
                        "{name}: {kind} region sum {sum} exceeds device total {total}"
                    );
                }
            }
        },
    );
}

#[test]
fn criterion_3_dedupe_shared_cards() {
    criterion(
        3,
        "shared-card dedupe: dual-GCD fixture equals its single-GCD twin, naive is 2x",
        || {
            let card_w = [300.0, 280.0, 310.0, 290.0];
            let mut trace = String::from("timestamp_us,node,kind,index,value,unit\n");
            trace.push_str("0,nid000001,node,0,1500,W\n");
            trace.push_str("0,nid000001,cpu,0,150,W\n");
            trace.push_str("0,nid000001,memory,0,50,W\n");
            for (i, w) in card_w.iter().enumerate() {
                trace.push_str(&format!("0,nid000001,gpu,{i},{w},W\n"));
            }
            let mut single_trace = String::new();
            for line in trace.lines() {
                if !line.contains(",memory,") {
                    single_trace.push_str(line);
                    single_trace.push('\n');
                }
            }
            let schedule = [("step", 0u64, 10_000_000u64)];

            let dual = dual_gcd_topology();
            let single = single_gcd_topology();
            let dual_records = run_schedule_over_replay(&dual, &trace, &schedule, "c3");
            let single_records = run_schedule_over_replay(&single, &single_trace, &schedule, "c3");

            let gpu_total = |records: &[RegionRecord], topo: &Topology| -> f64 {
                attribution::dedupe(records, topo)
                    .unwrap()
                    .totals
                    .iter()
                    .filter(|(id, _)| id.kind == DeviceKind::GpuCard)
                    .map(|(_, j)| j)
                    .sum()
            };
            let dual_gpu = gpu_total(&dual_records, &dual);
            let single_gpu = gpu_total(&single_records, &single);
            assert!(
                (dual_gpu - single_gpu).abs() <= 1e-9 * single_gpu,
                "deduped totals differ: {dual_gpu} vs {single_gpu}"
            );

            let naive_gpu: f64 = attribution::naive_totals(&dual_records)
                .iter()
                .filter(|(id, _)| id.kind == DeviceKind::GpuCard)
                .map(|(_, j)| j)
                .sum();
            let ratio = dual_gpu / naive_gpu;
            assert!((ratio - 0.5).abs() <= 1e-9, "deduped/naive = {ratio}");
        },
    );
}

fn write_run(
    dir: &std::path::Path,
    topo: &Topology,
    records: &[RegionRecord],
    run_id: &str,
) -> PathBuf {
    let mut header = RunHeader::new(run_id, topo.digest(), "replay", 100);
    header.created_unix = 0;
    let mut paths = Vec::new();
    let mut by_rank: BTreeMap<u32, Vec<RegionRecord>> = BTreeMap::new();
    for r in records {
        by_rank.entry(r.rank).or_default().push(r.clone());
    }
    for (rank, recs) in by_rank {
        let p = dir.join(format!("rank{rank:04}.rec"));
        tracefmt::write_rank_file(&recs, &header, &p).unwrap();
        paths.push(p);
    }
    let merged = tracefmt::merge(&paths).unwrap();
    let out = dir.join(format!("{run_id}.rec"));
    tracefmt::write_run_file(&merged, &out).unwrap();
    out
}

#[test]
fn criterion_4_device_breakdown_fixture() {
    criterion(4, "replay fixture reproduces a 74.3% GPU fraction", || {
        let started = Instant::now();
        // Device powers engineered to the target ratio:
        // gpu 743 / cpu 150 / memory 50 / other 57 of 1000 W node draw.
        let mut trace = String::from("timestamp_us,node,kind,index,value,unit\n");
        trace.push_str("0,nid000001,node,0,1000,W\n");
        trace.push_str("0,nid000001,cpu,0,150,W\n");
        trace.push_str("0,nid000001,memory,0,50,W\n");
        for (i, w) in [200.0, 200.0, 200.0, 143.0].iter().enumerate() {
            trace.push_str(&format!("0,nid000001,gpu,{i},{w},W\n"));
        }
        let topo = dual_gcd_topology();
        let records = run_schedule_over_replay(&topo, &trace, &[("step", 0, 10_000_000)], "c4");

        let dir = tempfile::tempdir().unwrap();
        let run_path = write_run(dir.path(), &topo, &records, "c4");
        let run = tracefmt::read_run_file(&run_path).unwrap();
        let b = analysis::report_devices(&run, &topo).unwrap();
        let frac = b.run.fraction(b.run.gpu_j);
        assert!((frac - 0.743).abs() <= 0.001, "gpu fraction {frac}");
        let text = analysis::render_device_report(&run, &b);
        assert!(
            text.contains("DEV|nid000001|gpu|7430.000000|0.743000"),
            "{text}"
        );
        assert!(
            started.elapsed().as_secs_f64() < 1.0,
            "criterion 4 took too long"
        );
    });
}

#[test]
fn criterion_5_function_share_fixture() {
    criterion(
        5,
        "one region draws 25.29% of a 12.5 kJ run (3.16 kJ)",
        || {
            // One rank; two regions whose constant GPU powers split 12.5 kJ
            // over 20 s so that MomentumEnergy holds exactly 25.29%.
            let topo = Topology::parse(
                "node a\nsensor a node 0 power 0\nsensor a gpu 0 power 0\nrank 0 a 0 0\n",
            )
            .unwrap();
            let model = SyntheticModel::parse(
                "freq 1410 1410\n\
             region MomentumEnergy gpu 316.125 0 1.0\n\
             region EverythingElse gpu 933.875 0 0.0\n",
            )
            .unwrap();
            let cfg = WorkloadConfig::parse(
            "steps 1\nranks 1\nregion MomentumEnergy 10\nregion EverythingElse 10\nfreqs 1410\n",
        )
        .unwrap();
            let dir = tempfile::tempdir().unwrap();
            let files = simulate_to(dir.path(), &cfg, &model, &topo, "c5", None);
            let run = tracefmt::merge(&files).unwrap();
            let fb = analysis::report_functions(&run, &topo).unwrap();
            assert!(
                (fb.run_total_j - 12_500.0).abs() <= 1e-6 * 12_500.0,
                "total {}",
                fb.run_total_j
            );
            let row = fb
                .rows
                .iter()
                .find(|r| r.region == "MomentumEnergy")
                .unwrap();
            // Target: 3.16 kJ with a 0.5% tolerance.
            assert!(
                (row.total_j - 3160.0).abs() <= 0.005 * 3160.0,
                "{} J",
                row.total_j
            );
            // Closed form: 25.29% of 12.5 kJ.
            assert!(
                (row.total_j - 3161.25).abs() <= 1e-6 * 3161.25,
                "{} J",
                row.total_j
            );
            let share = row.total_j / fb.run_total_j;
            assert!((share - 0.2529).abs() <= 1e-9, "share {share}");
        },
    );
}

#[test]
fn criterion_6_validation_semantics() {
    criterion(6, "setup window explains the tool-below-job gap", || {
        // 60 s x 200 W setup before a 50 s measured window at 200 W.
        let topo = single_node_topo();
        let trace = "timestamp_us,node,kind,index,value,unit\n0,a,node,0,200,W\n";
        let backend = ReplayBackend::new(ReplayTrace::parse(trace).unwrap(), 1.0);
        let sampler = Sampler::manual(
            Box::new(backend),
            &topo,
            SamplerConfig::default(),
            60_000_000,
        )
        .unwrap();
        let mut ctx = RankContext::new("c6", 0, &topo, sampler).unwrap();
        ctx.region_begin("step", 60_000_000);
        ctx.region_end("step", 110_000_000).unwrap();
        let records = ctx.flush().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let run_path = write_run(dir.path(), &topo, &records, "c6");
        let run = tracefmt::read_run_file(&run_path).unwrap();
        let node_trace = ReplayTrace::parse(trace).unwrap();
        let v =
            analysis::validate_against_job(&run, 22_000.0, (0, 120_000_000), &node_trace).unwrap();
        assert!(
            (v.setup_window_j - 12_000.0).abs() <= 1e-6 * 12_000.0,
            "setup {} J",
            v.setup_window_j
        );
        assert!(
            v.residual_j.abs() <= 1e-6 * 22_000.0,
            "residual {} J",
            v.residual_j
        );
        assert!(v.ratio < 1.0, "tool must sit below job-level accounting");
        assert!(
            (v.tool_total_j + v.setup_window_j + v.residual_j - v.job_total_j).abs() < 1e-9,
            "identity violated"
        );
    });
}

#[test]
fn criterion_7_edp_properties() {
    criterion(
        7,
        "EDP: baseline 1.0, alpha=0 ratio ~0.53, compute-bound > 1",
        || {
            let topo = Topology::parse(
                "node a\nsensor a node 0 power 0\nsensor a gpu 0 power 0\nrank 0 a 0 0\n",
            )
            .unwrap();
            // MemBound: frequency-insensitive time, 80 W static + 220 W dynamic.
            // CompBound: fully compute-bound with a 40% static share.
            let model = SyntheticModel::parse(
                "freq 1410 1410\n\
             region MemBound gpu 80 220 0.0\n\
             region CompBound gpu 120 180 1.0\n",
            )
            .unwrap();
            let cfg = WorkloadConfig::parse(
            "steps 1\nranks 1\nregion MemBound 10\nregion CompBound 10\nfreqs 1410 1305 1206 1104 1005\n",
        )
        .unwrap();

            let dir = tempfile::tempdir().unwrap();
            let mut runs = Vec::new();
            for f in &cfg.freqs {
                let sub = dir.path().join(format!("f{f}"));
                let files = simulate_to(&sub, &cfg, &model, &topo, "c7", Some(*f));
                runs.push(tracefmt::merge(&files).unwrap());
            }

            let table = analysis::edp_table(&runs, 1410.0).unwrap();
            let base_row = table.iter().find(|p| p.freq_mhz == 1410.0).unwrap();
            assert_eq!(
                base_row.normalized_edp, 1.0,
                "(a) baseline normalized must be exactly 1"
            );

            let pf = analysis::edp_per_function(&runs, 1410.0).unwrap();
            let by_region: BTreeMap<&str, &Vec<analysis::EdpPoint>> =
                pf.regions.iter().map(|(r, p)| (r.as_str(), p)).collect();

            let mem = &by_region["MemBound"];
            assert_eq!(
                mem.iter()
                    .find(|p| p.freq_mhz == 1410.0)
                    .unwrap()
                    .normalized_edp,
                1.0
            );
            let mem_1005 = mem
                .iter()
                .find(|p| p.freq_mhz == 1005.0)
                .unwrap()
                .normalized_edp;
            // Closed-form oracle: time is constant, so the EDP ratio is the
            // power ratio under the cube law.
            let r = 1005.0 / 1410.0;
            let oracle = (80.0 + 220.0 * r * r * r) / 300.0;
            assert!(
                (mem_1005 - oracle).abs() <= 1e-9,
                "(b) {mem_1005} vs oracle {oracle}"
            );
            assert!(
                (mem_1005 - 0.53).abs() <= 0.01,
                "(b) {mem_1005} not within 0.53 +/- 0.01"
            );
            // Down-scaling helps monotonically for the frequency-insensitive region.
            for w in mem.windows(2) {
                assert!(
                    w[1].normalized_edp < w[0].normalized_edp,
                    "(b) not strictly decreasing"
                );
            }

            let comp = &by_region["CompBound"];
            let comp_1005 = comp
                .iter()
                .find(|p| p.freq_mhz == 1005.0)
                .unwrap()
                .normalized_edp;
            assert!(
                comp_1005 > 1.0,
                "(c) compute-bound EDP must not benefit: {comp_1005}"
            );
            // Closed-form oracle: E*T = P(f) * T(f)^2 with T scaling as f0/f.
            let t_ratio = 1410.0 / 1005.0;
            let comp_oracle = ((120.0 + 180.0 * r * r * r) / 300.0) * t_ratio * t_ratio;
            assert!(
                (comp_1005 - comp_oracle).abs() <= 1e-6 * comp_oracle,
                "(c) {comp_1005} vs oracle {comp_oracle}"
            );

            // Run-level check with only frequency-insensitive work: power falls
            // cubically while time stays constant, so the whole-run normalized
            // EDP drops below one.
            let mem_only =
                WorkloadConfig::parse("steps 1\nranks 1\nregion MemBound 10\nfreqs 1410 1005\n")
                    .unwrap();
            let mut mem_runs = Vec::new();
            for f in &mem_only.freqs {
                let sub = dir.path().join(format!("mem{f}"));
                let files = simulate_to(&sub, &mem_only, &model, &topo, "c7m", Some(*f));
                mem_runs.push(tracefmt::merge(&files).unwrap());
            }
            let mem_table = analysis::edp_table(&mem_runs, 1410.0).unwrap();
            let down = mem_table.iter().find(|p| p.freq_mhz == 1005.0).unwrap();
            assert!(down.normalized_edp < 1.0, "{}", down.normalized_edp);
        },
    );
}

#[test]
fn criterion_8_child_sum_property() {
    criterion(
        8,
        "child energies sum to the parent within 2*P_max*period",
        || {
            use proptest::prelude::*;
            use proptest::test_runner::{Config, TestRunner};

            let strategy = (
                proptest::collection::vec((1u64..2_000_000, 0.0f64..1000.0), 1..8),
                proptest::collection::vec(0.001f64..0.999, 0..6),
                prop::sample::select(vec![50u64, 100, 250]),
            );
            let mut runner = TestRunner::new(Config {
                cases: 128,
                failure_persistence: None,
                ..Config::default()
            });
            runner
                .run(&strategy, |(steps, cut_fracs, period_ms)| {
                    // Piecewise-constant node power trace.
                    let mut trace = String::from("timestamp_us,node,kind,index,value,unit\n");
                    let mut t = 0u64;
                    for (dt, w) in &steps {
                        trace.push_str(&format!("{t},a,node,0,{w},W\n"));
                        t += dt;
                    }
                    let span_us = t + 1_000_000;

                    // Distinct interior cut points partition [0, span].
                    let mut cuts: Vec<u64> = cut_fracs
                        .iter()
                        .map(|f| (span_us as f64 * f) as u64)
                        .filter(|c| *c > 0 && *c < span_us)
                        .collect();
                    cuts.sort_unstable();
                    cuts.dedup();
                    let mut bounds = vec![0u64];
                    bounds.extend(cuts);
                    bounds.push(span_us);
                    bounds.dedup();

                    let topo =
                        Topology::parse("node a\nsensor a node 0 power 0\nrank 0 a 0 0\n").unwrap();
                    let backend = ReplayBackend::new(ReplayTrace::parse(&trace).unwrap(), 1.0);
                    let sampler = Sampler::manual(
                        Box::new(backend),
                        &topo,
                        SamplerConfig::new(period_ms).unwrap(),
                        0,
                    )
                    .unwrap();
                    let mut ctx = RankContext::new("c8", 0, &topo, sampler.clone()).unwrap();
                    let id = node_sensor("a");

                    ctx.region_begin("parent", 0);
                    let mut child_sum = 0.0;
                    for w in bounds.windows(2) {
                        ctx.region_begin("child", w[0]);
                        let rec = ctx.region_end("child", w[1]).unwrap();
                        child_sum += rec.energy_j[&id];
                    }
                    let parent = ctx.region_end("parent", span_us).unwrap().energy_j[&id];

                    let p_max = sampler.max_power(&id);
                    let tolerance = 2.0 * p_max * period_ms as f64 / 1000.0;
                    prop_assert!(
                        (child_sum - parent).abs() <= tolerance + 1e-9,
                        "sum {child_sum} vs parent {parent}, tolerance {tolerance}"
                    );
                    Ok(())
                })
                .unwrap();
        },
    );
}

#[test]
fn criterion_9_round_trips() {
    criterion(
        9,
        "byte-identical round-trips and permutation-invariant merge",
        || {
            // Topology render -> parse -> render is byte-identical.
            for topo in [dual_gcd_topology(), single_gcd_topology()] {
                let rendered = topo.render();
                let reparsed = Topology::parse(&rendered).unwrap();
                assert_eq!(reparsed, topo);
                assert_eq!(reparsed.render(), rendered);
            }

            // Record file write -> read -> write is byte-identical.
            let topo = single_gcd_topology();
            let dir = tempfile::tempdir().unwrap();
            let files = simulate_to(
                dir.path(),
                &sweep_workload(4),
                &conservation_model(),
                &topo,
                "c9",
                None,
            );
            for path in &files {
                let bytes = std::fs::read(path).unwrap();
                let run = tracefmt::read_run_file(path).unwrap();
                let copy = path.with_extension("copy");
                tracefmt::write_run_file(&run, &copy).unwrap();
                assert_eq!(
                    bytes,
                    std::fs::read(&copy).unwrap(),
                    "bytes differ for {path:?}"
                );
            }

            // Merge is permutation-invariant.
            let forward = tracefmt::merge(&files).unwrap();
            let mut shuffled = files.clone();
            shuffled.reverse();
            shuffled.rotate_left(1);
            let merged = tracefmt::merge(&shuffled).unwrap();
            assert_eq!(merged, forward);
        },
    );
}
