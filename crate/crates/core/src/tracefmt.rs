//! Persistent record files per rank and run-file merging.
//!
//! Files are line-delimited text: header lines prefixed `#!`, one record
//! per line, and a footer `#=<count> <checksum>` where the checksum is
//! 64-bit FNV-1a over the body bytes. Record lines are
//!
//! ```text
//! run_id|rank|region|seq|start_us|end_us|duration_s|sensor=joules;...|flags
//! ```
//!
//! with sensor keys `<node>:<kind><index>` and fixed 6-decimal formatting
//! for joules and seconds, so write -> read -> write is byte-identical.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::meter::{RecordFlags, RegionRecord};
use crate::model::{valid_name, SensorId};

/// Fixed-point rendering used for all joules/seconds/fractions in files and
/// reports; keeps golden outputs byte-stable across platforms.
pub fn fmt6(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x }; // normalize -0.0
    format!("{x:.6}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHeader {
    pub run_id: String,
    pub topology_digest: u64,
    pub backend: String,
    pub period_ms: u64,
    /// GPU frequency label for EDP sweeps; absent for unlabeled runs.
    pub freq_mhz: Option<f64>,
    pub created_unix: u64,
}

impl RunHeader {
    pub fn new(run_id: &str, topology_digest: u64, backend: &str, period_ms: u64) -> RunHeader {
        RunHeader {
            run_id: run_id.to_string(),
            topology_digest,
            backend: backend.to_string(),
            period_ms,
            freq_mhz: None,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn with_freq(mut self, freq_mhz: f64) -> RunHeader {
        self.freq_mhz = Some(freq_mhz);
        self
    }

    fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("#!run_id {}\n", self.run_id));
        out.push_str(&format!("#!topology {:016x}\n", self.topology_digest));
        out.push_str(&format!("#!backend {}\n", self.backend));
        out.push_str(&format!("#!period_ms {}\n", self.period_ms));
        if let Some(f) = self.freq_mhz {
            out.push_str(&format!("#!freq_mhz {}\n", fmt6(f)));
        }
        out.push_str(&format!("#!created {}\n", self.created_unix));
        out
    }
}

/// A full run: unified header plus every rank's records.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub header: RunHeader,
    pub records: Vec<RegionRecord>,
}

pub fn format_record(r: &RegionRecord) -> String {
    let energies = if r.energy_j.is_empty() {
        "-".to_string()
    } else {
        r.energy_j
            .iter()
            .map(|(id, j)| format!("{}={}", id.key(), fmt6(*j)))
            .collect::<Vec<_>>()
            .join(";")
    };
    format!(
        "{}|{}|{}|{}|{}|{}|{}|{}|{}",
        r.run_id,
        r.rank,
        r.region,
        r.seq,
        r.start_us,
        r.end_us,
        fmt6(r.duration_s),
        energies,
        r.flags.render()
    )
}

pub fn parse_record(line: &str, lineno: usize) -> Result<RegionRecord> {
    let fields: Vec<&str> = line.split('|').collect();
    if fields.len() != 9 {
        return Err(Error::syntax(
            lineno,
            format!("record has {} fields, want 9", fields.len()),
        ));
    }
    let num = |s: &str, what: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| Error::syntax(lineno, format!("bad {what} '{s}'")))
    };
    let mut energy_j = std::collections::BTreeMap::new();
    if fields[7] != "-" {
        for part in fields[7].split(';') {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| Error::syntax(lineno, format!("bad energy entry '{part}'")))?;
            let id = SensorId::parse_key(key)
                .ok_or_else(|| Error::syntax(lineno, format!("bad sensor key '{key}'")))?;
            let j: f64 = val
                .parse()
                .map_err(|_| Error::syntax(lineno, format!("bad joules '{val}'")))?;
            energy_j.insert(id, j);
        }
    }
    Ok(RegionRecord {
        run_id: fields[0].to_string(),
        rank: num(fields[1], "rank")? as u32,
        region: fields[2].to_string(),
        seq: num(fields[3], "seq")?,
        start_us: num(fields[4], "start_us")?,
        end_us: num(fields[5], "end_us")?,
        duration_s: fields[6]
            .parse()
            .map_err(|_| Error::syntax(lineno, format!("bad duration '{}'", fields[6])))?,
        energy_j,
        flags: RecordFlags::parse(fields[8])?,
    })
}

fn render_file(header: &RunHeader, records: &[RegionRecord]) -> Result<String> {
    if !valid_name(&header.run_id) {
        return Err(Error::data(format!("bad run_id '{}'", header.run_id)));
    }
    let mut body = String::new();
    for r in records {
        if r.run_id != header.run_id {
            return Err(Error::data(format!(
                "mixed run_ids: record has '{}', header has '{}'",
                r.run_id, header.run_id
            )));
        }
        if !valid_name(&r.region) {
            return Err(Error::data(format!("bad region name '{}'", r.region)));
        }
        body.push_str(&format_record(r));
        body.push('\n');
    }
    Ok(format!(
        "{}{}#={} {:016x}\n",
        header.render(),
        body,
        records.len(),
        fnv1a64(body.as_bytes())
    ))
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes one rank's records (atomically: temp file + rename). All records
/// must share the header's run id and a single rank.
pub fn write_rank_file(records: &[RegionRecord], header: &RunHeader, path: &Path) -> Result<()> {
    if let Some(first) = records.first() {
        if records.iter().any(|r| r.rank != first.rank) {
            return Err(Error::data(
                "rank file contains records from multiple ranks",
            ));
        }
    }
    write_atomic(path, &render_file(header, records)?)
}

/// Writes a merged run file (same format, any number of ranks).
pub fn write_run_file(run: &RunFile, path: &Path) -> Result<()> {
    write_atomic(path, &render_file(&run.header, &run.records)?)
}

pub fn read_run_file(path: &Path) -> Result<RunFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labelled = |e: Error| match e {
        Error::Syntax { line, msg } => {
            Error::data(format!("{}:{line}: syntax error: {msg}", path.display()))
        }
        other => other,
    };
    parse_run_file(&text).map_err(labelled)
}

fn parse_run_file(text: &str) -> Result<RunFile> {
    let mut run_id = None;
    let mut digest = None;
    let mut backend = None;
    let mut period_ms = None;
    let mut freq_mhz = None;
    let mut created = None;
    let mut records = Vec::new();
    let mut body = String::new();
    let mut footer: Option<(usize, u64)> = None;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if let Some(rest) = line.strip_prefix("#!") {
            if !records.is_empty() {
                return Err(Error::syntax(lineno, "header line after records"));
            }
            let (key, value) = rest
                .split_once(' ')
                .ok_or_else(|| Error::syntax(lineno, "bad header line"))?;
            match key {
                "run_id" => run_id = Some(value.to_string()),
                "topology" => {
                    digest = Some(u64::from_str_radix(value, 16).map_err(|_| {
                        Error::syntax(lineno, format!("bad topology digest '{value}'"))
                    })?)
                }
                "backend" => backend = Some(value.to_string()),
                "period_ms" => {
                    period_ms =
                        Some(value.parse().map_err(|_| {
                            Error::syntax(lineno, format!("bad period_ms '{value}'"))
                        })?)
                }
                "freq_mhz" => {
                    freq_mhz =
                        Some(value.parse::<f64>().map_err(|_| {
                            Error::syntax(lineno, format!("bad freq_mhz '{value}'"))
                        })?)
                }
                "created" => {
                    created = Some(
                        value
                            .parse()
                            .map_err(|_| Error::syntax(lineno, format!("bad created '{value}'")))?,
                    )
                }
                other => {
                    return Err(Error::syntax(
                        lineno,
                        format!("unknown header key '{other}'"),
                    ))
                }
            }
        } else if let Some(rest) = line.strip_prefix("#=") {
            let (count, checksum) = rest
                .split_once(' ')
                .ok_or_else(|| Error::syntax(lineno, "bad footer line"))?;
            footer = Some((
                count
                    .parse()
                    .map_err(|_| Error::syntax(lineno, format!("bad footer count '{count}'")))?,
                u64::from_str_radix(checksum, 16)
                    .map_err(|_| Error::syntax(lineno, format!("bad checksum '{checksum}'")))?,
            ));
        } else if !line.is_empty() {
            if footer.is_some() {
                return Err(Error::syntax(lineno, "record after footer"));
            }
            records.push(parse_record(line, lineno)?);
            body.push_str(line);
            body.push('\n');
        }
    }

    let (count, checksum) = footer.ok_or_else(|| Error::data("missing footer line"))?;
    if count != records.len() {
        return Err(Error::data(format!(
            "footer count {count} does not match {} records",
            records.len()
        )));
    }
    let actual = fnv1a64(body.as_bytes());
    if actual != checksum {
        return Err(Error::data(format!(
            "checksum mismatch: footer {checksum:016x}, body {actual:016x}"
        )));
    }
    let header = RunHeader {
        run_id: run_id.ok_or_else(|| Error::data("missing run_id header"))?,
        topology_digest: digest.ok_or_else(|| Error::data("missing topology header"))?,
        backend: backend.ok_or_else(|| Error::data("missing backend header"))?,
        period_ms: period_ms.ok_or_else(|| Error::data("missing period_ms header"))?,
        freq_mhz,
        created_unix: created.ok_or_else(|| Error::data("missing created header"))?,
    };
    for r in &records {
        if r.run_id != header.run_id {
            return Err(Error::data(format!(
                "run_id mismatch: record has '{}', header has '{}'",
                r.run_id, header.run_id
            )));
        }
    }
    Ok(RunFile { header, records })
}

/// Merges per-rank files into one run. Inputs must agree on run id,
/// topology digest, backend, period, and frequency label; records are
/// sorted by (start_us, rank, seq) so any input permutation produces the
/// same output. Duplicate (rank, seq) pairs are rejected.
pub fn merge(paths: &[std::path::PathBuf]) -> Result<RunFile> {
    if paths.is_empty() {
        return Err(Error::data("no input files to merge"));
    }
    let mut files = Vec::new();
    for p in paths {
        files.push((p, read_run_file(p)?));
    }
    let first = &files[0].1.header;
    let mut header = first.clone();
    for (path, f) in &files[1..] {
        let h = &f.header;
        if h.run_id != first.run_id {
            return Err(Error::data(format!(
                "run_id mismatch: '{}' has '{}', expected '{}'",
                path.display(),
                h.run_id,
                first.run_id
            )));
        }
        if h.topology_digest != first.topology_digest {
            return Err(Error::data(format!(
                "topology digest mismatch: '{}' has {:016x}, expected {:016x}",
                path.display(),
                h.topology_digest,
                first.topology_digest
            )));
        }
        if h.backend != first.backend
            || h.period_ms != first.period_ms
            || h.freq_mhz != first.freq_mhz
        {
            return Err(Error::data(format!(
                "header mismatch between '{}' and '{}'",
                path.display(),
                files[0].0.display()
            )));
        }
        header.created_unix = header.created_unix.min(h.created_unix);
    }

    let mut records: Vec<RegionRecord> = files.into_iter().flat_map(|(_, f)| f.records).collect();
    records.sort_by_key(|a| (a.start_us, a.rank, a.seq));
    let mut seen: BTreeSet<(u32, u64)> = BTreeSet::new();
    for r in &records {
        if !seen.insert((r.rank, r.seq)) {
            return Err(Error::data(format!(
                "duplicate record: rank {} seq {}",
                r.rank, r.seq
            )));
        }
    }
    Ok(RunFile { header, records })
}
