//! Domain types and the topology description that maps ranks to nodes,
//! GPU cards, and GPU Complex Dies (GCDs).
//!
//! A topology is an explicit input file, never auto-detected. The line
//! grammar (`#` starts a comment):
//!
//! ```text
//! node <name>
//! gcds_per_card <n>
//! sensor <node> <kind> <index> <mode> <width_bits>
//! rank <id> <node> <card_index> <gcd_index>
//! ```
//!
//! Kind tokens are `node|cpu|memory|gpu`; mode tokens are `power|energy`.
//! Sensor sharing is derived, not declared: CPU and memory sensors are
//! shared by every rank on their node, a GPU card sensor by the ranks
//! driving that card's GCDs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::hash::fnv1a64;

pub type RankId = u32;

/// The four device classes a power sensor can meter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DeviceKind {
    Node,
    Cpu,
    Memory,
    GpuCard,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 4] = [
        DeviceKind::Node,
        DeviceKind::Cpu,
        DeviceKind::Memory,
        DeviceKind::GpuCard,
    ];

    pub fn token(&self) -> &'static str {
        match self {
            DeviceKind::Node => "node",
            DeviceKind::Cpu => "cpu",
            DeviceKind::Memory => "memory",
            DeviceKind::GpuCard => "gpu",
        }
    }

    pub fn from_token(s: &str) -> Option<DeviceKind> {
        match s {
            "node" => Some(DeviceKind::Node),
            "cpu" => Some(DeviceKind::Cpu),
            "memory" => Some(DeviceKind::Memory),
            "gpu" => Some(DeviceKind::GpuCard),
            _ => None,
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// One physical power/energy counter: `<node>:<kind><index>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SensorId {
    pub node: String,
    pub kind: DeviceKind,
    pub index: u32,
}

impl SensorId {
    pub fn new(node: impl Into<String>, kind: DeviceKind, index: u32) -> Self {
        SensorId {
            node: node.into(),
            kind,
            index,
        }
    }

    /// Canonical string key, e.g. `nid000001:gpu0`.
    pub fn key(&self) -> String {
        format!("{}:{}{}", self.node, self.kind.token(), self.index)
    }

    pub fn parse_key(s: &str) -> Option<SensorId> {
        let (node, rest) = s.split_once(':')?;
        let split = rest.find(|c: char| c.is_ascii_digit())?;
        let kind = DeviceKind::from_token(&rest[..split])?;
        let index: u32 = rest[split..].parse().ok()?;
        if node.is_empty() {
            return None;
        }
        Some(SensorId::new(node, kind, index))
    }
}

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Whether a sensor reports instantaneous watts or a cumulative joule counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorMode {
    Power,
    CumulativeEnergy,
}

impl SensorMode {
    pub fn token(&self) -> &'static str {
        match self {
            SensorMode::Power => "power",
            SensorMode::CumulativeEnergy => "energy",
        }
    }

    pub fn from_token(s: &str) -> Option<SensorMode> {
        match s {
            "power" => Some(SensorMode::Power),
            "energy" => Some(SensorMode::CumulativeEnergy),
            _ => None,
        }
    }

    pub fn unit(&self) -> &'static str {
        match self {
            SensorMode::Power => "W",
            SensorMode::CumulativeEnergy => "J",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorMeta {
    pub id: SensorId,
    pub mode: SensorMode,
    /// Counter width in bits for wrap detection; 0 means non-wrapping.
    pub counter_width_bits: u32,
    /// Ranks whose measurements this sensor covers (derived at validation).
    pub shared_by_ranks: Vec<RankId>,
}

/// Where a rank runs: its node, the GPU card it drives, and which GCD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankAssignment {
    pub node: String,
    pub gpu_card_index: u32,
    pub gcd_index: u32,
}

/// A timestamped reading from one sensor: watts in `Power` mode, joules
/// (raw counter value) in `CumulativeEnergy` mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSample {
    pub sensor: SensorId,
    pub t_us: u64,
    pub value: f64,
}

/// Nodes, sensors, and the rank-to-GPU assignment of a run.
///
/// Immutable after construction; safe to share read-only across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: Vec<String>,
    pub sensors: Vec<SensorMeta>,
    pub ranks: BTreeMap<RankId, RankAssignment>,
    pub gcds_per_card: u32,
}

/// Names used as topology nodes, regions, and run ids must survive the
/// whitespace- and `|`/`;`-delimited file formats unescaped.
pub fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '^' | '+'))
}

impl Topology {
    /// Parses and validates a topology document.
    pub fn parse(text: &str) -> Result<Topology> {
        let mut nodes: Vec<String> = Vec::new();
        let mut sensors: Vec<SensorMeta> = Vec::new();
        let mut ranks: BTreeMap<RankId, RankAssignment> = BTreeMap::new();
        let mut gcds_per_card: Option<u32> = None;

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
                "node" => {
                    let [name] = expect_args(lineno, &tokens, 1)?;
                    if !valid_name(name) {
                        return Err(Error::syntax(lineno, format!("bad node name '{name}'")));
                    }
                    if nodes.iter().any(|n| n == name) {
                        return Err(Error::syntax(lineno, format!("duplicate node '{name}'")));
                    }
                    nodes.push(name.to_string());
                }
                "gcds_per_card" => {
                    let [n] = expect_args(lineno, &tokens, 1)?;
                    if gcds_per_card.is_some() {
                        return Err(Error::syntax(lineno, "duplicate gcds_per_card"));
                    }
                    gcds_per_card = Some(parse_num(lineno, n, "gcds_per_card")?);
                }
                "sensor" => {
                    let [node, kind, index, mode, width] = expect_args(lineno, &tokens, 5)?;
                    let kind = DeviceKind::from_token(kind).ok_or_else(|| {
                        Error::syntax(lineno, format!("unknown sensor kind '{kind}'"))
                    })?;
                    let mode = SensorMode::from_token(mode).ok_or_else(|| {
                        Error::syntax(lineno, format!("unknown sensor mode '{mode}'"))
                    })?;
                    sensors.push(SensorMeta {
                        id: SensorId::new(node, kind, parse_num(lineno, index, "sensor index")?),
                        mode,
                        counter_width_bits: parse_num(lineno, width, "width_bits")?,
                        shared_by_ranks: Vec::new(),
                    });
                }
                "rank" => {
                    let [id, node, card, gcd] = expect_args(lineno, &tokens, 4)?;
                    let id: RankId = parse_num(lineno, id, "rank id")?;
                    if ranks.contains_key(&id) {
                        return Err(Error::syntax(lineno, format!("duplicate rank {id}")));
                    }
                    ranks.insert(
                        id,
                        RankAssignment {
                            node: node.to_string(),
                            gpu_card_index: parse_num(lineno, card, "card index")?,
                            gcd_index: parse_num(lineno, gcd, "gcd index")?,
                        },
                    );
                }
                other => {
                    return Err(Error::syntax(
                        lineno,
                        format!("unknown directive '{other}'"),
                    ));
                }
            }
        }

        let mut topo = Topology {
            nodes,
            sensors,
            ranks,
            gcds_per_card: gcds_per_card.unwrap_or(1),
        };
        topo.validate()?;
        Ok(topo)
    }

    /// Canonical rendering: nodes sorted, then `gcds_per_card`, sensors in
    /// (node, kind, index) order, ranks by id. `parse(render(t)) == t`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&format!("node {n}\n"));
        }
        out.push_str(&format!("gcds_per_card {}\n", self.gcds_per_card));
        for s in &self.sensors {
            out.push_str(&format!(
                "sensor {} {} {} {} {}\n",
                s.id.node,
                s.id.kind.token(),
                s.id.index,
                s.mode.token(),
                s.counter_width_bits
            ));
        }
        for (id, a) in &self.ranks {
            out.push_str(&format!(
                "rank {id} {} {} {}\n",
                a.node, a.gpu_card_index, a.gcd_index
            ));
        }
        out
    }

    /// 64-bit FNV-1a over the canonical rendering.
    pub fn digest(&self) -> u64 {
        fnv1a64(self.render().as_bytes())
    }

    /// Canonicalizes ordering, derives sensor sharing, and checks every
    /// structural invariant. Called by `parse`; call it directly after
    /// building a `Topology` by hand.
    pub fn validate(&mut self) -> Result<()> {
        if self.ranks.is_empty() {
            return Err(Error::Invariant("no ranks".into()));
        }
        if self.gcds_per_card < 1 {
            return Err(Error::Invariant("gcds_per_card must be >= 1".into()));
        }
        self.nodes.sort();
        self.sensors.sort_by(|a, b| a.id.cmp(&b.id));

        // Rank ids are global integers, dense from 0.
        for (expect, id) in self.ranks.keys().enumerate() {
            if *id != expect as RankId {
                return Err(Error::Invariant(format!(
                    "rank ids must be dense from 0, missing rank {expect}"
                )));
            }
        }

        let mut seen_slots: BTreeSet<(String, u32, u32)> = BTreeSet::new();
        for (id, a) in &self.ranks {
            if !self.nodes.contains(&a.node) {
                return Err(Error::Invariant(format!(
                    "rank {id} references undeclared node '{}'",
                    a.node
                )));
            }
            if a.gcd_index >= self.gcds_per_card {
                return Err(Error::Invariant(format!(
                    "rank {id} gcd_index {} >= gcds_per_card {}",
                    a.gcd_index, self.gcds_per_card
                )));
            }
            if !seen_slots.insert((a.node.clone(), a.gpu_card_index, a.gcd_index)) {
                return Err(Error::Invariant(format!(
                    "duplicate (card {}, gcd {}) assignment on node '{}'",
                    a.gpu_card_index, a.gcd_index, a.node
                )));
            }
        }

        let mut seen_ids: BTreeSet<SensorId> = BTreeSet::new();
        for s in &self.sensors {
            if !self.nodes.contains(&s.id.node) {
                return Err(Error::Invariant(format!(
                    "sensor {} references undeclared node '{}'",
                    s.id, s.id.node
                )));
            }
            if !matches!(s.counter_width_bits, 0 | 32 | 64) {
                return Err(Error::Invariant(format!(
                    "sensor {}: counter_width_bits must be 0, 32, or 64",
                    s.id
                )));
            }
            if !seen_ids.insert(s.id.clone()) {
                return Err(Error::Invariant(format!("duplicate sensor {}", s.id)));
            }
        }

        // Exactly one node-level sensor per node, at index 0.
        for node in &self.nodes {
            let node_sensors: Vec<_> = self
                .sensors
                .iter()
                .filter(|s| s.id.kind == DeviceKind::Node && s.id.node == *node)
                .collect();
            match node_sensors.len() {
                0 => {
                    return Err(Error::Invariant(format!(
                        "node '{node}' has no node-level sensor"
                    )))
                }
                1 if node_sensors[0].id.index == 0 => {}
                1 => {
                    return Err(Error::Invariant(format!(
                        "node-level sensor on '{node}' must have index 0"
                    )))
                }
                _ => {
                    return Err(Error::Invariant(format!(
                        "node '{node}' has more than one node-level sensor"
                    )))
                }
            }
        }

        // Derive sharing from the rank assignment.
        let ranks = &self.ranks;
        for s in &mut self.sensors {
            let on_node = ranks
                .iter()
                .filter(|(_, a)| a.node == s.id.node)
                .map(|(id, a)| (*id, a));
            s.shared_by_ranks = match s.id.kind {
                DeviceKind::GpuCard => on_node
                    .filter(|(_, a)| a.gpu_card_index == s.id.index)
                    .map(|(id, _)| id)
                    .collect(),
                _ => on_node.map(|(id, _)| id).collect(),
            };
        }

        for s in &self.sensors {
            match s.id.kind {
                DeviceKind::Cpu if s.shared_by_ranks.is_empty() => {
                    return Err(Error::Invariant(format!(
                        "cpu sensor {} has no ranks on its node",
                        s.id
                    )));
                }
                DeviceKind::GpuCard => {
                    if s.shared_by_ranks.is_empty() {
                        return Err(Error::Invariant(format!(
                            "gpu sensor {} has no ranks driving its card",
                            s.id
                        )));
                    }
                    if s.shared_by_ranks.len() as u32 > self.gcds_per_card {
                        return Err(Error::Invariant(format!(
                            "gpu sensor {} shared by {} ranks, more than gcds_per_card {}",
                            s.id,
                            s.shared_by_ranks.len(),
                            self.gcds_per_card
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn sensor(&self, id: &SensorId) -> Option<&SensorMeta> {
        self.sensors.iter().find(|s| &s.id == id)
    }

    pub fn ranks_on_node(&self, node: &str) -> Vec<RankId> {
        self.ranks
            .iter()
            .filter(|(_, a)| a.node == node)
            .map(|(id, _)| *id)
            .collect()
    }

    /// The sensors that cover one rank's measurements, in deterministic
    /// (node, cpu, memory, gpu-card) order.
    pub fn sensors_for_rank(&self, rank: RankId) -> Result<Vec<SensorId>> {
        let a = self.ranks.get(&rank).ok_or(Error::UnknownRank(rank))?;
        let mut out = Vec::new();
        for kind in DeviceKind::ALL {
            for s in self.sensors.iter().filter(|s| s.id.node == a.node) {
                if s.id.kind != kind {
                    continue;
                }
                if kind == DeviceKind::GpuCard && s.id.index != a.gpu_card_index {
                    continue;
                }
                out.push(s.id.clone());
            }
        }
        Ok(out)
    }
}

fn expect_args<'a, const N: usize>(
    lineno: usize,
    tokens: &[&'a str],
    n: usize,
) -> Result<[&'a str; N]> {
    if tokens.len() != n + 1 {
        return Err(Error::syntax(
            lineno,
            format!(
                "'{}' takes {} argument(s), got {}",
                tokens[0],
                n,
                tokens.len() - 1
            ),
        ));
    }
    let mut out = [""; N];
    out.copy_from_slice(&tokens[1..]);
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(lineno: usize, s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::syntax(lineno, format!("bad {what} '{s}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn dual_gcd_fixture() -> String {
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
        t
    }

    pub fn single_gcd_fixture() -> String {
        let mut t = String::from("node nid001\ngcds_per_card 1\n");
        t.push_str("sensor nid001 node 0 power 0\n");
        t.push_str("sensor nid001 cpu 0 power 0\n");
        for card in 0..4 {
            t.push_str(&format!("sensor nid001 gpu {card} power 0\n"));
        }
        for rank in 0..4 {
            t.push_str(&format!("rank {rank} nid001 {rank} 0\n"));
        }
        t
    }

    #[test]
    fn parse_dual_gcd_shares_cards_between_two_ranks() {
        let topo = Topology::parse(&dual_gcd_fixture()).unwrap();
        assert_eq!(topo.nodes.len(), 1);
        assert_eq!(topo.ranks.len(), 8);
        assert_eq!(topo.gcds_per_card, 2);
        for card in 0..4 {
            let id = SensorId::new("nid000001", DeviceKind::GpuCard, card);
            let meta = topo.sensor(&id).unwrap();
            assert_eq!(meta.shared_by_ranks.len(), 2, "card {card}");
        }
    }

    #[test]
    fn parse_single_gcd_is_one_rank_per_card() {
        let topo = Topology::parse(&single_gcd_fixture()).unwrap();
        for card in 0..4 {
            let id = SensorId::new("nid001", DeviceKind::GpuCard, card);
            assert_eq!(topo.sensor(&id).unwrap().shared_by_ranks.len(), 1);
        }
        // With one GCD per card, sensor -> rank is a bijection over cards.
        let mut ranks_seen = BTreeSet::new();
        for s in topo
            .sensors
            .iter()
            .filter(|s| s.id.kind == DeviceKind::GpuCard)
        {
            assert!(ranks_seen.insert(s.shared_by_ranks[0]));
        }
        assert_eq!(ranks_seen.len(), 4);
    }

    #[test]
    fn empty_ranks_is_an_invariant_violation() {
        let err = Topology::parse("node a\nsensor a node 0 power 0\n").unwrap_err();
        assert_eq!(err.to_string(), "invariant violation: no ranks");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = Topology::parse("node a\nwibble 3\n").unwrap_err();
        assert!(err.to_string().starts_with("line 2: syntax error"), "{err}");
    }

    #[test]
    fn sensors_for_rank_order_and_sharing() {
        let topo = Topology::parse(&dual_gcd_fixture()).unwrap();
        let s0 = topo.sensors_for_rank(0).unwrap();
        let s1 = topo.sensors_for_rank(1).unwrap();
        assert_eq!(
            s0.iter().map(|s| s.key()).collect::<Vec<_>>(),
            [
                "nid000001:node0",
                "nid000001:cpu0",
                "nid000001:memory0",
                "nid000001:gpu0"
            ]
        );
        // Ranks 0 and 1 drive the two GCDs of card 0: same card sensor.
        assert_eq!(s0.last(), s1.last());
    }

    #[test]
    fn sensors_for_rank_unshared_card() {
        let topo = Topology::parse(&single_gcd_fixture()).unwrap();
        let s2 = topo.sensors_for_rank(2).unwrap();
        assert_eq!(s2.last().unwrap().key(), "nid001:gpu2");
    }

    #[test]
    fn unknown_rank_errors() {
        let topo = Topology::parse(&single_gcd_fixture()).unwrap();
        assert!(matches!(
            topo.sensors_for_rank(99),
            Err(Error::UnknownRank(99))
        ));
    }

    #[test]
    fn union_of_rank_sensors_covers_all_shared_sensors() {
        for text in [dual_gcd_fixture(), single_gcd_fixture()] {
            let topo = Topology::parse(&text).unwrap();
            let mut covered = BTreeSet::new();
            for rank in topo.ranks.keys() {
                covered.extend(topo.sensors_for_rank(*rank).unwrap());
            }
            for s in &topo.sensors {
                if !s.shared_by_ranks.is_empty() {
                    assert!(covered.contains(&s.id), "sensor {} not covered", s.id);
                }
            }
        }
    }

    #[test]
    fn render_parse_round_trip() {
        for text in [dual_gcd_fixture(), single_gcd_fixture()] {
            let topo = Topology::parse(&text).unwrap();
            let rendered = topo.render();
            let reparsed = Topology::parse(&rendered).unwrap();
            assert_eq!(reparsed, topo);
            assert_eq!(reparsed.render(), rendered);
            assert_eq!(reparsed.digest(), topo.digest());
        }
    }

    #[test]
    fn rejects_gcd_index_out_of_range() {
        let text = "node a\ngcds_per_card 1\nsensor a node 0 power 0\n\
                    sensor a gpu 0 power 0\nrank 0 a 0 1\n";
        let err = Topology::parse(text).unwrap_err();
        assert!(err.to_string().contains("gcd_index"), "{err}");
    }

    #[test]
    fn rejects_oversubscribed_card() {
        // Three ranks on one card with gcds_per_card 2 collides on gcd slots
        // first; use distinct gcds to hit the sharing bound directly.
        let text = "node a\ngcds_per_card 3\nsensor a node 0 power 0\n\
                    sensor a gpu 0 power 0\nrank 0 a 0 0\nrank 1 a 0 1\nrank 2 a 0 2\n";
        let topo = Topology::parse(text).unwrap();
        assert_eq!(
            topo.sensor(&SensorId::new("a", DeviceKind::GpuCard, 0))
                .unwrap()
                .shared_by_ranks
                .len(),
            3
        );

        let text2 = "node a\ngcds_per_card 2\nsensor a node 0 power 0\n\
                     sensor a gpu 0 power 0\nrank 0 a 0 0\nrank 1 a 0 1\nrank 2 a 1 0\n";
        // rank 2 drives card 1 which has no sensor: allowed, covered by no gpu sensor.
        let topo2 = Topology::parse(text2).unwrap();
        let s2 = topo2.sensors_for_rank(2).unwrap();
        assert!(s2.iter().all(|s| s.kind != DeviceKind::GpuCard));
    }

    #[test]
    fn rejects_sparse_rank_ids() {
        let text = "node a\nsensor a node 0 power 0\nrank 0 a 0 0\nrank 2 a 1 0\n";
        let err = Topology::parse(text).unwrap_err();
        assert!(err.to_string().contains("dense"), "{err}");
    }

    #[test]
    fn sensor_key_round_trip() {
        let id = SensorId::new("nid000001", DeviceKind::GpuCard, 3);
        assert_eq!(SensorId::parse_key(&id.key()), Some(id));
        assert_eq!(SensorId::parse_key("x:bogus0"), None);
    }
}
