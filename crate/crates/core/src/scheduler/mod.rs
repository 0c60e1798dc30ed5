//! Compression-aware chunk placement.
//!
//! Nodes are points on the (logical usage, physical usage) plane. A node
//! whose chunks compress worse than the cluster fills its physical space
//! first and strands logical space, and the reverse for nodes that compress
//! better. The planner moves chunks between such nodes until every node in
//! the balanced band has a ratio inside `[c_l, c_h]`.

mod sim;
mod text;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sim::{simulate, simulate_cluster, sweep, wasted_space, PopulationSpec, Simulation, StepReport, SweepRow, Wasted};
pub use text::{format_cluster, format_node, format_step, parse_cluster, parse_population, parse_sched_config};

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("illegal move of chunk {chunk_id} from node {src} to node {dst}: {reason}")]
    IllegalMove { chunk_id: u64, src: usize, dst: usize, reason: String },
    #[error("no node can accept a new chunk")]
    ClusterFull,
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkStats {
    pub chunk_id: u64,
    pub logical_bytes: u64,
    pub physical_bytes: u64,
}

impl ChunkStats {
    pub fn ratio(&self) -> f64 {
        self.logical_bytes as f64 / self.physical_bytes as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub node_id: usize,
    pub logical_capacity: u64,
    pub physical_capacity: u64,
    chunks: Vec<ChunkStats>,
    logical_used: u64,
    physical_used: u64,
}

impl NodeState {
    pub fn new(node_id: usize, logical_capacity: u64, physical_capacity: u64) -> Self {
        NodeState { node_id, logical_capacity, physical_capacity, chunks: Vec::new(), logical_used: 0, physical_used: 0 }
    }

    pub fn chunks(&self) -> &[ChunkStats] {
        &self.chunks
    }

    pub fn logical_used(&self) -> u64 {
        self.logical_used
    }

    pub fn physical_used(&self) -> u64 {
        self.physical_used
    }

    pub fn logical_fraction(&self) -> f64 {
        self.logical_used as f64 / self.logical_capacity as f64
    }

    pub fn physical_fraction(&self) -> f64 {
        self.physical_used as f64 / self.physical_capacity as f64
    }

    /// Logical over physical usage; 0 for an empty node.
    pub fn ratio(&self) -> f64 {
        if self.physical_used == 0 {
            0.0
        } else {
            self.logical_used as f64 / self.physical_used as f64
        }
    }

    pub fn add_chunk(&mut self, c: ChunkStats) {
        self.logical_used += c.logical_bytes;
        self.physical_used += c.physical_bytes;
        self.chunks.push(c);
    }

    pub fn remove_chunk(&mut self, chunk_id: u64) -> Option<ChunkStats> {
        let pos = self.chunks.iter().position(|c| c.chunk_id == chunk_id)?;
        let c = self.chunks.remove(pos);
        self.logical_used -= c.logical_bytes;
        self.physical_used -= c.physical_bytes;
        Some(c)
    }

    /// Whether the node stays at or under `threshold` on both axes after
    /// taking `c`.
    fn fits(&self, c: &ChunkStats, threshold: f64) -> bool {
        (self.logical_used + c.logical_bytes) as f64 <= threshold * self.logical_capacity as f64
            && (self.physical_used + c.physical_bytes) as f64 <= threshold * self.physical_capacity as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cluster {
    pub nodes: Vec<NodeState>,
}

impl Cluster {
    pub fn logical_used(&self) -> u64 {
        self.nodes.iter().map(|n| n.logical_used).sum()
    }

    pub fn physical_used(&self) -> u64 {
        self.nodes.iter().map(|n| n.physical_used).sum()
    }

    pub fn logical_capacity(&self) -> u64 {
        self.nodes.iter().map(|n| n.logical_capacity).sum()
    }

    pub fn physical_capacity(&self) -> u64 {
        self.nodes.iter().map(|n| n.physical_capacity).sum()
    }

    /// Average logical usage fraction.
    pub fn w_avg(&self) -> f64 {
        self.logical_used() as f64 / self.logical_capacity() as f64
    }

    /// Cluster-wide compression ratio.
    pub fn c_avg(&self) -> f64 {
        self.logical_used() as f64 / self.physical_used().max(1) as f64
    }

    pub fn chunk_count(&self) -> usize {
        self.nodes.iter().map(|n| n.chunks.len()).sum()
    }

    /// Fraction of non-empty nodes whose ratio lies in `[c_l, c_h]`.
    pub fn in_range_fraction(&self, cfg: &SchedulerConfig) -> f64 {
        let used: Vec<&NodeState> = self.nodes.iter().filter(|n| n.physical_used > 0).collect();
        if used.is_empty() {
            return 1.0;
        }
        used.iter().filter(|n| (cfg.c_l..=cfg.c_h).contains(&n.ratio())).count() as f64 / used.len() as f64
    }

    fn node_index(&self, id: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.node_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub c_l: f64,
    pub c_h: f64,
    /// Half-width of the balanced band around `w_avg`, as a fraction of
    /// logical capacity.
    pub delta: f64,
    pub block_threshold: f64,
    /// Logical usage above `w_avg * (1 + migrate_trigger)` triggers logical
    /// balancing.
    pub migrate_trigger: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { c_l: 2.2, c_h: 2.7, delta: 0.05, block_threshold: 0.75, migrate_trigger: 0.10 }
    }
}

impl SchedulerConfig {
    /// Bounds at `c_avg * (1 -/+ spread)`.
    pub fn around(c_avg: f64, spread: f64) -> Self {
        SchedulerConfig { c_l: c_avg * (1.0 - spread), c_h: c_avg * (1.0 + spread), ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        let bad = |m: String| Err(SchedError::InvalidConfig(m));
        if !(self.c_l > 0.0 && self.c_l < self.c_h) {
            return bad(format!("need 0 < c_l < c_h, got {} and {}", self.c_l, self.c_h));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return bad(format!("delta {} outside [0, 1)", self.delta));
        }
        if !(self.block_threshold > 0.0 && self.block_threshold <= 1.0) {
            return bad(format!("block_threshold {} outside (0, 1]", self.block_threshold));
        }
        if self.migrate_trigger < 0.0 {
            return bad(format!("migrate_trigger {} is negative", self.migrate_trigger));
        }
        Ok(())
    }

    /// Also checks `c_l < c_avg < c_h` for the given cluster.
    pub fn validate_for(&self, cluster: &Cluster) -> Result<(), SchedError> {
        self.validate()?;
        let c = cluster.c_avg();
        if !(self.c_l < c && c < self.c_h) {
            return Err(SchedError::InvalidConfig(format!(
                "cluster ratio {c:.3} is not inside ({}, {})",
                self.c_l, self.c_h
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Zone {
    /// Ratio below `c_l`: physical space fills first.
    A,
    B,
    C,
    /// Ratio above `c_h`: logical space fills first.
    D,
}

impl Zone {
    pub fn name(self) -> &'static str {
        match self {
            Zone::A => "A",
            Zone::B => "B",
            Zone::C => "C",
            Zone::D => "D",
        }
    }
}

/// Zone of a node by ratio. Exactly `c_avg` is B; exactly `c_l` or `c_h`
/// is in range.
pub fn classify_zone(node: &NodeState, cfg: &SchedulerConfig, c_avg: f64) -> Zone {
    let r = node.ratio();
    if r < cfg.c_l {
        Zone::A
    } else if r > cfg.c_h {
        Zone::D
    } else if r <= c_avg {
        Zone::B
    } else {
        Zone::C
    }
}

/// Whether the node sits inside `w_avg ± delta` on the logical axis.
pub fn in_band(node: &NodeState, cfg: &SchedulerConfig, w_avg: f64) -> bool {
    (node.logical_fraction() - w_avg).abs() <= cfg.delta + 1e-12
}

fn node_violation(n: &NodeState, cfg: &SchedulerConfig) -> f64 {
    if n.physical_used == 0 {
        return 0.0;
    }
    let r = n.ratio();
    n.logical_capacity as f64 * (cfg.c_l - r).max(r - cfg.c_h).max(0.0)
}

/// Sum over nodes of the distance of each ratio from `[c_l, c_h]`, weighted
/// by logical capacity in bytes. Capacity rather than usage keeps a node
/// from lowering the measure by shedding chunks that leave its ratio as is.
pub fn violation(cluster: &Cluster, cfg: &SchedulerConfig) -> f64 {
    cluster.nodes.iter().map(|n| node_violation(n, cfg)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub chunk_id: u64,
    pub src: usize,
    pub dst: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MoveStats {
    pub moves: usize,
    pub logical_bytes: u64,
    pub physical_bytes: u64,
}

/// Violation after moving `c` from `src` to `dst`, counting only those two
/// nodes.
fn pair_violation_after(src: &NodeState, dst: &NodeState, c: &ChunkStats, cfg: &SchedulerConfig) -> f64 {
    let mut s = src.clone_shallow();
    s.logical_used -= c.logical_bytes;
    s.physical_used -= c.physical_bytes;
    let mut d = dst.clone_shallow();
    d.logical_used += c.logical_bytes;
    d.physical_used += c.physical_bytes;
    node_violation(&s, cfg) + node_violation(&d, cfg)
}

impl NodeState {
    /// Copy without the chunk list, for what-if arithmetic.
    fn clone_shallow(&self) -> NodeState {
        NodeState { chunks: Vec::new(), ..*self }
    }
}

/// Plans chunk moves toward `[c_l, c_h]`.
///
/// Violating nodes in the band are served worst first. A Zone-A node sends
/// its lowest-ratio chunks to D, then C, then B nodes; a Zone-D node sends
/// its highest-ratio chunks to A, then B, then C nodes. A move is taken only
/// if it keeps the destination under the block threshold and strictly lowers
/// the violation measure, so planning always terminates.
pub fn plan_migrations(cluster: &Cluster, cfg: &SchedulerConfig) -> Vec<Move> {
    let mut work = cluster.clone();
    let c_avg = cluster.c_avg();
    let w_avg = cluster.w_avg();
    let mut plan = Vec::new();
    loop {
        let zones: Vec<Option<Zone>> = work
            .nodes
            .iter()
            .map(|n| (n.physical_used > 0 && in_band(n, cfg, w_avg)).then(|| classify_zone(n, cfg, c_avg)))
            .collect();
        let mut violators: Vec<usize> = (0..work.nodes.len())
            .filter(|&i| matches!(zones[i], Some(Zone::A) | Some(Zone::D)))
            .collect();
        violators.sort_by(|&a, &b| {
            node_violation(&work.nodes[b], cfg)
                .total_cmp(&node_violation(&work.nodes[a], cfg))
                .then(work.nodes[a].node_id.cmp(&work.nodes[b].node_id))
        });
        let mut found = None;
        'search: for &v in &violators {
            let from_a = zones[v] == Some(Zone::A);
            let pref: [Zone; 3] = if from_a { [Zone::D, Zone::C, Zone::B] } else { [Zone::A, Zone::B, Zone::C] };
            let mut dests: Vec<usize> = (0..work.nodes.len()).filter(|&i| i != v && zones[i].is_some()).collect();
            dests.sort_by_key(|&i| {
                let rank = pref.iter().position(|z| Some(*z) == zones[i]).unwrap_or(3);
                (rank, work.nodes[i].logical_used, work.nodes[i].node_id)
            });
            dests.retain(|&i| zones[i].is_some_and(|z| pref.contains(&z)));
            let mut chunks: Vec<ChunkStats> = work.nodes[v].chunks.clone();
            chunks.sort_by(|a, b| {
                let o = a.ratio().total_cmp(&b.ratio());
                if from_a { o } else { o.reverse() }.then(a.chunk_id.cmp(&b.chunk_id))
            });
            for c in &chunks {
                for &d in &dests {
                    let dst = &work.nodes[d];
                    if !dst.fits(c, cfg.block_threshold) {
                        continue;
                    }
                    let src = &work.nodes[v];
                    let before = node_violation(src, cfg) + node_violation(dst, cfg);
                    let after = pair_violation_after(src, dst, c, cfg);
                    if after < before - 1e-12 {
                        found = Some(Move { chunk_id: c.chunk_id, src: src.node_id, dst: dst.node_id });
                        break 'search;
                    }
                }
            }
        }
        match found {
            Some(m) => {
                apply_move(&mut work, m, cfg.block_threshold).expect("planned move is legal");
                plan.push(m);
            }
            None => return plan,
        }
    }
}

fn apply_move(cluster: &mut Cluster, m: Move, threshold: f64) -> Result<ChunkStats, SchedError> {
    let illegal = |reason: &str| SchedError::IllegalMove { chunk_id: m.chunk_id, src: m.src, dst: m.dst, reason: reason.into() };
    let s = cluster.node_index(m.src).ok_or_else(|| illegal("unknown source node"))?;
    let d = cluster.node_index(m.dst).ok_or_else(|| illegal("unknown destination node"))?;
    if s == d {
        return Err(illegal("source and destination are the same node"));
    }
    let c = *cluster.nodes[s].chunks.iter().find(|c| c.chunk_id == m.chunk_id).ok_or_else(|| illegal("chunk is not on the source node"))?;
    if !cluster.nodes[d].fits(&c, threshold) {
        return Err(illegal("destination would pass the block threshold"));
    }
    cluster.nodes[s].remove_chunk(m.chunk_id);
    cluster.nodes[d].add_chunk(c);
    Ok(c)
}

/// Applies `plan` in order. Each move is checked against the current state,
/// including the block threshold; the cluster is left untouched on error.
pub fn apply_plan(cluster: &Cluster, plan: &[Move], cfg: &SchedulerConfig) -> Result<(Cluster, MoveStats), SchedError> {
    let mut out = cluster.clone();
    let mut stats = MoveStats::default();
    for &m in plan {
        let c = apply_move(&mut out, m, cfg.block_threshold)?;
        stats.moves += 1;
        stats.logical_bytes += c.logical_bytes;
        stats.physical_bytes += c.physical_bytes;
    }
    Ok((out, stats))
}

/// The node a new chunk goes to: the lowest logical usage among nodes under
/// the block threshold on both axes, lowest id on ties.
pub fn allocate_chunk(cluster: &Cluster, cfg: &SchedulerConfig) -> Result<usize, SchedError> {
    cluster
        .nodes
        .iter()
        .filter(|n| n.logical_fraction() < cfg.block_threshold && n.physical_fraction() < cfg.block_threshold)
        .min_by_key(|n| (n.logical_used, n.node_id))
        .map(|n| n.node_id)
        .ok_or(SchedError::ClusterFull)
}

/// Moves chunks off nodes whose logical usage passes `w_avg` by the
/// migrate trigger, each to the node with the lowest logical usage.
pub fn plan_logical_balance(cluster: &Cluster, cfg: &SchedulerConfig) -> Vec<Move> {
    let mut work = cluster.clone();
    let limit = work.w_avg() * (1.0 + cfg.migrate_trigger);
    let mut plan = Vec::new();
    let mut order: Vec<usize> = (0..work.nodes.len()).collect();
    order.sort_by(|&a, &b| work.nodes[b].logical_used.cmp(&work.nodes[a].logical_used).then(a.cmp(&b)));
    for s in order {
        while work.nodes[s].logical_fraction() > limit {
            // smallest chunk first keeps the overshoot on the receiver small
            let Some(c) = work.nodes[s].chunks.iter().min_by_key(|c| (c.logical_bytes, c.chunk_id)).copied() else {
                break;
            };
            let dst = (0..work.nodes.len())
                .filter(|&d| d != s && work.nodes[d].fits(&c, cfg.block_threshold))
                .min_by_key(|&d| (work.nodes[d].logical_used, work.nodes[d].node_id));
            let Some(d) = dst else { break };
            if work.nodes[d].logical_used + c.logical_bytes >= work.nodes[s].logical_used {
                break;
            }
            let m = Move { chunk_id: c.chunk_id, src: work.nodes[s].node_id, dst: work.nodes[d].node_id };
            apply_move(&mut work, m, cfg.block_threshold).expect("checked above");
            plan.push(m);
        }
    }
    plan
}
