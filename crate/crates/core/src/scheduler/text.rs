//! Line-oriented text formats.
//!
//! A population spec is a list of `key = value` lines (TOML).
//!
//! A cluster file holds one record per line, `#` starting a comment:
//!
//! ```text
//! node id=<usize> logical_capacity=<bytes> physical_capacity=<bytes>
//! chunk id=<u64> node=<usize> logical=<bytes> physical=<bytes>
//! ```
//!
//! Chunks may only name nodes declared above them. Reports use the same
//! `key=value` style with a fixed field order:
//!
//! ```text
//! node id logical_used physical_used ratio zone chunks
//! step t A B C D out_of_band in_range wasted_logical_pct wasted_physical_pct violation moves balance_moves bytes_moved arrivals
//! ```

use std::collections::HashMap;

use serde::de::DeserializeOwned;

use super::{ChunkStats, Cluster, NodeState, PopulationSpec, SchedError, SchedulerConfig, StepReport, Zone};

fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T, SchedError> {
    toml::from_str(text).map_err(|e| SchedError::Parse {
        line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        msg: e.message().to_string(),
    })
}

pub fn parse_population(text: &str) -> Result<PopulationSpec, SchedError> {
    let spec: PopulationSpec = parse_toml(text)?;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_sched_config(text: &str) -> Result<SchedulerConfig, SchedError> {
    let cfg: SchedulerConfig = parse_toml(text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn fields<'a>(line: usize, parts: impl Iterator<Item = &'a str>, keys: &[&str]) -> Result<Vec<u64>, SchedError> {
    let err = |msg: String| SchedError::Parse { line, msg };
    let mut map = HashMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| err(format!("expected key=value, got {p:?}")))?;
        if !keys.contains(&k) {
            return Err(err(format!("unknown key {k:?}")));
        }
        let v: u64 = v.parse().map_err(|_| err(format!("bad value for {k}: {v:?}")))?;
        if map.insert(k, v).is_some() {
            return Err(err(format!("duplicate key {k:?}")));
        }
    }
    keys.iter().map(|k| map.get(k).copied().ok_or_else(|| err(format!("missing key {k:?}")))).collect()
}

pub fn parse_cluster(text: &str) -> Result<Cluster, SchedError> {
    let mut cluster = Cluster::default();
    let mut seen_chunks = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap().trim();
        let mut parts = body.split_whitespace();
        let err = |msg: String| SchedError::Parse { line, msg };
        match parts.next() {
            None => continue,
            Some("node") => {
                let f = fields(line, parts, &["id", "logical_capacity", "physical_capacity"])?;
                let id = f[0] as usize;
                if cluster.node_index(id).is_some() {
                    return Err(err(format!("node {id} declared twice")));
                }
                if f[1] == 0 || f[2] == 0 {
                    return Err(err("capacities must be positive".into()));
                }
                cluster.nodes.push(NodeState::new(id, f[1], f[2]));
            }
            Some("chunk") => {
                let f = fields(line, parts, &["id", "node", "logical", "physical"])?;
                let n = cluster.node_index(f[1] as usize).ok_or_else(|| err(format!("unknown node {}", f[1])))?;
                if f[3] == 0 {
                    return Err(err("physical bytes must be positive".into()));
                }
                if !seen_chunks.insert(f[0]) {
                    return Err(err(format!("chunk {} declared twice", f[0])));
                }
                cluster.nodes[n].add_chunk(ChunkStats { chunk_id: f[0], logical_bytes: f[2], physical_bytes: f[3] });
            }
            Some(other) => return Err(err(format!("unknown record {other:?}"))),
        }
    }
    Ok(cluster)
}

pub fn format_cluster(cluster: &Cluster) -> String {
    let mut out = String::new();
    for n in &cluster.nodes {
        out += &format!("node id={} logical_capacity={} physical_capacity={}\n", n.node_id, n.logical_capacity, n.physical_capacity);
    }
    for n in &cluster.nodes {
        for c in n.chunks() {
            out += &format!("chunk id={} node={} logical={} physical={}\n", c.chunk_id, n.node_id, c.logical_bytes, c.physical_bytes);
        }
    }
    out
}

pub fn format_node(node: &NodeState, zone: Option<Zone>) -> String {
    format!(
        "node id={} logical_used={} physical_used={} ratio={:.4} zone={} chunks={}",
        node.node_id,
        node.logical_used(),
        node.physical_used(),
        node.ratio(),
        zone.map_or("-", |z| z.name()),
        node.chunks().len()
    )
}

pub fn format_step(r: &StepReport) -> String {
    format!(
        "step t={} A={} B={} C={} D={} out_of_band={} in_range={:.4} wasted_logical_pct={:.4} wasted_physical_pct={:.4} violation={:.6} moves={} balance_moves={} bytes_moved={} arrivals={}",
        r.step,
        r.zones[0],
        r.zones[1],
        r.zones[2],
        r.zones[3],
        r.out_of_band,
        r.in_range,
        r.wasted.logical_pct,
        r.wasted.physical_pct,
        r.violation,
        r.moves,
        r.balance_moves,
        r.bytes_moved,
        r.arrivals
    )
}
