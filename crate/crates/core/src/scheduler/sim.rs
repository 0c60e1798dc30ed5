//! Seeded cluster populations and the scheduling loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    allocate_chunk, apply_plan, classify_zone, in_band, plan_logical_balance, plan_migrations, violation, ChunkStats,
    Cluster, NodeState, SchedError, SchedulerConfig, Zone,
};

/// A synthetic cluster. Each node draws a lognormal affinity factor, standing
/// in for the tenants it happens to host, and each chunk's ratio is
/// `ratio_median * exp(node_sigma * z_node + chunk_sigma * z_chunk)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSpec {
    pub nodes: usize,
    pub logical_capacity: u64,
    pub physical_capacity: u64,
    pub chunk_logical_bytes: u64,
    /// Initial logical fill of every node.
    pub fill: f64,
    pub ratio_median: f64,
    pub node_sigma: f64,
    pub chunk_sigma: f64,
    /// New chunks placed each step by the allocator.
    pub arrivals_per_step: usize,
    pub seed: u64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            nodes: 100,
            logical_capacity: 4 << 40,
            physical_capacity: (4u64 << 40) * 2 / 7,
            chunk_logical_bytes: 10 << 30,
            fill: 0.6,
            ratio_median: 3.5,
            node_sigma: 0.12,
            chunk_sigma: 0.3,
            arrivals_per_step: 20,
            seed: 1,
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<(), SchedError> {
        let bad = |m: &str| Err(SchedError::InvalidConfig(m.into()));
        if self.nodes == 0 || self.logical_capacity == 0 || self.physical_capacity == 0 {
            return bad("nodes and capacities must be positive");
        }
        if self.chunk_logical_bytes == 0 || self.chunk_logical_bytes > self.logical_capacity {
            return bad("chunk size must be positive and fit a node");
        }
        if !(0.0..=1.0).contains(&self.fill) || self.ratio_median < 1.0 || self.node_sigma < 0.0 || self.chunk_sigma < 0.0 {
            return bad("fill in [0, 1], ratio_median >= 1 and non-negative sigmas required");
        }
        Ok(())
    }

    fn chunk(&self, id: u64, ln_ratio: f64) -> ChunkStats {
        let ratio = (self.ratio_median * ln_ratio.exp()).max(1.0);
        let logical = self.chunk_logical_bytes;
        ChunkStats { chunk_id: id, logical_bytes: logical, physical_bytes: (logical as f64 / ratio).ceil() as u64 }
    }

    /// The initial cluster.
    pub fn build(&self) -> Result<Cluster, SchedError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut cluster = Cluster::default();
        let mut next = 0u64;
        for i in 0..self.nodes {
            let mut node = NodeState::new(i, self.logical_capacity, self.physical_capacity);
            let z_node: f64 = StandardNormal.sample(&mut rng);
            while node.logical_used() + self.chunk_logical_bytes <= (self.fill * self.logical_capacity as f64) as u64 {
                let z: f64 = StandardNormal.sample(&mut rng);
                node.add_chunk(self.chunk(next, self.node_sigma * z_node + self.chunk_sigma * z));
                next += 1;
            }
            cluster.nodes.push(node);
        }
        Ok(cluster)
    }
}

/// Space stranded by ratio imbalance. A node compressing worse than the
/// cluster fills its physical space while `logical_capacity - physical_capacity
/// * ratio` of logical space stays unusable; a node compressing better strands
/// `physical_capacity - logical_capacity / ratio` of physical space.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wasted {
    pub below_avg_nodes: usize,
    pub above_avg_nodes: usize,
    /// Percent of total logical capacity.
    pub logical_pct: f64,
    /// Percent of total physical capacity.
    pub physical_pct: f64,
}

pub fn wasted_space(cluster: &Cluster) -> Wasted {
    let c_avg = cluster.c_avg();
    let mut w = Wasted::default();
    let (mut logical, mut physical) = (0.0, 0.0);
    for n in cluster.nodes.iter().filter(|n| n.physical_used() > 0) {
        let r = n.ratio();
        if r < c_avg {
            w.below_avg_nodes += 1;
            logical += (n.logical_capacity as f64 - n.physical_capacity as f64 * r).max(0.0);
        } else if r > c_avg {
            w.above_avg_nodes += 1;
            physical += (n.physical_capacity as f64 - n.logical_capacity as f64 / r).max(0.0);
        }
    }
    w.logical_pct = 100.0 * logical / cluster.logical_capacity() as f64;
    w.physical_pct = 100.0 * physical / cluster.physical_capacity() as f64;
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    /// Node counts in zones A, B, C, D among nodes inside the band.
    pub zones: [usize; 4],
    pub out_of_band: usize,
    pub in_range: f64,
    pub wasted: Wasted,
    pub violation: f64,
    /// Ratio-balancing moves applied this step.
    pub moves: usize,
    /// Logical-balancing moves applied this step.
    pub balance_moves: usize,
    pub bytes_moved: u64,
    pub arrivals: usize,
    pub cluster_full: bool,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub reports: Vec<StepReport>,
    pub cluster: Cluster,
}

fn report(cluster: &Cluster, cfg: &SchedulerConfig, step: usize) -> StepReport {
    let (c_avg, w_avg) = (cluster.c_avg(), cluster.w_avg());
    let mut zones = [0usize; 4];
    let mut out_of_band = 0;
    for n in cluster.nodes.iter().filter(|n| n.physical_used() > 0) {
        if in_band(n, cfg, w_avg) {
            let z = classify_zone(n, cfg, c_avg);
            zones[[Zone::A, Zone::B, Zone::C, Zone::D].iter().position(|x| *x == z).unwrap()] += 1;
        } else {
            out_of_band += 1;
        }
    }
    StepReport {
        step,
        zones,
        out_of_band,
        in_range: cluster.in_range_fraction(cfg),
        wasted: wasted_space(cluster),
        violation: violation(cluster, cfg),
        moves: 0,
        balance_moves: 0,
        bytes_moved: 0,
        arrivals: 0,
        cluster_full: false,
    }
}

/// Builds the population and runs `steps` rounds of arrivals, logical
/// balancing and ratio balancing. Step 0 reports the initial state.
pub fn simulate(spec: &PopulationSpec, cfg: &SchedulerConfig, steps: usize) -> Result<Simulation, SchedError> {
    let cluster = spec.build()?;
    cfg.validate_for(&cluster)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let mut next_id = cluster.chunk_count() as u64;
    let sigma = (spec.node_sigma.powi(2) + spec.chunk_sigma.powi(2)).sqrt();
    let mut arrivals = |cluster: &mut Cluster, r: &mut StepReport| {
        for _ in 0..spec.arrivals_per_step {
            let z: f64 = StandardNormal.sample(&mut rng);
            let c = spec.chunk(next_id, sigma * z);
            match allocate_chunk(cluster, cfg) {
                Ok(id) => {
                    let i = cluster.nodes.iter().position(|n| n.node_id == id).unwrap();
                    cluster.nodes[i].add_chunk(c);
                    next_id += 1;
                    r.arrivals += 1;
                }
                Err(_) => {
                    r.cluster_full = true;
                    break;
                }
            }
        }
    };
    run(cluster, cfg, steps, &mut arrivals)
}

/// Runs the scheduling loop on a given cluster with no arrivals.
pub fn simulate_cluster(cluster: Cluster, cfg: &SchedulerConfig, steps: usize) -> Result<Simulation, SchedError> {
    cfg.validate_for(&cluster)?;
    run(cluster, cfg, steps, &mut |_, _| {})
}

fn run(
    mut cluster: Cluster,
    cfg: &SchedulerConfig,
    steps: usize,
    arrivals: &mut dyn FnMut(&mut Cluster, &mut StepReport),
) -> Result<Simulation, SchedError> {
    let mut reports = vec![report(&cluster, cfg, 0)];
    for step in 1..=steps {
        let mut r = report(&cluster, cfg, step);
        arrivals(&mut cluster, &mut r);
        let balance = plan_logical_balance(&cluster, cfg);
        let (c, s1) = apply_plan(&cluster, &balance, cfg)?;
        let plan = plan_migrations(&c, cfg);
        let (c, s2) = apply_plan(&c, &plan, cfg)?;
        cluster = c;
        let mut done = report(&cluster, cfg, step);
        done.arrivals = r.arrivals;
        done.cluster_full = r.cluster_full;
        done.balance_moves = s1.moves;
        done.moves = s2.moves;
        done.bytes_moved = s1.logical_bytes + s2.logical_bytes;
        reports.push(done);
    }
    Ok(Simulation { reports, cluster })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub c_l: f64,
    pub c_h: f64,
    pub moves: usize,
    pub in_range: f64,
}

/// Runs the simulation once per `(c_l, c_h)` candidate and reports the move
/// count and final in-range fraction of each.
pub fn sweep(spec: &PopulationSpec, candidates: &[(f64, f64)], steps: usize) -> Result<Vec<SweepRow>, SchedError> {
    candidates
        .iter()
        .map(|&(c_l, c_h)| {
            let cfg = SchedulerConfig { c_l, c_h, ..SchedulerConfig::default() };
            let sim = simulate(spec, &cfg, steps)?;
            let moves = sim.reports.iter().map(|r| r.moves + r.balance_moves).sum();
            Ok(SweepRow { c_l, c_h, moves, in_range: sim.reports.last().unwrap().in_range })
        })
        .collect()
}
