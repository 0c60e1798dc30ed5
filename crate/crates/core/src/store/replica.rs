//! In-process replication harness.
//!
//! A fixed leader ships every durable operation to `n` replica state
//! machines and waits for a majority. Faults are injected per replica and
//! message loss is drawn from a seeded RNG, so runs are reproducible.
//! Replicas that missed operations are caught up on their next delivery.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::redo::{RedoKind, RedoRecord};
use crate::codec::{decompress_payload, decompress_unit, Algorithm};
use crate::{Lsn, PageId, PAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    Healthy,
    /// Receives nothing and acknowledges nothing.
    Stalled,
    /// Each delivery is lost with this probability.
    Drop(f64),
}

/// A stored page image as shipped to replicas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Image {
    Single { algorithm: Algorithm, payload: Arc<Vec<u8>> },
    Unit { payload: Arc<Vec<u8>>, index: u16, page_count: u16 },
}

impl Image {
    pub fn decode(&self) -> Result<Vec<u8>, String> {
        match self {
            Image::Single { algorithm, payload } => decompress_payload(*algorithm, payload).map_err(|e| e.to_string()),
            Image::Unit { payload, index, page_count } => {
                let unit = decompress_unit(payload, *page_count as usize).map_err(|e| e.to_string())?;
                let o = *index as usize * PAGE_SIZE;
                Ok(unit[o..o + PAGE_SIZE].to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplOp {
    PageImage { page: PageId, lsn: Lsn, image: Image },
    Redo(Arc<Vec<RedoRecord>>),
    Archive { members: Vec<(PageId, Lsn)>, payload: Arc<Vec<u8>> },
    SlotWrite { page: PageId, bytes: Arc<Vec<u8>> },
}

/// Materialized view kept by each replica.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplicaView {
    pub pages: HashMap<PageId, (Lsn, Image)>,
    pub redo: BTreeMap<Lsn, RedoRecord>,
    pub slots: HashMap<PageId, Arc<Vec<u8>>>,
}

impl ReplicaView {
    fn apply(&mut self, op: &ReplOp) {
        match op {
            ReplOp::PageImage { page, lsn, image } => {
                self.pages.insert(*page, (*lsn, image.clone()));
                self.drop_applied(*page, *lsn);
            }
            ReplOp::Redo(recs) => {
                for r in recs.iter() {
                    if r.kind == RedoKind::Drop {
                        self.pages.remove(&r.page_id);
                        self.drop_applied(r.page_id, r.lsn);
                    }
                    self.redo.insert(r.lsn, r.clone());
                }
            }
            ReplOp::Archive { members, payload } => {
                let count = members.len() as u16;
                for (i, (page, lsn)) in members.iter().enumerate() {
                    let image = Image::Unit { payload: payload.clone(), index: i as u16, page_count: count };
                    self.pages.insert(*page, (*lsn, image));
                    self.drop_applied(*page, *lsn);
                }
            }
            ReplOp::SlotWrite { page, bytes } => {
                self.slots.insert(*page, bytes.clone());
            }
        }
    }

    fn drop_applied(&mut self, page: PageId, lsn: Lsn) {
        self.redo.retain(|l, r| !(r.page_id == page && *l <= lsn));
    }

    /// The page as of `at_lsn`, or `None` when the view knows nothing of it.
    pub fn read_page(&self, page: PageId, at_lsn: Lsn) -> Result<Option<Vec<u8>>, String> {
        let (mut data, base_lsn) = match self.pages.get(&page) {
            Some((lsn, img)) => (img.decode()?, *lsn),
            None => (vec![0u8; PAGE_SIZE], 0),
        };
        let mut any = self.pages.contains_key(&page);
        for r in self.redo.range(base_lsn + 1..=at_lsn).map(|(_, r)| r) {
            if r.page_id == page && r.kind == RedoKind::Patch {
                r.apply(&mut data);
                any = true;
            }
        }
        Ok(any.then_some(data))
    }

    pub fn durable_lsn(&self) -> Lsn {
        let redo = self.redo.keys().next_back().copied().unwrap_or(0);
        let pages = self.pages.values().map(|(l, _)| *l).max().unwrap_or(0);
        redo.max(pages)
    }
}

#[derive(Debug, Clone)]
struct Replica {
    fault: Fault,
    /// Sequence number of the last op applied to the view.
    applied: u64,
    /// Op received but not yet known to be committed.
    staged: Option<u64>,
    view: ReplicaView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReplicationStats {
    pub ops: u64,
    pub aborted: u64,
    pub deliveries: u64,
    pub drops: u64,
    pub catch_up: u64,
}

#[derive(Debug, Clone)]
pub struct ReplicaSet {
    replicas: Vec<Replica>,
    /// Ops not yet applied by every replica, by sequence number.
    log: BTreeMap<u64, ReplOp>,
    next_seq: u64,
    rng: ChaCha8Rng,
    stats: ReplicationStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuorumLost {
    pub acks: usize,
    pub needed: usize,
}

impl ReplicaSet {
    pub fn new(n: usize, seed: u64) -> Self {
        assert!(n % 2 == 1, "replica count must be odd");
        let fresh = || Replica { fault: Fault::Healthy, applied: 0, staged: None, view: ReplicaView::default() };
        ReplicaSet {
            replicas: (0..n).map(|_| fresh()).collect(),
            log: BTreeMap::new(),
            next_seq: 1,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: ReplicationStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    pub fn majority(&self) -> usize {
        self.replicas.len() / 2 + 1
    }

    pub fn set_fault(&mut self, replica: usize, fault: Fault) {
        self.replicas[replica].fault = fault;
    }

    pub fn fault(&self, replica: usize) -> Fault {
        self.replicas[replica].fault
    }

    pub fn stats(&self) -> ReplicationStats {
        self.stats
    }

    pub fn view(&self, replica: usize) -> &ReplicaView {
        &self.replicas[replica].view
    }

    /// Sequence number of the last op each replica has applied.
    pub fn applied(&self) -> Vec<u64> {
        self.replicas.iter().map(|r| r.applied).collect()
    }

    /// Sends committed ops up to `committed` plus, optionally, the op being
    /// replicated. Returns whether the replica acknowledged.
    fn deliver(&mut self, i: usize, committed: u64, staged: Option<u64>) -> bool {
        let lost = match self.replicas[i].fault {
            Fault::Healthy => false,
            Fault::Stalled => true,
            Fault::Drop(p) => self.rng.random_bool(p.clamp(0.0, 1.0)),
        };
        if lost {
            self.stats.drops += 1;
            return false;
        }
        let r = &mut self.replicas[i];
        for (seq, op) in self.log.range(r.applied + 1..committed + 1) {
            r.view.apply(op);
            r.applied = *seq;
            self.stats.catch_up += 1;
        }
        r.staged = staged;
        self.stats.deliveries += 1;
        true
    }

    /// Ships `op` and returns once a majority holds it. On failure the op
    /// is discarded by every replica that received it.
    pub fn replicate(&mut self, op: ReplOp) -> Result<u64, QuorumLost> {
        let seq = self.next_seq;
        self.log.insert(seq, op);
        let mut order: Vec<usize> = (0..self.replicas.len()).collect();
        order.shuffle(&mut self.rng);
        let mut acks = 0;
        for i in order {
            if self.deliver(i, seq - 1, Some(seq)) {
                acks += 1;
            }
        }
        let needed = self.majority();
        let committed = acks >= needed;
        let op = &self.log[&seq];
        for r in self.replicas.iter_mut().filter(|r| r.staged == Some(seq)) {
            r.staged = None;
            if committed {
                r.view.apply(op);
                r.applied = seq;
            }
        }
        if !committed {
            self.log.remove(&seq);
            self.stats.aborted += 1;
            return Err(QuorumLost { acks, needed });
        }
        self.next_seq += 1;
        self.stats.ops += 1;
        let min = self.replicas.iter().map(|r| r.applied).min().unwrap_or(0);
        self.log = self.log.split_off(&(min + 1));
        Ok(seq)
    }

    /// Brings every reachable replica up to date. Returns how many were
    /// brought forward.
    pub fn catch_up(&mut self) -> usize {
        let upto = self.next_seq - 1;
        (0..self.replicas.len())
            .filter(|&i| self.replicas[i].applied < upto && self.deliver(i, upto, None))
            .count()
    }

    /// The most complete view among a subset of replicas. Any majority
    /// contains a replica holding every acknowledged op.
    pub fn recover_view(&self, subset: &[usize]) -> Option<&ReplicaView> {
        subset.iter().max_by_key(|&&i| self.replicas[i].applied).map(|&i| &self.replicas[i].view)
    }
}
