use super::*;
use crate::codec::FixedLatency;
use crate::csd::DeviceConfig;

fn store_with(cfg: StoreConfig) -> ChunkStore {
    let dev = Csd::new(DeviceConfig::default()).unwrap();
    ChunkStore::new(dev, cfg).unwrap()
}

fn store() -> ChunkStore {
    store_with(StoreConfig::default())
}

fn text_page(seed: u64) -> Vec<u8> {
    let words = ["order", "status", "shipped", "region", "north", "amount", "customer", "pending", "42", "0.17"];
    let mut out = Vec::with_capacity(PAGE_SIZE);
    let mut k = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    while out.len() < PAGE_SIZE {
        k ^= k << 13;
        k ^= k >> 7;
        k ^= k << 17;
        out.extend_from_slice(words[(k % words.len() as u64) as usize].as_bytes());
        out.push(b' ');
    }
    out.truncate(PAGE_SIZE);
    out
}

fn noise_page(seed: u64) -> Vec<u8> {
    let mut k = seed | 1;
    (0..PAGE_SIZE)
        .map(|_| {
            k ^= k << 13;
            k ^= k >> 7;
            k ^= k << 17;
            (k >> 24) as u8
        })
        .collect()
}

fn patch(lsn: Lsn, page: u64, off: u16, byte: u8, len: usize) -> RedoRecord {
    RedoRecord::patch(lsn, PageId(page), off, vec![byte; len])
}

#[test]
fn write_read_roundtrip() {
    let mut s = store();
    let p = text_page(1);
    s.write_page(PageId(1), &p, WriteMode::Normal, initial_hints()).unwrap();
    assert_eq!(s.read_page(PageId(1), 0).unwrap(), p);
    let e = s.index_entry(PageId(1)).unwrap();
    assert_eq!(e.location.mode(), WriteMode::Normal);
    assert!(e.location.run().len < 4);
    assert!(matches!(s.read_page(PageId(2), 0), Err(StoreError::NotFound(_))));
}

#[test]
fn incompressible_pages_are_stored_raw() {
    let mut s = store();
    s.write_page(PageId(1), &noise_page(3), WriteMode::Normal, initial_hints()).unwrap();
    let e = s.index_entry(PageId(1)).unwrap();
    assert_eq!(e.location.mode(), WriteMode::None);
    assert_eq!(e.location.run().len, 4);
    assert_eq!(s.read_page(PageId(1), 0).unwrap(), noise_page(3));
}

#[test]
fn write_at_forces_raw_layout() {
    let mut s = store();
    s.write_page(PageId(1), &text_page(2), WriteMode::Normal, initial_hints()).unwrap();
    s.write_at(PageId(1), 100, b"hello").unwrap();
    let mut want = text_page(2);
    want[100..105].copy_from_slice(b"hello");
    assert_eq!(s.read_page(PageId(1), 0).unwrap(), want);
    assert_eq!(s.index_entry(PageId(1)).unwrap().location.mode(), WriteMode::None);
    assert_eq!(s.metrics().forced_none, 1);
    assert!(matches!(s.write_at(PageId(1), 16380, b"hello"), Err(StoreError::BadRequest(_))));
}

#[test]
fn overwrite_frees_old_blocks() {
    let mut s = store();
    for i in 0..10 {
        s.write_page(PageId(1), &text_page(i), WriteMode::Normal, initial_hints()).unwrap();
    }
    let run = s.index_entry(PageId(1)).unwrap().location.run();
    assert_eq!(s.space().state().alloc.allocated_blocks(), run.len as u64);
    assert_eq!(s.device().device_stats().logical_used, run.len as u64 * BLOCK_SIZE as u64);
}

#[test]
fn fixed_policies() {
    let mut s = store();
    s.set_policy(CompressionPolicy::Zstd);
    s.write_page(PageId(1), &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    assert_eq!(s.index_entry(PageId(1)).unwrap().location.algorithm(), Algorithm::Zstd);
    s.set_policy(CompressionPolicy::Off);
    s.write_page(PageId(2), &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    assert_eq!(s.index_entry(PageId(2)).unwrap().location.algorithm(), Algorithm::None);
    assert_eq!(s.read_page(PageId(2), 0).unwrap(), text_page(1));
}

#[test]
fn adaptive_selection_follows_latency() {
    let mut s = store();
    // zstd decompresses as fast as lz4 here, so any byte saved wins
    s.set_probe(Box::new(FixedLatency { lz4_us: 5.0, zstd_us: 5.0 }));
    s.write_page(PageId(1), &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    assert_eq!(s.index_entry(PageId(1)).unwrap().location.algorithm(), Algorithm::Zstd);
    // under CPU pressure lz4 is taken without evaluation
    let busy = SelectionHints { cpu_utilization: 0.9, update_fraction: 1.0 };
    s.write_page(PageId(2), &text_page(1), WriteMode::Normal, busy).unwrap();
    assert_eq!(s.index_entry(PageId(2)).unwrap().location.algorithm(), Algorithm::Lz4);
}

#[test]
fn redo_is_applied_by_lsn() {
    let mut s = store();
    let base = text_page(5);
    s.write_page(PageId(7), &base, WriteMode::Normal, initial_hints()).unwrap();
    let calls = s.metrics().compress_calls;
    s.write_redo(&[patch(1, 7, 0, 0xAA, 8), RedoRecord::txn_mark(2), patch(3, 7, 4, 0xBB, 8)]).unwrap();
    assert_eq!(s.metrics().compress_calls, calls, "redo path compresses nothing");
    assert_eq!(s.lsn_state().durable, 3);

    assert_eq!(s.read_page(PageId(7), 0).unwrap(), base);
    let at1 = s.read_page(PageId(7), 1).unwrap();
    assert_eq!(&at1[..8], &[0xAA; 8]);
    let at3 = s.read_page(PageId(7), 3).unwrap();
    assert_eq!(&at3[..12], &[0xAA, 0xAA, 0xAA, 0xAA, 0xBB, 0xBB, 0xBB, 0xBB, 0xBB, 0xBB, 0xBB, 0xBB]);
    assert!(matches!(s.read_page(PageId(7), 4), Err(StoreError::FutureLsn { requested: 4, durable: 3 })));
}

#[test]
fn redo_sequence_is_checked() {
    let mut s = store();
    assert!(matches!(s.write_redo(&[patch(2, 1, 0, 1, 1)]), Err(StoreError::BadRequest(_))));
    assert!(matches!(s.write_redo(&[patch(1, 1, 0, 1, 1), patch(3, 1, 0, 1, 1)]), Err(StoreError::BadRequest(_))));
    assert!(matches!(s.write_redo(&[patch(1, 1, 16383, 1, 2)]), Err(StoreError::BadRequest(_))));
    s.write_redo(&[patch(1, 1, 0, 1, 1)]).unwrap();
}

#[test]
fn redo_without_base_starts_from_zero_page() {
    let mut s = store();
    s.write_redo(&[patch(1, 9, 10, 3, 2)]).unwrap();
    let p = s.read_page(PageId(9), 1).unwrap();
    assert_eq!(&p[8..14], &[0, 0, 3, 3, 0, 0]);
}

#[test]
fn evicted_records_cost_one_read_per_page() {
    let mut s = store();
    s.write_page(PageId(1), &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    s.write_page(PageId(2), &text_page(2), WriteMode::Normal, initial_hints()).unwrap();
    let mut lsn = 0;
    for round in 0..20u8 {
        for page in [1, 2] {
            lsn += 1;
            s.write_redo(&[patch(lsn, page, round as u16 * 16, round, 16)]).unwrap();
        }
        s.evict_all().unwrap();
    }
    assert_eq!(s.pending_counts(PageId(1)).unwrap(), (0, 20, 0));
    let before = s.metrics().log_reads;
    let p = s.read_page(PageId(1), lsn).unwrap();
    assert_eq!(s.metrics().log_reads - before, 1);
    assert_eq!(&p[19 * 16..20 * 16], &[19u8; 16]);
    assert!(s.consolidate(PageId(1)).unwrap());
    assert_eq!(s.pending_counts(PageId(1)).unwrap(), (0, 0, 0));
    assert_eq!(s.read_page(PageId(1), lsn).unwrap(), p);
    assert_eq!(s.metrics().log_reads_per_consolidation.keys().copied().max(), Some(1));
}

#[test]
fn scattered_records_need_more_reads() {
    let mut s = store_with(StoreConfig { per_page_log: false, ..StoreConfig::default() });
    s.write_page(PageId(1), &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    let mut lsn = 0;
    for round in 0..20u16 {
        // interleave with other pages so page 1's records spread across the log
        for page in [1u64, 2, 3, 4, 5, 6, 7, 8] {
            lsn += 1;
            s.write_redo(&[patch(lsn, page, round * 8, page as u8, 100)]).unwrap();
        }
    }
    s.evict_all().unwrap();
    assert_eq!(s.pending_counts(PageId(1)).unwrap(), (0, 0, 20));
    let before = s.metrics().log_reads;
    let p = s.read_page(PageId(1), lsn).unwrap();
    assert!(s.metrics().log_reads - before > 1);
    let mut want = text_page(1);
    for round in 0..20usize {
        want[round * 8..round * 8 + 100].fill(1);
    }
    assert_eq!(p, want);
}

#[test]
fn cache_budget_triggers_eviction() {
    let mut s = store_with(StoreConfig { log_cache_budget: 4096, ..StoreConfig::default() });
    for lsn in 1..=100u64 {
        s.write_redo(&[patch(lsn, lsn % 10, 0, lsn as u8, 100)]).unwrap();
    }
    assert!(s.cached_bytes() <= 4096);
    assert!(s.metrics().slot_writes > 0);
    assert_eq!(s.read_page(PageId(3), 100).unwrap()[0], 93);
}

#[test]
fn slot_overflow_consolidates() {
    let mut s = store();
    let mut lsn = 0;
    for _ in 0..3 {
        let recs: Vec<RedoRecord> = (0..10)
            .map(|i| {
                lsn += 1;
                patch(lsn, 4, i * 200, lsn as u8, 200)
            })
            .collect();
        s.write_redo(&recs).unwrap();
        s.evict_logs(&[PageId(4)]).unwrap();
    }
    assert!(s.metrics().slot_overflows >= 1);
    let p = s.read_page(PageId(4), lsn).unwrap();
    for i in 0..10usize {
        assert_eq!(p[i * 200], 20 + i as u8 + 1);
    }
}

#[test]
fn readers_hold_back_consolidation() {
    let mut s = store();
    s.write_page(PageId(1), &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    s.write_redo(&[patch(1, 1, 0, 1, 4), patch(2, 1, 0, 2, 4)]).unwrap();
    s.register_reader(1, 1).unwrap();
    assert!(matches!(s.register_reader(2, 5), Err(StoreError::BadRequest(_))));
    assert_eq!(s.advance_apply_lsn().unwrap(), 1);
    assert_eq!(s.index_entry(PageId(1)).unwrap().page_lsn, 1);
    assert_eq!(s.read_page(PageId(1), 1).unwrap()[0], 1);
    assert_eq!(s.read_page(PageId(1), 2).unwrap()[0], 2);
    assert!(matches!(s.register_reader(3, 0), Err(StoreError::BadRequest(_))));
    s.remove_reader(1);
    assert_eq!(s.advance_apply_lsn().unwrap(), 2);
    assert_eq!(s.redo_log().used(), 0);
    assert_eq!(s.read_page(PageId(1), 2).unwrap()[0], 2);
}

#[test]
fn archive_groups_pages_into_segments() {
    let mut s = store();
    let pages: Vec<PageId> = (0..80).map(PageId).collect();
    for p in &pages {
        s.write_page(*p, &text_page(p.0 % 7), WriteMode::Normal, initial_hints()).unwrap();
    }
    let before = s.space().state().alloc.allocated_blocks();
    let r = s.archive_range(&pages).unwrap();
    assert_eq!(r.segments, 2);
    assert_eq!(r.pages_archived, 80);
    assert!(s.space().state().alloc.allocated_blocks() < before);
    for p in &pages {
        assert_eq!(s.read_page(*p, 0).unwrap(), text_page(p.0 % 7));
    }
    assert_eq!(s.metrics().unit_decompressions, 2);
    assert_eq!(s.metrics().heavy_segment_reads, 2);
    assert_eq!(s.metrics().unit_buffer_hits, 78);
    // rewriting every member releases the segment
    for p in &pages {
        s.write_page(*p, &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    }
    let blocks = s.index_entry(PageId(0)).unwrap().location.run().len as u64;
    assert_eq!(s.space().state().alloc.allocated_blocks(), 80 * blocks);
}

#[test]
fn archive_single_page_and_errors() {
    let mut s = store();
    s.write_page(PageId(1), &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    let r = s.archive_range(&[PageId(1)]).unwrap();
    assert_eq!(r.segments, 1);
    assert_eq!(s.index_entry(PageId(1)).unwrap().location.mode(), WriteMode::Heavy);
    assert_eq!(s.read_page(PageId(1), 0).unwrap(), text_page(1));
    assert!(matches!(s.archive_range(&[PageId(2)]), Err(StoreError::NotFound(_))));
    s.write_page(PageId(3), &noise_page(1), WriteMode::Normal, initial_hints()).unwrap();
    assert_eq!(s.archive_range(&[PageId(3)]).unwrap().pages_skipped, 1);
}

#[test]
fn archive_applies_pending_redo() {
    let mut s = store();
    s.write_page(PageId(1), &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    s.write_redo(&[patch(1, 1, 0, 9, 4)]).unwrap();
    s.archive_range(&[PageId(1)]).unwrap();
    assert_eq!(s.pending_counts(PageId(1)).unwrap(), (0, 0, 0));
    assert_eq!(s.read_page(PageId(1), 1).unwrap()[..4], [9; 4]);
}

#[test]
fn quorum_loss_leaves_no_trace() {
    let mut s = store();
    s.write_page(PageId(1), &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    s.replicas_mut().set_fault(0, Fault::Stalled);
    s.write_redo(&[patch(1, 1, 0, 1, 4)]).unwrap();
    s.replicas_mut().set_fault(1, Fault::Stalled);
    let blocks = s.space().state().alloc.allocated_blocks();
    let used = s.redo_log().used();
    assert!(matches!(
        s.write_page(PageId(2), &text_page(2), WriteMode::Normal, initial_hints()),
        Err(StoreError::ReplicationLost { acks: 1, needed: 2 })
    ));
    assert!(matches!(s.write_redo(&[patch(2, 1, 0, 2, 4)]), Err(StoreError::ReplicationLost { .. })));
    assert_eq!(s.space().state().alloc.allocated_blocks(), blocks);
    assert_eq!(s.redo_log().used(), used);
    assert_eq!(s.lsn_state().durable, 1);
    assert!(s.index_entry(PageId(2)).is_none());
    assert_eq!(s.device().device_stats().logical_used, blocks * BLOCK_SIZE as u64);

    s.replicas_mut().set_fault(0, Fault::Healthy);
    s.replicas_mut().set_fault(1, Fault::Healthy);
    s.write_redo(&[patch(2, 1, 0, 2, 4)]).unwrap();
    s.replicas_mut().catch_up();
    for i in 0..3 {
        let v = s.replicas().view(i).read_page(PageId(1), 2).unwrap().unwrap();
        assert_eq!(v, s.read_page(PageId(1), 2).unwrap());
    }
}

#[test]
fn crash_recovery_restores_acknowledged_state() {
    let mut s = store();
    let mut lsn = 0;
    for i in 0..30u64 {
        s.write_page(PageId(i), &text_page(i), WriteMode::Normal, initial_hints()).unwrap();
        lsn += 1;
        s.write_redo(&[patch(lsn, i, 8, i as u8, 32)]).unwrap();
        if i % 5 == 0 {
            s.evict_all().unwrap();
        }
    }
    s.archive_range(&(10..20).map(PageId).collect::<Vec<_>>()).unwrap();
    s.sync().unwrap();
    let expect: Vec<Vec<u8>> = (0..30).map(|i| s.read_page(PageId(i), lsn).unwrap()).collect();
    let index = s.space().state().index.clone();
    let mut alloc = s.space().state().alloc.clone();
    for run in s.slot_runs() {
        alloc.apply_free(ChunkId(0), run).unwrap();
    }

    let cfg = s.config().clone();
    let mut r = ChunkStore::recover(s.crash(0, 0), cfg).unwrap();
    assert_eq!(r.space().state().index, index);
    assert_eq!(r.space().state().alloc, alloc);
    assert_eq!(r.lsn_state().durable, lsn);
    for i in 0..30u64 {
        assert_eq!(r.read_page(PageId(i), lsn).unwrap(), expect[i as usize]);
    }
    assert_eq!(
        r.device().device_stats().logical_used,
        r.space().state().alloc.allocated_blocks() * BLOCK_SIZE as u64
    );
}

#[test]
fn removing_a_page_releases_its_device_bytes() {
    let mut s = store();
    s.write_page(PageId(1), &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    s.write_page(PageId(2), &text_page(2), WriteMode::Normal, initial_hints()).unwrap();
    let live = s.device().device_stats().physical_live;
    let stored = s.stored_bytes(PageId(1));
    assert!(stored > 0);
    s.remove_page(PageId(1)).unwrap();
    assert_eq!(s.device().device_stats().physical_live, live - stored);
    assert!(matches!(s.read_page(PageId(1), 0), Err(StoreError::NotFound(_))));
}

#[test]
fn removed_page_stays_removed_after_crash() {
    let mut s = store();
    s.write_page(PageId(1), &text_page(1), WriteMode::Normal, initial_hints()).unwrap();
    s.write_redo(&[patch(1, 1, 0, 7, 8), patch(2, 2, 0, 7, 8)]).unwrap();
    s.remove_page(PageId(1)).unwrap();
    assert_eq!(s.lsn_state().durable, 3);
    assert!(matches!(s.remove_page(PageId(9)), Err(StoreError::NotFound(_))));
    s.write_redo(&[patch(4, 2, 8, 9, 8)]).unwrap();
    let cfg = s.config().clone();
    let mut r = ChunkStore::recover(s.crash(0, 0), cfg).unwrap();
    assert!(matches!(r.read_page(PageId(1), 4), Err(StoreError::NotFound(_))));
    assert_eq!(r.read_page(PageId(2), 4).unwrap()[..16], [[7u8; 8], [9u8; 8]].concat()[..]);
    for i in 0..3 {
        assert_eq!(r.replicas().view(i).read_page(PageId(1), 4).unwrap(), None);
    }
}

mod replicas {
    use super::*;

    fn op(lsn: Lsn) -> ReplOp {
        ReplOp::Redo(Arc::new(vec![patch(lsn, 1, 0, lsn as u8, 1)]))
    }

    #[test]
    fn majority_commits() {
        let mut r = ReplicaSet::new(5, 1);
        r.set_fault(0, Fault::Stalled);
        r.set_fault(1, Fault::Stalled);
        assert_eq!(r.replicate(op(1)), Ok(1));
        r.set_fault(2, Fault::Stalled);
        assert_eq!(r.replicate(op(2)), Err(QuorumLost { acks: 2, needed: 3 }));
        // the aborted op reached two replicas but was never applied
        assert!(r.view(3).redo.get(&2).is_none());
        for i in 0..3 {
            r.set_fault(i, Fault::Healthy);
        }
        assert_eq!(r.catch_up(), 2);
        assert!(r.applied().iter().all(|&a| a == 1));
        assert_eq!(r.stats().aborted, 1);
    }

    #[test]
    fn lossy_links_are_reproducible() {
        let run = |seed| {
            let mut r = ReplicaSet::new(3, seed);
            for i in 0..3 {
                r.set_fault(i, Fault::Drop(0.3));
            }
            (1..=50).map(|l| r.replicate(op(l)).is_ok()).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn any_majority_recovers_committed_ops() {
        let mut r = ReplicaSet::new(3, 2);
        r.set_fault(2, Fault::Stalled);
        r.replicate(op(1)).unwrap();
        r.set_fault(2, Fault::Healthy);
        r.set_fault(0, Fault::Stalled);
        r.replicate(op(2)).unwrap();
        for subset in [[0, 1], [0, 2], [1, 2]] {
            let v = r.recover_view(&subset).unwrap();
            assert_eq!(v.read_page(PageId(1), 2).unwrap().unwrap()[0], 2);
        }
    }
}
