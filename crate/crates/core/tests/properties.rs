use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;

use dualstore::codec::{
    build_heavy_segment, compress_page, decompress_page, padded_len, Algorithm, HeavyConfig, ModelLatency,
    SelectionHints, SelectorConfig,
};
use dualstore::csd::{decode_entry, encode_entry, stored_block_len, Csd, DeviceConfig, EntryFormat, L2PEntry};
use dualstore::space::{Allocator, SpaceState};
use dualstore::workload::{corpus_report, generate_page, CompressibilitySpec, Generator, Pipeline, ReportConfig};
use dualstore::{BlockRun, ChunkId, BLOCK_SIZE, PAGE_SIZE};

/// A page built from a few repeated random fragments, so compressibility
/// varies across cases.
fn page() -> impl Strategy<Value = Vec<u8>> {
    (prop::collection::vec(any::<u8>(), 1..64), 0usize..PAGE_SIZE, any::<u8>()).prop_map(|(frag, noise, fill)| {
        let mut p: Vec<u8> = frag.iter().copied().cycle().take(PAGE_SIZE).collect();
        for (i, b) in p.iter_mut().take(noise).enumerate() {
            *b = b.wrapping_mul(31).wrapping_add((i as u8) ^ fill);
        }
        p
    })
}

fn block(seed: u64, kind: u8) -> Vec<u8> {
    let spec = match kind % 3 {
        0 => CompressibilitySpec::random(seed),
        1 => CompressibilitySpec::new(Generator::TextMix, 1.0, seed),
        _ => return vec![kind; BLOCK_SIZE],
    };
    generate_page(&spec, seed)[..BLOCK_SIZE].to_vec()
}

#[derive(Debug, Clone)]
enum DevOp {
    Write(u64, u64, u8),
    Trim(u64, u64),
    Gc,
}

fn dev_op() -> impl Strategy<Value = DevOp> {
    prop_oneof![
        6 => (0u64..64, any::<u64>(), any::<u8>()).prop_map(|(l, s, k)| DevOp::Write(l, s, k)),
        2 => (0u64..64, 1u64..8).prop_map(|(l, n)| DevOp::Trim(l, n)),
        1 => Just(DevOp::Gc),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn device_reads_back_last_write(ops in prop::collection::vec(dev_op(), 1..120), v1 in any::<bool>()) {
        let format = if v1 { EntryFormat::V1 } else { EntryFormat::V2 };
        let dev = Csd::new(DeviceConfig {
            logical_capacity: 256 * BLOCK_SIZE as u64,
            physical_capacity: 2 << 20,
            entry_format: format,
            ..DeviceConfig::default()
        }).unwrap();
        let mut shadow: HashMap<u64, Vec<u8>> = HashMap::new();
        for op in ops {
            match op {
                DevOp::Write(lba, seed, kind) => {
                    let b = block(seed, kind);
                    dev.write_block(lba, &b).unwrap();
                    shadow.insert(lba, b);
                }
                DevOp::Trim(lba, n) => {
                    dev.trim(lba, n);
                    for l in lba..lba + n {
                        shadow.remove(&l);
                    }
                }
                DevOp::Gc => {
                    dev.run_gc();
                }
            }
        }
        let live: u64 = shadow.values().map(|b| stored_block_len(b, 5, format) as u64).sum();
        let st = dev.device_stats();
        prop_assert_eq!(st.physical_live, live);
        prop_assert_eq!(st.logical_used, shadow.len() as u64 * BLOCK_SIZE as u64);
        prop_assert!(st.physical_live <= st.physical_used);
        let (logical, used, recount) = dev.recompute_usage();
        prop_assert_eq!((logical, recount), (st.logical_used, st.physical_live));
        prop_assert!(used <= 2 << 20);
        for (lba, b) in &shadow {
            prop_assert_eq!(&dev.read_block(*lba).unwrap(), b);
        }
    }

    #[test]
    fn entries_roundtrip(segment in 0u32..1 << 20, frame in 0u32..256, inner in 0u32..4096, length in 1u32..4096, raw in any::<bool>()) {
        let length = if raw { 4096 } else { length };
        let e = L2PEntry { segment, offset: frame * 4096 + inner, length, raw };
        let v1 = encode_entry(&e, EntryFormat::V1).unwrap();
        prop_assert_eq!(v1.len(), 8);
        prop_assert_eq!(decode_entry(&v1, EntryFormat::V1).unwrap(), e);
        let aligned = L2PEntry { offset: e.offset / 16 * 16, length: if raw { 4096 } else { EntryFormat::V2.round_len(length).min(4080) }, ..e };
        let v2 = encode_entry(&aligned, EntryFormat::V2).unwrap();
        prop_assert_eq!(v2.len(), 7);
        prop_assert_eq!(decode_entry(&v2, EntryFormat::V2).unwrap(), aligned);
        if inner % 16 != 0 {
            prop_assert!(encode_entry(&e, EntryFormat::V2).is_err());
        }
    }

    #[test]
    fn v2_rounding_never_undercounts(len in 1u32..4096) {
        let r = EntryFormat::V2.round_len(len);
        prop_assert!(r >= len && r - len < 16 && r % 16 == 0);
        prop_assert_eq!(EntryFormat::V1.round_len(len), len);
    }

    #[test]
    fn pages_roundtrip_through_the_selector(p in page(), cpu in 0.0f64..1.0, upd in 0.0f64..1.0, last in 0u8..3) {
        let last = [Algorithm::Lz4, Algorithm::Zstd, Algorithm::None][last as usize];
        let hints = SelectionHints { cpu_utilization: cpu, update_fraction: upd };
        let (cp, d) = compress_page(&p, last, hints, &SelectorConfig::default(), &ModelLatency::default()).unwrap();
        prop_assert_eq!(cp.algorithm, d.stored);
        prop_assert!(cp.padded_len() <= PAGE_SIZE);
        prop_assert_eq!(cp.padded_len() % BLOCK_SIZE, 0);
        prop_assert_eq!(decompress_page(&cp).unwrap(), p);
    }

    #[test]
    fn alignment_never_saves_space(pages in prop::collection::vec(page(), 1..6)) {
        let cfg = ReportConfig::default();
        for pipeline in [Pipeline::Lz4Only, Pipeline::ZstdOnly, Pipeline::Adaptive] {
            let r = corpus_report(&pages, pipeline, &cfg).unwrap();
            prop_assert!(r.software_bytes <= r.software_aligned);
            prop_assert!(r.software_aligned <= r.logical);
            prop_assert!(r.min_per_page_aligned <= r.software_aligned || pipeline == Pipeline::Adaptive);
        }
    }

    #[test]
    fn padding_is_the_block_ceiling(len in 0usize..100_000) {
        let p = padded_len(len);
        prop_assert!(p >= len && p - len < BLOCK_SIZE && p % BLOCK_SIZE == 0);
    }

    #[test]
    fn heavy_members_extract_exactly(pages in prop::collection::vec(page(), 1..9)) {
        let refs: Vec<&[u8]> = pages.iter().map(|p| p.as_slice()).collect();
        let seg = build_heavy_segment(&refs, &HeavyConfig { unit_size: 8 * PAGE_SIZE as u64, zstd_level: 3 }).unwrap();
        prop_assert_eq!(seg.page_count(), pages.len());
        for (i, p) in pages.iter().enumerate() {
            prop_assert_eq!(&seg.extract_page(i).unwrap(), p);
        }
        prop_assert!(seg.extract_page(pages.len()).is_err());
    }

    #[test]
    fn allocator_never_hands_out_a_block_twice(
        reqs in prop::collection::vec((0u32..3, 1u32..40, any::<bool>()), 1..80)
    ) {
        let mut a = Allocator::new(16);
        let mut held: Vec<(ChunkId, BlockRun)> = Vec::new();
        let mut owned: BTreeSet<u64> = BTreeSet::new();
        for (chunk, n, free) in reqs {
            if free && !held.is_empty() {
                let (c, run) = held.remove(n as usize % held.len());
                a.apply_free(c, run).unwrap();
                for b in run.blocks() {
                    prop_assert!(owned.remove(&b.0));
                }
                prop_assert!(a.apply_free(c, run).is_err());
                continue;
            }
            let c = ChunkId(chunk);
            let Ok(run) = a.plan(c, n) else { continue };
            a.apply_alloc(c, run).unwrap();
            prop_assert_eq!(run.len, n);
            for b in run.blocks() {
                prop_assert!(owned.insert(b.0), "block {} allocated twice", b.0);
                prop_assert!(a.is_allocated(b.0));
            }
            prop_assert_eq!(a.owner_of(run), Some(c));
            held.push((c, run));
        }
        prop_assert_eq!(a.allocated_blocks(), owned.len() as u64);
        prop_assert_eq!(a.owned_extents() + a.free_extents(), 16);
        // chunks never share an extent
        let mut seen = BTreeSet::new();
        for bm in a.chunks().values() {
            for (e, _) in &bm.extents {
                prop_assert!(seen.insert(*e));
            }
        }
    }

    #[test]
    fn checkpoint_bytes_roundtrip(reqs in prop::collection::vec((0u32..2, 1u32..20), 0..20)) {
        let mut s = SpaceState::new(8);
        for (chunk, n) in reqs {
            if let Ok(run) = s.alloc.plan(ChunkId(chunk), n) {
                s.alloc.apply_alloc(ChunkId(chunk), run).unwrap();
            }
        }
        let bytes = s.to_checkpoint_bytes();
        prop_assert_eq!(SpaceState::from_checkpoint_bytes(&bytes).unwrap(), s.clone());
        prop_assert_eq!(s.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn generators_are_deterministic(seed in any::<u64>(), index in 0u64..1000, g in 0u8..3, ratio in 1.0f64..10.0) {
        let spec = match g {
            0 => CompressibilitySpec::random(seed),
            1 => CompressibilitySpec::new(Generator::TextMix, 1.0, seed),
            _ => CompressibilitySpec::new(Generator::RepeatFill, ratio, seed),
        };
        let a = generate_page(&spec, index);
        prop_assert_eq!(a.len(), PAGE_SIZE);
        prop_assert_eq!(&a, &generate_page(&spec, index));
        prop_assert_ne!(a, generate_page(&spec, index + 1));
    }
}

#[test]
fn ablation_is_monotone_on_the_bundled_corpus() {
    let pages = dualstore::workload::load_corpus(&dualstore::workload::bundled_corpus_dir()).unwrap();
    let r = corpus_report(&pages, Pipeline::ZstdOnly, &ReportConfig::default()).unwrap();
    assert!(r.hardware_ratio() >= 1.0, "{r:?}");
    assert!(r.dual_ratio() >= r.hardware_ratio(), "{r:?}");
}
