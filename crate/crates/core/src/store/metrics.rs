use std::collections::BTreeMap;

/// Counters kept by a [`super::ChunkStore`]. All counters only grow.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StoreMetrics {
    pub page_writes: u64,
    pub page_reads: u64,
    pub bytes_in: u64,
    /// Block bytes handed to the device for page data.
    pub bytes_out: u64,
    pub device_reads: u64,
    pub device_writes: u64,
    pub compress_calls: u64,
    pub decompress_calls: u64,
    pub compressed_bytes: u64,
    pub algo_lz4: u64,
    pub algo_zstd: u64,
    pub algo_none: u64,
    pub forced_none: u64,
    pub redo_records: u64,
    pub redo_bytes: u64,
    pub slot_writes: u64,
    pub slot_overflows: u64,
    pub log_reads: u64,
    pub consolidations: u64,
    /// Number of log reads needed per page materialization.
    pub log_reads_per_consolidation: BTreeMap<u32, u64>,
    pub heavy_segments_written: u64,
    pub heavy_segment_reads: u64,
    /// Bytes read from archived segments beyond the requested page's share.
    pub heavy_amplification_bytes: u64,
    pub unit_decompressions: u64,
    pub unit_buffer_hits: u64,
    pub replication_aborts: u64,
}

impl StoreMetrics {
    pub fn record_log_reads(&mut self, n: u32) {
        *self.log_reads_per_consolidation.entry(n).or_default() += 1;
    }

    /// Adds every counter of `other` into `self`.
    pub fn absorb(&mut self, other: &StoreMetrics) {
        let hist = other.log_reads_per_consolidation.clone();
        let sums: Vec<u64> = self.fields().iter().zip(other.fields()).map(|(a, b)| a.1 + b.1).collect();
        let mut it = sums.into_iter();
        for f in self.counters_mut() {
            *f = it.next().unwrap();
        }
        for (k, v) in hist {
            *self.log_reads_per_consolidation.entry(k).or_default() += v;
        }
    }

    fn counters_mut(&mut self) -> [&mut u64; 25] {
        [
            &mut self.page_writes,
            &mut self.page_reads,
            &mut self.bytes_in,
            &mut self.bytes_out,
            &mut self.device_reads,
            &mut self.device_writes,
            &mut self.compress_calls,
            &mut self.decompress_calls,
            &mut self.compressed_bytes,
            &mut self.algo_lz4,
            &mut self.algo_zstd,
            &mut self.algo_none,
            &mut self.forced_none,
            &mut self.redo_records,
            &mut self.redo_bytes,
            &mut self.slot_writes,
            &mut self.slot_overflows,
            &mut self.log_reads,
            &mut self.consolidations,
            &mut self.heavy_segments_written,
            &mut self.heavy_segment_reads,
            &mut self.heavy_amplification_bytes,
            &mut self.unit_decompressions,
            &mut self.unit_buffer_hits,
            &mut self.replication_aborts,
        ]
    }

    /// `name value` pairs in a fixed order.
    pub fn fields(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("page_writes", self.page_writes),
            ("page_reads", self.page_reads),
            ("bytes_in", self.bytes_in),
            ("bytes_out", self.bytes_out),
            ("device_reads", self.device_reads),
            ("device_writes", self.device_writes),
            ("compress_calls", self.compress_calls),
            ("decompress_calls", self.decompress_calls),
            ("compressed_bytes", self.compressed_bytes),
            ("algo_lz4", self.algo_lz4),
            ("algo_zstd", self.algo_zstd),
            ("algo_none", self.algo_none),
            ("forced_none", self.forced_none),
            ("redo_records", self.redo_records),
            ("redo_bytes", self.redo_bytes),
            ("slot_writes", self.slot_writes),
            ("slot_overflows", self.slot_overflows),
            ("log_reads", self.log_reads),
            ("consolidations", self.consolidations),
            ("heavy_segments_written", self.heavy_segments_written),
            ("heavy_segment_reads", self.heavy_segment_reads),
            ("heavy_amplification_bytes", self.heavy_amplification_bytes),
            ("unit_decompressions", self.unit_decompressions),
            ("unit_buffer_hits", self.unit_buffer_hits),
            ("replication_aborts", self.replication_aborts),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absorb_adds_everything() {
        let mut a = StoreMetrics { page_writes: 2, replication_aborts: 1, ..Default::default() };
        a.record_log_reads(1);
        let mut b = StoreMetrics { page_writes: 3, log_reads: 4, ..Default::default() };
        b.record_log_reads(1);
        b.record_log_reads(3);
        a.absorb(&b);
        assert_eq!((a.page_writes, a.log_reads, a.replication_aborts), (5, 4, 1));
        assert_eq!(a.log_reads_per_consolidation, BTreeMap::from([(1, 2), (3, 1)]));
    }
}
