//! Page generators with controlled compressibility.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csd::{stored_block_len, EntryFormat};
use crate::{BLOCK_SIZE, PAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Random bytes followed by a repeated motif in every 4 KB block, sized
    /// so the device's deflate stage hits the target ratio.
    RepeatFill,
    /// Word text with numeric fields. The ratio is whatever the text gives.
    TextMix,
    /// Incompressible bytes.
    Random,
}

impl Generator {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "repeat_fill" => Some(Generator::RepeatFill),
            "text_mix" => Some(Generator::TextMix),
            "random" => Some(Generator::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressibilitySpec {
    pub target_ratio: f64,
    pub generator: Generator,
    pub seed: u64,
}

impl CompressibilitySpec {
    pub fn new(generator: Generator, target_ratio: f64, seed: u64) -> Self {
        CompressibilitySpec { target_ratio, generator, seed }
    }

    pub fn random(seed: u64) -> Self {
        Self::new(Generator::Random, 1.0, seed)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.target_ratio >= 1.0) {
            return Err(format!("target_ratio {} below 1", self.target_ratio));
        }
        if self.generator == Generator::Random && self.target_ratio != 1.0 {
            return Err("random data has ratio 1".into());
        }
        if self.generator == Generator::RepeatFill && self.target_ratio > 64.0 {
            return Err(format!("target_ratio {} above 64 is not reachable", self.target_ratio));
        }
        Ok(())
    }
}

/// Deflate level and entry format the fill is calibrated against.
const CAL_LEVEL: u32 = 5;
const CAL_FORMAT: EntryFormat = EntryFormat::V2;

fn page_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

fn fill_block(rng: &mut ChaCha8Rng, random_len: usize, motif: &[u8; 16]) -> Vec<u8> {
    let mut b = vec![0u8; BLOCK_SIZE];
    rng.fill_bytes(&mut b[..random_len]);
    for (i, x) in b[random_len..].iter_mut().enumerate() {
        *x = motif[i % 16];
    }
    b
}

/// Block whose stored size is as close as possible to `BLOCK_SIZE / target`.
fn calibrated_block(rng: &mut ChaCha8Rng, target: f64) -> Vec<u8> {
    let mut motif = [0u8; 16];
    rng.fill_bytes(&mut motif);
    let state = rng.clone();
    let want = BLOCK_SIZE as f64 / target;
    let build = |k: usize| {
        let mut r = state.clone();
        let b = fill_block(&mut r, k, &motif);
        let len = stored_block_len(&b, CAL_LEVEL, CAL_FORMAT) as f64;
        (b, len, r)
    };
    // stored size grows with the random prefix; bisect on it
    let (mut lo, mut hi) = (0usize, BLOCK_SIZE);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if build(mid).1 < want {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let k = [lo.saturating_sub(1), lo]
        .into_iter()
        .min_by(|&a, &b| (build(a).1 - want).abs().total_cmp(&(build(b).1 - want).abs()))
        .unwrap();
    let (b, _, r) = build(k);
    *rng = r;
    b
}

pub const WORDS: &[&str] = &[
    "alpha", "order", "shipped", "pending", "customer", "warehouse", "north", "south", "priority", "express",
    "standard", "refund", "invoice", "delivery", "account", "premium", "basic", "gold", "silver", "beijing",
    "hangzhou", "shanghai", "shenzhen", "london", "paris", "the", "of", "and", "to", "in",
];

fn text_page(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut p = Vec::with_capacity(PAGE_SIZE + 64);
    while p.len() < PAGE_SIZE {
        let n = rng.random_range(3..12);
        for _ in 0..n {
            // skewed word choice, like real text
            let w = WORDS[(rng.random::<f64>().powi(2) * WORDS.len() as f64) as usize];
            p.extend_from_slice(w.as_bytes());
            p.push(b' ');
        }
        p.extend_from_slice(format!("{} {:.2}\n", rng.random_range(0..100_000u32), rng.random_range(0.0..1000.0f64)).as_bytes());
    }
    p.truncate(PAGE_SIZE);
    p
}

/// The page at `index` for `spec`. Deterministic in `(spec.seed, index)`.
pub fn generate_page(spec: &CompressibilitySpec, index: u64) -> Vec<u8> {
    let mut rng = page_rng(spec.seed, index);
    match spec.generator {
        Generator::Random => {
            let mut p = vec![0u8; PAGE_SIZE];
            rng.fill_bytes(&mut p);
            p
        }
        Generator::TextMix => text_page(&mut rng),
        Generator::RepeatFill => {
            let mut p = Vec::with_capacity(PAGE_SIZE);
            for _ in 0..PAGE_SIZE / BLOCK_SIZE {
                p.extend(calibrated_block(&mut rng, spec.target_ratio));
            }
            p
        }
    }
}

/// Ratio the device's deflate stage achieves on `page`, block by block.
pub fn device_ratio(page: &[u8], level: u32, format: EntryFormat) -> f64 {
    let stored: u64 = page.chunks(BLOCK_SIZE).map(|b| stored_block_len(b, level, format) as u64).sum();
    page.len() as f64 / stored as f64
}

/// Deterministic bytes for a redo payload.
pub fn patch_bytes(seed: u64, lsn: u64, len: usize) -> Vec<u8> {
    let mut r = page_rng(seed ^ 0x7e60, lsn);
    let mut v = vec![0u8; len];
    r.fill_bytes(&mut v);
    v
}

/// Synthetic record pages standing in for database tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    /// Binary order rows: fixed-width header fields plus a short text tail.
    Orders,
    /// JSON customer profiles.
    Profiles,
}

/// A 16 KB table page: a 120-byte page header area, rows up to a random
/// fill factor, zeros after that.
pub fn record_page(kind: RecordKind, seed: u64) -> Vec<u8> {
    match kind {
        RecordKind::Orders => order_page(seed),
        RecordKind::Profiles => profile_page(seed),
    }
}

fn order_page(seed: u64) -> Vec<u8> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![0u8; PAGE_SIZE];
    p[..38].iter_mut().for_each(|b| *b = r.random());
    let fill = r.random_range(0.6..0.97);
    let mut pos = 120;
    let mut id: u64 = seed * 1000;
    while pos + 200 < (PAGE_SIZE as f64 * fill) as usize {
        id += r.random_range(1..3);
        let mut row = Vec::new();
        row.extend_from_slice(&[0, 0, 0x10, 0, 0x20]);
        row.extend_from_slice(&id.to_be_bytes());
        row.extend_from_slice(&(1_700_000_000u32 + r.random_range(0..5_000_000)).to_be_bytes());
        row.extend_from_slice(&r.random_range(0..100_000u32).to_be_bytes());
        for _ in 0..r.random_range(2..8) {
            let w = WORDS[(r.random::<f64>().powi(2) * WORDS.len() as f64) as usize];
            row.extend_from_slice(w.as_bytes());
            row.push(b' ');
        }
        row.extend_from_slice(format!("{:.2}", r.random_range(0.0..10000.0f64)).as_bytes());
        let l = row.len().min(PAGE_SIZE - pos);
        p[pos..pos + l].copy_from_slice(&row[..l]);
        pos += l;
    }
    p
}

fn profile_page(seed: u64) -> Vec<u8> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
    let mut p = vec![0u8; PAGE_SIZE];
    let fill = r.random_range(0.7..0.97);
    let mut pos = 120;
    let mut id: u64 = seed * 1000;
    while pos < (PAGE_SIZE as f64 * fill) as usize {
        id += 1;
        let city = ["hangzhou", "beijing", "shanghai", "shenzhen"][r.random_range(0..4)];
        let tier = ["gold", "silver", "basic"][r.random_range(0..3)];
        let mut row = format!(
            "{{\"id\":{id},\"type\":\"customer_profile\",\"version\":3,\"address\":{{\"city\":\"{city}\",\"district\":\"xihu\",\"street\":\"{} wensan road\",\"zip\":\"3100{:02}\"}},\"membership\":{{\"tier\":\"{tier}\",\"since\":\"2021-0{}-1{}\",\"auto_renew\":{}}},\"preferences\":{{\"language\":\"zh-CN\",\"currency\":\"CNY\",\"newsletter\":true,\"channels\":[\"email\",\"sms\",\"app\"]}},\"tags\":[",
            r.random_range(1..999),
            r.random_range(0..99),
            r.random_range(1..9),
            r.random_range(0..9),
            r.random_bool(0.5)
        );
        for _ in 0..r.random_range(1..6) {
            row.push_str(&format!("\"{}\",", WORDS[r.random_range(0..WORDS.len())]));
        }
        row.push_str(&format!("\"end\"],\"balance\":{:.2},\"note\":\"", r.random_range(0.0..99999.0f64)));
        for _ in 0..r.random_range(5..40) {
            row.push_str(WORDS[(r.random::<f64>().powi(3) * WORDS.len() as f64) as usize]);
            row.push(' ');
        }
        row.push_str("\"}");
        let b = row.as_bytes();
        let l = b.len().min(PAGE_SIZE - pos);
        p[pos..pos + l].copy_from_slice(&b[..l]);
        pos += l;
    }
    p
}
