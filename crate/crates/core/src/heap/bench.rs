//! Allocation-churn workloads used by `bench-gc` and the acceptance suite.

use std::time::{Duration, Instant};

use super::{GcConfig, GcStats, Heap, HeapError, ValueHandle, KIB, MIB};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub nursery_bytes: usize,
    /// Old-generation data kept reachable for the whole run.
    pub live_set_bytes: usize,
    /// Churn allocations after the live set is built.
    pub allocs: u64,
    /// Recently allocated values kept alive; they are what a pause evacuates.
    pub window: usize,
}

impl BenchConfig {
    pub fn new(nursery_bytes: usize, live_set_bytes: usize, allocs: u64) -> BenchConfig {
        BenchConfig {
            nursery_bytes,
            live_set_bytes,
            allocs,
            window: 64,
        }
    }

    /// A heap limit comfortably above the live set so only the nursery
    /// drives collections.
    pub fn gc_config(&self) -> GcConfig {
        let limit = 2 * self.live_set_bytes + 8 * self.nursery_bytes + 16 * MIB;
        GcConfig {
            nursery_bytes: self.nursery_bytes,
            heap_limit_bytes: limit,
            old_gen_decrement_budget: GcConfig::DEFAULT_DECREMENT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    /// Collector telemetry for the churn phase only.
    pub stats: GcStats,
    pub allocations: u64,
    pub live_bytes_after_build: usize,
    pub elapsed: Duration,
}

/// Live-set chunk: a list of strings, roughly 8 KiB of old-generation data.
fn build_chunk(heap: &mut Heap, seq: u64) -> Result<ValueHandle, HeapError> {
    let mut items = Vec::with_capacity(32);
    for i in 0..32u64 {
        let text = format!("{seq:016x}:{i:04}:{}", "x".repeat(200));
        items.push(heap.alloc_str(&text)?);
    }
    let chunk = heap.alloc_list(&items);
    heap.release_all(items);
    chunk
}

/// Builds `bytes` of reachable old-generation data behind a handful of roots.
pub fn build_live_set(heap: &mut Heap, bytes: usize) -> Result<Vec<ValueHandle>, HeapError> {
    let mut roots = Vec::new();
    let mut group = Vec::new();
    let mut seq = 0u64;
    while heap.old_bytes() + heap.young_bytes() < bytes {
        group.push(build_chunk(heap, seq)?);
        seq += 1;
        if group.len() == 64 {
            let root = heap.alloc_list(&group)?;
            heap.release_all(group.drain(..));
            roots.push(root);
        }
    }
    if !group.is_empty() {
        let root = heap.alloc_list(&group)?;
        heap.release_all(group);
        roots.push(root);
    }
    heap.collect();
    Ok(roots)
}

/// One churn step: allocate a small value (scalar or a composite over the
/// window) and let it displace the oldest window entry.
fn churn_step(heap: &mut Heap, ring: &mut [Option<ValueHandle>], i: u64) -> Result<(), HeapError> {
    let slot = (i as usize) % ring.len();
    let prev = ring[(slot + ring.len() - 1) % ring.len()];
    let v = match (i % 4, prev) {
        (0, _) | (_, None) => heap.alloc_int(i as i64)?,
        (1, _) => heap.alloc_str("churn-value")?,
        (2, Some(p)) => heap.alloc_list(&[p])?,
        (_, Some(p)) => heap.alloc_record(&[("next", p), ("n", p)])?,
    };
    if let Some(old) = ring[slot].replace(v) {
        heap.release(old);
    }
    Ok(())
}

/// Builds the live set, then churns `allocs` allocations. Pauses from the
/// build phase are discarded.
pub fn run(config: BenchConfig) -> Result<BenchReport, HeapError> {
    Ok(run_paired(&[config], u64::MAX)?.remove(0))
}

struct Bench {
    config: BenchConfig,
    heap: Heap,
    roots: Vec<ValueHandle>,
    ring: Vec<Option<ValueHandle>>,
    before: GcStats,
    live_bytes_after_build: usize,
    done: u64,
    elapsed: Duration,
}

/// Runs several configurations side by side, alternating `slice`
/// allocations at a time between their heaps, so host noise lands on all of
/// them alike. Reports come back in the order of `configs`.
pub fn run_paired(configs: &[BenchConfig], slice: u64) -> Result<Vec<BenchReport>, HeapError> {
    let mut benches = Vec::with_capacity(configs.len());
    for &config in configs {
        let mut heap = Heap::new(config.gc_config());
        let roots = build_live_set(&mut heap, config.live_set_bytes)?;
        let live_bytes_after_build = heap.old_bytes();
        heap.reset_pauses();
        let before = heap.stats();
        benches.push(Bench {
            config,
            heap,
            roots,
            ring: vec![None; config.window.max(1)],
            before,
            live_bytes_after_build,
            done: 0,
            elapsed: Duration::ZERO,
        });
    }
    let slice = slice.max(1);
    while benches.iter().any(|b| b.done < b.config.allocs) {
        for b in benches.iter_mut() {
            let end = b.done.saturating_add(slice).min(b.config.allocs);
            let start = Instant::now();
            for i in b.done..end {
                churn_step(&mut b.heap, &mut b.ring, i)?;
            }
            b.elapsed += start.elapsed();
            b.done = end;
        }
    }
    Ok(benches
        .into_iter()
        .map(|b| {
            let Bench { config, mut heap, roots, ring, before, live_bytes_after_build, elapsed, .. } = b;
            let mut stats = heap.stats();
            stats.minor_collections -= before.minor_collections;
            heap.release_all(ring.into_iter().flatten());
            heap.release_all(roots);
            BenchReport {
                config,
                stats,
                allocations: config.allocs,
                live_bytes_after_build,
                elapsed,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarvationReport {
    pub allocations: u64,
    pub out_of_memory: u64,
    pub stats: GcStats,
    pub elapsed: Duration,
}

/// Allocate-and-immediately-drop loop in a heap whose limit is twice the
/// nursery. Counts (rather than stops at) out-of-memory failures.
pub fn starvation(nursery_bytes: usize, allocs: u64) -> StarvationReport {
    let config = GcConfig {
        nursery_bytes,
        heap_limit_bytes: 2 * nursery_bytes,
        old_gen_decrement_budget: GcConfig::DEFAULT_DECREMENT_BUDGET,
    };
    let mut heap = Heap::new(config);
    let keep = heap.alloc_str("anchor").expect("fresh heap");
    let mut out_of_memory = 0;
    let start = Instant::now();
    for i in 0..allocs {
        let r = match i % 3 {
            0 => heap.alloc_int(i as i64),
            1 => heap.alloc_bytes(&[0u8; 40]),
            _ => heap.alloc_record(&[("k", keep)]),
        };
        match r {
            Ok(h) => heap.release(h),
            Err(_) => out_of_memory += 1,
        }
    }
    let elapsed = start.elapsed();
    heap.release(keep);
    StarvationReport {
        allocations: allocs,
        out_of_memory,
        stats: heap.stats(),
        elapsed,
    }
}

/// Parses sizes such as `256K`, `4M`, `1G` or plain bytes.
pub fn parse_size(text: &str) -> Option<usize> {
    let t = text.trim();
    let (digits, unit) = match t.char_indices().find(|(_, c)| !c.is_ascii_digit()) {
        Some((i, _)) => t.split_at(i),
        None => (t, ""),
    };
    let n: usize = digits.parse().ok()?;
    let mul = match unit.to_ascii_uppercase().trim_end_matches("IB").trim_end_matches('B') {
        "" => 1,
        "K" => KIB,
        "M" => MIB,
        "G" => 1024 * MIB,
        _ => return None,
    };
    n.checked_mul(mul)
}
