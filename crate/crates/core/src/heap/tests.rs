use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;

fn config(nursery: usize, limit: usize) -> GcConfig {
    GcConfig::new(nursery, limit).unwrap()
}

/// Encoded size of a `Str` of `len` bytes, computed from the layout rules
/// rather than from the allocator.
fn str_size(len: usize) -> usize {
    (16 + 4 + len).div_ceil(8) * 8
}

#[test]
fn config_rules() {
    assert_eq!(GcConfig::new(128 * KIB, MIB), Err(ConfigError::NurseryTooSmall(128 * KIB)));
    assert!(matches!(GcConfig::new(256 * KIB, 300 * KIB), Err(ConfigError::HeapLimitTooSmall { .. })));
    assert_eq!(config(256 * KIB, 512 * KIB).with_budget(0), Err(ConfigError::ZeroBudget));
    assert!(GcConfig::new(256 * KIB, 512 * KIB).is_ok());
}

#[test]
fn first_allocation_does_not_collect() {
    let mut h = Heap::new(config(256 * KIB, MIB));
    let a = h.alloc_int(1).unwrap();
    let b = h.alloc_str("field").unwrap();
    let r = h.alloc_record(&[("a", a), ("b", b)]).unwrap();
    assert!(h.young_bytes() >= 64);
    assert_eq!(h.stats().minor_collections, 0);
    assert_eq!(
        h.export(r),
        Value::record([("a", Value::Int(1)), ("b", Value::str("field"))])
    );
}

#[test]
fn fresh_heap_reserve_is_nursery_plus_constant() {
    let c = config(256 * KIB, 16 * MIB);
    let h = Heap::new(c);
    let s = h.stats();
    assert_eq!(s.minor_collections, 0);
    assert_eq!(s.reserve_bytes, c.nursery_bytes + c.fixed_metadata_bytes());
    assert_eq!(s.reserve_bytes, c.reserve_bytes());
}

#[test]
fn unreachable_allocations_collect_exactly() {
    // 64-byte objects tile the nursery exactly, so the number of collections
    // is forced: one per full nursery except the last.
    let nursery = 256 * KIB;
    let len = 64 - 20;
    assert_eq!(str_size(len), 64);
    let text = "z".repeat(len);
    for total in [nursery, nursery + 64, 3 * nursery, 10 * nursery - 64] {
        let mut h = Heap::new(config(nursery, 4 * MIB));
        let n = total / 64;
        for _ in 0..n {
            let v = h.alloc_str(&text).unwrap();
            h.release(v);
        }
        let expected = total.div_ceil(nursery) as u64 - 1;
        let s = h.stats();
        assert_eq!(s.minor_collections, expected, "total {total}");
        assert_eq!(s.promoted_bytes, 0);
        assert_eq!(h.old_objects(), 0);
        assert!(h.reachable_objects().is_empty());
    }
}

#[test]
fn full_nursery_of_garbage_is_reclaimed() {
    let mut h = Heap::new(config(256 * KIB, MIB));
    let text = "g".repeat(44);
    for _ in 0..(256 * KIB / 64) {
        let v = h.alloc_str(&text).unwrap();
        h.release(v);
    }
    let report = h.collect();
    assert_eq!(report.promoted_objects, 0);
    assert_eq!(report.reclaimed_young_bytes, 256 * KIB);
    assert_eq!(h.young_bytes(), 0);
}

#[test]
fn empty_collection_promotes_nothing() {
    let mut h = Heap::new(config(256 * KIB, MIB));
    let report = h.collect();
    assert_eq!(report.promoted_bytes, 0);
    assert_eq!(h.stats().minor_collections, 1);
}

#[test]
fn exhaustion_is_out_of_memory() {
    let limit = MIB;
    let mut h = Heap::new(config(256 * KIB, limit));
    let mut kept = Vec::new();
    let text = "k".repeat(1000);
    let err = loop {
        match h.alloc_str(&text) {
            Ok(v) => kept.push(v),
            Err(e) => break e,
        }
    };
    let HeapError::OutOfMemory { requested, live, limit: l } = err else {
        panic!("unexpected {err:?}");
    };
    assert_eq!(l, limit);
    assert!(live + requested > limit);
    // Oracle: the reported live figure is exactly the reachable data (plus
    // per-object bookkeeping), so the failure is true exhaustion.
    let reachable = h.reachable_objects();
    assert_eq!(reachable.len(), kept.len());
    let bytes: usize = reachable.iter().map(|(_, s)| s).sum();
    assert_eq!(live, bytes + kept.len() * OLD_SLOT_OVERHEAD);
    // Dropping everything makes room again.
    h.release_all(kept);
    assert!(h.alloc_str(&text).is_ok());
}

#[test]
fn oversized_and_large_objects() {
    let mut h = Heap::new(config(256 * KIB, MIB));
    let big = vec![7u8; 300 * KIB];
    let v = h.alloc_bytes(&big).unwrap();
    assert_eq!(h.as_bytes(v).unwrap(), &big[..]);
    assert_eq!(h.young_bytes(), 0);
    let err = h.alloc_bytes(&vec![0u8; 2 * MIB]).unwrap_err();
    assert!(matches!(err, HeapError::OversizedAllocation { .. }));
    // A large composite over young children promotes them first.
    let small = h.alloc_str("child").unwrap();
    let items = vec![small; 40_000];
    let list = h.alloc_list(&items).unwrap();
    assert_eq!(h.list_len(list), Some(40_000));
    let first = h.list_item(list, 0).unwrap();
    assert_eq!(h.as_str(first), Some("child"));
}

fn tree(h: &mut Heap, depth: u32, fanout: usize) -> ValueHandle {
    if depth == 0 {
        return h.alloc_int(depth as i64).unwrap();
    }
    let kids: Vec<ValueHandle> = (0..fanout).map(|_| tree(h, depth - 1, fanout)).collect();
    let v = h.alloc_list(&kids).unwrap();
    h.release_all(kids);
    v
}

#[test]
fn dropped_tree_is_released_within_budgeted_pauses() {
    for budget in [1usize, 3, 7, 1000] {
        let c = config(256 * KIB, 16 * MIB).with_budget(budget).unwrap();
        let mut h = Heap::new(c);
        let root = tree(&mut h, 3, 4);
        h.collect();
        let nodes = h.reachable_objects().len();
        assert_eq!(nodes, 1 + 4 + 16 + 64);
        assert_eq!(h.old_objects(), nodes);
        h.release(root);
        let bound = nodes.div_ceil(budget);
        let mut pauses = 0;
        while h.old_objects() > 0 {
            let report = h.collect();
            assert!(report.released_objects <= budget);
            pauses += 1;
            assert!(pauses <= bound, "budget {budget}: {pauses} > {bound}");
        }
        assert_eq!(h.old_bytes(), 0);
    }
}

#[test]
fn unbounded_budget_releases_in_one_pause() {
    let c = config(256 * KIB, 16 * MIB).with_budget(usize::MAX).unwrap();
    let mut h = Heap::new(c);
    let root = tree(&mut h, 4, 3);
    h.collect();
    h.release(root);
    h.collect();
    assert_eq!(h.old_objects(), 0);
}

#[test]
fn shared_subtree_survives_one_drop() {
    let mut h = Heap::new(config(256 * KIB, 16 * MIB));
    let shared = tree(&mut h, 2, 3);
    let a = h.alloc_list(&[shared]).unwrap();
    let b = h.alloc_record(&[("s", shared)]).unwrap();
    let expected = h.export(shared);
    h.release(shared);
    h.collect();
    h.release(a);
    for _ in 0..4 {
        h.collect();
    }
    let s = h.field(b, "s").unwrap();
    assert_eq!(h.export(s), expected);
    assert_eq!(h.old_objects(), 1 + 1 + 3 + 9);
}

#[test]
fn young_reference_to_dropped_old_value_keeps_it() {
    let mut h = Heap::new(config(256 * KIB, MIB));
    let x = h.alloc_str("old").unwrap();
    h.collect();
    let holder = h.alloc_list(&[x]).unwrap();
    h.release(x);
    h.collect();
    let item = h.list_item(holder, 0).unwrap();
    assert_eq!(h.as_str(item), Some("old"));
}

#[test]
fn reserve_is_independent_of_limit_and_live_data() {
    let nursery = 256 * KIB;
    let reserves: Vec<usize> = [16 * MIB, 160 * MIB, 1638 * MIB]
        .into_iter()
        .map(|limit| {
            let mut h = Heap::new(config(nursery, limit));
            let before = h.reserve_bytes();
            let roots = bench::build_live_set(&mut h, 2 * MIB).unwrap();
            assert_eq!(h.reserve_bytes(), before);
            h.release_all(roots);
            before
        })
        .collect();
    assert!(reserves.windows(2).all(|w| w[0] == w[1]), "{reserves:?}");
    assert!(reserves[0] <= MIB);
}

#[test]
fn paired_bench_matches_standalone_runs() {
    let configs = [
        bench::BenchConfig::new(256 * KIB, MIB, 50_000),
        bench::BenchConfig::new(256 * KIB, 4 * MIB, 30_000),
    ];
    let paired = bench::run_paired(&configs, 7_000).unwrap();
    for (config, report) in configs.iter().zip(&paired) {
        let alone = bench::run(*config).unwrap();
        assert_eq!(report.config, *config);
        assert_eq!(report.allocations, config.allocs);
        // Slicing changes timing only, never the collector's work.
        assert_eq!(report.stats.minor_collections, alone.stats.minor_collections);
        assert_eq!(report.stats.promoted_bytes, alone.stats.promoted_bytes);
        assert_eq!(report.live_bytes_after_build, alone.live_bytes_after_build);
    }
}

#[test]
fn dup_and_generations() {
    let mut h = Heap::new(config(256 * KIB, MIB));
    let a = h.alloc_int(5).unwrap();
    let b = h.dup(a);
    h.release(a);
    assert_eq!(h.as_int(b), Some(5));
    h.release(b);
    assert_eq!(h.live_handles(), 0);
    let c = h.alloc_int(6).unwrap();
    assert_ne!(a, c, "recycled slot must carry a new generation");
}

#[test]
#[should_panic(expected = "stale value handle")]
fn stale_handle_panics() {
    let mut h = Heap::new(config(256 * KIB, MIB));
    let a = h.alloc_int(5).unwrap();
    h.release(a);
    h.as_int(a);
}

#[test]
fn duplicate_field_rejected() {
    let mut h = Heap::new(config(256 * KIB, MIB));
    let a = h.alloc_int(5).unwrap();
    assert_eq!(h.alloc_record(&[("k", a), ("k", a)]), Err(HeapError::DuplicateField("k".into())));
}

#[test]
fn snapshot_identical_across_collections() {
    let mut h = Heap::new(config(256 * KIB, 16 * MIB));
    let t = tree(&mut h, 3, 3);
    let roots = BTreeMap::from([("t".to_string(), t)]);
    let before = HeapSnapshot::capture(&h, &roots);
    h.collect();
    let after = HeapSnapshot::capture(&h, &roots);
    assert_eq!(before.as_bytes(), after.as_bytes());
}

// -------------------------------------------------------------------------
// Properties

#[derive(Debug, Clone)]
enum Op {
    Int(i64),
    Str(String),
    List(Vec<usize>),
    Record(Vec<usize>),
    Drop(usize),
    Collect,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        any::<i64>().prop_map(Op::Int),
        "[a-z]{0,300}".prop_map(Op::Str),
        prop::collection::vec(any::<usize>(), 0..6).prop_map(Op::List),
        prop::collection::vec(any::<usize>(), 0..4).prop_map(Op::Record),
        any::<usize>().prop_map(Op::Drop),
        Just(Op::Collect),
    ]
}

/// Applies ops to a heap and a shadow model of owned values side by side.
fn drive(ops: &[Op], budget: usize) -> (Heap, Vec<(ValueHandle, Value)>) {
    let c = config(256 * KIB, 64 * MIB).with_budget(budget).unwrap();
    let mut h = Heap::new(c);
    let mut live: Vec<(ValueHandle, Value)> = Vec::new();
    for op in ops {
        let pick = |i: &usize, live: &Vec<(ValueHandle, Value)>| live[*i % live.len()].clone();
        let made = match op {
            Op::Int(i) => Some((h.alloc_int(*i).unwrap(), Value::Int(*i))),
            Op::Str(s) => Some((h.alloc_str(s).unwrap(), Value::str(s.clone()))),
            Op::List(ix) if !live.is_empty() => {
                let kids: Vec<_> = ix.iter().map(|i| pick(i, &live)).collect();
                let hs: Vec<_> = kids.iter().map(|k| k.0).collect();
                let v = Value::List(kids.into_iter().map(|k| k.1).collect());
                Some((h.alloc_list(&hs).unwrap(), v))
            }
            Op::Record(ix) if !live.is_empty() => {
                let kids: Vec<_> = ix.iter().map(|i| pick(i, &live)).collect();
                let names: Vec<String> = (0..kids.len()).map(|i| format!("f{}", kids.len() - i)).collect();
                let pairs: Vec<(&str, ValueHandle)> = names.iter().map(String::as_str).zip(kids.iter().map(|k| k.0)).collect();
                let v = Value::record(names.iter().cloned().zip(kids.into_iter().map(|k| k.1)));
                Some((h.alloc_record(&pairs).unwrap(), v))
            }
            Op::Drop(i) if !live.is_empty() => {
                let (hd, _) = live.remove(*i % live.len());
                h.release(hd);
                None
            }
            Op::Collect => {
                h.collect();
                None
            }
            _ => None,
        };
        if let Some(m) = made {
            live.push(m);
        }
    }
    (h, live)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Handles dereference to the same values before and after collections.
    #[test]
    fn handle_stability(ops in prop::collection::vec(op(), 1..200)) {
        let (mut h, live) = drive(&ops, GcConfig::DEFAULT_DECREMENT_BUDGET);
        let before: Vec<Value> = live.iter().map(|(hd, _)| h.export(*hd)).collect();
        for ((_, model), got) in live.iter().zip(&before) {
            prop_assert_eq!(model, got);
        }
        h.collect();
        h.collect();
        let after: Vec<Value> = live.iter().map(|(hd, _)| h.export(*hd)).collect();
        prop_assert_eq!(before, after);
    }

    /// Once every handle is dropped and enough pauses run, the old
    /// generation is empty: counting alone reclaims everything.
    #[test]
    fn counting_is_complete(ops in prop::collection::vec(op(), 1..200), budget in 1usize..50) {
        let (mut h, live) = drive(&ops, budget);
        let reachable = h.reachable_objects();
        h.collect();
        let reachable_after = h.reachable_objects();
        prop_assert_eq!(&reachable, &reachable_after);
        // Everything the oracle walk cannot reach is gone or queued.
        prop_assert!(h.old_objects() >= reachable.len());
        h.release_all(live.into_iter().map(|(hd, _)| hd));
        for _ in 0..10_000 {
            if h.old_objects() == 0 { break; }
            h.collect();
        }
        prop_assert_eq!(h.old_objects(), 0);
        prop_assert_eq!(h.old_bytes(), 0);
    }

    /// Creation stamps strictly decrease along every edge.
    #[test]
    fn stamps_are_monotone(ops in prop::collection::vec(op(), 1..200)) {
        let (mut h, live) = drive(&ops, 16);
        for (hd, _) in &live {
            let stamp = h.stamp(*hd);
            let kids: Vec<ValueHandle> = match h.kind(*hd) {
                Kind::List => h.list_items(*hd).unwrap(),
                Kind::Record | Kind::Enum => h.fields(*hd).into_iter().map(|(_, c)| c).collect(),
                _ => Vec::new(),
            };
            for k in &kids {
                prop_assert!(h.stamp(*k) < stamp);
            }
            h.release_all(kids);
        }
    }

    /// Snapshot bytes do not depend on which values happen to be shared on
    /// the heap, only on the logical values.
    #[test]
    fn snapshot_depends_only_on_values(ops in prop::collection::vec(op(), 1..120)) {
        let (mut h, live) = drive(&ops, 16);
        let roots: BTreeMap<String, ValueHandle> =
            live.iter().enumerate().map(|(i, (hd, _))| (format!("r{i:03}"), *hd)).collect();
        let values: BTreeMap<String, Value> =
            live.iter().enumerate().map(|(i, (_, v))| (format!("r{i:03}"), v.clone())).collect();
        let snap = HeapSnapshot::capture(&h, &roots);
        prop_assert_eq!(&snap, &HeapSnapshot::from_values(&values));
        prop_assert_eq!(snap.to_values(), values);
        let mut other = Heap::new(config(256 * KIB, 64 * MIB));
        let restored = snap.restore(&mut other).unwrap();
        let again = HeapSnapshot::capture(&other, &restored);
        prop_assert_eq!(again.as_bytes(), snap.as_bytes());
        h.collect();
    }
}

#[test]
fn acyclicity_under_many_constructions() {
    // 10^5 random constructions; the allocator asserts creation-order
    // monotonicity on each composite.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let mut h = Heap::new(config(256 * KIB, 64 * MIB));
    let mut pool: Vec<ValueHandle> = Vec::new();
    for i in 0..100_000u64 {
        let v = if pool.len() < 2 || rng.gen_bool(0.4) {
            h.alloc_int(i as i64).unwrap()
        } else {
            let a = pool[rng.gen_range(0..pool.len())];
            let b = pool[rng.gen_range(0..pool.len())];
            h.alloc_list(&[a, b]).unwrap()
        };
        pool.push(v);
        if pool.len() > 512 {
            let victim = pool.swap_remove(rng.gen_range(0..pool.len()));
            h.release(victim);
        }
    }
    for v in &pool {
        let s = h.stamp(*v);
        assert!(s > 0);
    }
    h.release_all(pool);
}
