//! Shared fixtures for the criterion benches.

use criterion::{BenchmarkGroup, Throughput};
use criterion::measurement::WallTime;
use pipesketch::*;

pub const FLOWS: u64 = 10_000;
pub const PACKETS: u64 = 200_000;
pub const SLOTS: usize = 4500;
pub const STAGES: usize = 6;
pub const K: usize = 150;

pub fn trace() -> Vec<PacketRecord> {
    generate_zipf(&ZipfSpec::new(FLOWS, PACKETS, 1.0, 1)).unwrap().collect()
}

/// Each iteration streams the whole trace into a fresh sketch from `make`.
pub fn bench_stream<S, F>(group: &mut BenchmarkGroup<'_, WallTime>, name: &str, trace: &[PacketRecord], make: F)
where
    S: HeavyHitterSketch,
    F: Fn() -> S,
{
    group.throughput(Throughput::Elements(trace.len() as u64));
    group.bench_function(name, |b| {
        b.iter_batched_ref(
            &make,
            |s| {
                for r in trace {
                    s.insert(r);
                }
            },
            criterion::BatchSize::LargeInput,
        )
    });
}
