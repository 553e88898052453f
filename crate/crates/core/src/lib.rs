//! Streaming top-k heavy-hitter detection: space saving, HashParallel and
//! HashPipe, sample-and-hold and count-min baselines, trace I/O and an
//! experiment harness scored against exact per-flow counts.
//!
//! ```
//! use pipesketch::{generate_zipf, ExactCounts, HashPipe, HeavyHitterSketch, ZipfSpec};
//!
//! let trace: Vec<_> = generate_zipf(&ZipfSpec::new(1000, 20_000, 1.0, 1)).unwrap().collect();
//! let mut pipe = HashPipe::new(600, 6, 42).unwrap();
//! for r in &trace {
//!     pipe.insert(r);
//! }
//! let oracle = ExactCounts::from_records(&trace);
//! let report = HeavyHitterSketch::report(&pipe, 20, 1.0);
//! let fnr = pipesketch::metrics::false_negative_rate(report.keys(), &oracle, 20);
//! assert!(fnr < 0.5);
//! ```

pub mod baselines;
pub mod error;
pub mod flow;
pub mod harness;
pub mod hashing;
pub mod hashpipe;
pub mod metrics;
pub mod sketch;
pub mod spacesaving;
pub mod trace;

pub use baselines::{CacheEntry, CmsGeometry, CmsWithCache, SampleHold, SeededSampleHold};
pub use error::{Error, Result};
pub use flow::{
    chunk_trace, exact_topk, split_even, ChunkMode, ExactCounts, FiveTuple, FlowKey, Granularity,
    PacketRecord, TraceInterval,
};
pub use harness::{
    compare_idealized, run_experiment, Chunking, ExperimentReport, ExperimentSpec, FixedParams,
    SchemeKind, Sweep, TraceSource,
};
pub use hashing::HashFamily;
pub use hashpipe::{AccessSummary, EvictionOutcome, EvictionSampler, HashParallel, HashPipe, ParallelOutcome, StagePipeline};
pub use metrics::{memory_to_slots, slot_bytes, AccuracyResult};
pub use sketch::{HeavyHitterSketch, TopReport};
pub use spacesaving::{KeysPerCounter, SpaceSaving};
pub use trace::{generate_zipf, load_trace, read_csv, read_pcap, write_csv, ReadOptions, WeightMode, ZipfSpec};
