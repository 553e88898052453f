//! Experiment orchestration: sweeps over one parameter axis, repeated over
//! trials, every scheme fed the same interval and the same slot budget.
//!
//! Trials run one after another so only one interval is resident at a time;
//! the (scheme, sweep point) cells of a trial run in parallel on rayon.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{CmsGeometry, CmsWithCache, SampleHold, SeededSampleHold, CMS_ROWS};
use crate::error::{Error, Result};
use crate::flow::{chunk_trace, split_even, ChunkMode, ExactCounts, Granularity, PacketRecord};
use crate::hashpipe::{EvictionSampler, HashParallel, HashPipe};
use crate::metrics::{ccdf, ecdf, guarantee_slots, slots_to_bytes, AccuracyResult, ErrorCurve};
use crate::sketch::{report_size, HeavyHitterSketch};
use crate::spacesaving::{KeysPerCounter, SpaceSaving};
use crate::trace::{generate_zipf, load_trace, ReadOptions, WeightMode, ZipfSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKind {
    #[serde(rename = "spacesaving")]
    SpaceSaving,
    #[serde(rename = "hashparallel")]
    HashParallel,
    #[serde(rename = "hashpipe")]
    HashPipe,
    #[serde(rename = "sample-and-hold")]
    SampleHold,
    #[serde(rename = "cms-cache")]
    CmsCache,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::SpaceSaving,
        SchemeKind::HashParallel,
        SchemeKind::HashPipe,
        SchemeKind::SampleHold,
        SchemeKind::CmsCache,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            SchemeKind::SpaceSaving => "spacesaving",
            SchemeKind::HashParallel => "hashparallel",
            SchemeKind::HashPipe => "hashpipe",
            SchemeKind::SampleHold => "sample-and-hold",
            SchemeKind::CmsCache => "cms-cache",
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spacesaving" | "space-saving" | "ss" => Ok(SchemeKind::SpaceSaving),
            "hashparallel" | "hash-parallel" => Ok(SchemeKind::HashParallel),
            "hashpipe" | "hash-pipe" => Ok(SchemeKind::HashPipe),
            "sample-and-hold" | "sample-hold" | "sh" => Ok(SchemeKind::SampleHold),
            "cms-cache" | "cms" => Ok(SchemeKind::CmsCache),
            other => Err(Error::config(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TraceSource {
    File {
        path: PathBuf,
        #[serde(default)]
        strict: bool,
    },
    /// A fresh trace per trial, seeded from that trial's seed.
    Zipf { flows: u64, packets: u64, alpha: f64 },
}

/// How a file trace is cut into trials. Synthetic traces ignore this.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "kebab-case")]
pub enum Chunking {
    /// As many equal chunks as there are trials.
    #[default]
    Even,
    Count(usize),
    Seconds(f64),
}

/// The single swept parameter and its values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "kebab-case")]
pub enum Sweep {
    Stages(Vec<usize>),
    Slots(Vec<usize>),
    K(Vec<usize>),
    OverreportFactor(Vec<f64>),
}

impl Sweep {
    pub fn axis(&self) -> &'static str {
        match self {
            Sweep::Stages(_) => "stages",
            Sweep::Slots(_) => "slots",
            Sweep::K(_) => "k",
            Sweep::OverreportFactor(_) => "overreport_factor",
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Sweep::Stages(v) | Sweep::Slots(v) | Sweep::K(v) => v.iter().map(|x| *x as f64).collect(),
            Sweep::OverreportFactor(v) => v.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedParams {
    pub slots: usize,
    pub stages: usize,
    pub k: usize,
    pub overreport_factor: f64,
    /// Sample-and-hold sampling rate multiplier over capacity / packets.
    pub oversampling: f64,
    pub cms_rows: usize,
    pub error_thresholds: Vec<u64>,
    /// Count sketch-absent heavy flows as 100% estimation error.
    pub include_missing: bool,
    /// Idealized comparison: eviction sampling period in packets.
    pub eviction_sample_every: u64,
    /// Idealized comparison: factors for the overreporting sweep.
    pub overreport_factors: Vec<f64>,
}

impl Default for FixedParams {
    fn default() -> Self {
        Self {
            slots: 4500,
            stages: 6,
            k: 150,
            overreport_factor: 1.0,
            oversampling: 1.0,
            cms_rows: CMS_ROWS,
            error_thresholds: vec![0, 10, 30, 100, 300, 1000, 3000, 10_000, 30_000],
            include_missing: false,
            eviction_sample_every: 100,
            overreport_factors: vec![1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub source: TraceSource,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub weight: WeightMode,
    #[serde(default)]
    pub chunking: Chunking,
    pub schemes: Vec<SchemeKind>,
    pub sweep: Sweep,
    #[serde(default)]
    pub fixed: FixedParams,
    pub trials: usize,
    /// Base seed; per-trial seeds are drawn from it when `seeds` is empty.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Where the CLI writes the report. Not part of the config hash.
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::config("at least one scheme is required"));
        }
        if self.sweep.is_empty() {
            return Err(Error::config("the sweep needs at least one value"));
        }
        if self.trials == 0 {
            return Err(Error::config("at least one trial is required"));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.trials {
            return Err(Error::config(format!(
                "{} seeds given for {} trials",
                self.seeds.len(),
                self.trials
            )));
        }
        if let TraceSource::Zipf { flows, packets, alpha } = &self.source {
            generate_zipf(&ZipfSpec::new(*flows, *packets, *alpha, 0))?;
        }
        Ok(())
    }

    /// One seed per trial, recorded in the report.
    pub fn trial_seeds(&self) -> Vec<u64> {
        if !self.seeds.is_empty() {
            return self.seeds.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.trials).map(|_| rng.random()).collect()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Sketch seeds are decorrelated from the trace seed of the same trial.
fn sketch_seed(trial_seed: u64) -> u64 {
    (trial_seed ^ 0x6a09_e667_f3bc_c909).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Parameters of one sweep point.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Point {
    value: f64,
    slots: usize,
    stages: usize,
    k: usize,
    factor: f64,
}

fn points(spec: &ExperimentSpec) -> Vec<Point> {
    let f = &spec.fixed;
    let base = Point {
        value: 0.0,
        slots: f.slots,
        stages: f.stages,
        k: f.k,
        factor: f.overreport_factor,
    };
    match &spec.sweep {
        Sweep::Stages(v) => v.iter().map(|&d| Point { value: d as f64, stages: d, ..base }).collect(),
        Sweep::Slots(v) => v.iter().map(|&m| Point { value: m as f64, slots: m, ..base }).collect(),
        Sweep::K(v) => v.iter().map(|&k| Point { value: k as f64, k, ..base }).collect(),
        Sweep::OverreportFactor(v) => v.iter().map(|&x| Point { value: x, factor: x, ..base }).collect(),
    }
}

/// One (scheme, sweep point, trial) outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scheme: SchemeKind,
    pub sweep_axis: String,
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub fn_rate: Option<f64>,
    pub fp_rate: Option<f64>,
    pub dup_frac: Option<f64>,
    pub slots: usize,
    pub bytes: usize,
    pub config_hash: String,
    pub k: usize,
    pub stages: usize,
    pub overreport_factor: f64,
    pub stage_sizes: Option<Vec<usize>>,
    pub reported: usize,
    pub fn_top_quarter: Option<f64>,
    pub error_curve: Option<ErrorCurve>,
    /// Set when the point is infeasible for this scheme.
    pub error: Option<String>,
    /// Wall time of the streaming pass; kept out of serialized reports so
    /// that identical seeds give identical files.
    #[serde(skip)]
    pub elapsed: Duration,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "scheme",
    "sweep_axis",
    "sweep_value",
    "trial",
    "seed",
    "fn_rate",
    "fp_rate",
    "dup_frac",
    "slots",
    "bytes",
    "config_hash",
];

/// Cross-trial aggregate for one (scheme, sweep point).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scheme: SchemeKind,
    pub sweep_value: f64,
    pub trials: usize,
    pub errors: usize,
    pub fn_mean: f64,
    pub fn_stderr: f64,
    pub fp_mean: f64,
    pub fp_stderr: f64,
    pub dup_mean: Option<f64>,
    pub fn_top_quarter_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcdfPoint {
    pub sweep_value: f64,
    pub samples: usize,
    pub ccdf: Vec<(u64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeysPerCounterPoint {
    pub sweep_value: f64,
    pub counts: KeysPerCounter,
    pub true_positive_cdf: Vec<(usize, f64)>,
    pub false_positive_cdf: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverreportPoint {
    pub scheme: SchemeKind,
    pub factor: f64,
    pub fn_mean: f64,
    pub fn_stderr: f64,
}

/// Extra distributions produced by [`compare_idealized`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdealizedExtras {
    pub eviction_ccdf: Vec<CcdfPoint>,
    pub keys_per_counter: Vec<KeysPerCounterPoint>,
    pub overreport: Vec<OverreportPoint>,
    /// Per trial: slots space saving needs to guarantee the k-th flow.
    pub guarantee_slots: Vec<Option<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentSpec,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idealized: Option<IdealizedExtras>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn summarize(spec: &ExperimentSpec, rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &scheme in &spec.schemes {
        for value in spec.sweep.values() {
            let cell: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.scheme == scheme && r.sweep_value == value)
                .collect();
            let ok: Vec<&ReportRow> = cell.iter().copied().filter(|r| r.error.is_none()).collect();
            let col = |f: fn(&ReportRow) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
            let (fn_mean, fn_stderr) = mean_stderr(&col(|r| r.fn_rate));
            let (fp_mean, fp_stderr) = mean_stderr(&col(|r| r.fp_rate));
            let dups = col(|r| r.dup_frac);
            out.push(SummaryRow {
                scheme,
                sweep_value: value,
                trials: ok.len(),
                errors: cell.len() - ok.len(),
                fn_mean,
                fn_stderr,
                fp_mean,
                fp_stderr,
                dup_mean: (!dups.is_empty()).then(|| mean_stderr(&dups).0),
                fn_top_quarter_mean: mean_stderr(&col(|r| r.fn_top_quarter)).0,
            });
        }
    }
    out
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

impl ExperimentReport {
    pub fn summary_for(&self, scheme: SchemeKind, sweep_value: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.scheme == scheme && s.sweep_value == sweep_value)
    }

    pub fn rows_for(&self, scheme: SchemeKind, sweep_value: f64) -> impl Iterator<Item = &ReportRow> {
        self.rows
            .iter()
            .filter(move |r| r.scheme == scheme && r.sweep_value == sweep_value)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = ::csv::Writer::from_writer(Vec::new());
        out.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            out.write_record([
                r.scheme.as_str().to_string(),
                r.sweep_axis.clone(),
                r.sweep_value.to_string(),
                r.trial.to_string(),
                r.seed.to_string(),
                fmt_opt(r.fn_rate),
                fmt_opt(r.fp_rate),
                fmt_opt(r.dup_frac),
                r.slots.to_string(),
                r.bytes.to_string(),
                r.config_hash.clone(),
            ])?;
        }
        let bytes = out.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_csv_string()?.as_bytes())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_json_string()?.as_bytes())
    }

    /// JSON for `.json` paths, CSV otherwise.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            self.write_json(path)
        } else {
            self.write_csv(path)
        }
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Fixed-width table of the cross-trial means.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let axis = self.config.sweep.axis();
        let _ = writeln!(
            s,
            "{:<16} {:>18} {:>7} {:>16} {:>16} {:>8}",
            "scheme", axis, "trials", "fn (mean±se)", "fp (mean)", "dup"
        );
        for r in &self.summary {
            let dup = r.dup_mean.map_or_else(|| "-".into(), |d| format!("{:.3}", d));
            let _ = writeln!(
                s,
                "{:<16} {:>18} {:>7} {:>9.4}±{:<6.4} {:>16.3e} {:>8}{}",
                r.scheme.as_str(),
                r.sweep_value,
                r.trials,
                r.fn_mean,
                r.fn_stderr,
                r.fp_mean,
                dup,
                if r.errors > 0 { format!("  ({} infeasible)", r.errors) } else { String::new() }
            );
        }
        s
    }

    pub fn total_elapsed(&self) -> Duration {
        self.rows.iter().map(|r| r.elapsed).sum()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-trial packet source: either pre-cut file intervals or a generator.
enum Trials {
    File(Vec<Vec<PacketRecord>>),
    Zipf { flows: u64, packets: u64, alpha: f64 },
}

impl Trials {
    fn open(spec: &ExperimentSpec) -> Result<Trials> {
        match &spec.source {
            TraceSource::Zipf { flows, packets, alpha } => Ok(Trials::Zipf {
                flows: *flows,
                packets: *packets,
                alpha: *alpha,
            }),
            TraceSource::File { path, strict } => {
                let opts = ReadOptions {
                    granularity: spec.granularity,
                    weight: spec.weight,
                    strict: *strict,
                };
                let (records, summary) = load_trace(path, opts)?;
                log::info!(
                    "loaded {} records from {} ({} skipped)",
                    summary.records,
                    path.display(),
                    summary.skipped
                );
                let intervals = match spec.chunking {
                    Chunking::Even => split_even(records, spec.trials)?,
                    Chunking::Count(n) => chunk_trace(records, ChunkMode::ByCount(n))?,
                    Chunking::Seconds(s) => chunk_trace(records, ChunkMode::ByTime(s))?,
                };
                if intervals.len() < spec.trials {
                    return Err(Error::config(format!(
                        "trace yields {} intervals but {} trials were requested",
                        intervals.len(),
                        spec.trials
                    )));
                }
                Ok(Trials::File(
                    intervals
                        .into_iter()
                        .take(spec.trials)
                        .map(|i| i.records)
                        .collect(),
                ))
            }
        }
    }

    fn records(&mut self, trial: usize, seed: u64, granularity: Granularity) -> Result<Vec<PacketRecord>> {
        match self {
            Trials::File(chunks) => Ok(std::mem::take(&mut chunks[trial])),
            Trials::Zipf { flows, packets, alpha } => {
                let mut z = ZipfSpec::new(*flows, *packets, *alpha, seed);
                z.granularity = granularity;
                Ok(generate_zipf(&z)?.collect())
            }
        }
    }
}

/// Everything a cell needs about the current trial.
struct TrialCtx<'a> {
    spec: &'a ExperimentSpec,
    hash: &'a str,
    trial: usize,
    seed: u64,
    records: &'a [PacketRecord],
    oracle: &'a ExactCounts,
}

enum Built {
    Ss(SpaceSaving),
    Par(HashParallel),
    Pipe(HashPipe),
    Sh(SeededSampleHold),
    Cms(CmsWithCache),
}

impl Built {
    fn new(scheme: SchemeKind, p: &Point, ctx: &TrialCtx<'_>) -> Result<Built> {
        let seed = sketch_seed(ctx.seed);
        let g = ctx.spec.granularity;
        let bytes = slots_to_bytes(p.slots, g);
        let built = match scheme {
            SchemeKind::SpaceSaving => Built::Ss(SpaceSaving::new(p.slots)?),
            SchemeKind::HashParallel => Built::Par(HashParallel::new(p.slots, p.stages, seed)?),
            SchemeKind::HashPipe => Built::Pipe(HashPipe::new(p.slots, p.stages, seed)?),
            SchemeKind::SampleHold => {
                if p.slots == 0 {
                    return Err(Error::config("sample-and-hold needs at least one slot"));
                }
                let expected = ctx.records.len().max(1) as u64;
                let prob = SampleHold::sampling_probability(p.slots, expected, ctx.spec.fixed.oversampling);
                Built::Sh(SeededSampleHold::new(SampleHold::new(p.slots, prob)?, seed))
            }
            SchemeKind::CmsCache => {
                let geometry = CmsGeometry::from_budget(bytes, ctx.spec.fixed.cms_rows, g)?;
                let want = report_size(p.k, p.factor).min(ctx.oracle.num_flows()).max(1);
                let threshold = ctx.oracle.kth_count(want).unwrap_or(1);
                Built::Cms(CmsWithCache::new(geometry, threshold, seed)?)
            }
        };
        let mut built = built;
        let sketch = built.sketch_mut();
        sketch.reset();
        if !sketch.is_empty() {
            return Err(Error::config(format!("{scheme} state not empty after reset")));
        }
        Ok(built)
    }

    fn sketch(&self) -> &dyn HeavyHitterSketch {
        match self {
            Built::Ss(s) => s,
            Built::Par(s) => s,
            Built::Pipe(s) => s,
            Built::Sh(s) => s,
            Built::Cms(s) => s,
        }
    }

    fn sketch_mut(&mut self) -> &mut dyn HeavyHitterSketch {
        match self {
            Built::Ss(s) => s,
            Built::Par(s) => s,
            Built::Pipe(s) => s,
            Built::Sh(s) => s,
            Built::Cms(s) => s,
        }
    }

    fn stage_sizes(&self) -> Option<Vec<usize>> {
        match self {
            Built::Par(s) => Some(s.pipeline().stage_sizes().to_vec()),
            Built::Pipe(s) => Some(s.pipeline().stage_sizes().to_vec()),
            _ => None,
        }
    }

    fn stream(&mut self, records: &[PacketRecord], sampler: Option<&mut EvictionSampler>) {
        fn feed<S: HeavyHitterSketch>(s: &mut S, records: &[PacketRecord]) {
            for r in records {
                s.insert(r);
            }
        }
        match self {
            Built::Ss(s) => feed(s, records),
            Built::Par(s) => feed(s, records),
            Built::Pipe(s) => match sampler {
                Some(sampler) => {
                    for r in records {
                        let outcome = s.insert(r);
                        sampler.observe(r.seq, &outcome);
                    }
                }
                None => feed(s, records),
            },
            Built::Sh(s) => feed(s, records),
            Built::Cms(s) => feed(s, records),
        }
    }
}

fn base_row(scheme: SchemeKind, p: &Point, ctx: &TrialCtx<'_>) -> ReportRow {
    ReportRow {
        scheme,
        sweep_axis: ctx.spec.sweep.axis().to_string(),
        sweep_value: p.value,
        trial: ctx.trial,
        seed: ctx.seed,
        fn_rate: None,
        fp_rate: None,
        dup_frac: None,
        slots: p.slots,
        bytes: slots_to_bytes(p.slots, ctx.spec.granularity),
        config_hash: ctx.hash.to_string(),
        k: p.k,
        stages: p.stages,
        overreport_factor: p.factor,
        stage_sizes: None,
        reported: 0,
        fn_top_quarter: None,
        error_curve: None,
        error: None,
        elapsed: Duration::ZERO,
    }
}

fn evaluate(built: &Built, p: &Point, ctx: &TrialCtx<'_>, row: &mut ReportRow) {
    let sketch = built.sketch();
    let report = sketch.report(p.k, p.factor);
    let fixed = &ctx.spec.fixed;
    let acc = AccuracyResult::evaluate(
        &report.entries,
        &sketch.estimates(),
        ctx.oracle,
        p.k,
        &fixed.error_thresholds,
        fixed.include_missing,
    );
    row.fn_rate = Some(acc.false_negative_rate);
    row.fp_rate = Some(acc.false_positive_rate);
    row.fn_top_quarter = Some(acc.top_quarter_fn_rate);
    row.error_curve = Some(acc.est_error_curve);
    row.dup_frac = sketch.duplicate_fraction();
    row.reported = report.len();
    row.stage_sizes = built.stage_sizes();
}

/// Run one cell; an infeasible point becomes an error row.
fn run_cell(scheme: SchemeKind, p: &Point, ctx: &TrialCtx<'_>) -> ReportRow {
    let mut row = base_row(scheme, p, ctx);
    match Built::new(scheme, p, ctx) {
        Ok(mut built) => {
            let start = Instant::now();
            built.stream(ctx.records, None);
            row.elapsed = start.elapsed();
            evaluate(&built, p, ctx, &mut row);
        }
        Err(e) => {
            log::warn!("{scheme} at {}={}: {e}", ctx.spec.sweep.axis(), p.value);
            row.error = Some(e.to_string());
        }
    }
    row
}

/// Run every (scheme, sweep point) over every trial.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let hash = spec.config_hash();
    let seeds = spec.trial_seeds();
    let pts = points(spec);
    let cells: Vec<(SchemeKind, Point)> = spec
        .schemes
        .iter()
        .flat_map(|&s| pts.iter().map(move |p| (s, *p)))
        .collect();
    let mut trials = Trials::open(spec)?;
    let mut rows = Vec::with_capacity(cells.len() * spec.trials);
    for (trial, &seed) in seeds.iter().enumerate() {
        let records = trials.records(trial, seed, spec.granularity)?;
        let oracle = ExactCounts::from_records(&records);
        oracle.ranked();
        let ctx = TrialCtx {
            spec,
            hash: &hash,
            trial,
            seed,
            records: &records,
            oracle: &oracle,
        };
        log::debug!("trial {trial}: {} packets, {} flows", records.len(), oracle.num_flows());
        let trial_rows: Vec<ReportRow> = cells.par_iter().map(|(s, p)| run_cell(*s, p, &ctx)).collect();
        rows.extend(trial_rows);
    }
    // Stable order: scheme, sweep point, trial.
    rows.sort_by(|a, b| {
        let pos = |r: &ReportRow| {
            (
                spec.schemes.iter().position(|s| *s == r.scheme),
                pts.iter().position(|p| p.value == r.sweep_value),
                r.trial,
            )
        };
        pos(a).cmp(&pos(b))
    });
    let summary = summarize(spec, &rows);
    Ok(ExperimentReport {
        config: spec.clone(),
        config_hash: hash,
        seeds,
        rows,
        summary,
        idealized: None,
    })
}

/// Space saving, HashParallel and HashPipe on identical slot budgets, plus
/// the eviction CCDF of HashPipe, keys-per-counter of space saving and an
/// overreporting sweep at the fixed parameters.
pub fn compare_idealized(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let mut spec = spec.clone();
    spec.schemes = vec![SchemeKind::SpaceSaving, SchemeKind::HashParallel, SchemeKind::HashPipe];
    let mut report = run_experiment(&spec)?;
    let seeds = report.seeds.clone();
    let hash = report.config_hash.clone();
    let pts = points(&spec);
    let fixed = spec.fixed.clone();
    let base = Point {
        value: 0.0,
        slots: fixed.slots,
        stages: fixed.stages,
        k: fixed.k,
        factor: 1.0,
    };

    let mut evictions: Vec<Vec<u64>> = vec![Vec::new(); pts.len()];
    let mut kpc: Vec<KeysPerCounter> = vec![KeysPerCounter::default(); pts.len()];
    let over_schemes = [SchemeKind::SpaceSaving, SchemeKind::HashPipe];
    let mut over_fn: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); fixed.overreport_factors.len()]; over_schemes.len()];
    let mut guarantees = Vec::new();

    let mut trials = Trials::open(&spec)?;
    for (trial, &seed) in seeds.iter().enumerate() {
        let records = trials.records(trial, seed, spec.granularity)?;
        let oracle = ExactCounts::from_records(&records);
        guarantees.push(oracle.kth_count(fixed.k).and_then(|c| guarantee_slots(oracle.total(), c)));
        let ctx = TrialCtx {
            spec: &spec,
            hash: &hash,
            trial,
            seed,
            records: &records,
            oracle: &oracle,
        };
        let per_point: Vec<(Vec<u64>, Option<KeysPerCounter>)> = pts
            .par_iter()
            .map(|p| {
                let mut samples = Vec::new();
                if let Ok(mut pipe) = Built::new(SchemeKind::HashPipe, p, &ctx) {
                    let mut sampler = EvictionSampler::new(fixed.eviction_sample_every);
                    pipe.stream(&records, Some(&mut sampler));
                    samples = sampler.samples().to_vec();
                }
                let kpc = SpaceSaving::new(p.slots).ok().map(|ss| {
                    let mut ss = ss.with_contributor_tracking();
                    for r in &records {
                        ss.insert(r);
                    }
                    ss.keys_per_counter(p.k, &oracle).expect("tracking enabled")
                });
                (samples, kpc)
            })
            .collect();
        for (i, (samples, k)) in per_point.into_iter().enumerate() {
            evictions[i].extend(samples);
            if let Some(k) = k {
                kpc[i].extend(k);
            }
        }
        let over: Vec<Vec<f64>> = over_schemes
            .par_iter()
            .map(|&s| match Built::new(s, &base, &ctx) {
                Ok(mut built) => {
                    built.stream(&records, None);
                    fixed
                        .overreport_factors
                        .iter()
                        .map(|&f| {
                            let rep = built.sketch().report(fixed.k, f);
                            crate::metrics::false_negative_rate(rep.keys(), &oracle, fixed.k)
                        })
                        .collect()
                }
                Err(_) => Vec::new(),
            })
            .collect();
        for (si, fns) in over.into_iter().enumerate() {
            for (fi, v) in fns.into_iter().enumerate() {
                over_fn[si][fi].push(v);
            }
        }
    }

    let mut extras = IdealizedExtras {
        guarantee_slots: guarantees,
        ..IdealizedExtras::default()
    };
    for (i, p) in pts.iter().enumerate() {
        extras.eviction_ccdf.push(CcdfPoint {
            sweep_value: p.value,
            samples: evictions[i].len(),
            ccdf: ccdf(&evictions[i]),
        });
        extras.keys_per_counter.push(KeysPerCounterPoint {
            sweep_value: p.value,
            true_positive_cdf: ecdf(&kpc[i].true_positive),
            false_positive_cdf: ecdf(&kpc[i].false_positive),
            counts: std::mem::take(&mut kpc[i]),
        });
    }
    for (si, &scheme) in over_schemes.iter().enumerate() {
        for (fi, &factor) in fixed.overreport_factors.iter().enumerate() {
            let (fn_mean, fn_stderr) = mean_stderr(&over_fn[si][fi]);
            extras.overreport.push(OverreportPoint {
                scheme,
                factor,
                fn_mean,
                fn_stderr,
            });
        }
    }
    report.idealized = Some(extras);
    Ok(report)
}
