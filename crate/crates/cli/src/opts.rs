//! Experiment flags, their TOML config-file form, and the merge into an
//! [`ExperimentSpec`].

use std::path::PathBuf;

use clap::Args;
use pipesketch::{
    memory_to_slots, Chunking, ExperimentSpec, FixedParams, Granularity, SchemeKind, Sweep, TraceSource, WeightMode,
};
use serde::Deserialize;

use crate::CliError;

pub const SEED_ENV: &str = "PIPESKETCH_SEED";

const DEFAULT_STAGES: usize = 6;
const DEFAULT_K: usize = 150;
const DEFAULT_TRIALS: usize = 10;
const DEFAULT_ZIPF: (u64, u64, f64) = (10_000, 1_000_000, 1.0);

/// Every field is optional so that flags, a config file and defaults can be
/// layered. Config keys use the flag names.
#[derive(Args, Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunOpts {
    /// Packet trace; `.pcap`/`.cap` is read as pcap, anything else as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,

    /// Synthetic trace instead of a file: number of flows.
    #[arg(long, conflicts_with = "trace")]
    pub zipf_flows: Option<u64>,

    #[arg(long, conflicts_with = "trace")]
    pub zipf_packets: Option<u64>,

    #[arg(long, conflicts_with = "trace")]
    pub zipf_alpha: Option<f64>,

    /// Schemes to run, comma separated [default: hashpipe].
    #[arg(long, value_delimiter = ',')]
    pub scheme: Vec<SchemeKind>,

    /// Table stages d [default: 6].
    #[arg(long, short = 'd')]
    pub stages: Option<usize>,

    /// Total slots across all stages [default: 4500].
    #[arg(long, short = 'm', conflicts_with = "memory_bytes")]
    pub slots: Option<usize>,

    /// Memory budget in bytes, converted to slots.
    #[arg(long)]
    pub memory_bytes: Option<usize>,

    /// Number of heavy hitters [default: 150].
    #[arg(long, short = 'k')]
    pub k: Option<usize>,

    /// Report the top ceil(k * factor) entries [default: 1].
    #[arg(long)]
    pub factor: Option<f64>,

    /// Sample-and-hold oversampling [default: 1].
    #[arg(long)]
    pub oversampling: Option<f64>,

    /// Trials per sweep point [default: 10].
    #[arg(long)]
    pub trials: Option<usize>,

    /// Master seed; falls back to PIPESKETCH_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Swept parameter, e.g. `stages=2,4,6` or `slots=600,1200`.
    #[arg(long)]
    pub sweep: Option<String>,

    /// Cut a file trace into chunks of this many packets.
    #[arg(long, conflicts_with = "chunk_seconds")]
    pub chunk_count: Option<usize>,

    /// Cut a file trace into windows of this many seconds.
    #[arg(long)]
    pub chunk_seconds: Option<f64>,

    #[arg(long)]
    pub granularity: Option<Granularity>,

    #[arg(long)]
    pub weight: Option<WeightMode>,

    /// Fail when more than 1% of trace records are malformed.
    #[arg(long)]
    pub strict: bool,

    /// Estimation-error thresholds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub error_thresholds: Vec<u64>,

    /// Count unreported heavy flows as 100% error.
    #[arg(long)]
    pub include_missing: bool,
}

impl RunOpts {
    /// Explicit flags win over `base`.
    pub fn merged_over(self, base: RunOpts) -> RunOpts {
        let own_size = self.slots.is_some() || self.memory_bytes.is_some();
        let own_source = self.trace.is_some() || self.zipf_flows.is_some() || self.zipf_packets.is_some() || self.zipf_alpha.is_some();
        let (slots, memory_bytes) = if own_size {
            (self.slots, self.memory_bytes)
        } else {
            (base.slots, base.memory_bytes)
        };
        let (trace, zipf_flows, zipf_packets, zipf_alpha) = if own_source {
            (self.trace, self.zipf_flows, self.zipf_packets, self.zipf_alpha)
        } else {
            (base.trace, base.zipf_flows, base.zipf_packets, base.zipf_alpha)
        };
        let (chunk_count, chunk_seconds) = if self.chunk_count.is_some() || self.chunk_seconds.is_some() {
            (self.chunk_count, self.chunk_seconds)
        } else {
            (base.chunk_count, base.chunk_seconds)
        };
        RunOpts {
            trace,
            zipf_flows,
            zipf_packets,
            zipf_alpha,
            scheme: if self.scheme.is_empty() { base.scheme } else { self.scheme },
            stages: self.stages.or(base.stages),
            slots,
            memory_bytes,
            k: self.k.or(base.k),
            factor: self.factor.or(base.factor),
            oversampling: self.oversampling.or(base.oversampling),
            trials: self.trials.or(base.trials),
            seed: self.seed.or(base.seed),
            sweep: self.sweep.or(base.sweep),
            chunk_count,
            chunk_seconds,
            granularity: self.granularity.or(base.granularity),
            weight: self.weight.or(base.weight),
            strict: self.strict || base.strict,
            error_thresholds: if self.error_thresholds.is_empty() {
                base.error_thresholds
            } else {
                self.error_thresholds
            },
            include_missing: self.include_missing || base.include_missing,
        }
    }

    pub fn into_spec(self, env_seed: Option<&str>, output: Option<PathBuf>) -> Result<ExperimentSpec, CliError> {
        let granularity = self.granularity.unwrap_or_default();
        let has_zipf = self.zipf_flows.is_some() || self.zipf_packets.is_some() || self.zipf_alpha.is_some();
        let source = match self.trace {
            Some(_) if has_zipf => return Err(CliError::Usage("`trace` and `zipf-*` are mutually exclusive".into())),
            Some(path) => TraceSource::File { path, strict: self.strict },
            None => TraceSource::Zipf {
                flows: self.zipf_flows.unwrap_or(DEFAULT_ZIPF.0),
                packets: self.zipf_packets.unwrap_or(DEFAULT_ZIPF.1),
                alpha: self.zipf_alpha.unwrap_or(DEFAULT_ZIPF.2),
            },
        };

        let defaults = FixedParams::default();
        let slots = match (self.slots, self.memory_bytes) {
            (Some(_), Some(_)) => return Err(CliError::Usage("`slots` and `memory-bytes` are mutually exclusive".into())),
            (Some(m), None) => m,
            (None, Some(bytes)) => memory_to_slots(bytes, granularity)?,
            (None, None) => defaults.slots,
        };
        let stages = self.stages.unwrap_or(DEFAULT_STAGES);
        let fixed = FixedParams {
            slots,
            stages,
            k: self.k.unwrap_or(DEFAULT_K),
            overreport_factor: self.factor.unwrap_or(defaults.overreport_factor),
            oversampling: self.oversampling.unwrap_or(defaults.oversampling),
            error_thresholds: if self.error_thresholds.is_empty() {
                defaults.error_thresholds.clone()
            } else {
                self.error_thresholds
            },
            include_missing: self.include_missing,
            ..defaults
        };

        let chunking = match (self.chunk_count, self.chunk_seconds) {
            (Some(_), Some(_)) => {
                return Err(CliError::Usage("`chunk-count` and `chunk-seconds` are mutually exclusive".into()))
            }
            (Some(n), None) => Chunking::Count(n),
            (None, Some(s)) => Chunking::Seconds(s),
            (None, None) => Chunking::Even,
        };

        let seed = match (self.seed, env_seed) {
            (Some(s), _) => s,
            (None, Some(v)) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?,
            (None, None) => 0,
        };

        Ok(ExperimentSpec {
            source,
            granularity,
            weight: self.weight.unwrap_or_default(),
            chunking,
            schemes: if self.scheme.is_empty() { vec![SchemeKind::HashPipe] } else { self.scheme },
            sweep: match self.sweep {
                Some(s) => parse_sweep(&s)?,
                None => Sweep::Stages(vec![stages]),
            },
            fixed,
            trials: self.trials.unwrap_or(DEFAULT_TRIALS),
            seed,
            seeds: Vec::new(),
            output,
        })
    }
}

/// `axis=v1,v2,...`
pub fn parse_sweep(s: &str) -> Result<Sweep, CliError> {
    let bad = |why: &str| CliError::Usage(format!("bad sweep `{s}`: {why}"));
    let (axis, values) = s.split_once('=').ok_or_else(|| bad("expected axis=v1,v2,..."))?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(bad("no values"));
    }
    let ints = || -> Result<Vec<usize>, CliError> {
        values.iter().map(|v| v.parse().map_err(|_| bad("values must be integers"))).collect()
    };
    match axis.trim() {
        "stages" | "d" => Ok(Sweep::Stages(ints()?)),
        "slots" | "m" => Ok(Sweep::Slots(ints()?)),
        "k" => Ok(Sweep::K(ints()?)),
        "factor" | "overreport-factor" | "overreport_factor" => Ok(Sweep::OverreportFactor(
            values.iter().map(|v| v.parse().map_err(|_| bad("values must be numbers"))).collect::<Result<_, _>>()?,
        )),
        other => Err(bad(&format!("unknown axis `{other}` (stages, slots, k, factor)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let config: RunOpts = toml::from_str("stages = 4\nk = 300\nslots = 900\nscheme = [\"spacesaving\"]").unwrap();
        let flags = RunOpts {
            stages: Some(8),
            memory_bytes: Some(18_000),
            ..RunOpts::default()
        };
        let spec = flags.merged_over(config).into_spec(None, None).unwrap();
        assert_eq!(spec.fixed.stages, 8);
        assert_eq!(spec.fixed.k, 300);
        assert_eq!(spec.fixed.slots, 1000);
        assert_eq!(spec.schemes, vec![SchemeKind::SpaceSaving]);
    }

    #[test]
    fn defaults() {
        let spec = RunOpts::default().into_spec(None, None).unwrap();
        assert_eq!((spec.fixed.stages, spec.fixed.k, spec.fixed.slots), (6, 150, 4500));
        assert_eq!(spec.sweep, Sweep::Stages(vec![6]));
        assert_eq!(spec.seed, 0);
    }

    #[test]
    fn seed_falls_back_to_env() {
        assert_eq!(RunOpts::default().into_spec(Some("42"), None).unwrap().seed, 42);
        let explicit = RunOpts { seed: Some(1), ..RunOpts::default() };
        assert_eq!(explicit.into_spec(Some("42"), None).unwrap().seed, 1);
        assert!(RunOpts::default().into_spec(Some("x"), None).is_err());
    }

    #[test]
    fn sweeps() {
        assert_eq!(parse_sweep("slots=600, 1200").unwrap(), Sweep::Slots(vec![600, 1200]));
        assert_eq!(parse_sweep("factor=1,1.5").unwrap(), Sweep::OverreportFactor(vec![1.0, 1.5]));
        assert!(parse_sweep("stages").is_err());
        assert!(parse_sweep("depth=2").is_err());
        assert!(parse_sweep("k=1.5").is_err());
    }

    #[test]
    fn config_conflicts_are_usage_errors() {
        let both: RunOpts = toml::from_str("slots = 10\nmemory-bytes = 1000").unwrap();
        assert!(matches!(both.into_spec(None, None), Err(CliError::Usage(_))));
        assert!(toml::from_str::<RunOpts>("depth = 3").is_err());
    }
}
