//! Trace acquisition: CSV packet records, classic pcap files and a seeded
//! Zipf generator. Every reader yields [`PacketRecord`]s in file order with
//! `seq` numbered from 0 over accepted records.

mod csv;
mod pcap;
mod zipf;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Granularity, PacketRecord};

pub use self::csv::{read_csv, write_csv, CsvPacketRow, CsvReader, CSV_HEADER};
pub use self::pcap::{read_pcap, PcapReader};
pub use self::zipf::{generate_zipf, zipf_key, ZipfSpec, ZipfStream};

/// What a record's weight counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    #[default]
    Packets,
    Bytes,
}

impl std::fmt::Display for WeightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightMode::Packets => "packets",
            WeightMode::Bytes => "bytes",
        })
    }
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "packets" => Ok(WeightMode::Packets),
            "bytes" => Ok(WeightMode::Bytes),
            other => Err(Error::config(format!("unknown weight mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadOptions {
    pub granularity: Granularity,
    pub weight: WeightMode,
    /// Abort when more than 1% of rows are malformed.
    pub strict: bool,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self {
            granularity: Granularity::FiveTuple,
            weight: WeightMode::Packets,
            strict: false,
        }
    }
}

impl ReadOptions {
    pub fn new(granularity: Granularity) -> Self {
        Self {
            granularity,
            ..Self::default()
        }
    }
}

/// Counts kept while reading a trace file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadSummary {
    pub records: u64,
    /// Malformed CSV rows, or pcap frames that were truncated or not IPv4.
    pub skipped: u64,
    pub skipped_non_ipv4: u64,
    pub skipped_vlan: u64,
    pub skipped_truncated: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Pcap,
}

impl TraceFormat {
    /// `.pcap`/`.cap` files are pcap; anything else is read as CSV.
    pub fn from_path(path: &Path) -> TraceFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("pcap") || ext.eq_ignore_ascii_case("cap") => {
                TraceFormat::Pcap
            }
            _ => TraceFormat::Csv,
        }
    }
}

/// Read a whole trace file into memory.
pub fn load_trace(path: impl AsRef<Path>, opts: ReadOptions) -> Result<(Vec<PacketRecord>, ReadSummary)> {
    let path = path.as_ref();
    match TraceFormat::from_path(path) {
        TraceFormat::Csv => {
            let mut reader = read_csv(path, opts)?;
            let records = reader.by_ref().collect::<Result<Vec<_>>>()?;
            Ok((records, reader.summary().clone()))
        }
        TraceFormat::Pcap => {
            let mut reader = read_pcap(path, opts)?;
            let records = reader.by_ref().collect::<Result<Vec<_>>>()?;
            Ok((records, reader.summary().clone()))
        }
    }
}
