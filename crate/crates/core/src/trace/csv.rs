use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ReadOptions, ReadSummary, WeightMode};
use crate::error::{Error, Result};
use crate::flow::{FiveTuple, FlowKey, PacketRecord};

pub const CSV_HEADER: [&str; 7] = ["ts", "src", "dst", "proto", "sport", "dport", "bytes"];

/// One row of a CSV trace. Field order fixes the header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvPacketRow {
    pub ts: Option<f64>,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub proto: u8,
    pub sport: u16,
    pub dport: u16,
    pub bytes: u64,
}

impl CsvPacketRow {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.bytes == 0 {
            return Err("bytes must be positive".into());
        }
        match self.ts {
            Some(t) if !t.is_finite() => Err(format!("bad timestamp {t}")),
            _ => Ok(()),
        }
    }

    pub fn tuple(&self) -> FiveTuple {
        FiveTuple::new(self.src, self.dst, self.proto, self.sport, self.dport)
    }

    /// Row for a record; fields outside the key's granularity are zero and
    /// `bytes` carries the weight.
    pub fn from_record(r: &PacketRecord) -> Self {
        let t = r.key.to_tuple();
        Self {
            ts: r.ts,
            src: t.src,
            dst: t.dst,
            proto: t.proto,
            sport: t.sport,
            dport: t.dport,
            bytes: r.weight,
        }
    }
}

/// Streaming CSV trace reader. In strict mode the malformed-row share is
/// checked once the input is exhausted; exceeding 1% yields a final error.
pub struct CsvReader<R: Read> {
    inner: ::csv::Reader<R>,
    row: ::csv::StringRecord,
    headers: ::csv::StringRecord,
    opts: ReadOptions,
    summary: ReadSummary,
    done: bool,
}

impl<R: Read> CsvReader<R> {
    pub fn new(input: R, opts: ReadOptions) -> Result<Self> {
        let mut inner = ::csv::ReaderBuilder::new()
            .trim(::csv::Trim::All)
            .flexible(true)
            .from_reader(input);
        let headers = inner.headers()?.clone();
        if headers.iter().ne(CSV_HEADER) {
            return Err(Error::Format(format!(
                "expected header `{}`, found `{}`",
                CSV_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        Ok(Self {
            inner,
            row: ::csv::StringRecord::new(),
            headers,
            opts,
            summary: ReadSummary::default(),
            done: false,
        })
    }

    pub fn summary(&self) -> &ReadSummary {
        &self.summary
    }

    fn skip(&mut self, why: impl std::fmt::Display) {
        self.summary.skipped += 1;
        let line = self.row.position().map_or(0, |p| p.line());
        log::debug!("skipping CSV line {line}: {why}");
    }

    fn finish(&mut self) -> Option<Result<PacketRecord>> {
        self.done = true;
        let s = &self.summary;
        let rows = s.records + s.skipped;
        if self.opts.strict && s.skipped * 100 > rows {
            return Some(Err(Error::Format(format!(
                "{} of {rows} rows malformed (strict mode allows 1%)",
                s.skipped
            ))));
        }
        if s.skipped > 0 {
            log::warn!("skipped {} malformed CSV rows", s.skipped);
        }
        None
    }
}

impl<R: Read> Iterator for CsvReader<R> {
    type Item = Result<PacketRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            match self.inner.read_record(&mut self.row) {
                Ok(false) => return self.finish(),
                Ok(true) => {}
                Err(e) if matches!(e.kind(), ::csv::ErrorKind::Io(_)) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
                Err(e) => {
                    self.skip(e);
                    continue;
                }
            }
            let row: CsvPacketRow = match self.row.deserialize(Some(&self.headers)) {
                Ok(row) => row,
                Err(e) => {
                    self.skip(e);
                    continue;
                }
            };
            if let Err(why) = row.validate() {
                self.skip(why);
                continue;
            }
            let weight = match self.opts.weight {
                WeightMode::Packets => 1,
                WeightMode::Bytes => row.bytes,
            };
            let key = FlowKey::from_tuple(&row.tuple(), self.opts.granularity);
            let mut rec = PacketRecord::new(key, weight, self.summary.records);
            rec.ts = row.ts;
            self.summary.records += 1;
            return Some(Ok(rec));
        }
    }
}

pub fn read_csv(path: impl AsRef<Path>, opts: ReadOptions) -> Result<CsvReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    CsvReader::new(BufReader::new(file), opts)
}

/// Write records with the standard header. Returns the number of rows.
pub fn write_csv<'a>(path: impl AsRef<Path>, records: impl IntoIterator<Item = &'a PacketRecord>) -> Result<u64> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = ::csv::Writer::from_writer(BufWriter::new(file));
    let mut n = 0;
    for r in records {
        out.serialize(CsvPacketRow::from_record(r))?;
        n += 1;
    }
    if n == 0 {
        out.write_record(CSV_HEADER)?;
    }
    out.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Granularity;
    use crate::trace::{generate_zipf, ZipfSpec};

    fn reader(text: &str, opts: ReadOptions) -> Result<CsvReader<&[u8]>> {
        CsvReader::new(text.as_bytes(), opts)
    }

    const FIXTURE: &str = "ts,src,dst,proto,sport,dport,bytes
0.5,10.0.0.1,10.0.0.2,6,1234,80,1500
0.7,10.0.0.3,10.0.0.4,17,53,5353,80
,10.0.0.1,10.0.0.2,1,0,0,64
";

    #[test]
    fn three_row_fixture() {
        let mut r = reader(FIXTURE, ReadOptions::default()).unwrap();
        let recs: Vec<_> = r.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].key.to_string(), "10.0.0.1:1234->10.0.0.2:80/6");
        assert_eq!(recs[1].key.to_string(), "10.0.0.3:53->10.0.0.4:5353/17");
        assert_eq!(recs[2].key.to_string(), "10.0.0.1:0->10.0.0.2:0/1");
        assert_eq!(recs.iter().map(|r| r.seq).collect::<Vec<_>>(), [0, 1, 2]);
        assert_eq!(recs.iter().map(|r| r.ts).collect::<Vec<_>>(), [Some(0.5), Some(0.7), None]);
        assert!(recs.iter().all(|r| r.weight == 1));
        assert_eq!(r.summary().skipped, 0);
    }

    #[test]
    fn byte_weights_and_coarse_keys() {
        let opts = ReadOptions {
            granularity: Granularity::IpPair,
            weight: WeightMode::Bytes,
            strict: false,
        };
        let recs: Vec<_> = reader(FIXTURE, opts).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(recs[0].weight, 1500);
        assert_eq!(recs[0].key, recs[2].key);
        assert_eq!(recs[0].key.to_string(), "10.0.0.1->10.0.0.2");
    }

    #[test]
    fn bad_port_is_skipped_and_counted() {
        let text = "ts,src,dst,proto,sport,dport,bytes
1.0,10.0.0.1,10.0.0.2,6,70000,80,100
1.1,10.0.0.1,10.0.0.2,6,7000,80,100
1.2,10.0.0.300,10.0.0.2,6,1,80,100
1.3,10.0.0.1,10.0.0.2,6,1,80,0
1.4,10.0.0.1,10.0.0.2,6
";
        let mut r = reader(text, ReadOptions::default()).unwrap();
        let recs: Vec<_> = r.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].key.to_tuple().sport, 7000);
        assert_eq!(recs[0].seq, 0);
        assert_eq!(r.summary().skipped, 4);
    }

    #[test]
    fn strict_mode_aborts_past_one_percent() {
        let mut text = String::from("ts,src,dst,proto,sport,dport,bytes\n");
        for i in 0..99 {
            text.push_str(&format!("{i},10.0.0.1,10.0.0.2,6,1,2,60\n"));
        }
        text.push_str("x,10.0.0.1,10.0.0.2,6,1,2,60\n");
        let strict = ReadOptions {
            strict: true,
            ..ReadOptions::default()
        };
        // Exactly 1% is tolerated.
        assert_eq!(reader(&text, strict).unwrap().collect::<Result<Vec<_>>>().unwrap().len(), 99);
        text.push_str("y,10.0.0.1,10.0.0.2,6,1,2,60\n");
        assert!(reader(&text, strict).unwrap().collect::<Result<Vec<_>>>().is_err());
        assert_eq!(reader(&text, ReadOptions::default()).unwrap().count(), 99);
    }

    #[test]
    fn header_must_match() {
        let err = reader("src,dst\n1,2\n", ReadOptions::default()).err().unwrap();
        assert!(err.is_io());
        assert!(reader("", ReadOptions::default()).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_csv("/nonexistent/trace.csv", ReadOptions::default()).err().unwrap();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn million_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let spec = ZipfSpec::new(10_000, 1_000_000, 1.0, 11);
        let original: Vec<_> = generate_zipf(&spec)
            .unwrap()
            .map(|mut r| {
                r.ts = Some(r.seq as f64 * 1e-6);
                r.weight = 40 + r.seq % 1460;
                r
            })
            .collect();
        assert_eq!(write_csv(&path, &original).unwrap(), 1_000_000);
        let opts = ReadOptions {
            weight: WeightMode::Bytes,
            ..ReadOptions::default()
        };
        let mut r = read_csv(&path, opts).unwrap();
        let back: Vec<_> = r.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(r.summary().skipped, 0);
        assert!(back == original);
    }

    #[test]
    fn zero_tuple_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.csv");
        let z = Ipv4Addr::UNSPECIFIED;
        let key = FlowKey::from_tuple(&FiveTuple::new(z, z, 0, 0, 0), Granularity::FiveTuple);
        let recs = vec![PacketRecord::new(key, 1, 0)];
        write_csv(&path, &recs).unwrap();
        let back: Vec<_> = read_csv(&path, ReadOptions::default()).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn empty_trace_keeps_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        write_csv(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "ts,src,dst,proto,sport,dport,bytes\n");
        assert_eq!(read_csv(&path, ReadOptions::default()).unwrap().count(), 0);
    }
}
