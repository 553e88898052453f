//! Classic libpcap reader: 24-byte global header, 16-byte record headers,
//! Ethernet link type, IPv4 only. VLAN-tagged frames are skipped.

use std::fs::File;
use std::io::{self, BufReader, Read};
use std::net::Ipv4Addr;
use std::path::Path;

use super::{ReadOptions, ReadSummary, WeightMode};
use crate::error::{Error, Result};
use crate::flow::{FiveTuple, FlowKey, PacketRecord};

const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
const LINKTYPE_ETHERNET: u32 = 1;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: [u16; 3] = [0x8100, 0x88A8, 0x9100];
const ETH_HEADER: usize = 14;
// Frames above this are treated as corrupt rather than allocated.
const MAX_CAPTURE: u32 = 256 * 1024;

pub struct PcapReader<R: Read> {
    input: R,
    big_endian: bool,
    nanos: bool,
    opts: ReadOptions,
    summary: ReadSummary,
    frame: Vec<u8>,
    done: bool,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut input: R, opts: ReadOptions) -> Result<Self> {
        let mut hdr = [0u8; 24];
        input
            .read_exact(&mut hdr)
            .map_err(|_| Error::Format("pcap global header is truncated".into()))?;
        let magic = u32::from_le_bytes(hdr[0..4].try_into().unwrap());
        let (big_endian, nanos) = match magic {
            MAGIC_MICROS => (false, false),
            MAGIC_NANOS => (false, true),
            m if m.swap_bytes() == MAGIC_MICROS => (true, false),
            m if m.swap_bytes() == MAGIC_NANOS => (true, true),
            m => return Err(Error::Format(format!("bad pcap magic {m:#010x}"))),
        };
        let word = |b: &[u8]| {
            let b: [u8; 4] = b.try_into().unwrap();
            if big_endian {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            }
        };
        let link = word(&hdr[20..24]);
        if link != LINKTYPE_ETHERNET {
            return Err(Error::Format(format!(
                "unsupported pcap link type {link}; only Ethernet (1) is read"
            )));
        }
        Ok(Self {
            input,
            big_endian,
            nanos,
            opts,
            summary: ReadSummary::default(),
            frame: Vec::new(),
            done: false,
        })
    }

    pub fn summary(&self) -> &ReadSummary {
        &self.summary
    }

    fn word(&self, b: &[u8]) -> u32 {
        let b: [u8; 4] = b.try_into().unwrap();
        if self.big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    }

    fn log_skips(&self) {
        let s = &self.summary;
        if s.skipped > 0 {
            log::warn!(
                "pcap: skipped {} frames ({} non-IPv4, {} VLAN, {} truncated)",
                s.skipped,
                s.skipped_non_ipv4,
                s.skipped_vlan,
                s.skipped_truncated
            );
        }
    }

    fn skip_truncated(&mut self) {
        self.summary.skipped += 1;
        self.summary.skipped_truncated += 1;
    }

    /// Read as much as possible into `buf`; returns bytes read.
    fn fill(&mut self, buf_len: usize) -> io::Result<usize> {
        self.frame.resize(buf_len, 0);
        let mut got = 0;
        while got < buf_len {
            match self.input.read(&mut self.frame[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        Ok(got)
    }

    fn read_frame(&mut self) -> Result<Option<(f64, u32)>> {
        let got = self.fill(16).map_err(|e| Error::Format(format!("pcap read failed: {e}")))?;
        if got == 0 {
            return Ok(None);
        }
        if got < 16 {
            self.skip_truncated();
            return Ok(None);
        }
        let rec: [u8; 16] = self.frame[..16].try_into().unwrap();
        let secs = self.word(&rec[0..4]);
        let frac = self.word(&rec[4..8]);
        let incl = self.word(&rec[8..12]);
        let orig = self.word(&rec[12..16]);
        if incl > MAX_CAPTURE {
            return Err(Error::Format(format!("pcap record claims {incl} captured bytes")));
        }
        let got = self
            .fill(incl as usize)
            .map_err(|e| Error::Format(format!("pcap read failed: {e}")))?;
        if got < incl as usize {
            self.skip_truncated();
            return Ok(None);
        }
        let per_sec = if self.nanos { 1e9 } else { 1e6 };
        Ok(Some((secs as f64 + frac as f64 / per_sec, orig)))
    }

    fn decode(&mut self) -> Option<FiveTuple> {
        let f = &self.frame;
        if f.len() < ETH_HEADER {
            self.skip_truncated();
            return None;
        }
        let ethertype = u16::from_be_bytes([f[12], f[13]]);
        if ETHERTYPE_VLAN.contains(&ethertype) {
            self.summary.skipped += 1;
            self.summary.skipped_vlan += 1;
            return None;
        }
        let ip = &f[ETH_HEADER..];
        if ethertype != ETHERTYPE_IPV4 || ip.first().is_some_and(|b| b >> 4 != 4) {
            self.summary.skipped += 1;
            self.summary.skipped_non_ipv4 += 1;
            return None;
        }
        let ihl = ip.first().map_or(0, |b| usize::from(b & 0x0F) * 4);
        if ip.len() < 20 || ihl < 20 || ip.len() < ihl {
            self.skip_truncated();
            return None;
        }
        let proto = ip[9];
        let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
        let dst = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
        let frag_offset = u16::from_be_bytes([ip[6], ip[7]]) & 0x1FFF;
        let (mut sport, mut dport) = (0, 0);
        if matches!(proto, 6 | 17) && frag_offset == 0 {
            let l4 = &ip[ihl..];
            if l4.len() < 4 {
                self.skip_truncated();
                return None;
            }
            sport = u16::from_be_bytes([l4[0], l4[1]]);
            dport = u16::from_be_bytes([l4[2], l4[3]]);
        }
        Some(FiveTuple::new(src, dst, proto, sport, dport))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<PacketRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            let (ts, orig_len) = match self.read_frame() {
                Ok(Some(f)) => f,
                Ok(None) => {
                    self.done = true;
                    self.log_skips();
                    break;
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            };
            let Some(tuple) = self.decode() else { continue };
            let weight = match self.opts.weight {
                WeightMode::Packets => 1,
                WeightMode::Bytes => u64::from(orig_len.max(1)),
            };
            let key = FlowKey::from_tuple(&tuple, self.opts.granularity);
            let rec = PacketRecord::new(key, weight, self.summary.records).with_ts(ts);
            self.summary.records += 1;
            return Some(Ok(rec));
        }
        None
    }
}

pub fn read_pcap(path: impl AsRef<Path>, opts: ReadOptions) -> Result<PcapReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    PcapReader::new(BufReader::new(file), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Builder {
        big_endian: bool,
        bytes: Vec<u8>,
    }

    impl Builder {
        fn new(big_endian: bool, magic: u32) -> Self {
            let mut b = Builder {
                big_endian,
                bytes: Vec::new(),
            };
            b.u32(magic);
            b.u16(2);
            b.u16(4);
            b.u32(0);
            b.u32(0);
            b.u32(65535);
            b.u32(LINKTYPE_ETHERNET);
            b
        }

        fn u16(&mut self, v: u16) {
            let b = if self.big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
            self.bytes.extend_from_slice(&b);
        }

        fn u32(&mut self, v: u32) {
            let b = if self.big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
            self.bytes.extend_from_slice(&b);
        }

        fn frame(&mut self, secs: u32, frac: u32, data: &[u8]) {
            self.u32(secs);
            self.u32(frac);
            self.u32(data.len() as u32);
            self.u32(data.len() as u32);
            self.bytes.extend_from_slice(data);
        }
    }

    fn eth(ethertype: u16, payload: &[u8]) -> Vec<u8> {
        let mut f = vec![0xAA; 12];
        f.extend_from_slice(&ethertype.to_be_bytes());
        f.extend_from_slice(payload);
        f
    }

    fn ipv4(proto: u8, src: [u8; 4], dst: [u8; 4], l4: &[u8]) -> Vec<u8> {
        let total = (20 + l4.len()) as u16;
        let mut h = vec![0x45, 0];
        h.extend_from_slice(&total.to_be_bytes());
        h.extend_from_slice(&[0, 1, 0x40, 0, 64, proto, 0, 0]);
        h.extend_from_slice(&src);
        h.extend_from_slice(&dst);
        h.extend_from_slice(l4);
        h
    }

    fn ports(s: u16, d: u16) -> Vec<u8> {
        let mut v = s.to_be_bytes().to_vec();
        v.extend_from_slice(&d.to_be_bytes());
        v.extend_from_slice(&[0; 16]);
        v
    }

    fn parse(bytes: &[u8]) -> (Vec<PacketRecord>, ReadSummary) {
        let mut r = PcapReader::new(bytes, ReadOptions::default()).unwrap();
        let recs = r.by_ref().collect::<Result<Vec<_>>>().unwrap();
        (recs, r.summary().clone())
    }

    fn two_packets(big_endian: bool, magic: u32) -> Vec<u8> {
        let mut b = Builder::new(big_endian, magic);
        b.frame(10, 500_000, &eth(0x0800, &ipv4(6, [192, 168, 1, 1], [10, 0, 0, 9], &ports(443, 51000))));
        b.frame(11, 0, &eth(0x0800, &ipv4(17, [8, 8, 8, 8], [10, 0, 0, 9], &ports(53, 40000))));
        b.bytes
    }

    #[test]
    fn two_packet_fixture() {
        let (recs, summary) = parse(&two_packets(false, MAGIC_MICROS));
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].key.to_string(), "192.168.1.1:443->10.0.0.9:51000/6");
        assert_eq!(recs[1].key.to_string(), "8.8.8.8:53->10.0.0.9:40000/17");
        assert_eq!(recs[0].ts, Some(10.5));
        assert_eq!(recs[1].seq, 1);
        assert_eq!(summary.skipped, 0);
    }

    #[test]
    fn byte_swapped_and_nanosecond_magics() {
        let le = parse(&two_packets(false, MAGIC_MICROS)).0;
        let be = parse(&two_packets(true, MAGIC_MICROS)).0;
        assert_eq!(le, be);
        let nanos = parse(&two_packets(true, MAGIC_NANOS)).0;
        assert!((nanos[0].ts.unwrap() - 10.0005).abs() < 1e-9);
        assert_eq!(nanos[0].key, le[0].key);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = two_packets(false, MAGIC_MICROS);
        bytes[0] = 0;
        let err = PcapReader::new(&bytes[..], ReadOptions::default()).err().unwrap();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn skips_vlan_non_ipv4_and_truncated() {
        let mut b = Builder::new(false, MAGIC_MICROS);
        let ip = ipv4(6, [1, 1, 1, 1], [2, 2, 2, 2], &ports(1, 2));
        let mut tagged = vec![0, 100];
        tagged.extend_from_slice(&0x0800u16.to_be_bytes());
        tagged.extend_from_slice(&ip);
        b.frame(0, 0, &eth(0x8100, &tagged));
        b.frame(0, 0, &eth(0x86DD, &[0x60; 40]));
        b.frame(0, 0, &eth(0x0800, &ip[..10]));
        b.frame(0, 0, &eth(0x0800, &ip[..22]));
        // ICMP has no ports.
        b.frame(0, 0, &eth(0x0800, &ipv4(1, [3, 3, 3, 3], [4, 4, 4, 4], &[8, 0, 0, 0])));
        // Cut the file in the middle of the last record.
        b.frame(0, 0, &eth(0x0800, &ip));
        let cut = b.bytes.len() - 5;
        let (recs, s) = parse(&b.bytes[..cut]);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].key.to_tuple().proto, 1);
        assert_eq!((recs[0].key.to_tuple().sport, recs[0].key.to_tuple().dport), (0, 0));
        assert_eq!((s.skipped_vlan, s.skipped_non_ipv4, s.skipped_truncated), (1, 1, 3));
        assert_eq!(s.skipped, 5);
    }
}
