//! Trace files: the labeled CSV trace format, period declarations, and a
//! classic-pcap subset (Ethernet and raw-IP link types).

use std::fs;
use std::io::{self, Read, Write};
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::filter::Period;
use crate::packet::{build_packet, parse_ipv4, PacketError, PacketFields, RawPacket};

pub const TRACE_CSV_HEADER: [&str; 12] = [
    "index",
    "ts",
    "src_addr",
    "dst_addr",
    "protocol",
    "ttl",
    "tos",
    "total_length",
    "src_port",
    "dst_port",
    "tcp_flags",
    "label",
];

pub const PERIODS_CSV_HEADER: [&str; 3] = ["start_ts", "end_ts", "period"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("line {line}: timestamp {ts} is earlier than the previous record")]
    NonMonotoneTimestamp { line: u64, ts: f64 },
    #[error("line {line}: index {index} does not increase")]
    NonMonotoneIndex { line: u64, index: u64 },
    #[error("bad pcap magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("unsupported pcap link type {0}")]
    UnsupportedLinktype(u32),
    #[error("truncated pcap record at offset {0}")]
    TruncatedRecord(usize),
    #[error("periods overlap or are out of order at line {line}")]
    OverlappingPeriods { line: u64 },
    #[error("no declared period covers ts {0}")]
    PeriodGap(f64),
}

/// Ground truth attached to a trace row. Used for evaluation only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Legit,
    Attack,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Legit => "legit",
            Label::Attack => "attack",
            Label::Unknown => "unknown",
        }
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "legit" => Ok(Label::Legit),
            "attack" => Ok(Label::Attack),
            "unknown" => Ok(Label::Unknown),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub index: u64,
    pub ts: f64,
    pub fields: PacketFields,
    /// Captured bytes for pcap-sourced records.
    pub raw: Option<Vec<u8>>,
    pub label: Label,
}

impl TraceRecord {
    /// The captured bytes, or a synthesized header-only packet for CSV rows.
    pub fn to_raw(&self) -> Result<RawPacket, PacketError> {
        let bytes = match &self.raw {
            Some(b) => b.clone(),
            None => build_packet(&self.fields)?,
        };
        Ok(RawPacket::new(bytes, self.ts))
    }
}

fn opt<T: FromStr>(s: &str) -> Result<Option<T>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("bad value {s:?}"))
    }
}

fn req<T: FromStr>(s: &str, name: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad {name} {s:?}"))
}

fn parse_row(row: &csv::StringRecord) -> Result<TraceRecord, String> {
    if row.len() != TRACE_CSV_HEADER.len() {
        return Err(format!("expected {} columns, got {}", TRACE_CSV_HEADER.len(), row.len()));
    }
    let ts: f64 = req(&row[1], "ts")?;
    if !ts.is_finite() {
        return Err(format!("bad ts {:?}", &row[1]));
    }
    let fields = PacketFields {
        src_addr: req::<Ipv4Addr>(&row[2], "src_addr")?,
        dst_addr: req::<Ipv4Addr>(&row[3], "dst_addr")?,
        protocol: req(&row[4], "protocol")?,
        ttl: req(&row[5], "ttl")?,
        tos: req(&row[6], "tos")?,
        total_length: req(&row[7], "total_length")?,
        src_port: opt(&row[8])?,
        dst_port: opt(&row[9])?,
        tcp_flags: opt(&row[10])?,
    };
    fields.check_transport().map_err(|e| e.to_string())?;
    Ok(TraceRecord {
        index: req(&row[0], "index")?,
        ts,
        fields,
        raw: None,
        label: row[11].parse()?,
    })
}

/// Reads a trace CSV. The header row must match [`TRACE_CSV_HEADER`]
/// exactly; indices must increase and timestamps must not decrease.
pub fn read_trace_csv_from<R: Read>(reader: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();
    match rows.next() {
        None => return Err(TraceError::Parse { line: 1, msg: "missing header row".into() }),
        Some(h) => {
            let h = h.map_err(|e| TraceError::Parse { line: 1, msg: e.to_string() })?;
            if h.iter().ne(TRACE_CSV_HEADER.iter().copied()) {
                return Err(TraceError::Parse {
                    line: 1,
                    msg: format!("header must be {}", TRACE_CSV_HEADER.join(",")),
                });
            }
        }
    }
    let mut out: Vec<TraceRecord> = Vec::new();
    for row in rows {
        let row = row.map_err(|e| TraceError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let rec = parse_row(&row).map_err(|msg| TraceError::Parse { line, msg })?;
        if let Some(prev) = out.last() {
            if rec.index <= prev.index {
                return Err(TraceError::NonMonotoneIndex { line, index: rec.index });
            }
            if rec.ts < prev.ts {
                return Err(TraceError::NonMonotoneTimestamp { line, ts: rec.ts });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    read_trace_csv_from(fs::File::open(path)?)
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trace_header<W: Write + ?Sized>(w: &mut W) -> io::Result<()> {
    writeln!(w, "{}", TRACE_CSV_HEADER.join(","))
}

/// One canonical CSV row: shortest round-trip float formatting, empty cells
/// for absent transport fields, `\n` line endings.
pub fn write_trace_row<W: Write + ?Sized>(w: &mut W, r: &TraceRecord) -> io::Result<()> {
    let f = &r.fields;
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.index,
        r.ts,
        f.src_addr,
        f.dst_addr,
        f.protocol,
        f.ttl,
        f.tos,
        f.total_length,
        fmt_opt(f.src_port),
        fmt_opt(f.dst_port),
        fmt_opt(f.tcp_flags),
        r.label.as_str()
    )
}

pub fn write_trace_csv_to<W: Write>(mut w: W, records: &[TraceRecord]) -> io::Result<()> {
    write_trace_header(&mut w)?;
    for r in records {
        write_trace_row(&mut w, r)?;
    }
    w.flush()
}

pub fn write_trace_csv(path: &Path, records: &[TraceRecord]) -> io::Result<()> {
    write_trace_csv_to(io::BufWriter::new(fs::File::create(path)?), records)
}

/// A declared period interval, `[start_ts, end_ts)`; the last interval also
/// covers its own `end_ts`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodInterval {
    pub start_ts: f64,
    pub end_ts: f64,
    pub period: Period,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PeriodPlan {
    intervals: Vec<PeriodInterval>,
}

impl PeriodPlan {
    pub fn new(intervals: Vec<PeriodInterval>) -> Result<Self, TraceError> {
        for (i, w) in intervals.iter().enumerate() {
            let ordered = w.start_ts <= w.end_ts
                && (i == 0 || intervals[i - 1].end_ts <= w.start_ts);
            if !ordered {
                return Err(TraceError::OverlappingPeriods { line: i as u64 + 2 });
            }
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[PeriodInterval] {
        &self.intervals
    }

    pub fn period_at(&self, ts: f64) -> Option<Period> {
        let hit = self
            .intervals
            .iter()
            .find(|w| w.start_ts <= ts && ts < w.end_ts)
            .or_else(|| self.intervals.last().filter(|w| w.end_ts == ts));
        hit.map(|w| w.period)
    }

    /// First timestamp in `ts` that no interval covers.
    pub fn check_covers(&self, ts: impl IntoIterator<Item = f64>) -> Result<(), TraceError> {
        for t in ts {
            if self.period_at(t).is_none() {
                return Err(TraceError::PeriodGap(t));
            }
        }
        Ok(())
    }
}

pub fn read_periods_from<R: Read>(reader: R) -> Result<PeriodPlan, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut intervals = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let line = n as u64 + 1;
        let row = row.map_err(|e| TraceError::Parse { line, msg: e.to_string() })?;
        if n == 0 {
            if row.iter().ne(PERIODS_CSV_HEADER.iter().copied()) {
                return Err(TraceError::Parse {
                    line,
                    msg: format!("header must be {}", PERIODS_CSV_HEADER.join(",")),
                });
            }
            continue;
        }
        let parsed = (|| -> Result<PeriodInterval, String> {
            if row.len() != 3 {
                return Err(format!("expected 3 columns, got {}", row.len()));
            }
            Ok(PeriodInterval {
                start_ts: req(&row[0], "start_ts")?,
                end_ts: req(&row[1], "end_ts")?,
                period: row[2].parse()?,
            })
        })()
        .map_err(|msg| TraceError::Parse { line, msg })?;
        intervals.push(parsed);
    }
    PeriodPlan::new(intervals)
}

pub fn read_periods(path: &Path) -> Result<PeriodPlan, TraceError> {
    read_periods_from(fs::File::open(path)?)
}

pub fn write_periods<W: Write>(mut w: W, plan: &PeriodPlan) -> io::Result<()> {
    writeln!(w, "{}", PERIODS_CSV_HEADER.join(","))?;
    for p in plan.intervals() {
        writeln!(w, "{},{},{}", p.start_ts, p.end_ts, p.period)?;
    }
    w.flush()
}

pub const PCAP_MAGIC: u32 = 0xA1B2_C3D4;
const PCAP_GLOBAL_HEADER_LEN: usize = 24;
const PCAP_RECORD_HEADER_LEN: usize = 16;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linktype {
    Ethernet,
    RawIp,
}

impl Linktype {
    pub fn code(self) -> u32 {
        match self {
            Linktype::Ethernet => 1,
            Linktype::RawIp => 101,
        }
    }

    fn from_code(code: u32) -> Result<Self, TraceError> {
        match code {
            1 => Ok(Linktype::Ethernet),
            101 => Ok(Linktype::RawIp),
            other => Err(TraceError::UnsupportedLinktype(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcapTrace {
    pub linktype: Linktype,
    pub packets: Vec<RawPacket>,
    /// Records that were not IPv4 (other ethertypes, non-v4 raw payloads).
    pub skipped: u64,
}

/// True when `head` starts with a classic pcap magic in either byte order.
pub fn is_pcap(head: &[u8]) -> bool {
    head.len() >= 4 && {
        let m = u32::from_le_bytes([head[0], head[1], head[2], head[3]]);
        m == PCAP_MAGIC || m.swap_bytes() == PCAP_MAGIC
    }
}

pub fn parse_pcap(data: &[u8]) -> Result<PcapTrace, TraceError> {
    if data.len() < 4 {
        return Err(TraceError::TruncatedRecord(0));
    }
    let magic_le = u32::from_le_bytes([data[0], data[1], data[2], data[3]]);
    let endian = if magic_le == PCAP_MAGIC {
        Endian::Little
    } else if magic_le.swap_bytes() == PCAP_MAGIC {
        Endian::Big
    } else {
        return Err(TraceError::BadMagic(u32::from_be_bytes([
            data[0], data[1], data[2], data[3],
        ])));
    };
    if data.len() < PCAP_GLOBAL_HEADER_LEN {
        return Err(TraceError::TruncatedRecord(0));
    }
    let u32_at = |off: usize| {
        let b = [data[off], data[off + 1], data[off + 2], data[off + 3]];
        match endian {
            Endian::Little => u32::from_le_bytes(b),
            Endian::Big => u32::from_be_bytes(b),
        }
    };
    let linktype = Linktype::from_code(u32_at(20))?;

    let mut packets = Vec::new();
    let mut skipped = 0;
    let mut off = PCAP_GLOBAL_HEADER_LEN;
    while off < data.len() {
        if off + PCAP_RECORD_HEADER_LEN > data.len() {
            return Err(TraceError::TruncatedRecord(off));
        }
        let ts_sec = u32_at(off);
        let ts_usec = u32_at(off + 4);
        let incl = u32_at(off + 8) as usize;
        let body = off + PCAP_RECORD_HEADER_LEN;
        if body + incl > data.len() {
            return Err(TraceError::TruncatedRecord(off));
        }
        let frame = &data[body..body + incl];
        let ts = f64::from(ts_sec) + f64::from(ts_usec) / 1e6;
        match ipv4_payload(linktype, frame) {
            Some(ip) => packets.push(RawPacket::new(ip.to_vec(), ts)),
            None => skipped += 1,
        }
        off = body + incl;
    }
    Ok(PcapTrace {
        linktype,
        packets,
        skipped,
    })
}

fn ipv4_payload(linktype: Linktype, frame: &[u8]) -> Option<&[u8]> {
    let ip = match linktype {
        Linktype::RawIp => frame,
        Linktype::Ethernet => {
            let mut off = 12;
            let mut ethertype = u16::from_be_bytes([*frame.get(off)?, *frame.get(off + 1)?]);
            if ethertype == ETHERTYPE_VLAN {
                off += 4;
                ethertype = u16::from_be_bytes([*frame.get(off)?, *frame.get(off + 1)?]);
            }
            if ethertype != ETHERTYPE_IPV4 {
                return None;
            }
            &frame[off + 2..]
        }
    };
    (ip.first()? >> 4 == 4).then_some(ip)
}

pub fn read_pcap(path: &Path) -> Result<PcapTrace, TraceError> {
    parse_pcap(&fs::read(path)?)
}

pub struct PcapWriter<W: Write> {
    out: W,
    linktype: Linktype,
    endian: Endian,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut out: W, linktype: Linktype, endian: Endian) -> io::Result<Self> {
        let mut hdr = Vec::with_capacity(PCAP_GLOBAL_HEADER_LEN);
        let put32 = |h: &mut Vec<u8>, v: u32| match endian {
            Endian::Little => h.extend_from_slice(&v.to_le_bytes()),
            Endian::Big => h.extend_from_slice(&v.to_be_bytes()),
        };
        let put16 = |h: &mut Vec<u8>, v: u16| match endian {
            Endian::Little => h.extend_from_slice(&v.to_le_bytes()),
            Endian::Big => h.extend_from_slice(&v.to_be_bytes()),
        };
        put32(&mut hdr, PCAP_MAGIC);
        put16(&mut hdr, 2);
        put16(&mut hdr, 4);
        put32(&mut hdr, 0);
        put32(&mut hdr, 0);
        put32(&mut hdr, 65535);
        put32(&mut hdr, linktype.code());
        out.write_all(&hdr)?;
        Ok(Self {
            out,
            linktype,
            endian,
        })
    }

    /// Writes one IPv4 packet. The original length is taken from the IPv4
    /// total length when it exceeds the captured bytes.
    pub fn write_packet(&mut self, pkt: &RawPacket) -> io::Result<()> {
        let mut frame = Vec::with_capacity(pkt.bytes.len() + 14);
        let mut wire_extra = 0;
        if self.linktype == Linktype::Ethernet {
            frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01]);
            frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
            wire_extra = 14;
        }
        frame.extend_from_slice(&pkt.bytes);
        let wire_ip = parse_ipv4(&pkt.bytes)
            .map(|p| usize::from(p.header.total_length))
            .unwrap_or(0)
            .max(pkt.bytes.len());
        let orig = (wire_ip + wire_extra) as u32;

        let ts = pkt.capture_ts.max(0.0);
        let mut sec = ts.floor() as u32;
        let mut usec = ((ts - ts.floor()) * 1e6).round() as u32;
        if usec >= 1_000_000 {
            sec += 1;
            usec -= 1_000_000;
        }
        for v in [sec, usec, frame.len() as u32, orig] {
            match self.endian {
                Endian::Little => self.out.write_all(&v.to_le_bytes())?,
                Endian::Big => self.out.write_all(&v.to_be_bytes())?,
            }
        }
        self.out.write_all(&frame)
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_pcap(path: &Path, packets: &[RawPacket], linktype: Linktype) -> io::Result<()> {
    let mut w = PcapWriter::new(io::BufWriter::new(fs::File::create(path)?), linktype, Endian::Little)?;
    for p in packets {
        w.write_packet(p)?;
    }
    w.finish().map(|_| ())
}

/// Turns captured packets into unlabeled trace records. Packets that do not
/// parse as IPv4 are dropped and counted.
pub fn records_from_packets(packets: Vec<RawPacket>) -> (Vec<TraceRecord>, u64) {
    let mut out = Vec::with_capacity(packets.len());
    let mut dropped = 0;
    for p in packets {
        match parse_ipv4(&p.bytes) {
            Ok(parsed) => out.push(TraceRecord {
                index: out.len() as u64,
                ts: p.capture_ts,
                fields: parsed.fields(),
                raw: Some(p.bytes),
                label: Label::Unknown,
            }),
            Err(_) => dropped += 1,
        }
    }
    (out, dropped)
}

/// Loads a trace from CSV or pcap, sniffing the format from the first bytes.
pub fn read_trace_any(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let data = fs::read(path)?;
    if is_pcap(&data) {
        let trace = parse_pcap(&data)?;
        if trace.skipped > 0 {
            log::info!("{}: skipped {} non-IPv4 records", path.display(), trace.skipped);
        }
        let (records, dropped) = records_from_packets(trace.packets);
        if dropped > 0 {
            log::warn!("{}: dropped {} unparseable IPv4 packets", path.display(), dropped);
        }
        Ok(records)
    } else {
        read_trace_csv_from(&data[..])
    }
}
