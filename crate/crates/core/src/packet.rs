//! IPv4 header parsing and the confidence-option header rewrite.
//!
//! Everything here is a pure function over octet buffers in network byte
//! order. The confidence value travels in a single 32-bit option word:
//!
//! ```text
//!  0        8        16       24       32
//! +--------+--------+--------+--------+
//! |  0x5E  |  0x04  |  q hi  |  q lo  |   q = round(conf * 65535)
//! +--------+--------+--------+--------+
//! ```
//!
//! Type 0x5E is copied=0, class=2 (debugging/measurement), number=30
//! (experimental), so ordinary TLV option walkers skip it cleanly.

use std::net::Ipv4Addr;

use thiserror::Error;

pub const IPV4_MIN_HEADER_LEN: usize = 20;
pub const IPV4_MAX_IHL: u8 = 15;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

pub const CONFIDENCE_OPTION_TYPE: u8 = 0x5E;
pub const CONFIDENCE_OPTION_LEN: u8 = 4;
const CONFIDENCE_SCALE: f64 = 65535.0;

const OPT_EOL: u8 = 0;
const OPT_NOP: u8 = 1;

const TCP_MIN_HEADER_LEN: usize = 20;
const UDP_HEADER_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PacketError {
    #[error("truncated header: need {needed} octets, have {available}")]
    TruncatedHeader { needed: usize, available: usize },
    #[error("not an IPv4 packet (version {0})")]
    NotIpv4(u8),
    #[error("header length field {0} is below the 5-word minimum")]
    BadHeaderLength(u8),
    #[error("total length {total_length} is shorter than the {header_len}-octet header")]
    BadTotalLength { total_length: u16, header_len: usize },
    #[error("header checksum does not verify (field 0x{0:04x})")]
    BadChecksum(u16),
    #[error("confidence {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("malformed options at offset {0}")]
    MalformedOptions(usize),
    #[error("no room for another option word (ihl is already 15)")]
    NoHeaderRoom,
    #[error("total length {0} cannot grow by another option word")]
    TotalLengthOverflow(u16),
    #[error("no trailing confidence option to strip")]
    NoConfidenceOption,
    #[error("transport ports/flags do not match protocol {0}")]
    InconsistentTransport(u8),
}

pub type Result<T> = std::result::Result<T, PacketError>;

/// One captured packet, starting at the IPv4 version nibble.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPacket {
    pub bytes: Vec<u8>,
    /// Seconds since the epoch.
    pub capture_ts: f64,
}

impl RawPacket {
    pub fn new(bytes: Vec<u8>, capture_ts: f64) -> Self {
        Self { bytes, capture_ts }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv4Header {
    pub version: u8,
    /// Header length in 32-bit words.
    pub ihl: u8,
    pub tos: u8,
    pub total_length: u16,
    pub identification: u16,
    pub flags: u8,
    pub fragment_offset: u16,
    pub ttl: u8,
    pub protocol: u8,
    pub checksum: u16,
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    pub options: Vec<u8>,
}

impl Ipv4Header {
    pub fn header_len(&self) -> usize {
        usize::from(self.ihl) * 4
    }
}

/// Transport-layer fields the attribute extractors care about. Present only
/// for unfragmented (or first-fragment) TCP/UDP packets whose transport
/// header was captured in full.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransportSummary {
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub tcp_flags: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPacket {
    pub header: Ipv4Header,
    pub transport: TransportSummary,
    pub checksum_valid: bool,
}

impl ParsedPacket {
    pub fn fields(&self) -> PacketFields {
        let h = &self.header;
        PacketFields {
            src_addr: h.src_addr,
            dst_addr: h.dst_addr,
            protocol: h.protocol,
            ttl: h.ttl,
            tos: h.tos,
            total_length: h.total_length,
            src_port: self.transport.src_port,
            dst_port: self.transport.dst_port,
            tcp_flags: self.transport.tcp_flags,
        }
    }
}

/// The header fields a trace row carries. This is the common ground between
/// pcap input (parsed) and CSV input (pre-extracted).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketFields {
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    pub protocol: u8,
    pub ttl: u8,
    pub tos: u8,
    pub total_length: u16,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub tcp_flags: Option<u8>,
}

impl PacketFields {
    /// Ports must come as a pair on TCP/UDP, and flags appear exactly when a
    /// TCP header is present.
    pub fn check_transport(&self) -> Result<()> {
        let has_ports = match (self.src_port, self.dst_port) {
            (Some(_), Some(_)) => true,
            (None, None) => false,
            _ => return Err(PacketError::InconsistentTransport(self.protocol)),
        };
        let ok = match self.protocol {
            PROTO_TCP => has_ports == self.tcp_flags.is_some(),
            PROTO_UDP => self.tcp_flags.is_none(),
            _ => !has_ports && self.tcp_flags.is_none(),
        };
        if ok {
            Ok(())
        } else {
            Err(PacketError::InconsistentTransport(self.protocol))
        }
    }
}

/// Folded 16-bit ones-complement sum of `data` (odd trailing octet padded
/// with zero).
pub fn ones_complement_sum(data: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u32::from(u16::from_be_bytes([c[0], c[1]]));
    }
    if let [last] = chunks.remainder() {
        sum += u32::from(*last) << 8;
    }
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    sum as u16
}

/// Internet checksum of `data`: the complement of the ones-complement sum.
pub fn internet_checksum(data: &[u8]) -> u16 {
    !ones_complement_sum(data)
}

fn header_checksum_valid(header: &[u8]) -> bool {
    ones_complement_sum(header) == 0xFFFF
}

fn write_header_checksum(header: &mut [u8]) {
    header[10] = 0;
    header[11] = 0;
    let c = internet_checksum(header);
    header[10..12].copy_from_slice(&c.to_be_bytes());
}

/// Parses an IPv4 header and, where available, the TCP/UDP ports and TCP
/// flags. Checksum validity is reported, not enforced; see
/// [`parse_ipv4_strict`].
pub fn parse_ipv4(bytes: &[u8]) -> Result<ParsedPacket> {
    if bytes.len() < IPV4_MIN_HEADER_LEN {
        return Err(PacketError::TruncatedHeader {
            needed: IPV4_MIN_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let version = bytes[0] >> 4;
    if version != 4 {
        return Err(PacketError::NotIpv4(version));
    }
    let ihl = bytes[0] & 0x0F;
    if ihl < 5 {
        return Err(PacketError::BadHeaderLength(ihl));
    }
    let header_len = usize::from(ihl) * 4;
    if bytes.len() < header_len {
        return Err(PacketError::TruncatedHeader {
            needed: header_len,
            available: bytes.len(),
        });
    }
    let total_length = u16::from_be_bytes([bytes[2], bytes[3]]);
    if usize::from(total_length) < header_len {
        return Err(PacketError::BadTotalLength {
            total_length,
            header_len,
        });
    }
    let frag = u16::from_be_bytes([bytes[6], bytes[7]]);
    let header = Ipv4Header {
        version,
        ihl,
        tos: bytes[1],
        total_length,
        identification: u16::from_be_bytes([bytes[4], bytes[5]]),
        flags: (frag >> 13) as u8,
        fragment_offset: frag & 0x1FFF,
        ttl: bytes[8],
        protocol: bytes[9],
        checksum: u16::from_be_bytes([bytes[10], bytes[11]]),
        src_addr: Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15]),
        dst_addr: Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19]),
        options: bytes[IPV4_MIN_HEADER_LEN..header_len].to_vec(),
    };
    let checksum_valid = header_checksum_valid(&bytes[..header_len]);
    let transport = if header.fragment_offset == 0 {
        parse_transport(header.protocol, &bytes[header_len..])
    } else {
        TransportSummary::default()
    };
    Ok(ParsedPacket {
        header,
        transport,
        checksum_valid,
    })
}

/// Like [`parse_ipv4`], but a header whose checksum does not verify is an
/// error.
pub fn parse_ipv4_strict(bytes: &[u8]) -> Result<ParsedPacket> {
    let parsed = parse_ipv4(bytes)?;
    if !parsed.checksum_valid {
        return Err(PacketError::BadChecksum(parsed.header.checksum));
    }
    Ok(parsed)
}

fn parse_transport(protocol: u8, l4: &[u8]) -> TransportSummary {
    let ports = |b: &[u8]| {
        (
            Some(u16::from_be_bytes([b[0], b[1]])),
            Some(u16::from_be_bytes([b[2], b[3]])),
        )
    };
    match protocol {
        PROTO_TCP if l4.len() >= TCP_MIN_HEADER_LEN => {
            let (src_port, dst_port) = ports(l4);
            TransportSummary {
                src_port,
                dst_port,
                tcp_flags: Some(l4[13]),
            }
        }
        PROTO_UDP if l4.len() >= UDP_HEADER_LEN => {
            let (src_port, dst_port) = ports(l4);
            TransportSummary {
                src_port,
                dst_port,
                tcp_flags: None,
            }
        }
        _ => TransportSummary::default(),
    }
}

/// Synthesizes a header-only capture for `fields`: a 20-octet IPv4 header
/// with a valid checksum, followed by a minimal TCP or UDP header when the
/// fields carry ports. `total_length` is copied verbatim, so the capture is
/// usually shorter than the wire length.
pub fn build_packet(fields: &PacketFields) -> Result<Vec<u8>> {
    fields.check_transport()?;
    if usize::from(fields.total_length) < IPV4_MIN_HEADER_LEN {
        return Err(PacketError::BadTotalLength {
            total_length: fields.total_length,
            header_len: IPV4_MIN_HEADER_LEN,
        });
    }
    let mut out = Vec::with_capacity(IPV4_MIN_HEADER_LEN + TCP_MIN_HEADER_LEN);
    out.push(0x45);
    out.push(fields.tos);
    out.extend_from_slice(&fields.total_length.to_be_bytes());
    out.extend_from_slice(&[0, 0, 0x40, 0]); // id 0, DF
    out.push(fields.ttl);
    out.push(fields.protocol);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&fields.src_addr.octets());
    out.extend_from_slice(&fields.dst_addr.octets());
    write_header_checksum(&mut out[..IPV4_MIN_HEADER_LEN]);

    if let (Some(sp), Some(dp)) = (fields.src_port, fields.dst_port) {
        out.extend_from_slice(&sp.to_be_bytes());
        out.extend_from_slice(&dp.to_be_bytes());
        if fields.protocol == PROTO_TCP {
            let mut tcp = [0u8; TCP_MIN_HEADER_LEN - 4];
            tcp[8] = 5 << 4;
            tcp[9] = fields.tcp_flags.unwrap_or(0);
            tcp[10..12].copy_from_slice(&0xFFFFu16.to_be_bytes());
            out.extend_from_slice(&tcp);
        } else {
            let udp_len = fields.total_length.saturating_sub(IPV4_MIN_HEADER_LEN as u16);
            out.extend_from_slice(&udp_len.to_be_bytes());
            out.extend_from_slice(&[0, 0]);
        }
    }
    Ok(out)
}

/// Quantizes `conf` to Q0.16 and wraps it in the 4-octet option word.
pub fn encode_confidence_option(conf: f64) -> Result<[u8; 4]> {
    if !(0.0..=1.0).contains(&conf) {
        return Err(PacketError::OutOfRange(conf));
    }
    let q = (conf * CONFIDENCE_SCALE).round() as u16;
    let [hi, lo] = q.to_be_bytes();
    Ok([CONFIDENCE_OPTION_TYPE, CONFIDENCE_OPTION_LEN, hi, lo])
}

/// Walks the option TLVs and returns the first confidence value found.
///
/// EOL octets are treated as single-octet padding rather than a hard stop,
/// so an option word appended after an EOL-padded option list is still
/// found.
pub fn decode_confidence_option(options: &[u8]) -> Result<Option<f64>> {
    let mut i = 0;
    while i < options.len() {
        let kind = options[i];
        if kind == OPT_EOL || kind == OPT_NOP {
            i += 1;
            continue;
        }
        let len = *options.get(i + 1).ok_or(PacketError::MalformedOptions(i))? as usize;
        if len < 2 || i + len > options.len() {
            return Err(PacketError::MalformedOptions(i));
        }
        if kind == CONFIDENCE_OPTION_TYPE && len == usize::from(CONFIDENCE_OPTION_LEN) {
            let q = u16::from_be_bytes([options[i + 2], options[i + 3]]);
            return Ok(Some(f64::from(q) / CONFIDENCE_SCALE));
        }
        i += len;
    }
    Ok(None)
}

/// Appends the confidence option word after any existing options, bumps
/// IHL and total length by one word and recomputes the header checksum.
/// Payload octets are carried over untouched.
pub fn rewrite_header_with_option(raw: &RawPacket, conf: f64) -> Result<RawPacket> {
    let option = encode_confidence_option(conf)?;
    let parsed = parse_ipv4(&raw.bytes)?;
    let h = &parsed.header;
    if h.ihl >= IPV4_MAX_IHL {
        return Err(PacketError::NoHeaderRoom);
    }
    let total_length = h
        .total_length
        .checked_add(4)
        .ok_or(PacketError::TotalLengthOverflow(h.total_length))?;
    let header_len = h.header_len();

    let mut out = Vec::with_capacity(raw.bytes.len() + 4);
    out.extend_from_slice(&raw.bytes[..header_len]);
    out.extend_from_slice(&option);
    out.extend_from_slice(&raw.bytes[header_len..]);
    out[0] = (h.version << 4) | (h.ihl + 1);
    out[2..4].copy_from_slice(&total_length.to_be_bytes());
    write_header_checksum(&mut out[..header_len + 4]);
    Ok(RawPacket::new(out, raw.capture_ts))
}

/// Inverse of [`rewrite_header_with_option`]: removes a trailing confidence
/// option word, restoring IHL, total length and the checksum.
pub fn strip_confidence_option(raw: &RawPacket) -> Result<RawPacket> {
    let parsed = parse_ipv4(&raw.bytes)?;
    let h = &parsed.header;
    let header_len = h.header_len();
    if h.ihl < 6 {
        return Err(PacketError::NoConfidenceOption);
    }
    let word = &raw.bytes[header_len - 4..header_len];
    if word[0] != CONFIDENCE_OPTION_TYPE || word[1] != CONFIDENCE_OPTION_LEN {
        return Err(PacketError::NoConfidenceOption);
    }
    let mut out = Vec::with_capacity(raw.bytes.len() - 4);
    out.extend_from_slice(&raw.bytes[..header_len - 4]);
    out.extend_from_slice(&raw.bytes[header_len..]);
    out[0] = (h.version << 4) | (h.ihl - 1);
    out[2..4].copy_from_slice(&(h.total_length - 4).to_be_bytes());
    write_header_checksum(&mut out[..header_len - 4]);
    Ok(RawPacket::new(out, raw.capture_ts))
}
