//! DNS message wire format and DNS-over-TLS stream framing.
//!
//! Names are never compressed on encode. The decoder follows compression
//! pointers but bounds the number of jumps, so a pointer cycle ends in
//! [`WireError::CompressionLoop`] instead of spinning.

use std::fmt;
use std::io::{self, Read};
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

pub const HEADER_LEN: usize = 12;
pub const MAX_LABEL_LEN: usize = 63;
pub const MAX_NAME_LEN: usize = 255;
pub const MAX_FRAME_LEN: usize = u16::MAX as usize;
pub const CLASS_IN: u16 = 1;
pub const DOT_PORT: u16 = 853;

/// Upper bound on compression pointers followed while reading one name.
const MAX_POINTER_FOLLOWS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated message at offset {0}")]
    Truncated(usize),
    #[error("malformed label at offset {0}")]
    MalformedLabel(usize),
    #[error("compression loop")]
    CompressionLoop,
    #[error("empty label in name")]
    EmptyLabel,
    #[error("label longer than 63 bytes")]
    LabelTooLong,
    #[error("name longer than 255 bytes")]
    NameTooLong,
    #[error("question has zero type or class")]
    ZeroTypeOrClass,
    #[error("rdata length {declared} exceeds remaining {available} bytes")]
    RdataLength { declared: usize, available: usize },
    #[error("section holds {0} entries, more than a 16-bit count allows")]
    SectionOverflow(usize),
    #[error("payload of {0} bytes does not fit a 2-byte length prefix")]
    PayloadTooLarge(usize),
    #[error("stream closed mid-message")]
    StreamClosed,
}

/// A domain name held as lowercase labels. The root name has no labels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DomainName {
    labels: Vec<Vec<u8>>,
}

impl DomainName {
    pub fn root() -> Self {
        Self { labels: Vec::new() }
    }

    pub fn from_labels<I, L>(labels: I) -> Result<Self, WireError>
    where
        I: IntoIterator<Item = L>,
        L: AsRef<[u8]>,
    {
        let mut out = Vec::new();
        let mut encoded = 1;
        for label in labels {
            let label = label.as_ref();
            if label.is_empty() {
                return Err(WireError::EmptyLabel);
            }
            if label.len() > MAX_LABEL_LEN {
                return Err(WireError::LabelTooLong);
            }
            encoded += label.len() + 1;
            if encoded > MAX_NAME_LEN {
                return Err(WireError::NameTooLong);
            }
            out.push(label.to_ascii_lowercase());
        }
        Ok(Self { labels: out })
    }

    pub fn labels(&self) -> &[Vec<u8>] {
        &self.labels
    }

    pub fn is_root(&self) -> bool {
        self.labels.is_empty()
    }

    /// Length of the uncompressed wire encoding, terminating zero included.
    pub fn encoded_len(&self) -> usize {
        self.labels.iter().map(|l| l.len() + 1).sum::<usize>() + 1
    }

    /// True when `self` equals `zone` or lies underneath it.
    pub fn is_subdomain_of(&self, zone: &DomainName) -> bool {
        zone.labels.len() <= self.labels.len()
            && self.labels[self.labels.len() - zone.labels.len()..] == zone.labels[..]
    }

    pub fn parent(&self) -> Option<DomainName> {
        if self.labels.is_empty() {
            None
        } else {
            Some(Self {
                labels: self.labels[1..].to_vec(),
            })
        }
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        for label in &self.labels {
            out.push(label.len() as u8);
            out.extend_from_slice(label);
        }
        out.push(0);
    }
}

impl FromStr for DomainName {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.strip_suffix('.').unwrap_or(s);
        if trimmed.is_empty() {
            return Ok(Self::root());
        }
        Self::from_labels(trimmed.split('.').map(str::as_bytes))
    }
}

impl fmt::Display for DomainName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.labels.is_empty() {
            return f.write_str(".");
        }
        for (i, label) in self.labels.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            for &b in label {
                if b.is_ascii_graphic() && b != b'.' && b != b'\\' {
                    write!(f, "{}", b as char)?;
                } else {
                    write!(f, "\\{:03}", b)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordType(pub u16);

impl RecordType {
    pub const A: RecordType = RecordType(1);
    pub const NS: RecordType = RecordType(2);
}

impl fmt::Display for RecordType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            RecordType::A => f.write_str("A"),
            RecordType::NS => f.write_str("NS"),
            RecordType(other) => write!(f, "TYPE{}", other),
        }
    }
}

impl FromStr for RecordType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(RecordType::A),
            "NS" => Ok(RecordType::NS),
            other => other
                .strip_prefix("TYPE")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &u16| n != 0)
                .map(RecordType)
                .ok_or_else(|| format!("unknown record type {s}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rcode {
    NoError,
    FormErr,
    ServFail,
    NxDomain,
    NotImp,
    Refused,
    Other(u8),
}

impl Rcode {
    pub fn from_bits(bits: u8) -> Self {
        match bits & 0x0f {
            0 => Rcode::NoError,
            1 => Rcode::FormErr,
            2 => Rcode::ServFail,
            3 => Rcode::NxDomain,
            4 => Rcode::NotImp,
            5 => Rcode::Refused,
            n => Rcode::Other(n),
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            Rcode::NoError => 0,
            Rcode::FormErr => 1,
            Rcode::ServFail => 2,
            Rcode::NxDomain => 3,
            Rcode::NotImp => 4,
            Rcode::Refused => 5,
            Rcode::Other(n) => n & 0x0f,
        }
    }
}

impl fmt::Display for Rcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rcode::NoError => f.write_str("NOERROR"),
            Rcode::FormErr => f.write_str("FORMERR"),
            Rcode::ServFail => f.write_str("SERVFAIL"),
            Rcode::NxDomain => f.write_str("NXDOMAIN"),
            Rcode::NotImp => f.write_str("NOTIMP"),
            Rcode::Refused => f.write_str("REFUSED"),
            Rcode::Other(n) => write!(f, "RCODE{}", n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flags {
    pub is_response: bool,
    pub opcode: u8,
    pub authoritative: bool,
    pub truncated: bool,
    pub recursion_desired: bool,
    pub recursion_available: bool,
    pub rcode: Rcode,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            is_response: false,
            opcode: 0,
            authoritative: false,
            truncated: false,
            recursion_desired: false,
            recursion_available: false,
            rcode: Rcode::NoError,
        }
    }
}

impl Flags {
    fn to_bits(self) -> u16 {
        let mut bits = 0u16;
        if self.is_response {
            bits |= 0x8000;
        }
        bits |= u16::from(self.opcode & 0x0f) << 11;
        if self.authoritative {
            bits |= 0x0400;
        }
        if self.truncated {
            bits |= 0x0200;
        }
        if self.recursion_desired {
            bits |= 0x0100;
        }
        if self.recursion_available {
            bits |= 0x0080;
        }
        bits | u16::from(self.rcode.bits())
    }

    fn from_bits(bits: u16) -> Self {
        Self {
            is_response: bits & 0x8000 != 0,
            opcode: ((bits >> 11) & 0x0f) as u8,
            authoritative: bits & 0x0400 != 0,
            truncated: bits & 0x0200 != 0,
            recursion_desired: bits & 0x0100 != 0,
            recursion_available: bits & 0x0080 != 0,
            rcode: Rcode::from_bits((bits & 0x0f) as u8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DnsQuestion {
    pub name: DomainName,
    pub qtype: RecordType,
    pub qclass: u16,
}

impl DnsQuestion {
    pub fn new(name: DomainName, qtype: RecordType) -> Self {
        Self {
            name,
            qtype,
            qclass: CLASS_IN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceRecord {
    pub name: DomainName,
    pub rtype: RecordType,
    pub rclass: u16,
    pub ttl: u32,
    pub rdata: Vec<u8>,
}

impl ResourceRecord {
    pub fn a(name: DomainName, ttl: u32, addr: Ipv4Addr) -> Self {
        Self {
            name,
            rtype: RecordType::A,
            rclass: CLASS_IN,
            ttl,
            rdata: addr.octets().to_vec(),
        }
    }

    /// NS record; the target name is stored uncompressed in the rdata.
    pub fn ns(name: DomainName, ttl: u32, target: &DomainName) -> Self {
        let mut rdata = Vec::with_capacity(target.encoded_len());
        target.write_to(&mut rdata);
        Self {
            name,
            rtype: RecordType::NS,
            rclass: CLASS_IN,
            ttl,
            rdata,
        }
    }

    pub fn as_ipv4(&self) -> Option<Ipv4Addr> {
        if self.rtype != RecordType::A {
            return None;
        }
        let octets: [u8; 4] = self.rdata.as_slice().try_into().ok()?;
        Some(Ipv4Addr::from(octets))
    }

    pub fn as_ns_target(&self) -> Option<DomainName> {
        if self.rtype != RecordType::NS {
            return None;
        }
        let mut reader = Reader::new(&self.rdata);
        reader.read_name().ok()
    }

    pub fn rdata_display(&self) -> String {
        if let Some(addr) = self.as_ipv4() {
            addr.to_string()
        } else if let Some(target) = self.as_ns_target() {
            format!("{target}.")
        } else {
            format!("\\# {} {}", self.rdata.len(), hex::encode(&self.rdata))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DnsMessage {
    pub id: u16,
    pub flags: Flags,
    pub questions: Vec<DnsQuestion>,
    pub answers: Vec<ResourceRecord>,
    pub authorities: Vec<ResourceRecord>,
    pub additionals: Vec<ResourceRecord>,
}

impl DnsMessage {
    pub fn query(id: u16, question: DnsQuestion, recursion_desired: bool) -> Self {
        Self {
            id,
            flags: Flags {
                recursion_desired,
                ..Flags::default()
            },
            questions: vec![question],
            ..Self::default()
        }
    }

    /// An empty response carrying the request's id and question.
    pub fn response_to(&self, rcode: Rcode) -> Self {
        Self {
            id: self.id,
            flags: Flags {
                is_response: true,
                opcode: self.flags.opcode,
                recursion_desired: self.flags.recursion_desired,
                rcode,
                ..Flags::default()
            },
            questions: self.questions.clone(),
            ..Self::default()
        }
    }

    pub fn rcode(&self) -> Rcode {
        self.flags.rcode
    }

    pub fn first_question(&self) -> Option<&DnsQuestion> {
        self.questions.first()
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode_message(self)
    }

    pub fn decode(raw: &[u8]) -> Result<Self, WireError> {
        decode_message(raw)
    }
}

impl fmt::Display for DnsMessage {
    /// dig-style rendering.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            ";; ->>HEADER<<- opcode: {}, status: {}, id: {}",
            if self.flags.opcode == 0 { "QUERY".to_string() } else { self.flags.opcode.to_string() },
            self.flags.rcode,
            self.id
        )?;
        let mut flag_names = Vec::new();
        if self.flags.is_response {
            flag_names.push("qr");
        }
        if self.flags.authoritative {
            flag_names.push("aa");
        }
        if self.flags.truncated {
            flag_names.push("tc");
        }
        if self.flags.recursion_desired {
            flag_names.push("rd");
        }
        if self.flags.recursion_available {
            flag_names.push("ra");
        }
        writeln!(
            f,
            ";; flags: {}; QUERY: {}, ANSWER: {}, AUTHORITY: {}, ADDITIONAL: {}",
            flag_names.join(" "),
            self.questions.len(),
            self.answers.len(),
            self.authorities.len(),
            self.additionals.len()
        )?;
        writeln!(f, "\n;; QUESTION SECTION:")?;
        for q in &self.questions {
            writeln!(f, ";{}.\t\tIN\t{}", q.name, q.qtype)?;
        }
        for (title, section) in [
            ("ANSWER", &self.answers),
            ("AUTHORITY", &self.authorities),
            ("ADDITIONAL", &self.additionals),
        ] {
            if section.is_empty() {
                continue;
            }
            writeln!(f, "\n;; {title} SECTION:")?;
            for rr in section {
                writeln!(
                    f,
                    "{}.\t{}\tIN\t{}\t{}",
                    rr.name,
                    rr.ttl,
                    rr.rtype,
                    rr.rdata_display()
                )?;
            }
        }
        Ok(())
    }
}

fn section_count(len: usize) -> Result<u16, WireError> {
    u16::try_from(len).map_err(|_| WireError::SectionOverflow(len))
}

pub fn encode_message(msg: &DnsMessage) -> Result<Vec<u8>, WireError> {
    let qd = section_count(msg.questions.len())?;
    let an = section_count(msg.answers.len())?;
    let ns = section_count(msg.authorities.len())?;
    let ar = section_count(msg.additionals.len())?;

    let mut out = Vec::with_capacity(512);
    out.extend_from_slice(&msg.id.to_be_bytes());
    out.extend_from_slice(&msg.flags.to_bits().to_be_bytes());
    for count in [qd, an, ns, ar] {
        out.extend_from_slice(&count.to_be_bytes());
    }
    for q in &msg.questions {
        if q.qtype.0 == 0 || q.qclass == 0 {
            return Err(WireError::ZeroTypeOrClass);
        }
        q.name.write_to(&mut out);
        out.extend_from_slice(&q.qtype.0.to_be_bytes());
        out.extend_from_slice(&q.qclass.to_be_bytes());
    }
    for rr in msg
        .answers
        .iter()
        .chain(&msg.authorities)
        .chain(&msg.additionals)
    {
        let rdlen = u16::try_from(rr.rdata.len())
            .map_err(|_| WireError::PayloadTooLarge(rr.rdata.len()))?;
        rr.name.write_to(&mut out);
        out.extend_from_slice(&rr.rtype.0.to_be_bytes());
        out.extend_from_slice(&rr.rclass.to_be_bytes());
        out.extend_from_slice(&rr.ttl.to_be_bytes());
        out.extend_from_slice(&rdlen.to_be_bytes());
        out.extend_from_slice(&rr.rdata);
    }
    Ok(out)
}

pub fn decode_message(raw: &[u8]) -> Result<DnsMessage, WireError> {
    let mut r = Reader::new(raw);
    let id = r.u16()?;
    let flags = Flags::from_bits(r.u16()?);
    let qd = r.u16()?;
    let an = r.u16()?;
    let ns = r.u16()?;
    let ar = r.u16()?;

    let mut questions = Vec::with_capacity(usize::from(qd).min(64));
    for _ in 0..qd {
        let name = r.read_name()?;
        let qtype = r.u16()?;
        let qclass = r.u16()?;
        if qtype == 0 || qclass == 0 {
            return Err(WireError::ZeroTypeOrClass);
        }
        questions.push(DnsQuestion {
            name,
            qtype: RecordType(qtype),
            qclass,
        });
    }
    let answers = r.read_records(an)?;
    let authorities = r.read_records(ns)?;
    let additionals = r.read_records(ar)?;

    Ok(DnsMessage {
        id,
        flags,
        questions,
        answers,
        authorities,
        additionals,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(WireError::Truncated(self.pos)),
        }
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_name(&mut self) -> Result<DomainName, WireError> {
        let mut labels: Vec<Vec<u8>> = Vec::new();
        let mut encoded = 1usize;
        let mut cursor = self.pos;
        // Position to resume at once the first pointer has been taken.
        let mut resume: Option<usize> = None;
        let mut follows = 0usize;

        loop {
            let len = *self.buf.get(cursor).ok_or(WireError::Truncated(cursor))?;
            match len & 0xc0 {
                0x00 => {
                    if len == 0 {
                        cursor += 1;
                        break;
                    }
                    let start = cursor + 1;
                    let end = start + usize::from(len);
                    if end > self.buf.len() {
                        return Err(WireError::Truncated(cursor));
                    }
                    encoded += usize::from(len) + 1;
                    if encoded > MAX_NAME_LEN {
                        return Err(WireError::NameTooLong);
                    }
                    labels.push(self.buf[start..end].to_ascii_lowercase());
                    cursor = end;
                }
                0xc0 => {
                    let low = *self.buf.get(cursor + 1).ok_or(WireError::Truncated(cursor))?;
                    follows += 1;
                    if follows > MAX_POINTER_FOLLOWS {
                        return Err(WireError::CompressionLoop);
                    }
                    if resume.is_none() {
                        resume = Some(cursor + 2);
                    }
                    cursor = (usize::from(len & 0x3f) << 8) | usize::from(low);
                }
                _ => return Err(WireError::MalformedLabel(cursor)),
            }
        }
        self.pos = resume.unwrap_or(cursor);
        Ok(DomainName { labels })
    }

    fn read_records(&mut self, count: u16) -> Result<Vec<ResourceRecord>, WireError> {
        let mut out = Vec::with_capacity(usize::from(count).min(64));
        for _ in 0..count {
            let name = self.read_name()?;
            let rtype = RecordType(self.u16()?);
            let rclass = self.u16()?;
            let ttl = self.u32()?;
            let rdlen = usize::from(self.u16()?);
            let available = self.buf.len() - self.pos;
            if rdlen > available {
                return Err(WireError::RdataLength {
                    declared: rdlen,
                    available,
                });
            }
            let rdata_start = self.pos;
            let raw = self.take(rdlen)?;
            // NS targets may be compressed against the enclosing message;
            // store them expanded so the record stands alone.
            let rdata = if rtype == RecordType::NS {
                let mut sub = Reader {
                    buf: self.buf,
                    pos: rdata_start,
                };
                let target = sub.read_name()?;
                if sub.pos != rdata_start + rdlen {
                    return Err(WireError::MalformedLabel(rdata_start));
                }
                let mut expanded = Vec::with_capacity(target.encoded_len());
                target.write_to(&mut expanded);
                expanded
            } else {
                raw.to_vec()
            };
            out.push(ResourceRecord {
                name,
                rtype,
                rclass,
                ttl,
                rdata,
            });
        }
        Ok(out)
    }
}

/// Prepends the 2-byte big-endian length used on DNS-over-TLS streams.
pub fn frame(payload: &[u8]) -> Result<Vec<u8>, WireError> {
    let len = u16::try_from(payload.len()).map_err(|_| WireError::PayloadTooLarge(payload.len()))?;
    let mut out = Vec::with_capacity(payload.len() + 2);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Reads exactly one length-prefixed message, blocking until it is complete.
///
/// Returns `Ok(None)` when the stream ends cleanly before a new frame starts.
pub fn unframe<R: Read>(stream: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len_buf = [0u8; 2];
    let mut got = 0;
    while got < 2 {
        match stream.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(closed_mid_message()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = usize::from(u16::from_be_bytes(len_buf));
    let mut payload = vec![0u8; len];
    stream.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            closed_mid_message()
        } else {
            e
        }
    })?;
    Ok(Some(payload))
}

fn closed_mid_message() -> io::Error {
    io::Error::new(io::ErrorKind::UnexpectedEof, WireError::StreamClosed)
}

/// Incremental framing decoder for byte streams that arrive in pieces.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Pops the next complete frame payload, if one is buffered.
    pub fn next_frame(&mut self) -> Option<Vec<u8>> {
        if self.buf.len() < 2 {
            return None;
        }
        let len = usize::from(u16::from_be_bytes([self.buf[0], self.buf[1]]));
        if self.buf.len() < 2 + len {
            return None;
        }
        let payload = self.buf[2..2 + len].to_vec();
        self.buf.drain(..2 + len);
        Some(payload)
    }

    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn name(s: &str) -> DomainName {
        s.parse().unwrap()
    }

    #[test]
    fn a_query_for_example_com_is_29_bytes() {
        let msg = DnsMessage::query(0, DnsQuestion::new(name("example.com"), RecordType::A), false);
        let bytes = encode_message(&msg).unwrap();
        assert_eq!(bytes.len(), 29);
    }

    #[test]
    fn header_only_message() {
        let msg = DnsMessage::default();
        let bytes = encode_message(&msg).unwrap();
        assert_eq!(bytes, vec![0u8; 12]);
        assert_eq!(decode_message(&bytes).unwrap(), msg);
    }

    #[test]
    fn all_zero_header_decodes_to_empty_message() {
        let msg = decode_message(&[0u8; 12]).unwrap();
        assert_eq!(msg.id, 0);
        assert!(msg.questions.is_empty() && msg.answers.is_empty());
    }

    #[test]
    fn self_pointer_is_a_compression_loop() {
        let mut raw = vec![0u8; 12];
        raw[5] = 1; // qdcount = 1
        raw.extend_from_slice(&[0xc0, 12, 0, 1, 0, 1]);
        assert_eq!(decode_message(&raw), Err(WireError::CompressionLoop));
    }

    #[test]
    fn compressed_answer_name_is_expanded() {
        let mut raw = vec![0, 7, 0x81, 0x80, 0, 1, 0, 1, 0, 0, 0, 0];
        raw.extend_from_slice(b"\x07example\x03com\x00\x00\x01\x00\x01");
        raw.extend_from_slice(&[0xc0, 12, 0, 1, 0, 1, 0, 0, 0, 60, 0, 4, 10, 0, 0, 1]);
        let msg = decode_message(&raw).unwrap();
        assert_eq!(msg.answers[0].name, name("example.com"));
        assert_eq!(msg.answers[0].as_ipv4(), Some(Ipv4Addr::new(10, 0, 0, 1)));
    }

    #[test]
    fn short_input_is_truncated() {
        assert!(matches!(decode_message(&[0u8; 5]), Err(WireError::Truncated(_))));
    }

    #[test]
    fn rdata_longer_than_message_rejected() {
        let mut raw = vec![0, 1, 0x80, 0, 0, 0, 0, 1, 0, 0, 0, 0];
        raw.extend_from_slice(&[0, 0, 1, 0, 1, 0, 0, 0, 1, 0, 9, 1, 2]);
        assert!(matches!(
            decode_message(&raw),
            Err(WireError::RdataLength { declared: 9, available: 2 })
        ));
    }

    #[test]
    fn reserved_label_type_rejected() {
        let mut raw = vec![0u8; 12];
        raw[5] = 1;
        raw.extend_from_slice(&[0x40, 0, 0, 1, 0, 1]);
        assert_eq!(decode_message(&raw), Err(WireError::MalformedLabel(12)));
    }

    #[test]
    fn names_compare_case_insensitively() {
        assert_eq!(name("Example.COM"), name("example.com."));
        assert_eq!(name("example.com").to_string(), "example.com");
        assert!(name("www.example.com").is_subdomain_of(&name("com")));
        assert!(name("com").is_subdomain_of(&DomainName::root()));
        assert!(!name("example.org").is_subdomain_of(&name("com")));
    }

    #[test]
    fn name_length_limits() {
        let long_label = "a".repeat(64);
        assert_eq!(long_label.parse::<DomainName>(), Err(WireError::LabelTooLong));
        let long_name = vec!["a".repeat(63); 4].join(".");
        assert_eq!(long_name.parse::<DomainName>(), Err(WireError::NameTooLong));
        let fits = ["a".repeat(63), "a".repeat(63), "a".repeat(63), "a".repeat(61)].join(".");
        assert_eq!(fits.parse::<DomainName>().unwrap().encoded_len(), 255);
        assert_eq!("a..b".parse::<DomainName>(), Err(WireError::EmptyLabel));
    }

    #[test]
    fn framing_examples() {
        let framed = frame(&[0xab; 29]).unwrap();
        assert_eq!(framed.len(), 31);
        assert_eq!(&framed[..2], &[0x00, 0x1d]);
        assert_eq!(frame(&[]).unwrap(), vec![0, 0]);
        assert_eq!(
            frame(&vec![0; MAX_FRAME_LEN + 1]),
            Err(WireError::PayloadTooLarge(MAX_FRAME_LEN + 1))
        );
    }

    #[test]
    fn unframe_reports_mid_message_close() {
        let mut partial: &[u8] = &[0, 5, 1, 2];
        let err = unframe(&mut partial).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::UnexpectedEof);
        let mut empty: &[u8] = &[];
        assert!(unframe(&mut empty).unwrap().is_none());
    }

    #[test]
    fn frame_buffer_handles_split_delivery() {
        let mut fb = FrameBuffer::new();
        let mut stream = frame(b"hello").unwrap();
        stream.extend(frame(b"").unwrap());
        fb.extend(&stream[..3]);
        assert_eq!(fb.next_frame(), None);
        fb.extend(&stream[3..]);
        assert_eq!(fb.next_frame().as_deref(), Some(&b"hello"[..]));
        assert_eq!(fb.next_frame().as_deref(), Some(&b""[..]));
        assert_eq!(fb.pending(), 0);
    }
}
