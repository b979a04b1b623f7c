//! Message generators. Labels are lowercase because decoding canonicalises
//! case, and names stay within the 255-byte limit.

use std::net::Ipv4Addr;

use pdot::wire::{DnsMessage, DnsQuestion, DomainName, Flags, Rcode, RecordType, ResourceRecord};
use proptest::collection::vec;
use proptest::prelude::*;

pub fn label() -> impl Strategy<Value = String> {
    "[a-z0-9]([a-z0-9-]{0,20}[a-z0-9])?"
}

pub fn name() -> impl Strategy<Value = DomainName> {
    vec(label(), 1..5).prop_map(|labels| labels.join(".").parse().expect("generated names are valid"))
}

/// Any byte except ASCII uppercase, so the name survives case folding.
pub fn binary_name() -> impl Strategy<Value = DomainName> {
    let byte = any::<u8>().prop_map(|b| b.to_ascii_lowercase());
    vec(vec(byte, 1..30), 0..6).prop_map(|labels| DomainName::from_labels(labels).expect("within limits"))
}

pub fn rcode() -> impl Strategy<Value = Rcode> {
    (0u8..16).prop_map(Rcode::from_bits)
}

pub fn flags(opcodes: &'static [u8], max_rcode: u8) -> impl Strategy<Value = Flags> {
    (any::<[bool; 5]>(), proptest::sample::select(opcodes), 0..=max_rcode).prop_map(|(b, opcode, rc)| Flags {
        is_response: b[0],
        opcode,
        authoritative: b[1],
        truncated: b[2],
        recursion_desired: b[3],
        recursion_available: b[4],
        rcode: Rcode::from_bits(rc),
    })
}

/// A and NS records in class IN.
pub fn standard_record() -> impl Strategy<Value = ResourceRecord> {
    prop_oneof![
        (name(), any::<u32>(), any::<u32>()).prop_map(|(n, ttl, ip)| ResourceRecord::a(n, ttl, Ipv4Addr::from(ip))),
        (name(), any::<u32>(), name()).prop_map(|(n, ttl, t)| ResourceRecord::ns(n, ttl, &t)),
    ]
}

pub fn opaque_record() -> impl Strategy<Value = ResourceRecord> {
    (binary_name(), 3u16..=u16::MAX, 1u16..=u16::MAX, any::<u32>(), vec(any::<u8>(), 0..64)).prop_map(
        |(name, rtype, rclass, ttl, rdata)| ResourceRecord {
            name,
            rtype: RecordType(rtype),
            rclass,
            ttl,
            rdata,
        },
    )
}

/// Messages limited to what a mainstream DNS library represents: class IN,
/// A/NS records, the common opcodes and rcodes 0-5.
pub fn standard_message() -> impl Strategy<Value = DnsMessage> {
    (
        any::<u16>(),
        flags(&[0, 2, 4, 5], 5),
        vec((name(), prop_oneof![Just(RecordType::A), Just(RecordType::NS)]), 0..3),
        vec(standard_record(), 0..4),
        vec(standard_record(), 0..4),
        vec(standard_record(), 0..4),
    )
        .prop_map(|(id, flags, qs, answers, authorities, additionals)| DnsMessage {
            id,
            flags,
            questions: qs.into_iter().map(|(n, t)| DnsQuestion::new(n, t)).collect(),
            answers,
            authorities,
            additionals,
        })
}

/// Everything the encoder accepts.
pub fn any_message() -> impl Strategy<Value = DnsMessage> {
    let record = prop_oneof![standard_record(), opaque_record()];
    let question = (binary_name(), 1u16..=u16::MAX, 1u16..=u16::MAX).prop_map(|(name, t, c)| DnsQuestion {
        name,
        qtype: RecordType(t),
        qclass: c,
    });
    (
        any::<u16>(),
        flags(&[0, 1, 2, 3, 4, 5, 6, 15], 15),
        vec(question, 0..3),
        vec(record.clone(), 0..4),
        vec(record.clone(), 0..3),
        vec(record, 0..3),
    )
        .prop_map(|(id, flags, questions, answers, authorities, additionals)| DnsMessage {
            id,
            flags,
            questions,
            answers,
            authorities,
            additionals,
        })
}
