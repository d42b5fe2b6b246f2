//! Attribute schema: which header fields become scoring attributes, how each
//! raw field is discretized, and which attribute pairs are scored.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::packet::PacketFields;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("schema needs at least 2 attributes, got {0}")]
    TooFewAttributes(usize),
    #[error("pair set is empty")]
    NoPairs,
    #[error("pair ({0}, {1}) is invalid for {2} attributes")]
    BadPair(usize, usize, usize),
    #[error("pair ({0}, {1}) listed twice")]
    DuplicatePair(usize, usize),
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("weights must be finite, non-negative and sum to a positive value")]
    BadWeights,
    #[error("attribute {name}: {reason}")]
    BadDiscretizer { name: String, reason: &'static str },
}

/// One discrete attribute value `a_{i,j}`. `None` is the reserved value for
/// fields the packet does not carry (ports on ICMP, flags on UDP, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttrValue {
    None,
    Value(u32),
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::None => f.write_str("none"),
            AttrValue::Value(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for AttrValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AttrValue::None => s.serialize_str("none"),
            AttrValue::Value(v) => s.serialize_u32(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AttrValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = AttrValue;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a u32 or \"none\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<AttrValue, E> {
                u32::try_from(v)
                    .map(AttrValue::Value)
                    .map_err(|_| E::custom("attribute value exceeds u32"))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<AttrValue, E> {
                u32::try_from(v)
                    .map(AttrValue::Value)
                    .map_err(|_| E::custom("attribute value out of range"))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<AttrValue, E> {
                if v == "none" {
                    Ok(AttrValue::None)
                } else {
                    Err(E::custom(format!("unknown attribute value {v:?}")))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Which header field feeds an attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    Protocol,
    Ttl,
    Tos,
    TotalLength,
    SrcAddr,
    DstAddr,
    SrcPort,
    DstPort,
    TcpFlags,
}

impl Extractor {
    pub fn raw(self, f: &PacketFields) -> Option<u32> {
        match self {
            Extractor::Protocol => Some(f.protocol.into()),
            Extractor::Ttl => Some(f.ttl.into()),
            Extractor::Tos => Some(f.tos.into()),
            Extractor::TotalLength => Some(f.total_length.into()),
            Extractor::SrcAddr => Some(f.src_addr.into()),
            Extractor::DstAddr => Some(f.dst_addr.into()),
            Extractor::SrcPort => f.src_port.map(u32::from),
            Extractor::DstPort => f.dst_port.map(u32::from),
            Extractor::TcpFlags => f.tcp_flags.map(u32::from),
        }
    }
}

/// Maps a raw field value onto the attribute's discrete domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Discretizer {
    Identity,
    /// `floor(raw / width)`
    Bucket { width: u32 },
    /// Upper `bits` bits of a 32-bit value, e.g. a /24 source prefix.
    Prefix { bits: u8 },
    Mask { mask: u32 },
}

impl Discretizer {
    pub fn apply(self, raw: Option<u32>) -> AttrValue {
        let Some(v) = raw else {
            return AttrValue::None;
        };
        AttrValue::Value(match self {
            Discretizer::Identity => v,
            Discretizer::Bucket { width } => v / width,
            Discretizer::Prefix { bits } => v.checked_shr(32 - u32::from(bits)).unwrap_or(0),
            Discretizer::Mask { mask } => v & mask,
        })
    }

    fn check(self) -> Result<(), &'static str> {
        match self {
            Discretizer::Bucket { width: 0 } => Err("bucket width must be positive"),
            Discretizer::Prefix { bits } if bits == 0 || bits > 32 => {
                Err("prefix bits must be in 1..=32")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub extractor: Extractor,
    pub discretizer: Discretizer,
}

impl AttributeDef {
    pub fn new(name: impl Into<String>, extractor: Extractor, discretizer: Discretizer) -> Self {
        Self {
            name: name.into(),
            extractor,
            discretizer,
        }
    }
}

/// How pair confidences combine into one packet score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    /// Weighted arithmetic mean; stays in [0, 1].
    #[default]
    Mean,
    /// Weighted sum; only bounded by the weight total.
    Sum,
    /// Smallest pair confidence (weights act as a mask: zero-weight pairs
    /// are ignored).
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct AttributeSchema {
    attributes: Vec<AttributeDef>,
    pairs: Vec<(usize, usize)>,
    weights: Vec<f64>,
    score_rule: ScoreRule,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    attributes: Vec<AttributeDef>,
    pairs: Vec<(usize, usize)>,
    weights: Vec<f64>,
    #[serde(default)]
    score_rule: ScoreRule,
}

impl TryFrom<SchemaRepr> for AttributeSchema {
    type Error = SchemaError;
    fn try_from(r: SchemaRepr) -> Result<Self, SchemaError> {
        AttributeSchema::new(r.attributes, r.pairs, Some(r.weights))
            .map(|s| s.with_score_rule(r.score_rule))
    }
}

impl From<AttributeSchema> for SchemaRepr {
    fn from(s: AttributeSchema) -> Self {
        SchemaRepr {
            attributes: s.attributes,
            pairs: s.pairs,
            weights: s.weights,
            score_rule: s.score_rule,
        }
    }
}

impl AttributeSchema {
    /// Pairs are stored with the smaller index first. `weights` defaults to
    /// 1.0 per pair.
    pub fn new(
        attributes: Vec<AttributeDef>,
        pairs: Vec<(usize, usize)>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self, SchemaError> {
        let n = attributes.len();
        if n < 2 {
            return Err(SchemaError::TooFewAttributes(n));
        }
        for a in &attributes {
            a.discretizer
                .check()
                .map_err(|reason| SchemaError::BadDiscretizer {
                    name: a.name.clone(),
                    reason,
                })?;
        }
        if pairs.is_empty() {
            return Err(SchemaError::NoPairs);
        }
        let mut norm = Vec::with_capacity(pairs.len());
        for &(r, s) in &pairs {
            if r >= n || s >= n || r == s {
                return Err(SchemaError::BadPair(r, s, n));
            }
            let p = (r.min(s), r.max(s));
            if norm.contains(&p) {
                return Err(SchemaError::DuplicatePair(p.0, p.1));
            }
            norm.push(p);
        }
        let weights = weights.unwrap_or_else(|| vec![1.0; norm.len()]);
        if weights.len() != norm.len() {
            return Err(SchemaError::WeightCount {
                expected: norm.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0
        {
            return Err(SchemaError::BadWeights);
        }
        Ok(Self {
            attributes,
            pairs: norm,
            weights,
            score_rule: ScoreRule::Mean,
        })
    }

    pub fn with_score_rule(mut self, rule: ScoreRule) -> Self {
        self.score_rule = rule;
        self
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attributes(&self) -> &[AttributeDef] {
        &self.attributes
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn score_rule(&self) -> ScoreRule {
        self.score_rule
    }

    pub fn extract(&self, fields: &PacketFields) -> AttributeVector {
        AttributeVector(
            self.attributes
                .iter()
                .map(|a| a.discretizer.apply(a.extractor.raw(fields)))
                .collect(),
        )
    }
}

/// Every unordered pair over `n` attributes, in lexicographic order.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|r| (r + 1..n).map(move |s| (r, s)))
        .collect()
}

/// protocol, TTL, source /24, destination port, TCP flags (6-bit),
/// total-length bucket (256 octets), ToS; all 21 pairs, uniform weights.
impl Default for AttributeSchema {
    fn default() -> Self {
        use Discretizer::*;
        use Extractor::*;
        let attributes = vec![
            AttributeDef::new("protocol", Protocol, Identity),
            AttributeDef::new("ttl", Ttl, Identity),
            AttributeDef::new("src_prefix24", SrcAddr, Prefix { bits: 24 }),
            AttributeDef::new("dst_port", DstPort, Identity),
            AttributeDef::new("tcp_flags", TcpFlags, Mask { mask: 0x3F }),
            AttributeDef::new("length_bucket", TotalLength, Bucket { width: 256 }),
            AttributeDef::new("tos", Tos, Identity),
        ];
        let pairs = all_pairs(attributes.len());
        AttributeSchema::new(attributes, pairs, None).expect("default schema is valid")
    }
}

/// Per-packet attribute values `p(i)`, one per schema attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttributeVector(pub Vec<AttrValue>);

impl AttributeVector {
    pub fn values(&self) -> &[AttrValue] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for AttributeVector {
    type Output = AttrValue;
    fn index(&self, i: usize) -> &AttrValue {
        &self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{build_packet, parse_ipv4, PROTO_TCP, PROTO_UDP};
    use proptest::prelude::*;
    use std::net::Ipv4Addr;

    fn udp_fields() -> PacketFields {
        PacketFields {
            src_addr: Ipv4Addr::new(10, 20, 30, 40),
            dst_addr: Ipv4Addr::new(10, 0, 0, 1),
            protocol: PROTO_UDP,
            ttl: 64,
            tos: 0,
            total_length: 700,
            src_port: Some(5353),
            dst_port: Some(53),
            tcp_flags: None,
        }
    }

    #[test]
    fn default_schema_shape() {
        let s = AttributeSchema::default();
        assert_eq!(s.len(), 7);
        assert_eq!(s.pairs().len(), 21);
        assert!(s.weights().iter().all(|w| *w == 1.0));
        assert_eq!(s.score_rule(), ScoreRule::Mean);
    }

    #[test]
    fn default_extraction() {
        let s = AttributeSchema::default();
        let v = s.extract(&udp_fields());
        assert_eq!(v[0], AttrValue::Value(17));
        assert_eq!(v[1], AttrValue::Value(64));
        assert_eq!(v[2], AttrValue::Value((10 << 16) | (20 << 8) | 30));
        assert_eq!(v[3], AttrValue::Value(53));
        assert_eq!(v[4], AttrValue::None);
        assert_eq!(v[5], AttrValue::Value(2));
        assert_eq!(v[6], AttrValue::Value(0));

        let mut tcp = udp_fields();
        tcp.protocol = PROTO_TCP;
        tcp.tcp_flags = Some(0xD2);
        assert_eq!(s.extract(&tcp)[4], AttrValue::Value(0x12));

        let mut icmp = udp_fields();
        icmp.protocol = 1;
        icmp.src_port = None;
        icmp.dst_port = None;
        assert_eq!(s.extract(&icmp)[3], AttrValue::None);
    }

    #[test]
    fn discretizers() {
        assert_eq!(Discretizer::Prefix { bits: 32 }.apply(Some(7)), AttrValue::Value(7));
        assert_eq!(Discretizer::Prefix { bits: 8 }.apply(Some(0x0A00_0001)), AttrValue::Value(10));
        assert_eq!(Discretizer::Bucket { width: 256 }.apply(Some(255)), AttrValue::Value(0));
        assert_eq!(Discretizer::Identity.apply(None), AttrValue::None);
    }

    #[test]
    fn invalid_schemas() {
        let a = AttributeDef::new("ttl", Extractor::Ttl, Discretizer::Identity);
        let b = AttributeDef::new("tos", Extractor::Tos, Discretizer::Identity);
        assert_eq!(
            AttributeSchema::new(vec![a.clone()], vec![], None),
            Err(SchemaError::TooFewAttributes(1))
        );
        let two = vec![a.clone(), b.clone()];
        assert_eq!(AttributeSchema::new(two.clone(), vec![], None), Err(SchemaError::NoPairs));
        assert_eq!(
            AttributeSchema::new(two.clone(), vec![(0, 2)], None),
            Err(SchemaError::BadPair(0, 2, 2))
        );
        assert_eq!(
            AttributeSchema::new(two.clone(), vec![(0, 1), (1, 0)], None),
            Err(SchemaError::DuplicatePair(0, 1))
        );
        assert_eq!(
            AttributeSchema::new(two.clone(), vec![(0, 1)], Some(vec![0.0])),
            Err(SchemaError::BadWeights)
        );
        assert!(matches!(
            AttributeSchema::new(two.clone(), vec![(0, 1)], Some(vec![1.0, 1.0])),
            Err(SchemaError::WeightCount { .. })
        ));
        let bad = AttributeDef::new("len", Extractor::TotalLength, Discretizer::Bucket { width: 0 });
        assert!(matches!(
            AttributeSchema::new(vec![a, bad], vec![(0, 1)], None),
            Err(SchemaError::BadDiscretizer { .. })
        ));
    }

    #[test]
    fn schema_json_roundtrip_and_validation() {
        let s = AttributeSchema::default().with_score_rule(ScoreRule::Min);
        let doc = serde_json::to_string(&s).unwrap();
        let back: AttributeSchema = serde_json::from_str(&doc).unwrap();
        assert_eq!(back, s);
        let broken = doc.replace("\"pairs\":[[0,1]", "\"pairs\":[[0,9]");
        assert!(serde_json::from_str::<AttributeSchema>(&broken).is_err());
    }

    #[test]
    fn attr_value_json() {
        let vals = vec![AttrValue::None, AttrValue::Value(42)];
        let s = serde_json::to_string(&vals).unwrap();
        assert_eq!(s, r#"["none",42]"#);
        assert_eq!(serde_json::from_str::<Vec<AttrValue>>(&s).unwrap(), vals);
        assert!(serde_json::from_str::<AttrValue>("\"x\"").is_err());
        assert!(serde_json::from_str::<AttrValue>("-1").is_err());
    }

    proptest! {
        #[test]
        fn extraction_is_pure(ttl: u8, tos: u8, len in 20u16.., src: u32, dp: u16, flags: u8) {
            let f = PacketFields {
                src_addr: Ipv4Addr::from(src),
                dst_addr: Ipv4Addr::new(1, 2, 3, 4),
                protocol: PROTO_TCP,
                ttl, tos, total_length: len,
                src_port: Some(1234), dst_port: Some(dp), tcp_flags: Some(flags),
            };
            let s = AttributeSchema::default();
            let bytes = build_packet(&f).unwrap();
            let a = s.extract(&parse_ipv4(&bytes).unwrap().fields());
            let b = s.extract(&parse_ipv4(&bytes).unwrap().fields());
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a, s.extract(&f));
        }
    }
}
