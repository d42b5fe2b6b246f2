//! Seeded synthetic traffic for desk-scale experiments.
//!
//! The generator is ChaCha8 (`rand_chacha` 0.3) seeded with
//! `seed_from_u64(seed)`, sampled through `rand` 0.8. Both crate versions
//! are pinned so a given config reproduces the same trace byte for byte.
//!
//! Every packet draws from the stream in a fixed order, whatever the mode:
//! one legitimate draw, then one uniform random draw. `attack-mimic(k)`
//! takes the fields behind the first `k` schema attributes from the
//! legitimate draw and everything else from the random draw, so runs that
//! differ only in `k` see the same underlying packets.

use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::packet::{PacketFields, PROTO_TCP, PROTO_UDP};
use crate::schema::{AttributeSchema, Extractor};
use crate::trace::{Label, TraceRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenMode {
    Legit,
    AttackRandom,
    /// Copy the first `k` schema attributes from a legitimate draw.
    AttackMimic(usize),
}

impl FromStr for GenMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "legit" => Ok(GenMode::Legit),
            "attack-random" => Ok(GenMode::AttackRandom),
            _ => {
                let k = s
                    .strip_prefix("attack-mimic:")
                    .ok_or_else(|| format!("unknown mode {s:?} (legit|attack-random|attack-mimic:k)"))?;
                k.parse()
                    .map(GenMode::AttackMimic)
                    .map_err(|_| format!("bad mimic attribute count {k:?}"))
            }
        }
    }
}

/// One legitimate flow family.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTemplate {
    /// Network part of the /24 source prefix (host octet is drawn).
    pub src_prefix: [u8; 3],
    pub dst_addr: Ipv4Addr,
    pub ttls: Vec<u8>,
    pub dst_ports: Vec<u16>,
    /// Probability of TCP; the rest is UDP.
    pub tcp_share: f64,
    /// Inclusive total-length ranges, one picked uniformly per packet.
    pub lengths: Vec<(u16, u16)>,
    pub tos: u8,
    pub tcp_flags: Vec<u8>,
}

const LEGIT_TTLS: [u8; 4] = [62, 63, 64, 128];
const LEGIT_PORTS: [u16; 5] = [80, 443, 53, 22, 123];
const LEGIT_LENGTHS: [(u16, u16); 3] = [(40, 255), (256, 511), (1280, 1500)];
const LEGIT_FLAGS: [u8; 4] = [0x02, 0x10, 0x18, 0x11];

/// Ten templates over ten distinct /24 prefixes, TTLs from {62,63,64,128},
/// two destination ports each from {80,443,53,22,123}, 70% TCP, three
/// length buckets, ToS 0.
pub fn default_legit_model() -> Vec<FlowTemplate> {
    (0..10u8)
        .map(|t| FlowTemplate {
            src_prefix: [10, 10 + t, 17u8.wrapping_mul(t + 1)],
            dst_addr: Ipv4Addr::new(198, 51, 100, 10),
            ttls: match t % 4 {
                0 => vec![LEGIT_TTLS[2]],
                1 => vec![LEGIT_TTLS[1], LEGIT_TTLS[2]],
                2 => vec![LEGIT_TTLS[3]],
                _ => vec![LEGIT_TTLS[0]],
            },
            dst_ports: vec![
                LEGIT_PORTS[usize::from(t) % 5],
                LEGIT_PORTS[(usize::from(t) + 1) % 5],
            ],
            tcp_share: 0.7,
            lengths: LEGIT_LENGTHS.to_vec(),
            tos: 0,
            tcp_flags: LEGIT_FLAGS.to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub mode: GenMode,
    pub count: u64,
    pub seed: u64,
    /// Packets per second of synthetic trace time.
    pub rate: f64,
    pub legit_model: Vec<FlowTemplate>,
    /// Decides which fields `attack-mimic(k)` copies.
    pub schema: AttributeSchema,
    pub start_index: u64,
    pub start_ts: f64,
}

impl GeneratorConfig {
    pub fn new(mode: GenMode, count: u64, seed: u64) -> Self {
        Self {
            mode,
            count,
            seed,
            rate: 1000.0,
            legit_model: default_legit_model(),
            schema: AttributeSchema::default(),
            start_index: 0,
            start_ts: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::InvalidConfig(m));
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return bad(format!("rate {} must be positive", self.rate));
        }
        if !self.start_ts.is_finite() {
            return bad("start_ts must be finite".into());
        }
        if let GenMode::AttackMimic(k) = self.mode {
            if k >= self.schema.len() {
                return bad(format!("mimic k = {k} must be below n = {}", self.schema.len()));
            }
        }
        if self.legit_model.is_empty() {
            return bad("legit model has no templates".into());
        }
        for (i, t) in self.legit_model.iter().enumerate() {
            if t.ttls.is_empty() || t.dst_ports.is_empty() || t.lengths.is_empty() || t.tcp_flags.is_empty() {
                return bad(format!("template {i} has an empty value set"));
            }
            if !(0.0..=1.0).contains(&t.tcp_share) {
                return bad(format!("template {i}: tcp_share outside [0, 1]"));
            }
            if t.lengths.iter().any(|&(lo, hi)| lo < 20 || lo > hi) {
                return bad(format!("template {i}: length ranges must satisfy 20 <= lo <= hi"));
            }
        }
        Ok(())
    }
}

/// Raw fields before the protocol decides which transport fields exist.
#[derive(Debug, Clone, Copy)]
struct Draft {
    src_addr: u32,
    dst_addr: u32,
    protocol: u8,
    ttl: u8,
    tos: u8,
    total_length: u16,
    src_port: u16,
    dst_port: u16,
    tcp_flags: u8,
}

impl Draft {
    fn legit(rng: &mut ChaCha8Rng, model: &[FlowTemplate]) -> Self {
        let t = &model[rng.gen_range(0..model.len())];
        let host: u8 = rng.gen_range(1..=254);
        let src = Ipv4Addr::new(t.src_prefix[0], t.src_prefix[1], t.src_prefix[2], host);
        let protocol = if rng.gen_bool(t.tcp_share) { PROTO_TCP } else { PROTO_UDP };
        let ttl = t.ttls[rng.gen_range(0..t.ttls.len())];
        let dst_port = t.dst_ports[rng.gen_range(0..t.dst_ports.len())];
        let (lo, hi) = t.lengths[rng.gen_range(0..t.lengths.len())];
        let total_length = rng.gen_range(lo..=hi);
        let src_port = rng.gen_range(32768..=60999);
        let tcp_flags = t.tcp_flags[rng.gen_range(0..t.tcp_flags.len())];
        Draft {
            src_addr: src.into(),
            dst_addr: t.dst_addr.into(),
            protocol,
            ttl,
            tos: t.tos,
            total_length,
            src_port,
            dst_port,
            tcp_flags,
        }
    }

    fn random(rng: &mut ChaCha8Rng) -> Self {
        Draft {
            src_addr: rng.gen(),
            dst_addr: rng.gen(),
            protocol: rng.gen(),
            ttl: rng.gen(),
            tos: rng.gen(),
            total_length: rng.gen_range(20..=u16::MAX),
            src_port: rng.gen(),
            dst_port: rng.gen(),
            tcp_flags: rng.gen(),
        }
    }

    fn copy_field(&mut self, from: &Draft, e: Extractor) {
        match e {
            Extractor::Protocol => self.protocol = from.protocol,
            Extractor::Ttl => self.ttl = from.ttl,
            Extractor::Tos => self.tos = from.tos,
            Extractor::TotalLength => self.total_length = from.total_length,
            Extractor::SrcAddr => self.src_addr = from.src_addr,
            Extractor::DstAddr => self.dst_addr = from.dst_addr,
            Extractor::SrcPort => self.src_port = from.src_port,
            Extractor::DstPort => self.dst_port = from.dst_port,
            Extractor::TcpFlags => self.tcp_flags = from.tcp_flags,
        }
    }

    fn finish(self) -> PacketFields {
        let transport = matches!(self.protocol, PROTO_TCP | PROTO_UDP);
        PacketFields {
            src_addr: self.src_addr.into(),
            dst_addr: self.dst_addr.into(),
            protocol: self.protocol,
            ttl: self.ttl,
            tos: self.tos,
            total_length: self.total_length,
            src_port: transport.then_some(self.src_port),
            dst_port: transport.then_some(self.dst_port),
            tcp_flags: (self.protocol == PROTO_TCP).then_some(self.tcp_flags),
        }
    }
}

/// Produces `count` records with indices from `start_index` and timestamps
/// `start_ts + i / rate`.
pub fn generate_trace(config: &GeneratorConfig) -> Result<Vec<TraceRecord>, GeneratorError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mimic_fields: Vec<Extractor> = match config.mode {
        GenMode::AttackMimic(k) => config.schema.attributes()[..k]
            .iter()
            .map(|a| a.extractor)
            .collect(),
        _ => Vec::new(),
    };
    let label = match config.mode {
        GenMode::Legit => Label::Legit,
        _ => Label::Attack,
    };
    let mut out = Vec::with_capacity(config.count as usize);
    for i in 0..config.count {
        let legit = Draft::legit(&mut rng, &config.legit_model);
        let random = Draft::random(&mut rng);
        let draft = match config.mode {
            GenMode::Legit => legit,
            GenMode::AttackRandom => random,
            GenMode::AttackMimic(_) => {
                let mut d = random;
                for e in &mimic_fields {
                    d.copy_field(&legit, *e);
                }
                d
            }
        };
        out.push(TraceRecord {
            index: config.start_index + i,
            ts: config.start_ts + i as f64 / config.rate,
            fields: draft.finish(),
            raw: None,
            label,
        });
    }
    Ok(out)
}
