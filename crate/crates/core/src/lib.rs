//! Confidence-based packet filtering against DDoS floods.
//!
//! Legitimate traffic is summarized as the frequency of header attribute
//! values and of attribute-value pairs (correlation patterns). A packet's
//! score is the weighted mean confidence of its value pairs. While no attack
//! is declared, the smallest score seen becomes the nominal threshold and
//! every packet is tagged with its score in a 4-octet IPv4 option; once an
//! attack period is declared, packets scoring below the frozen threshold are
//! discarded.
//!
//! Module map:
//! - [`packet`]: IPv4 parsing, checksum, the confidence option and header rewrite
//! - [`schema`]: attributes, discretizers and the scored pair set
//! - [`confidence`]: windowed counters, confidence queries, scoring, profile documents
//! - [`filter`]: the period-driven filter engine and nominal profile
//! - [`trace`], [`generator`]: trace files (CSV, pcap, periods) and synthetic traffic
//! - [`report`], [`cli`]: decision records, evaluation metrics and the `cbf` CLI

pub mod cli;
pub mod confidence;
pub mod filter;
pub mod generator;
pub mod packet;
pub mod report;
pub mod schema;
pub mod trace;

pub use confidence::{load_profile, save_profile, ConfidenceProfile, ProfileError, WindowPolicy};
pub use filter::{EngineConfig, FilterDecision, FilterEngine, FilterError, Period, Verdict};
pub use packet::{PacketError, RawPacket};
pub use schema::{AttrValue, AttributeSchema, AttributeVector};
