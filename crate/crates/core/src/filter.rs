//! Period-driven packet filter.
//!
//! In a non-attack period every packet is scored against the learned
//! profile, the nominal profile (NP) keeps the smallest score seen, the
//! packet is tagged with its score in an IPv4 option and then counted into
//! the profile. Declaring an attack period freezes the NP as the discarding
//! threshold; packets scoring strictly below it are dropped and nothing is
//! learned until the next non-attack period.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{
    check_doc_version, ConfidenceProfile, ProfileDocument, ProfileError, WindowPolicy,
};
use crate::packet::{parse_ipv4, parse_ipv4_strict, rewrite_header_with_option, PacketError, RawPacket};
use crate::schema::AttributeVector;

/// Score given to packets while the profile has no closed traffic yet.
pub const BOOTSTRAP_SCORE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("attack period at ts {ts} has no discarding threshold (nominal profile unset)")]
    ThresholdUnset { ts: f64 },
    #[error("training is only allowed in a non-attack period")]
    TrainingUnderAttack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    NonAttack,
    Attack,
}

impl Period {
    pub fn as_str(self) -> &'static str {
        match self {
            Period::NonAttack => "nonattack",
            Period::Attack => "attack",
        }
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Period {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nonattack" => Ok(Period::NonAttack),
            "attack" => Ok(Period::Attack),
            _ => Err(format!("unknown period {s:?} (expected attack|nonattack)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodState {
    pub kind: Period,
    pub since_ts: f64,
}

/// Scores bucketed at Q0.16 resolution, for percentile thresholds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreHistogram(BTreeMap<u16, u64>);

impl ScoreHistogram {
    pub fn record(&mut self, score: f64) {
        let bucket = (score.clamp(0.0, 1.0) * 65535.0).floor() as u16;
        *self.0.entry(bucket).or_insert(0) += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    /// Nearest-rank `q`-th percentile (q in [0, 100]), rounded down to the
    /// bucket edge so the ranked score itself is never below the result.
    pub fn percentile(&self, q: f64) -> Option<f64> {
        let n = self.total();
        if n == 0 {
            return None;
        }
        let rank = ((q / 100.0) * n as f64).ceil().max(1.0) as u64;
        let mut seen = 0;
        for (bucket, c) in &self.0 {
            seen += c;
            if seen >= rank {
                return Some(f64::from(*bucket) / 65535.0);
            }
        }
        self.0.keys().next_back().map(|b| f64::from(*b) / 65535.0)
    }
}

/// The NP: running minimum of non-attack scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NominalProfile {
    pub np: Option<f64>,
    /// Number of times `np` changed (including the first assignment).
    pub updates: u64,
    pub set_at_ts: Option<f64>,
    #[serde(default)]
    pub scores: ScoreHistogram,
}

impl NominalProfile {
    /// Folds one non-attack score in. Returns whether the NP changed.
    pub fn offer(&mut self, score: f64, ts: f64) -> bool {
        self.scores.record(score);
        let lower = match self.np {
            None => true,
            Some(np) => score < np,
        };
        if lower {
            self.np = Some(score);
            self.updates += 1;
            self.set_at_ts = Some(ts);
        }
        lower
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub enum ThresholdStrategy {
    /// The NP itself (running minimum).
    #[default]
    Min,
    /// Extension: the q-th percentile of the non-attack score stream.
    Percentile(f64),
}

impl FromStr for ThresholdStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "min" {
            return Ok(ThresholdStrategy::Min);
        }
        let q = s
            .strip_prefix("percentile:")
            .ok_or_else(|| format!("unknown threshold strategy {s:?} (expected min|percentile:q)"))?;
        let q: f64 = q.parse().map_err(|_| format!("bad percentile {q:?}"))?;
        if !(0.0..=100.0).contains(&q) {
            return Err(format!("percentile {q} outside [0, 100]"));
        }
        Ok(ThresholdStrategy::Percentile(q))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EngineConfig {
    pub strategy: ThresholdStrategy,
    /// Forget the NP whenever a non-attack period begins.
    pub np_reset_on_nonattack: bool,
    /// Reject packets whose header checksum does not verify.
    pub strict_checksum: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Threshold {
    Learning,
    Frozen(f64),
    Unavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Discard,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Accept => "accept",
            Verdict::Discard => "discard",
        }
    }
}

impl FromStr for Verdict {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "accept" => Ok(Verdict::Accept),
            "discard" => Ok(Verdict::Discard),
            _ => Err(format!("unknown verdict {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecision {
    pub verdict: Verdict,
    pub score: f64,
    pub period: Period,
    pub rewritten: bool,
    pub threshold_used: Option<f64>,
    /// Why a non-attack packet could not be tagged (it is still accepted).
    pub rewrite_error: Option<PacketError>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub packets: usize,
    pub windows_closed: u64,
    pub n_total: f64,
    pub np: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterEngine {
    profile: ConfidenceProfile,
    nominal: NominalProfile,
    period: PeriodState,
    threshold: Threshold,
    config: EngineConfig,
}

impl FilterEngine {
    /// Starts in a non-attack period with an unset NP.
    pub fn new(profile: ConfidenceProfile, config: EngineConfig) -> Self {
        Self::with_nominal(profile, NominalProfile::default(), config)
    }

    pub fn with_nominal(
        profile: ConfidenceProfile,
        nominal: NominalProfile,
        config: EngineConfig,
    ) -> Self {
        Self {
            profile,
            nominal,
            period: PeriodState {
                kind: Period::NonAttack,
                since_ts: 0.0,
            },
            threshold: Threshold::Learning,
            config,
        }
    }

    pub fn profile(&self) -> &ConfidenceProfile {
        &self.profile
    }

    pub fn nominal(&self) -> &NominalProfile {
        &self.nominal
    }

    pub fn period(&self) -> PeriodState {
        self.period
    }

    pub fn config(&self) -> EngineConfig {
        self.config
    }

    /// The frozen discarding threshold, if an attack period has one.
    pub fn threshold(&self) -> Option<f64> {
        match self.threshold {
            Threshold::Frozen(t) => Some(t),
            _ => None,
        }
    }

    fn candidate_threshold(&self) -> Option<f64> {
        match self.config.strategy {
            ThresholdStrategy::Min => self.nominal.np,
            ThresholdStrategy::Percentile(q) => self.nominal.scores.percentile(q),
        }
    }

    /// Declares the current period. Entering an attack period folds the open
    /// window into the profile and freezes the threshold; entering a
    /// non-attack period clears it. Re-declaring the current period is a
    /// no-op.
    pub fn set_period(&mut self, kind: Period, ts: f64) {
        if kind == self.period.kind {
            return;
        }
        match kind {
            Period::Attack => {
                self.profile.flush();
                self.threshold = match self.candidate_threshold() {
                    Some(t) => Threshold::Frozen(t),
                    None => Threshold::Unavailable,
                };
            }
            Period::NonAttack => {
                self.threshold = Threshold::Learning;
                if self.config.np_reset_on_nonattack {
                    self.nominal = NominalProfile::default();
                }
            }
        }
        self.period = PeriodState { kind, since_ts: ts };
    }

    pub fn attributes(&self, raw: &RawPacket) -> Result<AttributeVector, PacketError> {
        let parsed = if self.config.strict_checksum {
            parse_ipv4_strict(&raw.bytes)?
        } else {
            parse_ipv4(&raw.bytes)?
        };
        Ok(self.profile.schema().extract(&parsed.fields()))
    }

    /// Runs one packet through the current period's branch. Returns the
    /// decision and the packet to forward (`None` when discarded).
    pub fn process_packet(
        &mut self,
        raw: &RawPacket,
    ) -> Result<(FilterDecision, Option<RawPacket>), FilterError> {
        let attrs = self.attributes(raw)?;
        match self.period.kind {
            Period::NonAttack => {
                let score = if self.profile.is_empty() {
                    BOOTSTRAP_SCORE
                } else {
                    self.profile.score(&attrs)?
                };
                self.nominal.offer(score, raw.capture_ts);
                let (out, rewrite_error) = match rewrite_header_with_option(raw, score) {
                    Ok(p) => (p, None),
                    Err(e) => (raw.clone(), Some(e)),
                };
                self.profile.observe(&attrs, Some(raw.capture_ts))?;
                let decision = FilterDecision {
                    verdict: Verdict::Accept,
                    score,
                    period: Period::NonAttack,
                    rewritten: rewrite_error.is_none(),
                    threshold_used: None,
                    rewrite_error,
                };
                Ok((decision, Some(out)))
            }
            Period::Attack => {
                let Threshold::Frozen(theta) = self.threshold else {
                    return Err(FilterError::ThresholdUnset { ts: raw.capture_ts });
                };
                let score = self.profile.score(&attrs)?;
                let verdict = if score < theta {
                    Verdict::Discard
                } else {
                    Verdict::Accept
                };
                let decision = FilterDecision {
                    verdict,
                    score,
                    period: Period::Attack,
                    rewritten: false,
                    threshold_used: Some(theta),
                    rewrite_error: None,
                };
                let out = (verdict == Verdict::Accept).then(|| raw.clone());
                Ok((decision, out))
            }
        }
    }

    /// Offline training on traffic known to be legitimate: count every
    /// packet, close the profile, then score each packet against the closed
    /// profile and fold those scores into the NP. Scoring against the final
    /// profile is what makes replaying the same traffic under attack
    /// discard nothing.
    pub fn train(&mut self, packets: &[(AttributeVector, f64)]) -> Result<TrainSummary, FilterError> {
        if self.period.kind == Period::Attack {
            return Err(FilterError::TrainingUnderAttack);
        }
        for (attrs, ts) in packets {
            self.profile.observe(attrs, Some(*ts))?;
        }
        self.profile.flush();
        if !self.profile.is_empty() {
            for (attrs, ts) in packets {
                let s = self.profile.score(attrs)?;
                self.nominal.offer(s, *ts);
            }
        }
        Ok(TrainSummary {
            packets: packets.len(),
            windows_closed: self.profile.windows_closed(),
            n_total: self.profile.n_total(),
            np: self.nominal.np,
        })
    }

    /// Back to the initial state: empty profile (same schema, window policy
    /// and decay), unset NP, non-attack period.
    pub fn reset(&mut self) {
        *self = FilterEngine::new(self.profile.cleared(), self.config);
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotDoc {
    #[serde(flatten)]
    profile: ProfileDocument,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nominal: Option<NominalProfile>,
}

/// Profile document with the engine's NP embedded under `"nominal"`.
/// [`crate::confidence::load_profile`] reads it as a plain profile.
pub fn save_snapshot(profile: &ConfidenceProfile, nominal: Option<&NominalProfile>) -> String {
    let doc = SnapshotDoc {
        profile: profile.to_document(),
        nominal: nominal.cloned(),
    };
    let mut s = serde_json::to_string(&doc).expect("snapshot serializes");
    s.push('\n');
    s
}

pub fn load_snapshot(
    text: &str,
) -> Result<(ConfidenceProfile, Option<NominalProfile>), ProfileError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ProfileError::CorruptDocument(e.to_string()))?;
    check_doc_version(&value)?;
    let doc: SnapshotDoc =
        serde_json::from_value(value).map_err(|e| ProfileError::CorruptDocument(e.to_string()))?;
    let profile = ConfidenceProfile::from_document(doc.profile, WindowPolicy::default())?;
    Ok((profile, doc.nominal))
}
