//! Attribute-value and attribute-pair counters, confidence queries and the
//! per-packet score.
//!
//! Counting happens in tumbling windows. A window holds `N_n`, the number of
//! packets seen in the interval, next to `N(A_i = a)` for every attribute
//! value and `N(A_r = x, A_s = y)` for every configured pair. Closing a
//! window folds it into the cumulative aggregate,
//! `cumulative <- decay * cumulative + window`, and confidences are always
//! read from the cumulative aggregate:
//!
//! ```text
//! conf_single(i, a)      = N(A_i = a) / N_n
//! conf_pair(k, (x, y))   = N(A_r = x, A_s = y) / N_n      where pair k = (r, s)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::schema::{AttrValue, AttributeSchema, AttributeVector, ScoreRule};

pub const PROFILE_DOC_VERSION: u32 = 1;
pub const DEFAULT_WINDOW_SECONDS: f64 = 60.0;
/// Window length used when packets carry no timestamp.
pub const DEFAULT_WINDOW_PACKETS: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("attribute vector has {got} values, schema has {expected}")]
    SchemaMismatch { expected: usize, got: usize },
    #[error("profile holds no closed traffic (N_n = 0)")]
    EmptyProfile,
    #[error("pair index {0} is not in the schema's pair set")]
    UnknownPair(usize),
    #[error("attribute index {0} is not in the schema")]
    UnknownAttribute(usize),
    #[error("decay factor {0} must lie in (0, 1]")]
    InvalidDecay(f64),
    #[error("invalid window policy: {0}")]
    InvalidWindow(String),
    #[error("unsupported profile document version {0}")]
    VersionMismatch(u64),
    #[error("corrupt profile document: {0}")]
    CorruptDocument(String),
}

/// Count tables for one schema: `N_n`, the single-value counts per attribute
/// and the value-pair counts per pair slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Counts<T> {
    n_total: T,
    singles: Vec<BTreeMap<AttrValue, T>>,
    pairs: Vec<BTreeMap<(AttrValue, AttrValue), T>>,
}

impl<T: Copy + Default + PartialEq> Counts<T> {
    fn empty(schema: &AttributeSchema) -> Self {
        Self {
            n_total: T::default(),
            singles: vec![BTreeMap::new(); schema.len()],
            pairs: vec![BTreeMap::new(); schema.pairs().len()],
        }
    }

    pub fn n_total(&self) -> T {
        self.n_total
    }

    pub fn single(&self, i: usize, v: AttrValue) -> T {
        self.singles
            .get(i)
            .and_then(|m| m.get(&v))
            .copied()
            .unwrap_or_default()
    }

    pub fn pair(&self, k: usize, x: AttrValue, y: AttrValue) -> T {
        self.pairs
            .get(k)
            .and_then(|m| m.get(&(x, y)))
            .copied()
            .unwrap_or_default()
    }

    pub fn singles(&self, i: usize) -> &BTreeMap<AttrValue, T> {
        &self.singles[i]
    }

    pub fn pairs(&self, k: usize) -> &BTreeMap<(AttrValue, AttrValue), T> {
        &self.pairs[k]
    }
}

/// Counts for one tumbling interval.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowCounter {
    window_id: i64,
    span: Option<(f64, f64)>,
    counts: Counts<u64>,
}

impl WindowCounter {
    fn empty(schema: &AttributeSchema) -> Self {
        Self {
            window_id: 0,
            span: None,
            counts: Counts::empty(schema),
        }
    }

    pub fn window_id(&self) -> i64 {
        self.window_id
    }

    /// First and last timestamp observed in the window.
    pub fn span(&self) -> Option<(f64, f64)> {
        self.span
    }

    pub fn counts(&self) -> &Counts<u64> {
        &self.counts
    }

    pub fn n_total(&self) -> u64 {
        self.counts.n_total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowPolicy {
    /// Windows of fixed trace-time length, aligned to multiples of `seconds`.
    Time { seconds: f64 },
    /// Windows of a fixed packet count.
    Packets { count: u64 },
}

impl Default for WindowPolicy {
    fn default() -> Self {
        WindowPolicy::Time {
            seconds: DEFAULT_WINDOW_SECONDS,
        }
    }
}

impl WindowPolicy {
    fn check(self) -> Result<Self, ProfileError> {
        match self {
            WindowPolicy::Time { seconds } if !(seconds.is_finite() && seconds > 0.0) => Err(
                ProfileError::InvalidWindow(format!("window length {seconds} s")),
            ),
            WindowPolicy::Packets { count: 0 } => {
                Err(ProfileError::InvalidWindow("zero-packet window".into()))
            }
            p => Ok(p),
        }
    }
}

/// Learned confidence profile: a cumulative aggregate over closed windows
/// plus the window currently being filled.
///
/// Single writer: `observe` and `close_window` need `&mut self`; queries only
/// read the cumulative aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceProfile {
    schema: AttributeSchema,
    policy: WindowPolicy,
    decay: f64,
    cumulative: Counts<f64>,
    open_window: WindowCounter,
    windows_closed: u64,
}

impl ConfidenceProfile {
    pub fn new(schema: AttributeSchema) -> Self {
        Self {
            cumulative: Counts::empty(&schema),
            open_window: WindowCounter::empty(&schema),
            schema,
            policy: WindowPolicy::default(),
            decay: 1.0,
            windows_closed: 0,
        }
    }

    pub fn with_policy(mut self, policy: WindowPolicy) -> Result<Self, ProfileError> {
        self.policy = policy.check()?;
        Ok(self)
    }

    pub fn with_decay(mut self, decay: f64) -> Result<Self, ProfileError> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(ProfileError::InvalidDecay(decay));
        }
        self.decay = decay;
        Ok(self)
    }

    /// Same schema, window policy and decay; no counts.
    pub fn cleared(&self) -> Self {
        Self {
            cumulative: Counts::empty(&self.schema),
            open_window: WindowCounter::empty(&self.schema),
            schema: self.schema.clone(),
            policy: self.policy,
            decay: self.decay,
            windows_closed: 0,
        }
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn policy(&self) -> WindowPolicy {
        self.policy
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn windows_closed(&self) -> u64 {
        self.windows_closed
    }

    pub fn cumulative(&self) -> &Counts<f64> {
        &self.cumulative
    }

    pub fn open_window(&self) -> &WindowCounter {
        &self.open_window
    }

    /// `N_n` of the cumulative aggregate.
    pub fn n_total(&self) -> f64 {
        self.cumulative.n_total
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.n_total <= 0.0
    }

    /// Counts one packet into the open window, closing it first when `ts`
    /// falls past the window boundary.
    pub fn observe(&mut self, attrs: &AttributeVector, ts: Option<f64>) -> Result<(), ProfileError> {
        self.check_len(attrs)?;
        self.roll_window(ts);

        let w = &mut self.open_window;
        if let Some(t) = ts {
            w.span = Some(match w.span {
                None => (t, t),
                Some((start, end)) => (start.min(t), end.max(t)),
            });
        }
        let c = &mut w.counts;
        c.n_total += 1;
        for (i, v) in attrs.values().iter().enumerate() {
            *c.singles[i].entry(*v).or_insert(0) += 1;
        }
        for (k, &(r, s)) in self.schema.pairs().iter().enumerate() {
            *c.pairs[k].entry((attrs[r], attrs[s])).or_insert(0) += 1;
        }
        Ok(())
    }

    fn roll_window(&mut self, ts: Option<f64>) {
        let open_n = self.open_window.counts.n_total;
        let (crossed, next_id) = match (self.policy, ts) {
            (WindowPolicy::Time { seconds }, Some(t)) => {
                let id = (t / seconds).floor() as i64;
                (open_n > 0 && id > self.open_window.window_id, id)
            }
            (WindowPolicy::Time { .. }, None) => (
                open_n >= DEFAULT_WINDOW_PACKETS,
                self.windows_closed as i64 + 1,
            ),
            (WindowPolicy::Packets { count }, _) => {
                (open_n >= count, self.windows_closed as i64 + 1)
            }
        };
        if crossed {
            self.close_window();
        }
        if self.open_window.counts.n_total == 0 {
            self.open_window.window_id = match (self.policy, ts) {
                (WindowPolicy::Time { .. }, Some(_)) => next_id,
                _ => self.windows_closed as i64,
            };
        }
    }

    /// Folds the open window into the cumulative aggregate and starts a new
    /// one.
    pub fn close_window(&mut self) {
        let decay = self.decay;
        let cum = &mut self.cumulative;
        if decay != 1.0 {
            cum.n_total *= decay;
            for m in &mut cum.singles {
                m.values_mut().for_each(|c| *c *= decay);
            }
            for m in &mut cum.pairs {
                m.values_mut().for_each(|c| *c *= decay);
            }
        }
        let win = std::mem::replace(&mut self.open_window, WindowCounter::empty(&self.schema));
        cum.n_total += win.counts.n_total as f64;
        for (dst, src) in cum.singles.iter_mut().zip(win.counts.singles) {
            for (v, c) in src {
                *dst.entry(v).or_insert(0.0) += c as f64;
            }
        }
        for (dst, src) in cum.pairs.iter_mut().zip(win.counts.pairs) {
            for (v, c) in src {
                *dst.entry(v).or_insert(0.0) += c as f64;
            }
        }
        self.windows_closed += 1;
    }

    /// Closes the open window only if it holds packets.
    pub fn flush(&mut self) {
        if self.open_window.counts.n_total > 0 {
            self.close_window();
        }
    }

    fn check_len(&self, attrs: &AttributeVector) -> Result<(), ProfileError> {
        if attrs.len() != self.schema.len() {
            return Err(ProfileError::SchemaMismatch {
                expected: self.schema.len(),
                got: attrs.len(),
            });
        }
        Ok(())
    }

    fn denominator(&self) -> Result<f64, ProfileError> {
        if self.is_empty() {
            Err(ProfileError::EmptyProfile)
        } else {
            Ok(self.cumulative.n_total)
        }
    }

    pub fn conf_single(&self, i: usize, v: AttrValue) -> Result<f64, ProfileError> {
        if i >= self.schema.len() {
            return Err(ProfileError::UnknownAttribute(i));
        }
        let n = self.denominator()?;
        Ok(self.cumulative.single(i, v) / n)
    }

    pub fn conf_pair(&self, k: usize, values: (AttrValue, AttrValue)) -> Result<f64, ProfileError> {
        if k >= self.schema.pairs().len() {
            return Err(ProfileError::UnknownPair(k));
        }
        let n = self.denominator()?;
        Ok(self.cumulative.pair(k, values.0, values.1) / n)
    }

    /// Combines the pair confidences of `attrs` under the schema's score
    /// rule (weighted mean by default). Unseen pairs contribute 0.
    pub fn score(&self, attrs: &AttributeVector) -> Result<f64, ProfileError> {
        self.check_len(attrs)?;
        let n = self.denominator()?;
        let pairs = self.schema.pairs();
        let weights = self.schema.weights();
        let confs = pairs
            .iter()
            .enumerate()
            .map(|(k, &(r, s))| self.cumulative.pair(k, attrs[r], attrs[s]) / n);
        Ok(match self.schema.score_rule() {
            ScoreRule::Mean => {
                let total: f64 = weights.iter().sum();
                confs.zip(weights).map(|(c, w)| w * c).sum::<f64>() / total
            }
            ScoreRule::Sum => confs.zip(weights).map(|(c, w)| w * c).sum(),
            ScoreRule::Min => confs
                .zip(weights)
                .filter(|(_, w)| **w > 0.0)
                .map(|(c, _)| c)
                .fold(f64::INFINITY, f64::min),
        })
    }

    /// The `limit` most confident value pairs of pair slot `k`, highest
    /// first; ties broken by value order.
    pub fn top_pairs(&self, k: usize, limit: usize) -> Vec<((AttrValue, AttrValue), f64)> {
        let n = self.cumulative.n_total;
        if n <= 0.0 {
            return Vec::new();
        }
        let mut all: Vec<_> = self.cumulative.pairs[k]
            .iter()
            .map(|(v, c)| (*v, c / n))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(limit);
        all
    }

    pub fn to_document(&self) -> ProfileDocument {
        let cum = &self.cumulative;
        let singles = cum
            .singles
            .iter()
            .enumerate()
            .flat_map(|(i, m)| m.iter().map(move |(v, c)| (i, *v, Count(*c))))
            .collect();
        let pairs = cum
            .pairs
            .iter()
            .enumerate()
            .flat_map(|(k, m)| m.iter().map(move |((x, y), c)| (k, *x, *y, Count(*c))))
            .collect();
        ProfileDocument {
            version: PROFILE_DOC_VERSION,
            schema: self.schema.clone(),
            windows_closed: self.windows_closed,
            decay: self.decay,
            cumulative: CumulativeDoc {
                n_total: Count(cum.n_total),
                singles,
                pairs,
            },
        }
    }

    /// Rebuilds a profile from its document. The window policy is not part
    /// of the document; the loaded profile gets `policy`.
    pub fn from_document(doc: ProfileDocument, policy: WindowPolicy) -> Result<Self, ProfileError> {
        if doc.version != PROFILE_DOC_VERSION {
            return Err(ProfileError::VersionMismatch(doc.version.into()));
        }
        let corrupt = |m: String| ProfileError::CorruptDocument(m);
        let mut p = ConfidenceProfile::new(doc.schema)
            .with_policy(policy)?
            .with_decay(doc.decay)
            .map_err(|e| corrupt(e.to_string()))?;
        p.windows_closed = doc.windows_closed;

        let n = doc.cumulative.n_total.0;
        if !(n.is_finite() && n >= 0.0) {
            return Err(corrupt(format!("n_total {n}")));
        }
        let limit = n * (1.0 + 1e-9);
        let check = |c: f64| -> Result<f64, ProfileError> {
            if c.is_finite() && c >= 0.0 && c <= limit {
                Ok(c)
            } else {
                Err(corrupt(format!("count {c} outside [0, N_n = {n}]")))
            }
        };
        p.cumulative.n_total = n;
        for (i, v, c) in doc.cumulative.singles {
            let slot = p
                .cumulative
                .singles
                .get_mut(i)
                .ok_or_else(|| corrupt(format!("attribute index {i}")))?;
            if slot.insert(v, check(c.0)?).is_some() {
                return Err(corrupt(format!("duplicate single entry ({i}, {v})")));
            }
        }
        for (k, x, y, c) in doc.cumulative.pairs {
            let slot = p
                .cumulative
                .pairs
                .get_mut(k)
                .ok_or_else(|| corrupt(format!("pair index {k}")))?;
            if slot.insert((x, y), check(c.0)?).is_some() {
                return Err(corrupt(format!("duplicate pair entry ({k}, {x}, {y})")));
            }
        }
        Ok(p)
    }
}

/// A count in the profile document: written as an integer when it is one,
/// as a float once decay has made it fractional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Count(pub f64);

const MAX_EXACT_INT: f64 = 9_007_199_254_740_992.0;

impl Serialize for Count {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let c = self.0;
        if c.fract() == 0.0 && (0.0..MAX_EXACT_INT).contains(&c) {
            s.serialize_u64(c as u64)
        } else {
            s.serialize_f64(c)
        }
    }
}

impl<'de> Deserialize<'de> for Count {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(Count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeDoc {
    pub n_total: Count,
    pub singles: Vec<(usize, AttrValue, Count)>,
    pub pairs: Vec<(usize, AttrValue, AttrValue, Count)>,
}

/// Versioned, byte-deterministic JSON form of a profile. Entries are sorted
/// by index, then value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDocument {
    pub version: u32,
    pub schema: AttributeSchema,
    pub windows_closed: u64,
    pub decay: f64,
    pub cumulative: CumulativeDoc,
}

/// Reads the `version` tag before anything else so that a future format is
/// reported as such rather than as corruption.
pub(crate) fn check_doc_version(value: &serde_json::Value) -> Result<(), ProfileError> {
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(PROFILE_DOC_VERSION) => Ok(()),
        Some(v) => Err(ProfileError::VersionMismatch(v)),
        None => Err(ProfileError::CorruptDocument("missing version tag".into())),
    }
}

/// Serializes the closed part of `profile`. Counts still sitting in the open
/// window are not written; call [`ConfidenceProfile::flush`] first to keep
/// them.
pub fn save_profile(profile: &ConfidenceProfile) -> String {
    let mut s = serde_json::to_string(&profile.to_document()).expect("profile serializes");
    s.push('\n');
    s
}

pub fn load_profile(text: &str) -> Result<ConfidenceProfile, ProfileError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ProfileError::CorruptDocument(e.to_string()))?;
    check_doc_version(&value)?;
    let doc: ProfileDocument =
        serde_json::from_value(value).map_err(|e| ProfileError::CorruptDocument(e.to_string()))?;
    ConfidenceProfile::from_document(doc, WindowPolicy::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{AttributeDef, Discretizer, Extractor};
    use proptest::prelude::*;

    fn v(x: u32) -> AttrValue {
        AttrValue::Value(x)
    }

    fn vec3(a: u32, b: u32, c: u32) -> AttributeVector {
        AttributeVector(vec![v(a), v(b), v(c)])
    }

    fn schema3() -> AttributeSchema {
        let attrs = vec![
            AttributeDef::new("ttl", Extractor::Ttl, Discretizer::Identity),
            AttributeDef::new("proto", Extractor::Protocol, Discretizer::Identity),
            AttributeDef::new("tos", Extractor::Tos, Discretizer::Identity),
        ];
        AttributeSchema::new(attrs, crate::schema::all_pairs(3), None).unwrap()
    }

    fn trained(packets: &[AttributeVector]) -> ConfidenceProfile {
        let mut p = ConfidenceProfile::new(schema3());
        for a in packets {
            p.observe(a, None).unwrap();
        }
        p.close_window();
        p
    }

    #[test]
    fn observe_one_and_two() {
        let mut p = ConfidenceProfile::new(schema3());
        let a = vec3(64, 6, 0);
        p.observe(&a, Some(0.0)).unwrap();
        let w = p.open_window().counts();
        assert_eq!(w.n_total(), 1);
        assert_eq!(w.single(0, v(64)), 1);
        assert_eq!(w.pair(2, v(6), v(0)), 1);
        p.observe(&a, Some(1.0)).unwrap();
        let w = p.open_window().counts();
        assert_eq!(w.n_total(), 2);
        assert!((0..3).all(|i| w.single(i, a[i]) == 2));
        assert_eq!(w.pair(0, v(64), v(6)), 2);
        assert_eq!(p.open_window().span(), Some((0.0, 1.0)));
        // queries never read the open window
        assert_eq!(p.conf_single(0, v(64)), Err(ProfileError::EmptyProfile));
    }

    #[test]
    fn schema_mismatch() {
        let mut p = ConfidenceProfile::new(schema3());
        let short = AttributeVector(vec![v(1), v(2)]);
        assert_eq!(
            p.observe(&short, None),
            Err(ProfileError::SchemaMismatch { expected: 3, got: 2 })
        );
        p.observe(&vec3(1, 2, 3), None).unwrap();
        p.close_window();
        assert!(p.score(&short).is_err());
    }

    #[test]
    fn close_window_merges_with_decay() {
        let a = vec3(1, 1, 1);
        let mut p = ConfidenceProfile::new(schema3());
        for _ in 0..5 {
            p.observe(&a, None).unwrap();
        }
        p.close_window();
        assert_eq!(p.n_total(), 5.0);
        for _ in 0..5 {
            p.observe(&a, None).unwrap();
        }
        p.close_window();
        assert_eq!(p.n_total(), 10.0);
        assert_eq!(p.windows_closed(), 2);

        let mut d = p.clone().with_decay(0.5).unwrap();
        for _ in 0..4 {
            d.observe(&a, None).unwrap();
        }
        d.close_window();
        assert_eq!(d.n_total(), 9.0);
        assert_eq!(d.cumulative().single(0, v(1)), 9.0);
        assert!(ConfidenceProfile::new(schema3()).with_decay(0.0).is_err());
        assert!(ConfidenceProfile::new(schema3()).with_decay(1.5).is_err());
    }

    #[test]
    fn time_windows_roll_on_boundary() {
        let mut p = ConfidenceProfile::new(schema3())
            .with_policy(WindowPolicy::Time { seconds: 10.0 })
            .unwrap();
        let a = vec3(1, 2, 3);
        for ts in [0.0, 5.0, 9.999] {
            p.observe(&a, Some(ts)).unwrap();
        }
        assert_eq!(p.windows_closed(), 0);
        p.observe(&a, Some(10.0)).unwrap();
        assert_eq!(p.windows_closed(), 1);
        assert_eq!(p.n_total(), 3.0);
        assert_eq!(p.open_window().window_id(), 1);
        p.observe(&a, Some(35.0)).unwrap();
        assert_eq!(p.windows_closed(), 2);
        assert_eq!(p.open_window().window_id(), 3);
    }

    #[test]
    fn packet_windows_roll_on_count() {
        let mut p = ConfidenceProfile::new(schema3())
            .with_policy(WindowPolicy::Packets { count: 3 })
            .unwrap();
        for _ in 0..7 {
            p.observe(&vec3(1, 1, 1), None).unwrap();
        }
        assert_eq!(p.windows_closed(), 2);
        assert_eq!(p.n_total(), 6.0);
        assert_eq!(p.open_window().n_total(), 1);
        assert!(ConfidenceProfile::new(schema3())
            .with_policy(WindowPolicy::Packets { count: 0 })
            .is_err());
        assert!(ConfidenceProfile::new(schema3())
            .with_policy(WindowPolicy::Time { seconds: -1.0 })
            .is_err());
    }

    #[test]
    fn conf_single_examples() {
        let p = trained(&[vec3(64, 6, 0), vec3(64, 6, 0), vec3(64, 17, 0), vec3(128, 6, 0)]);
        assert_eq!(p.conf_single(0, v(64)).unwrap(), 0.75);
        assert_eq!(p.conf_single(0, v(99)).unwrap(), 0.0);
        assert_eq!(p.conf_single(7, v(64)), Err(ProfileError::UnknownAttribute(7)));
        let one = trained(&[vec3(1, 2, 3)]);
        assert_eq!(one.conf_single(2, v(3)).unwrap(), 1.0);
        let empty = ConfidenceProfile::new(schema3());
        assert_eq!(empty.conf_single(0, v(1)), Err(ProfileError::EmptyProfile));
    }

    #[test]
    fn conf_pair_examples() {
        let p = trained(&[vec3(64, 6, 0), vec3(64, 6, 0), vec3(64, 17, 0), vec3(128, 17, 0)]);
        assert_eq!(p.conf_pair(0, (v(64), v(6))).unwrap(), 0.5);
        // 128 and 6 are each seen, never together
        assert_eq!(p.conf_pair(0, (v(128), v(6))).unwrap(), 0.0);
        assert_eq!(p.conf_pair(3, (v(1), v(1))), Err(ProfileError::UnknownPair(3)));
        let empty = ConfidenceProfile::new(schema3());
        assert_eq!(empty.conf_pair(0, (v(1), v(1))), Err(ProfileError::EmptyProfile));
    }

    #[test]
    fn score_examples() {
        let p = trained(&[vec3(64, 6, 0)]);
        assert_eq!(p.score(&vec3(64, 6, 0)).unwrap(), 1.0);
        assert_eq!(p.score(&vec3(1, 2, 3)).unwrap(), 0.0);
        // one of three pairs matches
        assert!((p.score(&vec3(64, 6, 9)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            ConfidenceProfile::new(schema3()).score(&vec3(1, 2, 3)),
            Err(ProfileError::EmptyProfile)
        );
    }

    #[test]
    fn alternate_score_rules() {
        let data = [vec3(64, 6, 0), vec3(64, 17, 0)];
        let mut p = ConfidenceProfile::new(schema3().with_score_rule(ScoreRule::Sum));
        for a in &data {
            p.observe(a, None).unwrap();
        }
        p.close_window();
        // pairs: (64,6)=.5, (64,0)=1, (6,0)=.5
        assert_eq!(p.score(&vec3(64, 6, 0)).unwrap(), 2.0);
        let mut m = ConfidenceProfile::new(schema3().with_score_rule(ScoreRule::Min));
        for a in &data {
            m.observe(a, None).unwrap();
        }
        m.close_window();
        assert_eq!(m.score(&vec3(64, 6, 0)).unwrap(), 0.5);
    }

    #[test]
    fn weighted_mean() {
        let s = AttributeSchema::new(schema3().attributes().to_vec(), vec![(0, 1), (1, 2)], Some(vec![3.0, 1.0]))
            .unwrap();
        let mut p = ConfidenceProfile::new(s);
        p.observe(&vec3(1, 1, 1), None).unwrap();
        p.close_window();
        assert_eq!(p.score(&vec3(1, 1, 2)).unwrap(), 0.75);
    }

    #[test]
    fn top_pairs_sorted() {
        let p = trained(&[vec3(1, 6, 0), vec3(2, 6, 0), vec3(2, 6, 0), vec3(3, 6, 0)]);
        let top = p.top_pairs(0, 2);
        assert_eq!(top, vec![((v(2), v(6)), 0.5), ((v(1), v(6)), 0.25)]);
    }

    #[test]
    fn document_roundtrip_and_errors() {
        let empty = ConfidenceProfile::new(schema3());
        assert_eq!(load_profile(&save_profile(&empty)).unwrap(), empty);

        let p = trained(&[vec3(64, 6, 0), vec3(64, 17, 0)]);
        let text = save_profile(&p);
        assert!(text.contains(r#""n_total":2"#));
        assert_eq!(load_profile(&text).unwrap(), p);

        let future = text.replacen(r#""version":1"#, r#""version":7"#, 1);
        assert_eq!(load_profile(&future), Err(ProfileError::VersionMismatch(7)));
        assert!(matches!(load_profile("{"), Err(ProfileError::CorruptDocument(_))));
        assert!(matches!(load_profile("{}"), Err(ProfileError::CorruptDocument(_))));
        let over = text.replacen(r#"[0,64,2]"#, r#"[0,64,3]"#, 1);
        assert_ne!(over, text);
        assert!(matches!(load_profile(&over), Err(ProfileError::CorruptDocument(_))));
        let dup = text.replacen(r#"[0,64,2]"#, r#"[0,64,2],[0,64,1]"#, 1);
        assert!(matches!(load_profile(&dup), Err(ProfileError::CorruptDocument(_))));
        let bad_idx = text.replacen(r#"[0,64,2]"#, r#"[9,64,2]"#, 1);
        assert!(matches!(load_profile(&bad_idx), Err(ProfileError::CorruptDocument(_))));
    }

    #[test]
    fn decayed_counts_serialize_as_floats() {
        let mut p = ConfidenceProfile::new(schema3()).with_decay(0.5).unwrap();
        for _ in 0..3 {
            p.observe(&vec3(1, 1, 1), None).unwrap();
        }
        p.close_window();
        p.close_window();
        assert_eq!(p.n_total(), 1.5);
        let back = load_profile(&save_profile(&p)).unwrap();
        assert_eq!(back, p);
    }

    fn small_vec() -> impl Strategy<Value = AttributeVector> {
        (0u32..4, 0u32..3, 0u32..2).prop_map(|(a, b, c)| vec3(a, b, c))
    }

    proptest! {
        #[test]
        fn normalization_and_cooccurrence(data in proptest::collection::vec(small_vec(), 1..60)) {
            let p = trained(&data);
            for i in 0..3 {
                let total: f64 = p.cumulative().singles(i).keys()
                    .map(|val| p.conf_single(i, *val).unwrap()).sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
            }
            for (k, &(r, s)) in p.schema().pairs().iter().enumerate() {
                let total: f64 = p.cumulative().pairs(k).keys()
                    .map(|xy| p.conf_pair(k, *xy).unwrap()).sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
                for x in 0..4 {
                    for y in 0..4 {
                        let c = p.conf_pair(k, (v(x), v(y))).unwrap();
                        let m = p.conf_single(r, v(x)).unwrap().min(p.conf_single(s, v(y)).unwrap());
                        prop_assert!(c <= m);
                    }
                }
            }
        }

        #[test]
        fn permutation_invariance(mut data in proptest::collection::vec(small_vec(), 1..40), seed: u64) {
            let a = trained(&data);
            let n = data.len();
            for i in 0..n {
                let j = (seed.wrapping_mul(i as u64 + 7) % n as u64) as usize;
                data.swap(i, j);
            }
            prop_assert_eq!(a, trained(&data));
        }

        #[test]
        fn score_bounded(data in proptest::collection::vec(small_vec(), 1..40), q in small_vec()) {
            let p = trained(&data);
            let s = p.score(&q).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn document_roundtrip(data in proptest::collection::vec(small_vec(), 0..40)) {
            let mut p = ConfidenceProfile::new(schema3());
            for a in &data { p.observe(a, None).unwrap(); }
            p.flush();
            let text = save_profile(&p);
            let back = load_profile(&text).unwrap();
            prop_assert_eq!(save_profile(&back), text);
            prop_assert_eq!(back, p);
        }
    }
}
