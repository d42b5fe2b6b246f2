//! Per-packet decision records and the evaluation report computed from them.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use serde::Serialize;
use thiserror::Error;

use crate::filter::{FilterDecision, Period, Verdict};
use crate::trace::Label;

pub const DECISIONS_CSV_HEADER: [&str; 8] = [
    "packet_index",
    "ts",
    "period",
    "score",
    "threshold",
    "verdict",
    "rewritten",
    "label",
];

pub const REPORT_VERSION: u32 = 1;
pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("decisions line {line}: {msg}")]
    Malformed { line: u64, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRow {
    pub packet_index: u64,
    pub ts: f64,
    pub period: Period,
    pub score: f64,
    pub threshold: Option<f64>,
    pub verdict: Verdict,
    pub rewritten: bool,
    pub label: Label,
}

impl DecisionRow {
    pub fn new(packet_index: u64, ts: f64, d: &FilterDecision, label: Label) -> Self {
        Self {
            packet_index,
            ts,
            period: d.period,
            score: d.score,
            threshold: d.threshold_used,
            verdict: d.verdict,
            rewritten: d.rewritten,
            label,
        }
    }
}

pub fn write_decisions<W: Write>(mut w: W, rows: &[DecisionRow]) -> io::Result<()> {
    writeln!(w, "{}", DECISIONS_CSV_HEADER.join(","))?;
    for r in rows {
        let threshold = r.threshold.map(|t| format!("{t:.9}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{:.9},{},{},{},{}",
            r.packet_index,
            r.ts,
            r.period,
            r.score,
            threshold,
            r.verdict.as_str(),
            r.rewritten,
            r.label.as_str()
        )?;
    }
    w.flush()
}

pub fn read_decisions<R: Read>(reader: R) -> Result<Vec<DecisionRow>, ReportError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n as u64 + 1;
        let rec = rec.map_err(|e| ReportError::Malformed { line, msg: e.to_string() })?;
        if n == 0 {
            if rec.iter().ne(DECISIONS_CSV_HEADER.iter().copied()) {
                return Err(ReportError::Malformed {
                    line,
                    msg: format!("header must be {}", DECISIONS_CSV_HEADER.join(",")),
                });
            }
            continue;
        }
        let row = (|| -> Result<DecisionRow, String> {
            if rec.len() != DECISIONS_CSV_HEADER.len() {
                return Err(format!("expected 8 columns, got {}", rec.len()));
            }
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| format!("bad {what} {s:?}"));
            Ok(DecisionRow {
                packet_index: rec[0].parse().map_err(|_| format!("bad index {:?}", &rec[0]))?,
                ts: num(&rec[1], "ts")?,
                period: rec[2].parse()?,
                score: num(&rec[3], "score")?,
                threshold: if rec[4].is_empty() { None } else { Some(num(&rec[4], "threshold")?) },
                verdict: rec[5].parse()?,
                rewritten: rec[6].parse().map_err(|_| format!("bad rewritten {:?}", &rec[6]))?,
                label: rec[7].parse()?,
            })
        })()
        .map_err(|msg| ReportError::Malformed { line, msg })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ReportError::Malformed { line: 1, msg: "no decision rows".into() });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct VerdictCounts {
    pub accept: u64,
    pub discard: u64,
}

impl VerdictCounts {
    pub fn total(&self) -> u64 {
        self.accept + self.discard
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CellCounts {
    pub legit: VerdictCounts,
    pub attack: VerdictCounts,
    pub unknown: VerdictCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScoreHistograms {
    pub bins: usize,
    pub legit: Vec<u64>,
    pub attack: Vec<u64>,
    pub unknown: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub total: u64,
    pub counts: CellCounts,
    /// Attack packets accepted / attack packets.
    pub fpr: Option<f64>,
    /// Legit packets discarded / legit packets.
    pub fnr: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub score_histogram: ScoreHistograms,
    /// `(ts, threshold)` at every change of the threshold in effect.
    pub threshold_trace: Vec<(f64, Option<f64>)>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Bin `i` covers `[i/64, (i+1)/64)`; a score of exactly 1 lands in the
/// last bin.
pub fn histogram_bin(score: f64) -> usize {
    ((score.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

impl EvalReport {
    pub fn from_rows(rows: &[DecisionRow]) -> Self {
        let mut counts = CellCounts::default();
        let mut hist: BTreeMap<Label, Vec<u64>> = [Label::Legit, Label::Attack, Label::Unknown]
            .into_iter()
            .map(|l| (l, vec![0; HISTOGRAM_BINS]))
            .collect();
        let mut threshold_trace = Vec::new();
        let mut last: Option<Option<f64>> = None;
        for r in rows {
            let cell = match r.label {
                Label::Legit => &mut counts.legit,
                Label::Attack => &mut counts.attack,
                Label::Unknown => &mut counts.unknown,
            };
            match r.verdict {
                Verdict::Accept => cell.accept += 1,
                Verdict::Discard => cell.discard += 1,
            }
            hist.get_mut(&r.label).unwrap()[histogram_bin(r.score)] += 1;
            if last != Some(r.threshold) {
                threshold_trace.push((r.ts, r.threshold));
                last = Some(r.threshold);
            }
        }
        let discarded = counts.legit.discard + counts.attack.discard + counts.unknown.discard;
        let mut take = |l| hist.remove(&l).unwrap();
        let score_histogram = ScoreHistograms {
            bins: HISTOGRAM_BINS,
            legit: take(Label::Legit),
            attack: take(Label::Attack),
            unknown: take(Label::Unknown),
        };
        EvalReport {
            report_version: REPORT_VERSION,
            total: rows.len() as u64,
            fpr: ratio(counts.attack.accept, counts.attack.total()),
            fnr: ratio(counts.legit.discard, counts.legit.total()),
            precision: ratio(counts.attack.discard, discarded),
            recall: ratio(counts.attack.discard, counts.attack.total()),
            counts,
            score_histogram,
            threshold_trace,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plot-ready histogram table: one row per bin.
    pub fn write_histogram_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "bin,lo,hi,legit,attack,unknown")?;
        let h = &self.score_histogram;
        for i in 0..h.bins {
            let lo = i as f64 / h.bins as f64;
            let hi = (i + 1) as f64 / h.bins as f64;
            writeln!(
                w,
                "{i},{lo:.6},{hi:.6},{},{},{}",
                h.legit[i], h.attack[i], h.unknown[i]
            )?;
        }
        w.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64, verdict: Verdict, label: Label, score: f64) -> DecisionRow {
        DecisionRow {
            packet_index: i,
            ts: i as f64,
            period: Period::Attack,
            score,
            threshold: Some(0.3),
            verdict,
            rewritten: false,
            label,
        }
    }

    #[test]
    fn perfect_filter() {
        let rows = vec![
            row(0, Verdict::Accept, Label::Legit, 0.9),
            row(1, Verdict::Discard, Label::Attack, 0.0),
        ];
        let r = EvalReport::from_rows(&rows);
        assert_eq!(r.fpr, Some(0.0));
        assert_eq!(r.fnr, Some(0.0));
        assert_eq!(r.precision, Some(1.0));
        assert_eq!(r.recall, Some(1.0));
    }

    #[test]
    fn no_attack_rows_gives_null_fpr() {
        let r = EvalReport::from_rows(&[row(0, Verdict::Accept, Label::Legit, 0.5)]);
        assert_eq!(r.fpr, None);
        assert_eq!(r.recall, None);
        assert_eq!(r.precision, None);
        assert!(r.to_json().contains("\"fpr\": null"));
    }

    #[test]
    fn six_row_example() {
        use Label::*;
        use Verdict::*;
        let rows = vec![
            row(0, Accept, Legit, 0.9),
            row(1, Accept, Legit, 0.8),
            row(2, Discard, Legit, 0.1),
            row(3, Discard, Attack, 0.0),
            row(4, Discard, Attack, 0.0),
            row(5, Accept, Attack, 0.5),
        ];
        let r = EvalReport::from_rows(&rows);
        assert_eq!(r.fnr, Some(1.0 / 3.0));
        assert_eq!(r.fpr, Some(1.0 / 3.0));
        assert_eq!(r.precision, Some(2.0 / 3.0));
        assert_eq!(r.recall, Some(2.0 / 3.0));
        assert_eq!(r.total, 6);
        let c = &r.counts;
        assert_eq!(c.legit.total() + c.attack.total() + c.unknown.total(), 6);
        // fpr * attack_total + attack discarded = attack_total
        let at = c.attack.total() as f64;
        assert_eq!(r.fpr.unwrap() * at + c.attack.discard as f64, at);
        assert_eq!(r.score_histogram.attack[0], 2);
        assert_eq!(r.score_histogram.legit[histogram_bin(0.9)], 1);
        assert_eq!(r.threshold_trace, vec![(0.0, Some(0.3))]);
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram_bin(0.0), 0);
        assert_eq!(histogram_bin(1.0), 63);
        assert_eq!(histogram_bin(0.5), 32);
        assert_eq!(histogram_bin(1.0 / 64.0 - 1e-12), 0);
    }

    #[test]
    fn decisions_roundtrip() {
        let mut rows = vec![row(0, Verdict::Accept, Label::Legit, 0.123456789)];
        rows.push(DecisionRow {
            period: Period::NonAttack,
            threshold: None,
            rewritten: true,
            ..row(1, Verdict::Accept, Label::Unknown, 1.0)
        });
        let mut out = Vec::new();
        write_decisions(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("\n1,1,nonattack,1.000000000,,accept,true,unknown\n"));
        let back = read_decisions(text.as_bytes()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn malformed_decisions() {
        assert!(read_decisions(&b"packet_index,ts\n"[..]).is_err());
        let text = format!("{}\n0,0,attack,x,,accept,false,legit\n", DECISIONS_CSV_HEADER.join(","));
        assert!(matches!(read_decisions(text.as_bytes()), Err(ReportError::Malformed { line: 2, .. })));
        let empty = format!("{}\n", DECISIONS_CSV_HEADER.join(","));
        assert!(read_decisions(empty.as_bytes()).is_err());
    }

    #[test]
    fn histogram_csv_has_all_bins() {
        let r = EvalReport::from_rows(&[row(0, Verdict::Accept, Label::Legit, 0.5)]);
        let mut out = Vec::new();
        r.write_histogram_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 65);
        assert!(text.contains("\n32,0.500000,0.515625,1,0,0\n"));
    }
}
