//! Detection scoring: wakeup rate over positive references, false alarms per
//! 24 hours over keyword-free audio, and operating-point sweeps that
//! re-threshold a cached candidate set instead of re-decoding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::decoder::DetectionEvent;
use crate::error::{Error, Result};

/// One required detection: the utterance it lives in, the keyword expected,
/// and optionally the frame span `[start, end)` it must overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveRef {
    pub utt_id: String,
    pub keyword: String,
    pub span: Option<(u64, u64)>,
}

/// Ground truth for a test set: the positive occurrences plus the total
/// hours of keyword-free audio behind the remaining utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    positives: Vec<PositiveRef>,
    negative_hours: f64,
}

impl ReferenceSet {
    pub fn new(positives: Vec<PositiveRef>, negative_hours: f64) -> Result<Self> {
        if !negative_hours.is_finite() || negative_hours < 0.0 {
            return Err(Error::Config(format!(
                "negative_hours must be a finite non-negative number, got {negative_hours}"
            )));
        }
        for p in &positives {
            if let Some((start, end)) = p.span {
                if start >= end {
                    return Err(Error::Config(format!(
                        "reference span for {} is empty: [{start}, {end})",
                        p.utt_id
                    )));
                }
            }
        }
        Ok(ReferenceSet {
            positives,
            negative_hours,
        })
    }

    pub fn positives(&self) -> &[PositiveRef] {
        &self.positives
    }

    pub fn negative_hours(&self) -> f64 {
        self.negative_hours
    }

    pub fn is_positive_utterance(&self, utt_id: &str) -> bool {
        self.positives.iter().any(|p| p.utt_id == utt_id)
    }

    /// Parse a reference manifest.  Lines are either
    /// `utt_id POS keyword [start end]` or `NEG hours`; multiple NEG lines
    /// sum.  `#` starts a comment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut positives = Vec::new();
        let mut negative_hours = 0.0;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ln = i + 1;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks[0] == "NEG" {
                if toks.len() != 2 {
                    return Err(Error::format(
                        path,
                        format!("line {ln}: NEG line needs exactly one hours value"),
                    ));
                }
                let hours: f64 = toks[1].parse().map_err(|_| {
                    Error::format(path, format!("line {ln}: bad hours value {:?}", toks[1]))
                })?;
                if !hours.is_finite() || hours < 0.0 {
                    return Err(Error::format(
                        path,
                        format!("line {ln}: hours must be finite and non-negative"),
                    ));
                }
                negative_hours += hours;
                continue;
            }
            if toks.len() != 3 && toks.len() != 5 {
                return Err(Error::format(
                    path,
                    format!(
                        "line {ln}: expected `utt POS keyword [start end]` or `NEG hours`"
                    ),
                ));
            }
            if toks[1] != "POS" {
                return Err(Error::format(
                    path,
                    format!("line {ln}: expected POS or NEG, got {:?}", toks[1]),
                ));
            }
            let span = if toks.len() == 5 {
                let start: u64 = toks[3].parse().map_err(|_| {
                    Error::format(path, format!("line {ln}: bad start frame {:?}", toks[3]))
                })?;
                let end: u64 = toks[4].parse().map_err(|_| {
                    Error::format(path, format!("line {ln}: bad end frame {:?}", toks[4]))
                })?;
                Some((start, end))
            } else {
                None
            };
            positives.push(PositiveRef {
                utt_id: toks[0].to_string(),
                keyword: toks[2].to_string(),
                span,
            });
        }
        ReferenceSet::new(positives, negative_hours)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for p in &self.positives {
            match p.span {
                Some((start, end)) => out.push_str(&format!(
                    "{} POS {} {start} {end}\n",
                    p.utt_id, p.keyword
                )),
                None => out.push_str(&format!("{} POS {}\n", p.utt_id, p.keyword)),
            }
        }
        out.push_str(&format!("NEG {}\n", self.negative_hours));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Decoded events per utterance.  An utterance that was decoded but produced
/// no events is recorded with an empty list, which is distinct from an
/// utterance that was never decoded at all.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultSet {
    events: BTreeMap<String, Vec<DetectionEvent>>,
}

impl ResultSet {
    pub fn new() -> Self {
        ResultSet::default()
    }

    /// Record an utterance's events (an empty list marks it as decoded).
    /// Repeated calls for the same utterance append.
    pub fn record(&mut self, utt_id: &str, events: Vec<DetectionEvent>) {
        self.events.entry(utt_id.to_string()).or_default().extend(events);
    }

    pub fn contains(&self, utt_id: &str) -> bool {
        self.events.contains_key(utt_id)
    }

    pub fn events_for(&self, utt_id: &str) -> Option<&[DetectionEvent]> {
        self.events.get(utt_id).map(|v| v.as_slice())
    }

    pub fn utterances(&self) -> impl Iterator<Item = &str> {
        self.events.keys().map(|s| s.as_str())
    }

    pub fn num_utterances(&self) -> usize {
        self.events.len()
    }

    pub fn num_events(&self) -> usize {
        self.events.values().map(Vec::len).sum()
    }

    /// The same utterances with only the events whose confidence is at or
    /// above `threshold` — the re-thresholding step of a sweep.
    pub fn at_threshold(&self, threshold: f64) -> ResultSet {
        let events = self
            .events
            .iter()
            .map(|(utt, evs)| {
                let kept = evs
                    .iter()
                    .filter(|e| e.confidence >= threshold)
                    .cloned()
                    .collect();
                (utt.clone(), kept)
            })
            .collect();
        ResultSet { events }
    }

    /// Every distinct event confidence, ascending — the thresholds at which
    /// the operating point can actually change.
    pub fn candidate_thresholds(&self) -> Vec<f64> {
        let mut confs: Vec<f64> = self
            .events
            .values()
            .flatten()
            .map(|e| e.confidence)
            .collect();
        confs.sort_by(f64::total_cmp);
        confs.dedup();
        confs
    }

    /// Parse a results file.  Lines are `utt_id keyword start end confidence`
    /// (one per event) or `utt_id -` (decoded, no events).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut set = ResultSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ln = i + 1;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() == 2 && toks[1] == "-" {
                set.record(toks[0], Vec::new());
                continue;
            }
            if toks.len() != 5 {
                return Err(Error::format(
                    path,
                    format!(
                        "line {ln}: expected `utt keyword start end confidence` or `utt -`"
                    ),
                ));
            }
            let start: u64 = toks[2].parse().map_err(|_| {
                Error::format(path, format!("line {ln}: bad start frame {:?}", toks[2]))
            })?;
            let end: u64 = toks[3].parse().map_err(|_| {
                Error::format(path, format!("line {ln}: bad end frame {:?}", toks[3]))
            })?;
            let confidence: f64 = toks[4].parse().map_err(|_| {
                Error::format(path, format!("line {ln}: bad confidence {:?}", toks[4]))
            })?;
            set.record(
                toks[0],
                vec![DetectionEvent {
                    keyword: toks[1].to_string(),
                    start_frame: start,
                    end_frame: end,
                    confidence,
                }],
            );
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (utt, evs) in &self.events {
            if evs.is_empty() {
                out.push_str(&format!("{utt} -\n"));
            }
            for e in evs {
                out.push_str(&format!(
                    "{utt} {} {} {} {}\n",
                    e.keyword, e.start_frame, e.end_frame, e.confidence
                ));
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// One row of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub wakeup_rate: f64,
    pub false_alarms_per_24h: f64,
}

fn spans_overlap(a: (u64, u64), b: (u64, u64)) -> bool {
    // Half-open intervals share at least one frame.
    a.0 < b.1 && b.0 < a.1
}

fn event_matches(event: &DetectionEvent, reference: &PositiveRef) -> bool {
    if event.keyword != reference.keyword {
        return false;
    }
    match reference.span {
        Some(span) => spans_overlap((event.start_frame, event.end_frame), span),
        None => true,
    }
}

/// Fraction of positive references with at least one matching event: same
/// keyword, and overlapping the reference span by ≥ 1 frame when one is
/// given.  Every referenced utterance must appear in `results`, even with an
/// empty event list.
pub fn wakeup_rate(results: &ResultSet, refs: &ReferenceSet) -> Result<f64> {
    if refs.positives.is_empty() {
        return Err(Error::Eval(
            "wakeup rate needs at least one positive reference".into(),
        ));
    }
    let mut matched = 0usize;
    for reference in &refs.positives {
        let events = results.events_for(&reference.utt_id).ok_or_else(|| {
            Error::Eval(format!(
                "utterance {} is referenced but missing from results",
                reference.utt_id
            ))
        })?;
        if events.iter().any(|e| event_matches(e, reference)) {
            matched += 1;
        }
    }
    Ok(matched as f64 / refs.positives.len() as f64)
}

/// Events on utterances that no positive reference names.  Extra events on
/// positive utterances are not counted: false alarms measure keyword-free
/// audio only.
pub fn false_alarm_count(results: &ResultSet, refs: &ReferenceSet) -> usize {
    results
        .events
        .iter()
        .filter(|(utt, _)| !refs.is_positive_utterance(utt))
        .map(|(_, evs)| evs.len())
        .sum()
}

/// Scale an alarm count by exposure: `count × 24 / negative_hours`.
pub fn false_alarm_rate(count: usize, negative_hours: f64) -> Result<f64> {
    if !(negative_hours > 0.0) {
        return Err(Error::Eval(format!(
            "false alarm rate needs positive negative_hours, got {negative_hours}"
        )));
    }
    Ok(count as f64 * 24.0 / negative_hours)
}

/// The operating point of a candidate cache at one threshold.
pub fn operating_point(
    candidates: &ResultSet,
    refs: &ReferenceSet,
    threshold: f64,
) -> Result<OperatingPoint> {
    let filtered = candidates.at_threshold(threshold);
    let wakeup = wakeup_rate(&filtered, refs)?;
    let fa = false_alarm_rate(false_alarm_count(&filtered, refs), refs.negative_hours)?;
    Ok(OperatingPoint {
        threshold,
        wakeup_rate: wakeup,
        false_alarms_per_24h: fa,
    })
}

/// Evaluate every threshold against the cached candidates and pick the best
/// point: maximum wakeup among points with false alarms at or below
/// `fa_target`, ties broken toward the lowest threshold.  Returns all points
/// plus the winner (absent when nothing meets the constraint).
pub fn sweep(
    candidates: &ResultSet,
    refs: &ReferenceSet,
    thresholds: &[f64],
    fa_target: f64,
) -> Result<(Vec<OperatingPoint>, Option<OperatingPoint>)> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(
            "sweep thresholds must be sorted ascending".into(),
        ));
    }
    if !fa_target.is_finite() || fa_target < 0.0 {
        return Err(Error::Config(format!(
            "fa_target must be a finite non-negative number, got {fa_target}"
        )));
    }
    let mut points = Vec::with_capacity(thresholds.len());
    let mut best: Option<OperatingPoint> = None;
    for &threshold in thresholds {
        let point = operating_point(candidates, refs, threshold)?;
        if point.false_alarms_per_24h <= fa_target {
            let improves = match &best {
                Some(b) => point.wakeup_rate > b.wakeup_rate,
                None => true,
            };
            if improves {
                best = Some(point);
            }
        }
        points.push(point);
    }
    Ok((points, best))
}
