//! Empirical score calibration.
//!
//! Raw tail scores are mapped to probabilities through boundary tables:
//! equal-width histograms over the dev-set score range whose cumulative
//! masses are linearly interpolated.  Each state keeps one table estimated
//! from positive frames and one from negative frames; the two probabilities
//! are fused as a scale-weighted geometric mean.  Scales can be tuned per
//! state by maximizing weighted Bernoulli likelihood over a small grid.
//!
//! All table math runs in f64 so the construction identities hold to 1e-12
//! even for large sample counts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnet::{tail_forward, ModelBundle};
use crate::training::Utterance;

/// Fused confidences are clamped into `[CONFIDENCE_CLAMP, 1 - CONFIDENCE_CLAMP]`
/// before any logarithm (decoder scoring, scale adaptation).
pub const CONFIDENCE_CLAMP: f64 = 1e-6;

/// Half-width applied to a degenerate (single-valued) score range before
/// segmentation.
pub const DEGENERATE_WIDENING: f64 = 1e-6;

/// Default grid axis for scale adaptation; pairs are its cartesian square.
pub const DEFAULT_SCALE_GRID: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

/// Empirical cumulative table: `boundaries` are N+1 equal-width segment
/// edges, `probs[n]` is the fraction of mass strictly below `boundaries[n]`
/// (pinned to 0 and 1 at the ends), `counts[n]` the samples in segment n.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTable {
    boundaries: Vec<f64>,
    probs: Vec<f64>,
    counts: Vec<u64>,
}

impl BoundaryTable {
    /// Rebuild a table from stored parts, enforcing every structural
    /// invariant (used by file loading and tests).
    pub fn from_parts(boundaries: Vec<f64>, probs: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        let n = counts.len();
        if n == 0 {
            return Err(Error::Config("boundary table needs at least one segment".into()));
        }
        if boundaries.len() != n + 1 || probs.len() != n + 1 {
            return Err(Error::Config(format!(
                "boundary table arity mismatch: {} segments, {} boundaries, {} probs",
                n,
                boundaries.len(),
                probs.len()
            )));
        }
        if !boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("boundaries must be strictly increasing".into()));
        }
        if probs[0] != 0.0 || probs[n] != 1.0 {
            return Err(Error::Config("probs must start at 0 and end at 1".into()));
        }
        if !probs.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::Config("probs must be non-decreasing".into()));
        }
        Ok(BoundaryTable {
            boundaries,
            probs,
            counts,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.counts.len()
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Cumulative probabilities from segment counts via the top-down recursion
/// `P_N = 1`, `P_n = P_{n+1} - C_{n+1} / C_total`, with the endpoints pinned.
/// Equivalent to cumulative counts from below up to rounding.
pub fn probs_from_counts(counts: &[u64]) -> Result<Vec<f64>> {
    let n = counts.len();
    let total: u64 = counts.iter().sum();
    if n == 0 || total == 0 {
        return Err(Error::Config("segment counts must be non-empty with positive total".into()));
    }
    let total = total as f64;
    let mut probs = vec![0.0; n + 1];
    probs[n] = 1.0;
    for i in (1..n).rev() {
        // Rounding can push a mathematically tiny value below zero; pin it.
        probs[i] = (probs[i + 1] - counts[i] as f64 / total).max(0.0);
    }
    probs[0] = 0.0;
    Ok(probs)
}

/// Estimate a table over the sample range.  All-equal scores are an error so
/// the caller can decide to widen (see `estimate_table_widened`).
pub fn estimate_table(scores: &[f64], num_segments: usize) -> Result<BoundaryTable> {
    if scores.is_empty() {
        return Err(Error::Config("cannot estimate a table from zero scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("scores must be finite".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::DegenerateRange {
            value: lo,
            count: scores.len(),
        });
    }
    estimate_table_in_range(scores, num_segments, lo, hi)
}

/// `estimate_table` that retries a degenerate range after widening it by
/// ±`DEGENERATE_WIDENING`.
pub fn estimate_table_widened(scores: &[f64], num_segments: usize) -> Result<BoundaryTable> {
    match estimate_table(scores, num_segments) {
        Err(Error::DegenerateRange { value, .. }) => estimate_table_in_range(
            scores,
            num_segments,
            value - DEGENERATE_WIDENING,
            value + DEGENERATE_WIDENING,
        ),
        other => other,
    }
}

/// Estimate over an explicit range; scores outside it are pooled into the
/// end segments.
pub fn estimate_table_in_range(
    scores: &[f64],
    num_segments: usize,
    lo: f64,
    hi: f64,
) -> Result<BoundaryTable> {
    if num_segments == 0 {
        return Err(Error::Config("num_segments must be at least 1".into()));
    }
    if scores.is_empty() {
        return Err(Error::Config("cannot estimate a table from zero scores".into()));
    }
    if !(lo < hi) {
        return Err(Error::Config(format!("invalid estimation range [{lo}, {hi}]")));
    }
    let n = num_segments;
    let width = (hi - lo) / n as f64;
    let boundaries: Vec<f64> = (0..=n).map(|i| lo + i as f64 * width).collect();
    if !boundaries.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::DegenerateRange {
            value: lo,
            count: scores.len(),
        });
    }
    let mut counts = vec![0u64; n];
    for &s in scores {
        let seg = (((s - lo) / (hi - lo)) * n as f64).floor() as i64;
        counts[seg.clamp(0, n as i64 - 1) as usize] += 1;
    }
    let probs = probs_from_counts(&counts)?;
    BoundaryTable::from_parts(boundaries, probs, counts)
}

/// Fraction of table mass below `x`: 0 left of the range, 1 right of it,
/// linear inside each segment.  Exact at every boundary.
pub fn positive_prob(x: f64, table: &BoundaryTable) -> f64 {
    let b = &table.boundaries;
    let p = &table.probs;
    let n = table.num_segments();
    if x <= b[0] {
        return 0.0;
    }
    if x >= b[n] {
        return 1.0;
    }
    // Largest segment index whose left edge is at or below x.
    let idx = b.partition_point(|&edge| edge <= x) - 1;
    if x == b[idx] {
        return p[idx];
    }
    let t = p[idx] + (x - b[idx]) * (p[idx + 1] - p[idx]) / (b[idx + 1] - b[idx]);
    // Interpolation rounding must not break monotonicity across the edge.
    t.clamp(p[idx], p[idx + 1])
}

/// Fraction of table mass at or above `x`: the complement of the ascending
/// interpolation, falling from 1 at the left edge to 0 at the right edge.
pub fn negative_prob(x: f64, table: &BoundaryTable) -> f64 {
    1.0 - positive_prob(x, table)
}

/// How the negative-table probability enters the fusion.
///
/// `Complement` treats a high mass-at-or-above value as evidence against the
/// state and fuses `1 - q`; `Literal` fuses `q` as printed in the source
/// formulation.  `Complement` is the default: it makes the fused confidence
/// rise with the raw score on both tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionOrientation {
    #[default]
    Complement,
    Literal,
}

impl FusionOrientation {
    pub fn name(self) -> &'static str {
        match self {
            FusionOrientation::Complement => "complement",
            FusionOrientation::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "complement" => Some(FusionOrientation::Complement),
            "literal" => Some(FusionOrientation::Literal),
            _ => None,
        }
    }
}

/// Scale-weighted geometric fusion of the positive-table probability and the
/// negative-table probability:
/// `(p^Sp * g^Sn)^(1/(Sp+Sn))` with `g` chosen by the orientation.
/// Computed in log space; degenerate exponents short-circuit exactly.
pub fn fuse(
    p_pos: f64,
    q_neg: f64,
    scale_pos: f64,
    scale_neg: f64,
    orientation: FusionOrientation,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_pos) || !(0.0..=1.0).contains(&q_neg) {
        return Err(Error::Config(format!(
            "fusion inputs must lie in [0,1]: p={p_pos}, q={q_neg}"
        )));
    }
    if scale_pos < 0.0 || scale_neg < 0.0 || (scale_pos == 0.0 && scale_neg == 0.0) {
        return Err(Error::Config(format!(
            "scales must be non-negative and not both zero: ({scale_pos}, {scale_neg})"
        )));
    }
    let g = match orientation {
        FusionOrientation::Complement => 1.0 - q_neg,
        FusionOrientation::Literal => q_neg,
    };
    if scale_neg == 0.0 {
        return Ok(p_pos);
    }
    if scale_pos == 0.0 {
        return Ok(g);
    }
    if p_pos == 0.0 || g == 0.0 {
        return Ok(0.0);
    }
    let log = (scale_pos * p_pos.ln() + scale_neg * g.ln()) / (scale_pos + scale_neg);
    Ok(log.exp().clamp(0.0, 1.0))
}

/// Calibration data for one state: its two tables and fusion scales.
#[derive(Debug, Clone, PartialEq)]
pub struct StateCalibration {
    pub pos: BoundaryTable,
    pub neg: BoundaryTable,
    pub scale_pos: f64,
    pub scale_neg: f64,
}

impl StateCalibration {
    /// Fused confidence for one raw tail score.
    pub fn confidence(&self, raw: f64, orientation: FusionOrientation) -> Result<f64> {
        fuse(
            positive_prob(raw, &self.pos),
            negative_prob(raw, &self.neg),
            self.scale_pos,
            self.scale_neg,
            orientation,
        )
    }
}

/// Calibration for every state of a bundle (ids dense from 0).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub states: Vec<StateCalibration>,
    pub orientation: FusionOrientation,
}

impl CalibrationSet {
    pub fn num_states(&self) -> u32 {
        self.states.len() as u32
    }

    pub fn state(&self, id: u32) -> Result<&StateCalibration> {
        self.states
            .get(id as usize)
            .ok_or(Error::UnknownState { state: id })
    }
}

/// Map raw tail scores to fused confidences, state by state.
pub fn calibrate_frame(
    raw: &BTreeMap<u32, f32>,
    calib: &CalibrationSet,
) -> Result<BTreeMap<u32, f64>> {
    raw.iter()
        .map(|(&state, &score)| {
            let sc = calib.state(state)?;
            Ok((state, sc.confidence(score as f64, calib.orientation)?))
        })
        .collect()
}

/// Weighted Bernoulli log-likelihood of dev samples under one scale pair.
/// Positives weigh 0.99, negatives 0.01; confidences are clamped before the
/// log so empty-table corners stay finite.
pub fn scale_log_likelihood(
    dev: &[(f64, bool)],
    scale_pos: f64,
    scale_neg: f64,
    state: &StateCalibration,
    orientation: FusionOrientation,
) -> Result<f64> {
    let mut ll = 0.0;
    for &(raw, is_pos) in dev {
        let p = fuse(
            positive_prob(raw, &state.pos),
            negative_prob(raw, &state.neg),
            scale_pos,
            scale_neg,
            orientation,
        )?
        .clamp(CONFIDENCE_CLAMP, 1.0 - CONFIDENCE_CLAMP);
        ll += if is_pos { 0.99 * p.ln() } else { 0.01 * (1.0 - p).ln() };
    }
    Ok(ll)
}

/// Pick the scale pair with the highest weighted dev log-likelihood.  Ties
/// go to the lexicographically smallest pair.
pub fn adapt_scales(
    dev: &[(f64, bool)],
    grid: &[(f64, f64)],
    state: &StateCalibration,
    orientation: FusionOrientation,
) -> Result<(f64, f64)> {
    if dev.is_empty() {
        return Err(Error::Config("scale adaptation needs dev samples".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("scale adaptation needs a non-empty grid".into()));
    }
    let mut pairs = grid.to_vec();
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<((f64, f64), f64)> = None;
    for &(sp, sn) in &pairs {
        let ll = scale_log_likelihood(dev, sp, sn, state, orientation)?;
        let better = match &best {
            None => true,
            Some((_, best_ll)) => ll > *best_ll,
        };
        if better {
            best = Some(((sp, sn), ll));
        }
    }
    Ok(best.unwrap().0)
}

/// Cartesian square of a grid axis in lexicographic order.
pub fn grid_pairs(axis: &[f64]) -> Vec<(f64, f64)> {
    let mut pairs = Vec::with_capacity(axis.len() * axis.len());
    for &a in axis {
        for &b in axis {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Raw tail scores of dev utterances, split by alignment: `scores[s]` holds
/// (positives, negatives) for state `s`.  Embeddings run with streaming
/// context, exactly as the decoder will see them.
pub fn score_utterances(bundle: &ModelBundle, utts: &[Utterance]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut embedded: Vec<(Vec<Vec<f32>>, &[u32])> = Vec::with_capacity(utts.len());
    for utt in utts {
        let emb = crate::nnet::embed_forward(&utt.frames, &bundle.embedding)?;
        embedded.push((emb, &utt.alignment));
    }
    let states: Vec<u32> = (0..bundle.num_states()).collect();
    crate::parallel::try_map_slice(&states, |&s| {
        let tail = bundle.tail(s)?;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (emb, alignment) in &embedded {
            for (frame_emb, &st) in emb.iter().zip(alignment.iter()) {
                let score = tail_forward(frame_emb, tail)? as f64;
                if st == s {
                    pos.push(score);
                } else {
                    neg.push(score);
                }
            }
        }
        Ok((pos, neg))
    })
}

/// Estimate per-state tables from dev utterances with constant scales.
pub fn estimate_calibration_set(
    bundle: &ModelBundle,
    utts: &[Utterance],
    num_segments: usize,
    scale_pos: f64,
    scale_neg: f64,
    orientation: FusionOrientation,
) -> Result<CalibrationSet> {
    let scored = score_utterances(bundle, utts)?;
    let states = scored
        .iter()
        .enumerate()
        .map(|(s, (pos, neg))| {
            if pos.is_empty() || neg.is_empty() {
                return Err(Error::EmptyClass { state: s as u32 });
            }
            Ok(StateCalibration {
                pos: estimate_table_widened(pos, num_segments)?,
                neg: estimate_table_widened(neg, num_segments)?,
                scale_pos,
                scale_neg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationSet {
        states,
        orientation,
    })
}

/// Re-fit every state's scales on dev utterances over `grid_pairs(axis)`.
pub fn adapt_calibration_scales(
    calib: &mut CalibrationSet,
    bundle: &ModelBundle,
    utts: &[Utterance],
    axis: &[f64],
) -> Result<()> {
    let scored = score_utterances(bundle, utts)?;
    let pairs = grid_pairs(axis);
    let orientation = calib.orientation;
    let jobs: Vec<(usize, &StateCalibration, &(Vec<f64>, Vec<f64>))> = calib
        .states
        .iter()
        .enumerate()
        .map(|(i, st)| (i, st, &scored[i]))
        .collect();
    let adapted = crate::parallel::try_map_slice(&jobs, |&(s, state, (pos, neg))| {
        if pos.is_empty() {
            return Err(Error::EmptyClass { state: s as u32 });
        }
        let mut dev: Vec<(f64, bool)> = Vec::with_capacity(pos.len() + neg.len());
        dev.extend(pos.iter().map(|&x| (x, true)));
        dev.extend(neg.iter().map(|&x| (x, false)));
        adapt_scales(&dev, &pairs, state, orientation)
    })?;
    for (state, (sp, sn)) in calib.states.iter_mut().zip(adapted) {
        state.scale_pos = sp;
        state.scale_neg = sn;
    }
    Ok(())
}

const CALIB_MAGIC: &str = "BTNNCALIB v1";

fn write_f64s(out: &mut String, label: &str, values: &[f64]) {
    out.push_str(label);
    for v in values {
        out.push(' ');
        out.push_str(&format!("{v}"));
    }
    out.push('\n');
}

pub fn save_calibration(path: impl AsRef<Path>, calib: &CalibrationSet) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(CALIB_MAGIC);
    out.push('\n');
    out.push_str(&format!("num_states {}\n", calib.num_states()));
    out.push_str(&format!("fusion {}\n", calib.orientation.name()));
    for (s, st) in calib.states.iter().enumerate() {
        out.push_str(&format!(
            "state {s} scale_pos={} scale_neg={}\n",
            st.scale_pos, st.scale_neg
        ));
        for (label, table) in [("pos", &st.pos), ("neg", &st.neg)] {
            out.push_str(&format!("{label} segments={}\n", table.num_segments()));
            write_f64s(&mut out, "boundaries", table.boundaries());
            write_f64s(&mut out, "probs", table.probs());
            out.push_str("counts");
            for c in table.counts() {
                out.push_str(&format!(" {c}"));
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calibration(&text).map_err(|detail| Error::format(path, detail))
}

fn parse_calibration(text: &str) -> std::result::Result<CalibrationSet, String> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| format!("file ended early, expected {what}"))
    };
    let (_, magic) = next("magic")?;
    if magic != CALIB_MAGIC {
        return Err("not a calibration file (bad magic or version)".into());
    }
    let (ln, l) = next("num_states")?;
    let num_states: usize = l
        .strip_prefix("num_states ")
        .and_then(|s| s.parse().ok())
        .ok_or(format!("line {ln}: expected num_states"))?;
    let (ln, l) = next("fusion")?;
    let orientation = l
        .strip_prefix("fusion ")
        .and_then(FusionOrientation::parse)
        .ok_or(format!("line {ln}: expected fusion complement|literal"))?;

    let parse_vec_f64 = |line: &str, label: &str, ln: usize| -> std::result::Result<Vec<f64>, String> {
        let rest = line
            .strip_prefix(label)
            .ok_or(format!("line {ln}: expected {label}"))?;
        rest.split_whitespace()
            .map(|t| t.parse().map_err(|_| format!("line {ln}: bad number '{t}'")))
            .collect()
    };

    let mut states = Vec::with_capacity(num_states);
    for s in 0..num_states {
        let (ln, l) = next("state header")?;
        let rest = l
            .strip_prefix(&format!("state {s} "))
            .ok_or(format!("line {ln}: expected state {s} header, found '{l}'"))?;
        let mut tok = rest.split_whitespace();
        let sp: f64 = tok
            .next()
            .and_then(|t| t.strip_prefix("scale_pos="))
            .and_then(|v| v.parse().ok())
            .ok_or(format!("line {ln}: expected scale_pos"))?;
        let sn: f64 = tok
            .next()
            .and_then(|t| t.strip_prefix("scale_neg="))
            .and_then(|v| v.parse().ok())
            .ok_or(format!("line {ln}: expected scale_neg"))?;
        let mut tables = Vec::with_capacity(2);
        for label in ["pos", "neg"] {
            let (ln, l) = next("table header")?;
            if !l.starts_with(&format!("{label} segments=")) {
                return Err(format!("line {ln}: expected {label} table header"));
            }
            let (ln_b, lb) = next("boundaries")?;
            let boundaries = parse_vec_f64(lb, "boundaries", ln_b)?;
            let (ln_p, lp) = next("probs")?;
            let probs = parse_vec_f64(lp, "probs", ln_p)?;
            let (ln_c, lc) = next("counts")?;
            let counts = lc
                .strip_prefix("counts")
                .ok_or(format!("line {ln_c}: expected counts"))?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| format!("line {ln_c}: bad count '{t}'")))
                .collect::<std::result::Result<Vec<u64>, String>>()?;
            tables.push(BoundaryTable::from_parts(boundaries, probs, counts).map_err(|e| e.to_string())?);
        }
        let neg = tables.pop().unwrap();
        let pos = tables.pop().unwrap();
        states.push(StateCalibration {
            pos,
            neg,
            scale_pos: sp,
            scale_neg: sn,
        });
    }
    Ok(CalibrationSet {
        states,
        orientation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(boundaries: &[f64], probs: &[f64], counts: &[u64]) -> BoundaryTable {
        BoundaryTable::from_parts(boundaries.to_vec(), probs.to_vec(), counts.to_vec()).unwrap()
    }

    #[test]
    fn counts_to_probs_matches_cumulative_fractions() {
        let probs = probs_from_counts(&[10, 20, 30, 40]).unwrap();
        let expected = [0.0, 0.1, 0.3, 0.6, 1.0];
        for (got, want) in probs.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn interpolation_matches_hand_example() {
        let t = table(
            &[0.0, 1.0, 2.0, 3.0, 4.0],
            &[0.0, 0.1, 0.3, 0.6, 1.0],
            &[10, 20, 30, 40],
        );
        assert!((positive_prob(2.5, &t) - 0.45).abs() < 1e-12);
    }

    #[test]
    fn probability_is_exact_at_every_boundary() {
        let t = table(
            &[0.0, 1.0, 2.0, 3.0, 4.0],
            &[0.0, 0.1, 0.3, 0.6, 1.0],
            &[10, 20, 30, 40],
        );
        for (b, p) in t.boundaries().iter().zip(t.probs()) {
            assert_eq!(positive_prob(*b, &t).to_bits(), p.to_bits());
        }
    }

    #[test]
    fn outside_range_clamps_to_zero_and_one() {
        let t = table(&[1.0, 2.0], &[0.0, 1.0], &[5]);
        assert_eq!(positive_prob(0.5, &t), 0.0);
        assert_eq!(positive_prob(1.0, &t), 0.0);
        assert_eq!(positive_prob(2.0, &t), 1.0);
        assert_eq!(positive_prob(7.0, &t), 1.0);
    }

    #[test]
    fn negative_prob_descends_from_one_to_zero() {
        // Mass at or above x over the negative table: complement of the
        // ascending interpolation.
        let t = table(&[0.0, 1.0, 2.0], &[0.0, 0.8, 1.0], &[8, 2]);
        assert!((negative_prob(0.5, &t) - 0.6).abs() < 1e-12);
        assert_eq!(negative_prob(0.0, &t), 1.0);
        assert_eq!(negative_prob(2.0, &t), 0.0);
    }

    #[test]
    fn estimated_table_reproduces_segment_fractions() {
        // 100 scores spread uniformly over [0, 1): equal-width segments get
        // equal counts and the cumulative probs climb linearly.
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let t = estimate_table(&scores, 10).unwrap();
        assert_eq!(t.num_segments(), 10);
        for (i, c) in t.counts().iter().enumerate() {
            assert_eq!(*c, 10, "segment {i}");
        }
    }

    #[test]
    fn degenerate_scores_error_and_widen() {
        let scores = vec![0.25; 50];
        match estimate_table(&scores, 4) {
            Err(Error::DegenerateRange { value, count }) => {
                assert_eq!(value, 0.25);
                assert_eq!(count, 50);
            }
            other => panic!("expected degenerate-range error, got {other:?}"),
        }
        let t = estimate_table_widened(&scores, 4).unwrap();
        assert_eq!(t.counts().iter().sum::<u64>(), 50);
        assert!(t.boundaries()[0] < 0.25 && 0.25 < t.boundaries()[4]);
    }

    #[test]
    fn fuse_hand_examples() {
        use FusionOrientation::Complement;
        // Symmetric inputs collapse regardless of scales.
        let v = fuse(0.8, 0.2, 4.0, 1.0, Complement).unwrap();
        assert!((v - 0.8).abs() < 1e-12, "{v}");
        // Perfect evidence stays perfect.
        assert_eq!(fuse(1.0, 0.0, 3.0, 5.0, Complement).unwrap(), 1.0);
        // Zero negative scale degenerates to the positive probability alone.
        assert_eq!(fuse(0.37, 0.9, 2.0, 0.0, Complement).unwrap(), 0.37);
        // Zero positive scale keeps only the complemented negative side.
        assert_eq!(fuse(0.37, 0.25, 0.0, 2.0, Complement).unwrap(), 0.75);
        // Composition of the two interpolation examples at scales (4, 1):
        // independently, (0.45^4 * (1 - 0.6))^(1/5).
        let got = fuse(0.45, 0.6, 4.0, 1.0, Complement).unwrap();
        let direct = (0.45f64.powi(4) * 0.4).powf(0.2);
        assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");
        assert!((got - 0.439523).abs() < 1e-6, "{got}");
    }

    #[test]
    fn literal_orientation_uses_raw_negative_probability() {
        let v = fuse(0.5, 0.9, 1.0, 1.0, FusionOrientation::Literal).unwrap();
        assert!((v - (0.5f64 * 0.9).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn both_scales_zero_rejected() {
        assert!(fuse(0.5, 0.5, 0.0, 0.0, FusionOrientation::Complement).is_err());
    }

    #[test]
    fn calibrate_frame_composes_tables_and_fusion() {
        let pos = table(
            &[0.0, 1.0, 2.0, 3.0, 4.0],
            &[0.0, 0.1, 0.3, 0.6, 1.0],
            &[10, 20, 30, 40],
        );
        let neg = table(&[0.0, 1.0, 2.0], &[0.0, 0.8, 1.0], &[8, 2]);
        let calib = CalibrationSet {
            states: vec![StateCalibration {
                pos,
                neg,
                scale_pos: 4.0,
                scale_neg: 1.0,
            }],
            orientation: FusionOrientation::Complement,
        };
        let raw = BTreeMap::from([(0u32, 2.5f32)]);
        let conf = calibrate_frame(&raw, &calib).unwrap();
        // positive_prob(2.5) = 0.45 on the pos table; on the neg table 2.5 is
        // past the right edge so negative_prob = 0 and the complement is 1.
        let expected = (0.45f64.powi(4) * 1.0).powf(0.2);
        assert!((conf[&0] - expected).abs() < 1e-9, "{}", conf[&0]);
    }

    #[test]
    fn calibrate_frame_missing_state_is_an_error() {
        let calib = CalibrationSet {
            states: vec![],
            orientation: FusionOrientation::Complement,
        };
        let raw = BTreeMap::from([(3u32, 0.5f32)]);
        match calibrate_frame(&raw, &calib) {
            Err(Error::UnknownState { state: 3 }) => {}
            other => panic!("expected unknown-state error, got {other:?}"),
        }
    }

    #[test]
    fn adapt_picks_lexicographically_smallest_on_exact_ties() {
        // All dev scores sit left of both tables, so every fused confidence
        // clamps to the same floor and all grid pairs tie exactly.
        let t = table(&[10.0, 11.0], &[0.0, 1.0], &[1]);
        let state = StateCalibration {
            pos: t.clone(),
            neg: table(&[10.0, 11.0], &[0.0, 1.0], &[1]),
            scale_pos: 4.0,
            scale_neg: 1.0,
        };
        let dev = vec![(0.5, true), (0.2, false)];
        let grid = grid_pairs(&DEFAULT_SCALE_GRID);
        let picked = adapt_scales(&dev, &grid, &state, FusionOrientation::Complement).unwrap();
        assert_eq!(picked, (0.5, 0.5));
    }

    #[test]
    fn adapt_matches_brute_force_argmax() {
        let pos = table(
            &[0.0, 0.25, 0.5, 0.75, 1.0],
            &[0.0, 0.05, 0.2, 0.5, 1.0],
            &[5, 15, 30, 50],
        );
        let neg = table(
            &[0.0, 0.25, 0.5, 0.75, 1.0],
            &[0.0, 0.6, 0.9, 0.98, 1.0],
            &[60, 30, 8, 2],
        );
        let state = StateCalibration {
            pos,
            neg,
            scale_pos: 4.0,
            scale_neg: 1.0,
        };
        let dev: Vec<(f64, bool)> = (0..40)
            .map(|i| {
                let x = i as f64 / 40.0;
                (x, i % 3 == 0)
            })
            .collect();
        let grid = grid_pairs(&[0.5, 1.0, 2.0]);
        let picked = adapt_scales(&dev, &grid, &state, FusionOrientation::Complement).unwrap();
        let mut best = (f64::NEG_INFINITY, (0.0, 0.0));
        for &(sp, sn) in &grid {
            let ll =
                scale_log_likelihood(&dev, sp, sn, &state, FusionOrientation::Complement).unwrap();
            if ll > best.0 {
                best = (ll, (sp, sn));
            }
        }
        assert_eq!(picked, best.1);
    }

    #[test]
    fn calibration_file_round_trips_bit_exact() {
        let pos = estimate_table(&(0..97).map(|i| (i as f64).sin().abs()).collect::<Vec<_>>(), 7)
            .unwrap();
        let neg = estimate_table(&(0..83).map(|i| (i as f64).cos() * 0.3 + 0.4).collect::<Vec<_>>(), 5)
            .unwrap();
        let calib = CalibrationSet {
            states: vec![
                StateCalibration {
                    pos: pos.clone(),
                    neg: neg.clone(),
                    scale_pos: 4.0,
                    scale_neg: 1.0,
                },
                StateCalibration {
                    pos: neg,
                    neg: pos,
                    scale_pos: 0.5,
                    scale_neg: 8.0,
                },
            ],
            orientation: FusionOrientation::Literal,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.btc");
        save_calibration(&path, &calib).unwrap();
        let loaded = load_calibration(&path).unwrap();
        assert_eq!(calib, loaded);
    }

    #[test]
    fn malformed_calibration_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.btc");
        fs::write(&path, "BTNNCALIB v1\nnum_states 1\nfusion complement\nstate 0 scale_pos=1\n")
            .unwrap();
        assert!(load_calibration(&path).is_err());
        fs::write(&path, "NOTCALIB\n").unwrap();
        let err = load_calibration(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    proptest! {
        /// Top-down recursion equals cumulative counts from below.
        #[test]
        fn recursion_equals_cumulative_sums(
            counts in proptest::collection::vec(0u64..1_000_000, 1..40)
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let total: u64 = counts.iter().sum();
            let recursion = probs_from_counts(&counts).unwrap();
            let mut acc = 0u64;
            let mut cumulative = vec![0.0];
            for c in &counts {
                acc += c;
                cumulative.push(acc as f64 / total as f64);
            }
            *cumulative.last_mut().unwrap() = 1.0;
            for (r, c) in recursion.iter().zip(&cumulative) {
                prop_assert!((r - c).abs() <= 1e-12, "{} vs {}", r, c);
            }
        }

        /// positive_prob is non-decreasing and bounded.
        #[test]
        fn positive_prob_monotone(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..200),
            segments in 1usize..30,
            xs in proptest::collection::vec(-6.0f64..6.0, 2..20),
        ) {
            prop_assume!(scores.iter().copied().fold(f64::INFINITY, f64::min)
                < scores.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            let t = estimate_table(&scores, segments).unwrap();
            let mut sorted = xs.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut prev = -1.0;
            for x in sorted {
                let p = positive_prob(x, &t);
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!(p >= prev, "not monotone at {}", x);
                prev = p;
            }
        }

        /// The table's boundary probabilities reproduce the empirical CDF of
        /// its own estimation sample exactly (up to 1/total).
        #[test]
        fn table_matches_own_empirical_cdf_at_boundaries(
            scores in proptest::collection::vec(0.0f64..1.0, 10..300),
            segments in 1usize..20,
        ) {
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(lo < hi);
            let t = estimate_table(&scores, segments).unwrap();
            let total = scores.len() as f64;
            for (i, b) in t.boundaries().iter().enumerate() {
                let below = scores.iter().filter(|&&s| s < *b).count() as f64 / total;
                // Interior boundaries: mass below the edge; the ends are
                // pinned to 0 and 1.
                if i > 0 && i < t.num_segments() {
                    prop_assert!(
                        (positive_prob(*b, &t) - below).abs() <= 1.0 / total + 1e-9,
                        "boundary {} of {}", i, t.num_segments()
                    );
                }
            }
        }

        /// Fusion is monotone in the positive probability, homogeneous in the
        /// scales, and bounded in [0, 1].
        #[test]
        fn fuse_monotone_homogeneous_bounded(
            p1 in 0.0f64..1.0,
            p2 in 0.0f64..1.0,
            q in 0.0f64..1.0,
            sp in 0.01f64..8.0,
            sn in 0.01f64..8.0,
            k in 0.1f64..10.0,
        ) {
            use FusionOrientation::Complement;
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let f_lo = fuse(lo, q, sp, sn, Complement).unwrap();
            let f_hi = fuse(hi, q, sp, sn, Complement).unwrap();
            prop_assert!(f_lo <= f_hi + 1e-12, "not monotone: {} > {}", f_lo, f_hi);
            prop_assert!((0.0..=1.0).contains(&f_lo));
            let scaled = fuse(hi, q, k * sp, k * sn, Complement).unwrap();
            prop_assert!((scaled - f_hi).abs() <= 1e-12, "not homogeneous: {} vs {}", scaled, f_hi);
        }

        /// Equal scales reduce to the plain geometric mean.
        #[test]
        fn equal_scales_are_a_geometric_mean(p in 0.0f64..1.0, q in 0.0f64..1.0, s in 0.01f64..8.0) {
            let f = fuse(p, q, s, s, FusionOrientation::Complement).unwrap();
            let gm = (p * (1.0 - q)).sqrt();
            prop_assert!((f - gm).abs() <= 1e-12, "{} vs {}", f, gm);
        }
    }
}
