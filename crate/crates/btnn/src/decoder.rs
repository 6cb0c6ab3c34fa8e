//! Streaming keyword detection by token passing.
//!
//! Each keyword graph carries at most one token per node (max
//! recombination).  Per frame: every token takes every consuming arc out of
//! its node, paying `ln(confidence)` of the state it lands on plus the arc
//! weight; a fresh token is born in the first emission node (the start node
//! has no arcs); nodes recombine; non-consuming arcs copy tokens into the
//! final node; the floor and beam prune; the final node's token fires a
//! detection if it has consumed enough frames and its average log confidence
//! clears the threshold.  A detection clears the graph's tokens and opens a
//! refractory window.
//!
//! `GraphDecoder` does exactly that for one graph given per-state
//! confidences.  `StreamDecoder` runs the whole engine: shared embedding,
//! per-state tails evaluated lazily (only the states some graph can consume
//! next frame), calibration, several graphs, and MAC accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::cmp::Ordering;

use crate::calibration::{calibrate_frame, CalibrationSet, CONFIDENCE_CLAMP};
use crate::error::{Error, Result};
use crate::features::FeatureFrame;
use crate::graph::KeywordGraph;
use crate::nnet::{tail_forward_sparse, EmbedSession, MacReport, ModelBundle};

/// One partial hypothesis: where it is, its accumulated log score, the frame
/// it was born on, and how many frames it has consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub node: u32,
    pub log_score: f64,
    pub start_frame: u64,
    pub frames_consumed: u32,
}

impl Token {
    pub fn average_log(&self) -> f64 {
        self.log_score / self.frames_consumed as f64
    }
}

/// Ordering used everywhere tokens compete: higher score first, then earlier
/// start, then fewer frames consumed.
fn rank(a: &Token, b: &Token) -> Ordering {
    b.log_score
        .partial_cmp(&a.log_score)
        .unwrap_or(Ordering::Equal)
        .then(a.start_frame.cmp(&b.start_frame))
        .then(a.frames_consumed.cmp(&b.frames_consumed))
}

fn better(a: &Token, b: &Token) -> bool {
    rank(a, b) == Ordering::Less
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// Most emission-node tokens kept per graph per frame.  `usize::MAX`
    /// disables the count beam.  Final-node tokens are never beam-pruned:
    /// they either fire this frame or vanish (the final node has no arcs).
    pub beam: usize,
    /// Minimum average log confidence for a detection.
    pub threshold: f64,
    /// Minimum frames a hypothesis must consume before it may fire.
    pub min_frames: u32,
    /// Frames to suppress a graph after one of its detections fires.
    pub refractory_frames: u64,
    /// Average-log floor below which tokens are dropped.  Without it every
    /// node stays occupied forever (max recombination never empties a node),
    /// which keeps every tail active; with it, hopeless hypotheses die and
    /// tail evaluation stays sparse.
    pub score_floor: Option<f64>,
    /// Evaluate every tail each frame instead of only the active set.  The
    /// decoding result is identical; only the measured MACs differ.
    pub exhaustive_tails: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 32,
            threshold: -1.0,
            min_frames: 20,
            refractory_frames: 50,
            score_floor: None,
            exhaustive_tails: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.threshold.is_nan() {
            return Err(Error::Config("threshold must not be NaN".into()));
        }
        if let Some(floor) = self.score_floor {
            if floor.is_nan() {
                return Err(Error::Config("score_floor must not be NaN".into()));
            }
            if floor > self.threshold {
                return Err(Error::Config(format!(
                    "score_floor {floor} sits above the detection threshold {}: \
                     every detection would be pruned before it fires",
                    self.threshold
                )));
            }
        }
        Ok(())
    }
}

/// A fired keyword.  `end_frame` is exclusive, so
/// `end_frame - start_frame` is exactly the frames the hypothesis consumed;
/// `confidence` is its average log fused confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub keyword: String,
    pub start_frame: u64,
    pub end_frame: u64,
    pub confidence: f64,
}

/// Token passing over one keyword graph, driven by per-state confidences.
#[derive(Debug, Clone)]
pub struct GraphDecoder<'g> {
    graph: &'g KeywordGraph,
    config: DecodeConfig,
    tokens: BTreeMap<u32, Token>,
    refractory_until: u64,
    frame: u64,
}

impl<'g> GraphDecoder<'g> {
    pub fn new(graph: &'g KeywordGraph, config: DecodeConfig) -> Result<Self> {
        config.validate()?;
        Ok(GraphDecoder {
            graph,
            config,
            tokens: BTreeMap::new(),
            refractory_until: 0,
            frame: 0,
        })
    }

    pub fn graph(&self) -> &KeywordGraph {
        self.graph
    }

    /// States this graph can consume on the next frame: the birth state
    /// (unless refractory) plus everything reachable from current tokens.
    pub fn needed_states(&self) -> BTreeSet<u32> {
        let mut states = BTreeSet::new();
        if self.frame >= self.refractory_until {
            states.insert(self.graph.chain[0]);
        }
        for tok in self.tokens.values() {
            for arc in self.graph.arcs_from(tok.node) {
                if let Some(s) = arc.state {
                    states.insert(s);
                }
            }
        }
        states
    }

    /// Current tokens, sorted by node.
    pub fn tokens(&self) -> Vec<Token> {
        self.tokens.values().cloned().collect()
    }

    pub fn frames_seen(&self) -> u64 {
        self.frame
    }

    /// Advance one frame.  `conf` must cover every state in
    /// `needed_states()`; fused confidences are floored at the global clamp
    /// before the log.
    pub fn push_confidences(
        &mut self,
        conf: &BTreeMap<u32, f64>,
    ) -> Result<Option<DetectionEvent>> {
        let t = self.frame;
        self.frame += 1;
        let final_node = self.graph.final_node();
        let conf_ln = |state: u32| -> Result<f64> {
            conf.get(&state)
                .map(|c| c.max(CONFIDENCE_CLAMP).ln())
                .ok_or(Error::MissingConfidence { state, frame: t })
        };
        fn place(map: &mut BTreeMap<u32, Token>, tok: Token) {
            match map.get_mut(&tok.node) {
                Some(existing) => {
                    if better(&tok, existing) {
                        *existing = tok;
                    }
                }
                None => {
                    map.insert(tok.node, tok);
                }
            }
        }

        // Consuming moves out of every occupied node.
        let mut next: BTreeMap<u32, Token> = BTreeMap::new();
        for tok in self.tokens.values() {
            for arc in self.graph.arcs_from(tok.node) {
                if let Some(s) = arc.state {
                    place(
                        &mut next,
                        Token {
                            node: arc.dst,
                            log_score: tok.log_score + arc.weight + conf_ln(s)?,
                            start_frame: tok.start_frame,
                            frames_consumed: tok.frames_consumed + 1,
                        },
                    );
                }
            }
        }

        // Hypothesis birth: a fresh token consumes the first chain state.
        if t >= self.refractory_until {
            let s = self.graph.chain[0];
            place(
                &mut next,
                Token {
                    node: 1,
                    log_score: conf_ln(s)?,
                    start_frame: t,
                    frames_consumed: 1,
                },
            );
        }

        // Non-consuming closure into the final node (weight only).
        let mut into_final = Vec::new();
        for tok in next.values() {
            for arc in self.graph.arcs_from(tok.node) {
                if arc.state.is_none() {
                    into_final.push(Token {
                        node: arc.dst,
                        log_score: tok.log_score + arc.weight,
                        start_frame: tok.start_frame,
                        frames_consumed: tok.frames_consumed,
                    });
                }
            }
        }
        for tok in into_final {
            place(&mut next, tok);
        }

        // Average-log floor.
        if let Some(floor) = self.config.score_floor {
            next.retain(|_, tok| tok.average_log() >= floor);
        }

        // Count beam over emission nodes.
        if self.config.beam != usize::MAX {
            let mut emission: Vec<&Token> =
                next.values().filter(|t| t.node != final_node).collect();
            if emission.len() > self.config.beam {
                emission.sort_by(|a, b| rank(a, b));
                let keep: BTreeSet<u32> = emission[..self.config.beam]
                    .iter()
                    .map(|t| t.node)
                    .collect();
                next.retain(|node, _| *node == final_node || keep.contains(node));
            }
        }

        // Detection.
        let mut event = None;
        if let Some(tok) = next.get(&final_node) {
            if tok.frames_consumed >= self.config.min_frames
                && tok.average_log() >= self.config.threshold
            {
                event = Some(DetectionEvent {
                    keyword: self.graph.keyword.clone(),
                    start_frame: tok.start_frame,
                    end_frame: t + 1,
                    confidence: tok.average_log(),
                });
            }
        }
        if event.is_some() {
            next.clear();
            self.refractory_until = t + 1 + self.config.refractory_frames;
        }
        self.tokens = next;
        Ok(event)
    }
}

/// The full streaming engine over one model and several keyword graphs.
#[derive(Debug)]
pub struct StreamDecoder<'a> {
    bundle: &'a ModelBundle,
    calib: &'a CalibrationSet,
    config: DecodeConfig,
    embed: EmbedSession<'a>,
    graphs: Vec<GraphDecoder<'a>>,
    tail_macs: Vec<u64>,
    tail_macs_total: u64,
    events: Vec<DetectionEvent>,
    frames: u64,
    embedding_macs: u64,
    lazy_macs: u64,
    record_scores: bool,
    recorded: Vec<BTreeMap<u32, f64>>,
}

impl<'a> StreamDecoder<'a> {
    pub fn new(
        bundle: &'a ModelBundle,
        calib: &'a CalibrationSet,
        graphs: &'a [KeywordGraph],
        config: DecodeConfig,
    ) -> Result<Self> {
        config.validate()?;
        if calib.num_states() != bundle.num_states() {
            return Err(Error::Config(format!(
                "model has {} states but calibration covers {}",
                bundle.num_states(),
                calib.num_states()
            )));
        }
        for g in graphs {
            for &s in &g.chain {
                if s >= bundle.num_states() {
                    return Err(Error::UnknownState { state: s });
                }
            }
        }
        let decoders = graphs
            .iter()
            .map(|g| GraphDecoder::new(g, config.clone()))
            .collect::<Result<Vec<_>>>()?;
        let tail_macs: Vec<u64> = bundle.tails.iter().map(|t| t.macs()).collect();
        Ok(StreamDecoder {
            bundle,
            calib,
            config,
            embed: EmbedSession::new(&bundle.embedding),
            graphs: decoders,
            tail_macs_total: tail_macs.iter().sum(),
            tail_macs,
            events: Vec::new(),
            frames: 0,
            embedding_macs: 0,
            lazy_macs: 0,
            record_scores: false,
            recorded: Vec::new(),
        })
    }

    /// Keep every frame's calibrated confidences for later inspection.
    pub fn enable_score_recording(&mut self) {
        self.record_scores = true;
    }

    pub fn frame_scores(&self) -> &[BTreeMap<u32, f64>] {
        &self.recorded
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames
    }

    /// Per-graph token sets after the frames pushed so far (sorted by node).
    pub fn token_snapshot(&self) -> Vec<Vec<Token>> {
        self.graphs.iter().map(|g| g.tokens()).collect()
    }

    /// The states that will be evaluated on the next frame.
    pub fn active_states(&self) -> BTreeSet<u32> {
        if self.config.exhaustive_tails {
            self.bundle.all_states()
        } else {
            let mut active = BTreeSet::new();
            for g in &self.graphs {
                active.extend(g.needed_states());
            }
            active
        }
    }

    /// Feed one feature frame; returns the detections fired on it.
    pub fn push_frame(&mut self, frame: &FeatureFrame) -> Result<Vec<DetectionEvent>> {
        let active = self.active_states();
        let embedding = self.embed.forward(&frame.values)?;
        self.embedding_macs += self.bundle.embedding.macs_per_frame();
        self.lazy_macs += active
            .iter()
            .map(|&s| self.tail_macs[s as usize])
            .sum::<u64>();
        let raw = tail_forward_sparse(&embedding, self.bundle, &active)?;
        let conf = calibrate_frame(&raw, self.calib)?;
        if self.record_scores {
            self.recorded.push(conf.clone());
        }
        let mut fired = Vec::new();
        for g in &mut self.graphs {
            if let Some(ev) = g.push_confidences(&conf)? {
                fired.push(ev);
            }
        }
        self.frames += 1;
        self.events.extend(fired.iter().cloned());
        Ok(fired)
    }

    pub fn mac_report(&self) -> MacReport {
        MacReport {
            embedding_macs: self.embedding_macs,
            tail_macs_full: self.tail_macs_total * self.frames,
            tail_macs_lazy: self.lazy_macs,
        }
    }

    /// All detections so far plus the MAC accounting.
    pub fn finish(self) -> (Vec<DetectionEvent>, MacReport) {
        let report = self.mac_report();
        (self.events, report)
    }
}

/// Decode a whole feature sequence in one call.
pub fn decode_stream(
    bundle: &ModelBundle,
    calib: &CalibrationSet,
    graphs: &[KeywordGraph],
    config: DecodeConfig,
    frames: &[FeatureFrame],
) -> Result<(Vec<DetectionEvent>, MacReport)> {
    let mut decoder = StreamDecoder::new(bundle, calib, graphs, config)?;
    for frame in frames {
        decoder.push_frame(frame)?;
    }
    Ok(decoder.finish())
}

/// Decode many independent streams against the same immutable model,
/// calibration, and graphs.  Each stream is its own session; results come
/// back in input order (and bit-identical to decoding them one by one).
pub fn decode_batch(
    bundle: &ModelBundle,
    calib: &CalibrationSet,
    graphs: &[KeywordGraph],
    config: &DecodeConfig,
    streams: &[&[FeatureFrame]],
) -> Result<Vec<(Vec<DetectionEvent>, MacReport)>> {
    crate::parallel::try_map_slice(streams, |frames| {
        decode_stream(bundle, calib, graphs, config.clone(), frames)
    })
}
