//! Shared helpers for the integration suites: an independent brute-force
//! path enumerator that mirrors the decoder's published semantics, plus
//! deterministic random generators for models, calibrations, and streams.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use btnn::calibration::{
    estimate_table_widened, CalibrationSet, FusionOrientation, StateCalibration,
    CONFIDENCE_CLAMP,
};
use btnn::decoder::Token;
use btnn::features::{FeatureConfig, FeatureFrame};
use btnn::graph::KeywordGraph;
use btnn::nnet::{
    Activation, DenseLayer, EmbeddingNet, Layer, MemoryLayer, ModelBundle, TailNet,
};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The decoder's token ordering, restated independently: higher score first,
/// then earlier start, then fewer frames consumed.
pub fn token_rank(a: &Token, b: &Token) -> Ordering {
    b.log_score
        .partial_cmp(&a.log_score)
        .unwrap_or(Ordering::Equal)
        .then(a.start_frame.cmp(&b.start_frame))
        .then(a.frames_consumed.cmp(&b.frames_consumed))
}

/// Best token per (frame, node), found by enumerating every legal path
/// outright — no recombination, no pruning.  A path is a birth frame
/// (entering node 1 and consuming the first chain state), one consuming arc
/// per following frame, and optional non-consuming hops into the final node
/// recorded on the frame they happen.  Scores accumulate in chronological
/// order so each path's float arithmetic matches the streaming decoder's.
pub fn enumerate_best_tokens(
    graph: &KeywordGraph,
    confs: &[BTreeMap<u32, f64>],
) -> Vec<BTreeMap<u32, Token>> {
    let ln = |t: usize, state: u32| confs[t][&state].max(CONFIDENCE_CLAMP).ln();
    let mut best: Vec<BTreeMap<u32, Token>> = vec![BTreeMap::new(); confs.len()];

    fn record(slot: &mut BTreeMap<u32, Token>, tok: Token) {
        match slot.get_mut(&tok.node) {
            Some(existing) => {
                if token_rank(&tok, existing) == Ordering::Less {
                    *existing = tok;
                }
            }
            None => {
                slot.insert(tok.node, tok);
            }
        }
    }

    for birth in 0..confs.len() {
        let start = Token {
            node: 1,
            log_score: ln(birth, graph.chain[0]),
            start_frame: birth as u64,
            frames_consumed: 1,
        };
        let mut stack: Vec<(usize, Token)> = vec![(birth, start)];
        while let Some((t, tok)) = stack.pop() {
            // Non-consuming hops out of this node land the same frame.
            for arc in graph.arcs_from(tok.node) {
                if arc.state.is_none() {
                    record(
                        &mut best[t],
                        Token {
                            node: arc.dst,
                            log_score: tok.log_score + arc.weight,
                            start_frame: tok.start_frame,
                            frames_consumed: tok.frames_consumed,
                        },
                    );
                }
            }
            // Consuming extensions branch into the next frame.
            if t + 1 < confs.len() {
                for arc in graph.arcs_from(tok.node) {
                    if let Some(s) = arc.state {
                        stack.push((
                            t + 1,
                            Token {
                                node: arc.dst,
                                log_score: tok.log_score + arc.weight + ln(t + 1, s),
                                start_frame: tok.start_frame,
                                frames_consumed: tok.frames_consumed + 1,
                            },
                        ));
                    }
                }
            }
            record(&mut best[t], tok);
        }
    }
    best
}

/// Small random model: relu dense -> identity memory -> relu dense for the
/// embedding, one small pyramid tail per state.
pub fn random_bundle(
    rng: &mut ChaCha8Rng,
    num_states: u32,
    input_dim: usize,
    hidden: usize,
) -> ModelBundle {
    let embedding = EmbeddingNet::new(vec![
        Layer::Dense(DenseLayer::random(input_dim, hidden, Activation::Relu, rng)),
        Layer::Memory(MemoryLayer::identity(hidden, 2)),
        Layer::Dense(DenseLayer::random(hidden, hidden, Activation::Relu, rng)),
    ])
    .expect("embedding dims chain");
    let tails = (0..num_states)
        .map(|s| TailNet::pyramid(s, &[hidden, 6], rng).expect("tail dims"))
        .collect();
    let feature_config = FeatureConfig {
        num_bins: input_dim,
        ..FeatureConfig::default()
    };
    ModelBundle::new(embedding, tails, feature_config).expect("bundle shapes agree")
}

/// Random per-state calibration: overlapping positive/negative score clouds
/// turned into boundary tables, with scales drawn from a small grid.
pub fn random_calib(rng: &mut ChaCha8Rng, num_states: u32) -> CalibrationSet {
    let states = (0..num_states)
        .map(|_| {
            let pos: Vec<f64> = (0..300).map(|_| rng.random_range(0.25..1.0)).collect();
            let neg: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..0.75)).collect();
            StateCalibration {
                pos: estimate_table_widened(&pos, 20).expect("positive table"),
                neg: estimate_table_widened(&neg, 20).expect("negative table"),
                scale_pos: *[0.5, 1.0, 2.0, 4.0].choose(rng).unwrap(),
                scale_neg: *[0.5, 1.0, 2.0].choose(rng).unwrap(),
            }
        })
        .collect();
    CalibrationSet {
        states,
        orientation: FusionOrientation::Complement,
    }
}

pub fn random_frames(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<FeatureFrame> {
    (0..n)
        .map(|index| FeatureFrame {
            values: (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            index,
        })
        .collect()
}

pub fn random_chain(rng: &mut ChaCha8Rng, num_states: u32, max_len: usize) -> Vec<u32> {
    let len = rng.random_range(1..=max_len);
    (0..len).map(|_| rng.random_range(0..num_states)).collect()
}

/// Per-frame confidence maps covering every state, drawn uniformly from
/// [0.01, 1).
pub fn random_confidences(
    rng: &mut ChaCha8Rng,
    frames: usize,
    num_states: u32,
) -> Vec<BTreeMap<u32, f64>> {
    (0..frames)
        .map(|_| {
            (0..num_states)
                .map(|s| (s, rng.random_range(0.01..1.0)))
                .collect()
        })
        .collect()
}

/// Fraction of samples strictly below `x` — the same "mass before this
/// point" convention the boundary tables use.  `sorted` must be ascending.
pub fn ecdf_below(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|&v| v < x) as f64 / sorted.len() as f64
}
