//! The shared embedding network and the per-state binary tails.
//!
//! The embedding stack mixes dense projections with causal memory layers
//! (tap-weighted sums over recent activations).  Each acoustic state owns an
//! independent sigmoid-output tail, so the decoder can evaluate exactly the
//! states it needs.  All inference arithmetic is f32 with f32 accumulation,
//! which keeps the lazy/full equivalence bit-exact and matches what a
//! fixed-function DSP port would do.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureFrame};

pub mod model_io;

/// Tail outputs are clamped into this open interval so downstream logs and
/// boundary tables never see an exact 0 or 1 even when the sigmoid saturates
/// in f32.
pub const SCORE_CLAMP: f32 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }
}

/// Fully connected layer; weights are row-major `[out_dim][in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Uniform init in ±1/sqrt(in_dim), zero bias.
    pub fn random(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        DenseLayer {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        if input.len() != self.in_dim {
            return Err(Error::Shape {
                context: "dense layer input".into(),
                expected: self.in_dim,
                actual: input.len(),
            });
        }
        let mut out = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(self.activation.apply(acc));
        }
        Ok(out)
    }

    pub fn macs(&self) -> u64 {
        (self.in_dim * self.out_dim) as u64
    }
}

/// Causal memory layer: `y_t = sum_i coeffs[i] ⊙ x_{t-i}` with zero history
/// before the first frame.  `coeffs[0]` weights the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLayer {
    pub dim: usize,
    pub coeffs: Vec<Vec<f32>>,
}

impl MemoryLayer {
    /// Identity memory: passes the current frame through untouched.  A sane
    /// starting point for frame-wise training; joint training can move the
    /// taps off identity later.
    pub fn identity(dim: usize, taps: usize) -> Self {
        let mut coeffs = vec![vec![0.0; dim]; taps];
        coeffs[0] = vec![1.0; dim];
        MemoryLayer { dim, coeffs }
    }

    pub fn taps(&self) -> usize {
        self.coeffs.len()
    }

    pub fn macs(&self) -> u64 {
        (self.taps() * self.dim) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Memory(MemoryLayer),
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.out_dim,
            Layer::Memory(m) => m.dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.in_dim,
            Layer::Memory(m) => m.dim,
        }
    }

    pub fn macs(&self) -> u64 {
        match self {
            Layer::Dense(d) => d.macs(),
            Layer::Memory(m) => m.macs(),
        }
    }
}

/// The shared feature-embedding stack.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    pub layers: Vec<Layer>,
}

impl EmbeddingNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("embedding needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    context: format!("embedding layer {} -> {}", i, i + 1),
                    expected: pair[0].out_dim(),
                    actual: pair[1].in_dim(),
                });
            }
        }
        Ok(EmbeddingNet { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn macs_per_frame(&self) -> u64 {
        self.layers.iter().map(Layer::macs).sum()
    }
}

/// Streaming evaluation state for one embedding network: each memory layer
/// keeps its recent input history so chunked input matches one-shot.
#[derive(Debug)]
pub struct EmbedSession<'a> {
    net: &'a EmbeddingNet,
    history: Vec<VecDeque<Vec<f32>>>,
}

impl<'a> EmbedSession<'a> {
    pub fn new(net: &'a EmbeddingNet) -> Self {
        let history = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Memory(m) => VecDeque::with_capacity(m.taps()),
                Layer::Dense(_) => VecDeque::new(),
            })
            .collect();
        EmbedSession { net, history }
    }

    pub fn forward(&mut self, input: &[f32]) -> Result<Vec<f32>> {
        let mut x = input.to_vec();
        for (li, layer) in self.net.layers.iter().enumerate() {
            x = match layer {
                Layer::Dense(d) => d.forward(&x)?,
                Layer::Memory(m) => {
                    if x.len() != m.dim {
                        return Err(Error::Shape {
                            context: format!("memory layer {li} input"),
                            expected: m.dim,
                            actual: x.len(),
                        });
                    }
                    let hist = &mut self.history[li];
                    hist.push_front(x);
                    hist.truncate(m.taps());
                    let mut y = vec![0.0f32; m.dim];
                    for (tap, coeff) in m.coeffs.iter().enumerate() {
                        if let Some(past) = hist.get(tap) {
                            for d in 0..m.dim {
                                y[d] += coeff[d] * past[d];
                            }
                        }
                    }
                    y
                }
            };
        }
        Ok(x)
    }
}

/// Embed a whole frame sequence.  Causal: output `t` never depends on frames
/// after `t`.
pub fn embed_forward(frames: &[FeatureFrame], net: &EmbeddingNet) -> Result<Vec<Vec<f32>>> {
    let mut session = EmbedSession::new(net);
    frames.iter().map(|f| session.forward(&f.values)).collect()
}

/// Per-state binary classifier.  The last layer must map to a single
/// sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct TailNet {
    pub state_id: u32,
    pub layers: Vec<DenseLayer>,
}

impl TailNet {
    pub fn new(state_id: u32, layers: Vec<DenseLayer>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::Config(format!("tail for state {state_id} has no layers")))?;
        if last.out_dim != 1 || last.activation != Activation::Sigmoid {
            return Err(Error::Config(format!(
                "tail for state {state_id} must end in a single sigmoid output"
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape {
                    context: format!("tail {state_id} layer {} -> {}", i, i + 1),
                    expected: pair[0].out_dim,
                    actual: pair[1].in_dim,
                });
            }
        }
        Ok(TailNet { state_id, layers })
    }

    /// Pyramid of relu layers ending in one sigmoid unit, e.g. `[64,32,16]`
    /// builds 64 -> 32 -> 16 -> 1.
    pub fn pyramid(state_id: u32, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config("tail pyramid needs at least one dim".into()));
        }
        let mut layers = Vec::new();
        for pair in dims.windows(2) {
            layers.push(DenseLayer::random(pair[0], pair[1], Activation::Relu, rng));
        }
        layers.push(DenseLayer::random(
            dims[dims.len() - 1],
            1,
            Activation::Sigmoid,
            rng,
        ));
        TailNet::new(state_id, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().map(DenseLayer::macs).sum()
    }
}

/// One tail score for one embedding, strictly inside (0, 1).
pub fn tail_forward(embedding: &[f32], tail: &TailNet) -> Result<f32> {
    let mut x = embedding.to_vec();
    for layer in &tail.layers {
        x = layer.forward(&x)?;
    }
    Ok(x[0].clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP))
}

/// Evaluate only the requested states.  Scores are bit-identical to what
/// `tail_forward` produces state by state, so a lazily evaluated decode can
/// never drift from an exhaustive one.
pub fn tail_forward_sparse(
    embedding: &[f32],
    bundle: &ModelBundle,
    active: &BTreeSet<u32>,
) -> Result<BTreeMap<u32, f32>> {
    let wanted: Vec<u32> = active.iter().copied().collect();
    let scores = crate::parallel::try_map_slice(&wanted, |&state| {
        let tail = bundle.tail(state)?;
        Ok((state, tail_forward(embedding, tail)?))
    })?;
    Ok(scores.into_iter().collect())
}

/// MAC counts for a decode: the embedding always runs, the tail bank cost is
/// reported both as if every state were evaluated each frame and as actually
/// incurred by the per-frame active sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MacReport {
    pub embedding_macs: u64,
    pub tail_macs_full: u64,
    pub tail_macs_lazy: u64,
}

impl MacReport {
    /// Lazy / full tail cost; 1.0 when nothing could be saved or the stream
    /// was empty.
    pub fn tail_ratio(&self) -> f64 {
        if self.tail_macs_full == 0 {
            1.0
        } else {
            self.tail_macs_lazy as f64 / self.tail_macs_full as f64
        }
    }
}

pub fn count_macs(bundle: &ModelBundle, active_history: &[BTreeSet<u32>]) -> MacReport {
    let frames = active_history.len() as u64;
    let full_per_frame: u64 = bundle.tails.iter().map(TailNet::macs).sum();
    let lazy = active_history
        .iter()
        .map(|set| {
            set.iter()
                .map(|s| bundle.tails.get(*s as usize).map_or(0, TailNet::macs))
                .sum::<u64>()
        })
        .sum();
    MacReport {
        embedding_macs: frames * bundle.embedding.macs_per_frame(),
        tail_macs_full: frames * full_per_frame,
        tail_macs_lazy: lazy,
    }
}

/// Embedding plus one tail per state (state ids are dense: 0..num_states).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub embedding: EmbeddingNet,
    pub tails: Vec<TailNet>,
    pub feature_config: FeatureConfig,
}

impl ModelBundle {
    pub fn new(
        embedding: EmbeddingNet,
        tails: Vec<TailNet>,
        feature_config: FeatureConfig,
    ) -> Result<Self> {
        for (i, tail) in tails.iter().enumerate() {
            if tail.state_id != i as u32 {
                return Err(Error::Config(format!(
                    "tail at position {i} carries state id {}",
                    tail.state_id
                )));
            }
            if tail.input_dim() != embedding.output_dim() {
                return Err(Error::Shape {
                    context: format!("tail {} input", tail.state_id),
                    expected: embedding.output_dim(),
                    actual: tail.input_dim(),
                });
            }
        }
        Ok(ModelBundle {
            embedding,
            tails,
            feature_config,
        })
    }

    pub fn num_states(&self) -> u32 {
        self.tails.len() as u32
    }

    pub fn tail(&self, state: u32) -> Result<&TailNet> {
        self.tails
            .get(state as usize)
            .ok_or(Error::UnknownState { state })
    }

    pub fn all_states(&self) -> BTreeSet<u32> {
        (0..self.num_states()).collect()
    }

    /// Desk-scale default: dense -> identity memory (4 taps) -> dense for the
    /// embedding, 64/32/16-unit pyramids for the tails.  Deterministic in the
    /// seed.
    pub fn desk_default(feature_config: FeatureConfig, num_states: u32, seed: u64) -> Result<Self> {
        let in_dim = feature_config.num_bins;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = EmbeddingNet::new(vec![
            Layer::Dense(DenseLayer::random(in_dim, 64, Activation::Relu, &mut rng)),
            Layer::Memory(MemoryLayer::identity(64, 4)),
            Layer::Dense(DenseLayer::random(64, 64, Activation::Relu, &mut rng)),
        ])?;
        let tails = (0..num_states)
            .map(|s| TailNet::pyramid(s, &[64, 32, 16], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        ModelBundle::new(embedding, tails, feature_config)
    }
}
