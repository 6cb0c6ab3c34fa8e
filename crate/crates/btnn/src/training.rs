//! Tail (and optionally embedding) training.
//!
//! Each state's tail is a binary classifier trained with a scaled squared
//! error: negatives pay `o^2`, positives pay `(o - 1)^2 * scale_pos`, so raising
//! the scale buys recall on that state.  Every batch carries all positive
//! frames of the state plus a sampled, replacement-free draw of negatives.
//!
//! Numerics: optimization runs on f64 copies of the f32 weights and demotes
//! once at the end.  That keeps analytic gradients within 1e-4 of central
//! differences at epsilon 1e-4, which f32 arithmetic cannot do.  Inference is
//! untouched f32.
//!
//! Training embeds every frame independently (memory layers see only the
//! current frame).  With the identity memory initialization this equals the
//! streaming embedding; when memory taps are trained jointly, calibration on
//! dev utterances (which uses streaming context) absorbs the shift.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{read_frames, FeatureFrame};
use crate::nnet::{Activation, EmbedSession, EmbeddingNet, Layer, ModelBundle, TailNet};

pub const DEFAULT_SCALE_POS: f64 = 4.0;
pub const DEFAULT_NEG_POS_RATIO: f64 = 1.0;

/// Relative gradient errors are measured against
/// `max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)` so near-zero gradients are
/// compared on an absolute scale instead of amplifying rounding noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// One labeled frame: the feature vector and the state it is aligned to.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample {
    pub frame: FeatureFrame,
    pub state: u32,
}

/// A dev/train utterance: frames plus a same-length frame-level alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub frames: Vec<FeatureFrame>,
    pub alignment: Vec<u32>,
}

/// Flatten utterances into the per-frame samples the trainer consumes.
pub fn flatten_utterances(utts: &[Utterance]) -> Vec<AlignedSample> {
    utts.iter()
        .flat_map(|u| {
            u.frames
                .iter()
                .zip(&u.alignment)
                .map(|(frame, &state)| AlignedSample {
                    frame: frame.clone(),
                    state,
                })
        })
        .collect()
}

/// A per-state value with a shared default, e.g. loss scales.
#[derive(Debug, Clone, PartialEq)]
pub struct PerState {
    pub default: f64,
    pub overrides: BTreeMap<u32, f64>,
}

impl PerState {
    pub fn uniform(default: f64) -> Self {
        PerState {
            default,
            overrides: BTreeMap::new(),
        }
    }

    pub fn get(&self, state: u32) -> f64 {
        self.overrides.get(&state).copied().unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scale_pos: PerState,
    pub neg_pos_ratio: PerState,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub optimizer: Optimizer,
    /// Update the shared embedding alongside the tails.  Joint updates are
    /// sequenced round-robin over states within each epoch, single-threaded,
    /// because the embedding is shared mutable state.
    pub train_embedding: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scale_pos: PerState::uniform(DEFAULT_SCALE_POS),
            neg_pos_ratio: PerState::uniform(DEFAULT_NEG_POS_RATIO),
            learning_rate: 0.1,
            epochs: 40,
            batch_size: 32,
            rng_seed: 0,
            optimizer: Optimizer::Sgd,
            train_embedding: false,
        }
    }
}

/// Mean per-epoch loss for every state, in epoch order.  Losses are measured
/// as each batch is visited (before its update), the usual running loss.
pub type LossTrace = BTreeMap<u32, Vec<f64>>;

/// Squared-error loss for one sigmoid output: negatives pay `o^2`, positives
/// pay `(o - 1)^2` scaled by `scale_pos`.
pub fn state_loss(output: f64, positive: bool, scale_pos: f64) -> f64 {
    if positive {
        let d = output - 1.0;
        d * d * scale_pos
    } else {
        output * output
    }
}

fn d_state_loss(output: f64, positive: bool, scale_pos: f64) -> f64 {
    if positive {
        2.0 * (output - 1.0) * scale_pos
    } else {
        2.0 * output
    }
}

/// One epoch's sample plan for a state: all positive frames plus
/// `round(ratio * positives)` negatives drawn without replacement (clamped to
/// the negatives available), shuffled together.  Entries are
/// (dataset index, is_positive).
pub fn sample_batch(
    dataset: &[AlignedSample],
    state: u32,
    neg_pos_ratio: f64,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, bool)>> {
    if !(neg_pos_ratio >= 0.0) {
        return Err(Error::Config(format!(
            "neg_pos_ratio must be non-negative, got {neg_pos_ratio}"
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, s) in dataset.iter().enumerate() {
        if s.state == state {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    if pos.is_empty() {
        return Err(Error::EmptyClass { state });
    }
    let want = ((neg_pos_ratio * pos.len() as f64).round() as usize).min(neg.len());
    let mut plan: Vec<(usize, bool)> = pos.into_iter().map(|i| (i, true)).collect();
    for chosen in rand::seq::index::sample(rng, neg.len(), want) {
        plan.push((neg[chosen], false));
    }
    plan.shuffle(rng);
    Ok(plan)
}

// ---------------------------------------------------------------------------
// f64 training representation: every network is a layer-shape description
// plus one flat parameter vector, which makes optimizers and finite
// differences uniform.

#[derive(Debug, Clone, Copy)]
enum NodeSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        act: Activation,
    },
    Memory {
        dim: usize,
        taps: usize,
    },
}

impl NodeSpec {
    fn param_count(&self) -> usize {
        match *self {
            NodeSpec::Dense { in_dim, out_dim, .. } => out_dim * (in_dim + 1),
            NodeSpec::Memory { dim, taps } => dim * taps,
        }
    }
}

#[derive(Debug, Clone)]
struct FlatNet {
    nodes: Vec<NodeSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Per-node forward records needed by backward.
#[derive(Debug, Default, Clone)]
struct NodeCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    post: Vec<f64>,
}

fn act_apply(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Identity => x,
    }
}

fn act_derivative(act: Activation, pre: f64, post: f64) -> f64 {
    match act {
        Activation::Relu => {
            if pre > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => post * (1.0 - post),
        Activation::Identity => 1.0,
    }
}

impl FlatNet {
    fn from_nodes(nodes: Vec<NodeSpec>) -> Self {
        let mut offsets = Vec::with_capacity(nodes.len());
        let mut total = 0;
        for n in &nodes {
            offsets.push(total);
            total += n.param_count();
        }
        FlatNet {
            nodes,
            offsets,
            params: vec![0.0; total],
        }
    }

    fn from_embedding(net: &EmbeddingNet) -> Self {
        let nodes = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => NodeSpec::Dense {
                    in_dim: d.in_dim,
                    out_dim: d.out_dim,
                    act: d.activation,
                },
                Layer::Memory(m) => NodeSpec::Memory {
                    dim: m.dim,
                    taps: m.taps(),
                },
            })
            .collect();
        let mut flat = FlatNet::from_nodes(nodes);
        let mut at = 0;
        for l in &net.layers {
            match l {
                Layer::Dense(d) => {
                    for &w in d.weights.iter().chain(&d.bias) {
                        flat.params[at] = w as f64;
                        at += 1;
                    }
                }
                Layer::Memory(m) => {
                    for tap in &m.coeffs {
                        for &c in tap {
                            flat.params[at] = c as f64;
                            at += 1;
                        }
                    }
                }
            }
        }
        flat
    }

    fn from_tail(tail: &TailNet) -> Self {
        let nodes = tail
            .layers
            .iter()
            .map(|d| NodeSpec::Dense {
                in_dim: d.in_dim,
                out_dim: d.out_dim,
                act: d.activation,
            })
            .collect();
        let mut flat = FlatNet::from_nodes(nodes);
        let mut at = 0;
        for d in &tail.layers {
            for &w in d.weights.iter().chain(&d.bias) {
                flat.params[at] = w as f64;
                at += 1;
            }
        }
        flat
    }

    fn write_embedding(&self, net: &mut EmbeddingNet) {
        let mut at = 0;
        for l in &mut net.layers {
            match l {
                Layer::Dense(d) => {
                    for w in d.weights.iter_mut().chain(d.bias.iter_mut()) {
                        *w = self.params[at] as f32;
                        at += 1;
                    }
                }
                Layer::Memory(m) => {
                    for tap in &mut m.coeffs {
                        for c in tap.iter_mut() {
                            *c = self.params[at] as f32;
                            at += 1;
                        }
                    }
                }
            }
        }
    }

    fn write_tail(&self, tail: &mut TailNet) {
        let mut at = 0;
        for d in &mut tail.layers {
            for w in d.weights.iter_mut().chain(d.bias.iter_mut()) {
                *w = self.params[at] as f32;
                at += 1;
            }
        }
    }

    /// Single-frame forward.  Memory nodes see zero history, so only tap 0
    /// contributes.  The final sigmoid is NOT clamped here: training needs the
    /// smooth value, clamping is an inference-time guard.
    fn forward(&self, input: &[f64], caches: &mut Vec<NodeCache>) -> Vec<f64> {
        caches.clear();
        let mut x = input.to_vec();
        for (node, &off) in self.nodes.iter().zip(&self.offsets) {
            let mut cache = NodeCache {
                input: x,
                ..NodeCache::default()
            };
            match *node {
                NodeSpec::Dense { in_dim, out_dim, act } => {
                    let w = &self.params[off..off + out_dim * in_dim];
                    let b = &self.params[off + out_dim * in_dim..off + out_dim * (in_dim + 1)];
                    let mut pre = vec![0.0; out_dim];
                    for o in 0..out_dim {
                        let mut acc = b[o];
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        for (wi, xi) in row.iter().zip(&cache.input) {
                            acc += wi * xi;
                        }
                        pre[o] = acc;
                    }
                    cache.post = pre.iter().map(|&p| act_apply(act, p)).collect();
                    cache.pre = pre;
                }
                NodeSpec::Memory { dim, .. } => {
                    let c0 = &self.params[off..off + dim];
                    cache.post = c0.iter().zip(&cache.input).map(|(c, x)| c * x).collect();
                }
            }
            x = cache.post.clone();
            caches.push(cache);
        }
        x
    }

    /// Backward pass: accumulates parameter gradients into `grads` (same
    /// layout as `params`) and returns the gradient w.r.t. the net input.
    fn backward(&self, caches: &[NodeCache], d_output: Vec<f64>, grads: &mut [f64]) -> Vec<f64> {
        let mut d_out = d_output;
        for ((node, &off), cache) in self.nodes.iter().zip(&self.offsets).zip(caches).rev() {
            match *node {
                NodeSpec::Dense { in_dim, out_dim, act } => {
                    let w = &self.params[off..off + out_dim * in_dim];
                    let mut d_in = vec![0.0; in_dim];
                    for o in 0..out_dim {
                        let d_pre = d_out[o] * act_derivative(act, cache.pre[o], cache.post[o]);
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        let g_row = &mut grads[off + o * in_dim..off + (o + 1) * in_dim];
                        for i in 0..in_dim {
                            g_row[i] += d_pre * cache.input[i];
                            d_in[i] += d_pre * row[i];
                        }
                        grads[off + out_dim * in_dim + o] += d_pre;
                    }
                    d_out = d_in;
                }
                NodeSpec::Memory { dim, .. } => {
                    // Single-frame history: only tap 0 touched the input, so
                    // later taps keep zero gradient.
                    let c0 = &self.params[off..off + dim];
                    let mut d_in = vec![0.0; dim];
                    for d in 0..dim {
                        grads[off + d] += d_out[d] * cache.input[d];
                        d_in[d] = c0[d] * d_out[d];
                    }
                    d_out = d_in;
                }
            }
        }
        d_out
    }
}

#[derive(Debug, Clone)]
struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptState {
    fn new(len: usize) -> Self {
        OptState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, opt: &Optimizer) {
        match *opt {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= lr * mhat / (vhat.sqrt() + epsilon);
                }
            }
        }
    }
}

/// Forward a sample through optional embedding + tail, returning the sigmoid
/// output and filling the caches.
fn net_output(
    emb: Option<&FlatNet>,
    tail: &FlatNet,
    input: &[f64],
    emb_caches: &mut Vec<NodeCache>,
    tail_caches: &mut Vec<NodeCache>,
) -> f64 {
    let x = match emb {
        Some(e) => e.forward(input, emb_caches),
        None => input.to_vec(),
    };
    tail.forward(&x, tail_caches)[0]
}

fn widen(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

fn validate_config(config: &TrainConfig) -> Result<()> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(config.learning_rate >= 0.0) || !config.learning_rate.is_finite() {
        return Err(Error::Config(format!(
            "learning_rate must be finite and non-negative, got {}",
            config.learning_rate
        )));
    }
    Ok(())
}

fn validate_dataset(dataset: &[AlignedSample], bundle: &ModelBundle) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let want_dim = bundle.embedding.input_dim();
    for s in dataset {
        if s.state >= bundle.num_states() {
            return Err(Error::UnknownState { state: s.state });
        }
        if s.frame.values.len() != want_dim {
            return Err(Error::Shape {
                context: format!("training frame {}", s.frame.index),
                expected: want_dim,
                actual: s.frame.values.len(),
            });
        }
    }
    Ok(())
}

/// Train every tail (and with `train_embedding` the shared embedding).
/// Returns the updated bundle and the per-state loss trace.  Deterministic in
/// the seed: per-state work uses independent, state-indexed RNG streams, so
/// the parallel and sequential builds produce bit-identical results.
pub fn train(
    dataset: &[AlignedSample],
    bundle: &ModelBundle,
    config: &TrainConfig,
) -> Result<(ModelBundle, LossTrace)> {
    validate_config(config)?;
    validate_dataset(dataset, bundle)?;
    if config.train_embedding {
        train_joint(dataset, bundle, config)
    } else {
        train_frozen(dataset, bundle, config)
    }
}

fn train_frozen(
    dataset: &[AlignedSample],
    bundle: &ModelBundle,
    config: &TrainConfig,
) -> Result<(ModelBundle, LossTrace)> {
    // The embedding is fixed, so embed every frame once in inference f32 and
    // reuse across states and epochs.
    let embedded: Vec<Vec<f64>> = dataset
        .iter()
        .map(|s| {
            let mut session = EmbedSession::new(&bundle.embedding);
            Ok(widen(&session.forward(&s.frame.values)?))
        })
        .collect::<Result<_>>()?;
    let states: Vec<u32> = (0..bundle.num_states()).collect();
    let trained = crate::parallel::try_map_slice(&states, |&state| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(state as u64 + 1);
        let mut tail = bundle.tail(state)?.clone();
        let mut flat = FlatNet::from_tail(&tail);
        let mut opt = OptState::new(flat.params.len());
        let mut grads = vec![0.0; flat.params.len()];
        let mut caches = Vec::new();
        let mut unused = Vec::new();
        let mut trace = Vec::with_capacity(config.epochs);
        let scale = config.scale_pos.get(state);
        let ratio = config.neg_pos_ratio.get(state);
        for epoch in 0..config.epochs {
            let plan = sample_batch(dataset, state, ratio, &mut rng)?;
            let mut epoch_loss = 0.0;
            for chunk in plan.chunks(config.batch_size) {
                grads.iter_mut().for_each(|g| *g = 0.0);
                for &(idx, positive) in chunk {
                    let o = net_output(None, &flat, &embedded[idx], &mut unused, &mut caches);
                    epoch_loss += state_loss(o, positive, scale);
                    let d = d_state_loss(o, positive, scale) / chunk.len() as f64;
                    flat.backward(&caches, vec![d], &mut grads);
                }
                opt.step(&mut flat.params, &grads, config.learning_rate, &config.optimizer);
            }
            let mean = epoch_loss / plan.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Diverged { epoch, state });
            }
            trace.push(mean);
        }
        flat.write_tail(&mut tail);
        Ok((tail, trace))
    })?;
    let mut tails = Vec::with_capacity(trained.len());
    let mut traces = LossTrace::new();
    for (state, (tail, trace)) in states.iter().zip(trained) {
        tails.push(tail);
        traces.insert(*state, trace);
    }
    let out = ModelBundle::new(
        bundle.embedding.clone(),
        tails,
        bundle.feature_config.clone(),
    )?;
    Ok((out, traces))
}

fn train_joint(
    dataset: &[AlignedSample],
    bundle: &ModelBundle,
    config: &TrainConfig,
) -> Result<(ModelBundle, LossTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut emb = FlatNet::from_embedding(&bundle.embedding);
    let mut tails: Vec<FlatNet> = bundle.tails.iter().map(FlatNet::from_tail).collect();
    let mut emb_opt = OptState::new(emb.params.len());
    let mut tail_opts: Vec<OptState> = tails
        .iter()
        .map(|t| OptState::new(t.params.len()))
        .collect();
    let mut emb_grads = vec![0.0; emb.params.len()];
    let mut emb_caches = Vec::new();
    let mut tail_caches = Vec::new();
    let mut traces: LossTrace = (0..bundle.num_states()).map(|s| (s, Vec::new())).collect();
    let inputs: Vec<Vec<f64>> = dataset.iter().map(|s| widen(&s.frame.values)).collect();

    for epoch in 0..config.epochs {
        for state in 0..bundle.num_states() {
            let flat = &mut tails[state as usize];
            let mut grads = vec![0.0; flat.params.len()];
            let scale = config.scale_pos.get(state);
            let plan = sample_batch(dataset, state, config.neg_pos_ratio.get(state), &mut rng)?;
            let mut epoch_loss = 0.0;
            for chunk in plan.chunks(config.batch_size) {
                grads.iter_mut().for_each(|g| *g = 0.0);
                emb_grads.iter_mut().for_each(|g| *g = 0.0);
                for &(idx, positive) in chunk {
                    let o = net_output(
                        Some(&emb),
                        flat,
                        &inputs[idx],
                        &mut emb_caches,
                        &mut tail_caches,
                    );
                    epoch_loss += state_loss(o, positive, scale);
                    let d = d_state_loss(o, positive, scale) / chunk.len() as f64;
                    let d_emb_out = flat.backward(&tail_caches, vec![d], &mut grads);
                    emb.backward(&emb_caches, d_emb_out, &mut emb_grads);
                }
                tail_opts[state as usize].step(
                    &mut flat.params,
                    &grads,
                    config.learning_rate,
                    &config.optimizer,
                );
                emb_opt.step(
                    &mut emb.params,
                    &emb_grads,
                    config.learning_rate,
                    &config.optimizer,
                );
            }
            let mean = epoch_loss / plan.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Diverged { epoch, state });
            }
            traces.get_mut(&state).unwrap().push(mean);
        }
    }

    let mut embedding = bundle.embedding.clone();
    emb.write_embedding(&mut embedding);
    let mut new_tails = bundle.tails.clone();
    for (flat, tail) in tails.iter().zip(&mut new_tails) {
        flat.write_tail(tail);
    }
    let out = ModelBundle::new(embedding, new_tails, bundle.feature_config.clone())?;
    Ok((out, traces))
}

/// Compare analytic gradients against central differences for one sample,
/// across every tail and embedding parameter.  Returns the maximum relative
/// error `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn gradient_check(
    bundle: &ModelBundle,
    sample: &AlignedSample,
    state: u32,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let tail = bundle.tail(state)?;
    let mut emb = FlatNet::from_embedding(&bundle.embedding);
    let mut flat = FlatNet::from_tail(tail);
    let input = widen(&sample.frame.values);
    if input.len() != bundle.embedding.input_dim() {
        return Err(Error::Shape {
            context: "gradient-check frame".into(),
            expected: bundle.embedding.input_dim(),
            actual: input.len(),
        });
    }
    let positive = sample.state == state;
    let scale = DEFAULT_SCALE_POS;

    let mut emb_caches = Vec::new();
    let mut tail_caches = Vec::new();
    let o = net_output(Some(&emb), &flat, &input, &mut emb_caches, &mut tail_caches);
    let mut tail_grads = vec![0.0; flat.params.len()];
    let mut emb_grads = vec![0.0; emb.params.len()];
    let d = d_state_loss(o, positive, scale);
    let d_emb_out = flat.backward(&tail_caches, vec![d], &mut tail_grads);
    emb.backward(&emb_caches, d_emb_out, &mut emb_grads);

    let mut worst = 0.0f64;
    let mut check = |net_is_tail: bool, analytic: Vec<f64>, emb: &mut FlatNet, flat: &mut FlatNet| {
        let count = if net_is_tail {
            flat.params.len()
        } else {
            emb.params.len()
        };
        for i in 0..count {
            let loss_at = |v: f64, emb: &mut FlatNet, flat: &mut FlatNet| {
                let slot = if net_is_tail {
                    &mut flat.params[i]
                } else {
                    &mut emb.params[i]
                };
                let saved = *slot;
                *slot = v;
                let mut c1 = Vec::new();
                let mut c2 = Vec::new();
                let o = net_output(Some(&*emb), &*flat, &input, &mut c1, &mut c2);
                let slot = if net_is_tail {
                    &mut flat.params[i]
                } else {
                    &mut emb.params[i]
                };
                *slot = saved;
                state_loss(o, positive, scale)
            };
            let center = if net_is_tail {
                flat.params[i]
            } else {
                emb.params[i]
            };
            let hi = loss_at(center + epsilon, emb, flat);
            let lo = loss_at(center - epsilon, emb, flat);
            let numeric = (hi - lo) / (2.0 * epsilon);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > worst {
                worst = rel;
            }
        }
    };
    check(true, tail_grads, &mut emb, &mut flat);
    check(false, emb_grads, &mut emb, &mut flat);
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Dataset files.

/// Load a manifest of `utt_id features_path alignment_path` lines (blank
/// lines and `#` comments skipped; paths relative to the manifest).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut utts = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let (utt_id, feats, ali) = match (tok.next(), tok.next(), tok.next(), tok.next()) {
            (Some(u), Some(f), Some(a), None) => (u, f, a),
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: expected 'utt_id feats_path ali_path'", ln + 1),
                ))
            }
        };
        let frames = read_frames(base.join(feats), None)?;
        let alignment = load_alignment(&base.join(ali), utt_id, frames.len())?;
        utts.push(Utterance {
            utt_id: utt_id.to_string(),
            frames,
            alignment,
        });
    }
    Ok(utts)
}

/// Load one utterance's alignment: `utt_id frame_index state` per line, frame
/// indices consecutive from zero and covering every frame.
pub fn load_alignment(path: &Path, utt_id: &str, num_frames: usize) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut alignment = Vec::with_capacity(num_frames);
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let (u, frame, state) = match (tok.next(), tok.next(), tok.next(), tok.next()) {
            (Some(u), Some(f), Some(s), None) => (u, f, s),
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: expected 'utt_id frame state'", ln + 1),
                ))
            }
        };
        if u != utt_id {
            return Err(Error::format(
                path,
                format!("line {}: utterance '{u}' does not match manifest entry '{utt_id}'", ln + 1),
            ));
        }
        let frame: usize = frame
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad frame index '{frame}'", ln + 1)))?;
        if frame != alignment.len() {
            return Err(Error::format(
                path,
                format!(
                    "line {}: frame {frame} out of order, expected {}",
                    ln + 1,
                    alignment.len()
                ),
            ));
        }
        let state: u32 = state
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad state '{state}'", ln + 1)))?;
        alignment.push(state);
    }
    if alignment.len() != num_frames {
        return Err(Error::format(
            path,
            format!(
                "alignment covers {} frames but features have {}",
                alignment.len(),
                num_frames
            ),
        ));
    }
    Ok(alignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;
    use crate::nnet::DenseLayer;
    use proptest::prelude::*;

    fn frame(values: Vec<f32>, index: usize) -> FeatureFrame {
        FeatureFrame { values, index }
    }

    fn identity_dense(dim: usize) -> DenseLayer {
        let mut d = DenseLayer::zeros(dim, dim, Activation::Identity);
        for i in 0..dim {
            d.weights[i * dim + i] = 1.0;
        }
        d
    }

    /// Bundle whose embedding passes features straight through, with one
    /// zero-initialized sigmoid tail per state.
    fn passthrough_bundle(dim: usize, num_states: u32) -> ModelBundle {
        let embedding = EmbeddingNet::new(vec![Layer::Dense(identity_dense(dim))]).unwrap();
        let tails = (0..num_states)
            .map(|s| TailNet::new(s, vec![DenseLayer::zeros(dim, 1, Activation::Sigmoid)]).unwrap())
            .collect();
        ModelBundle::new(embedding, tails, FeatureConfig::default()).unwrap()
    }

    fn smooth_random_bundle(dim: usize, num_states: u32, seed: u64) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = EmbeddingNet::new(vec![
            Layer::Dense(DenseLayer::random(dim, 6, Activation::Sigmoid, &mut rng)),
            Layer::Memory(crate::nnet::MemoryLayer::identity(6, 3)),
            Layer::Dense(DenseLayer::random(6, 5, Activation::Sigmoid, &mut rng)),
        ])
        .unwrap();
        let tails = (0..num_states)
            .map(|s| TailNet::pyramid(s, &[5, 4], &mut rng).unwrap())
            .collect();
        ModelBundle::new(embedding, tails, FeatureConfig::default()).unwrap()
    }

    #[test]
    fn loss_matches_hand_values() {
        assert_eq!(state_loss(0.5, false, 4.0), 0.25);
        assert_eq!(state_loss(0.25, true, 4.0), 2.25);
        assert_eq!(state_loss(1.0, true, 7.0), 0.0);
        assert_eq!(state_loss(0.0, false, 9.0), 0.0);
    }

    #[test]
    fn batch_keeps_all_positives_and_ratioed_negatives() {
        let dataset: Vec<AlignedSample> = (0..24)
            .map(|i| AlignedSample {
                frame: frame(vec![i as f32], i),
                state: if i < 4 { 0 } else { 1 },
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let plan = sample_batch(&dataset, 0, 3.0, &mut rng).unwrap();
        assert_eq!(plan.len(), 16);
        assert_eq!(plan.iter().filter(|(_, p)| *p).count(), 4);
        let mut indices: Vec<usize> = plan.iter().map(|(i, _)| *i).collect();
        indices.sort_unstable();
        indices.dedup();
        assert_eq!(indices.len(), 16, "negatives drawn with replacement");
        for &(i, positive) in &plan {
            assert_eq!(positive, dataset[i].state == 0);
        }
    }

    #[test]
    fn batch_without_positives_names_the_state() {
        let dataset = vec![AlignedSample {
            frame: frame(vec![0.0], 0),
            state: 0,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match sample_batch(&dataset, 2, 1.0, &mut rng) {
            Err(Error::EmptyClass { state: 2 }) => {}
            other => panic!("expected empty-class error, got {other:?}"),
        }
    }

    #[test]
    fn batch_clamps_to_available_negatives() {
        let dataset: Vec<AlignedSample> = (0..7)
            .map(|i| AlignedSample {
                frame: frame(vec![0.0], i),
                state: if i < 5 { 0 } else { 1 },
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = sample_batch(&dataset, 0, 2.0, &mut rng).unwrap();
        assert_eq!(plan.len(), 7); // 5 positives + only 2 negatives exist
    }

    #[test]
    fn zero_tail_bias_gradient_is_exactly_one_quarter() {
        // Zero weights give output 0.5; for a negative sample the chain is
        // dL/do = 2*0.5 = 1 and do/dbias = 0.25, both exact in f64.
        let bundle = passthrough_bundle(2, 1);
        let flat = FlatNet::from_tail(&bundle.tails[0]);
        let mut caches = Vec::new();
        let o = flat.forward(&[0.3, -0.7], &mut caches);
        assert_eq!(o[0], 0.5);
        let mut grads = vec![0.0; flat.params.len()];
        flat.backward(&caches, vec![d_state_loss(0.5, false, 4.0)], &mut grads);
        let bias_grad = grads[flat.params.len() - 1];
        assert_eq!(bias_grad, 0.25);
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let bundle = smooth_random_bundle(7, 2, 11);
        let sample = AlignedSample {
            frame: frame(vec![0.4, -0.2, 0.9, 0.1, -0.5, 0.3, 0.7], 0),
            state: 0,
        };
        let err = gradient_check(&bundle, &sample, 0, 1e-4).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
        let err_neg = gradient_check(&bundle, &sample, 1, 1e-4).unwrap();
        assert!(err_neg <= 1e-4, "max relative error {err_neg}");
    }

    #[test]
    fn gradient_error_does_not_grow_as_epsilon_shrinks() {
        let bundle = smooth_random_bundle(5, 1, 3);
        let sample = AlignedSample {
            frame: frame(vec![0.2, 0.8, -0.3, 0.5, -0.9], 0),
            state: 0,
        };
        let coarse = gradient_check(&bundle, &sample, 0, 1e-2).unwrap();
        let fine = gradient_check(&bundle, &sample, 0, 1e-4).unwrap();
        assert!(fine <= coarse + 1e-9, "fine {fine} vs coarse {coarse}");
    }

    #[test]
    fn relu_backward_matches_differences_away_from_the_kink() {
        // A hand-laid relu layer where every pre-activation is far from zero,
        // so central differences are valid.
        let mut dense = DenseLayer::zeros(2, 2, Activation::Relu);
        dense.weights = vec![1.0, 0.5, -0.8, 0.3];
        dense.bias = vec![0.5, -0.4];
        let embedding = EmbeddingNet::new(vec![Layer::Dense(dense)]).unwrap();
        let tails = vec![TailNet::new(
            0,
            vec![DenseLayer {
                in_dim: 2,
                out_dim: 1,
                weights: vec![0.7, -0.6],
                bias: vec![0.1],
                activation: Activation::Sigmoid,
            }],
        )
        .unwrap()];
        let bundle = ModelBundle::new(embedding, tails, FeatureConfig::default()).unwrap();
        let sample = AlignedSample {
            frame: frame(vec![1.0, 2.0], 0),
            state: 0,
        };
        // pre-activations: 1*1 + 0.5*2 + 0.5 = 2.5 and -0.8 + 0.6 - 0.4 = -0.6
        let err = gradient_check(&bundle, &sample, 0, 1e-4).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    fn separable_dataset(n_per_state: usize) -> Vec<AlignedSample> {
        let mut samples = Vec::new();
        for i in 0..n_per_state {
            let jitter = (i % 5) as f32 * 0.02;
            samples.push(AlignedSample {
                frame: frame(vec![1.0 + jitter, 0.0, jitter, 0.0], samples.len()),
                state: 0,
            });
            samples.push(AlignedSample {
                frame: frame(vec![0.0, 1.0 - jitter, 0.0, jitter], samples.len()),
                state: 1,
            });
        }
        samples
    }

    #[test]
    fn training_separates_two_linearly_separable_states() {
        let bundle = passthrough_bundle(4, 2);
        let dataset = separable_dataset(30);
        let config = TrainConfig {
            learning_rate: 0.5,
            epochs: 200,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (trained, trace) = train(&dataset, &bundle, &config).unwrap();
        for state in 0..2u32 {
            let losses = &trace[&state];
            assert_eq!(losses.len(), 200);
            assert!(
                losses[199] < 0.1,
                "state {state} final loss {}",
                losses[199]
            );
            assert!(
                losses[199] < losses[0],
                "state {state} loss did not decrease"
            );
        }
        // Spot-check separation on the raw tail outputs.
        let tail0 = trained.tail(0).unwrap();
        let on = crate::nnet::tail_forward(&[1.0, 0.0, 0.0, 0.0], tail0).unwrap();
        let off = crate::nnet::tail_forward(&[0.0, 1.0, 0.0, 0.0], tail0).unwrap();
        assert!(on > 0.8, "positive response {on}");
        assert!(off < 0.2, "negative response {off}");
    }

    #[test]
    fn joint_training_moves_the_embedding() {
        let bundle = passthrough_bundle(4, 2);
        let dataset = separable_dataset(10);
        let config = TrainConfig {
            learning_rate: 0.3,
            epochs: 20,
            batch_size: 8,
            train_embedding: true,
            ..TrainConfig::default()
        };
        let (trained, trace) = train(&dataset, &bundle, &config).unwrap();
        assert_ne!(trained.embedding, bundle.embedding, "embedding unchanged");
        assert_eq!(trace[&0].len(), 20);
        let last = trace[&0][19];
        assert!(last.is_finite() && last < trace[&0][0]);
    }

    #[test]
    fn adam_converges_on_a_single_positive() {
        let bundle = passthrough_bundle(1, 1);
        let dataset = vec![AlignedSample {
            frame: frame(vec![1.0], 0),
            state: 0,
        }];
        let config = TrainConfig {
            learning_rate: 0.05,
            epochs: 300,
            batch_size: 4,
            optimizer: Optimizer::adam(),
            neg_pos_ratio: PerState::uniform(0.0),
            ..TrainConfig::default()
        };
        let (trained, trace) = train(&dataset, &bundle, &config).unwrap();
        let out = crate::nnet::tail_forward(&[1.0], trained.tail(0).unwrap()).unwrap();
        assert!(out > 0.9, "sigmoid output {out}");
        assert!(trace[&0][299] < trace[&0][0]);
    }

    #[test]
    fn zero_learning_rate_keeps_weights_bit_identical() {
        let bundle = smooth_random_bundle(4, 2, 5);
        let dataset = separable_dataset(6);
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        let (same, _) = train(&dataset, &bundle, &config).unwrap();
        assert_eq!(same, bundle);
    }

    #[test]
    fn same_seed_reproduces_training_bit_for_bit() {
        let bundle = smooth_random_bundle(4, 2, 9);
        let dataset = separable_dataset(8);
        let config = TrainConfig {
            epochs: 5,
            rng_seed: 42,
            ..TrainConfig::default()
        };
        let (a, trace_a) = train(&dataset, &bundle, &config).unwrap();
        let (b, trace_b) = train(&dataset, &bundle, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace_a, trace_b);
    }

    #[test]
    fn non_finite_loss_reports_epoch_and_state() {
        // Infinite tail weights against a zero embedding output produce NaN
        // on the first forward pass.
        let embedding =
            EmbeddingNet::new(vec![Layer::Dense(DenseLayer::zeros(2, 2, Activation::Identity))])
                .unwrap();
        let tails = vec![TailNet::new(
            0,
            vec![DenseLayer {
                in_dim: 2,
                out_dim: 1,
                weights: vec![f32::INFINITY, f32::INFINITY],
                bias: vec![0.0],
                activation: Activation::Sigmoid,
            }],
        )
        .unwrap()];
        let bundle = ModelBundle::new(embedding, tails, FeatureConfig::default()).unwrap();
        let dataset = vec![
            AlignedSample {
                frame: frame(vec![1.0, 1.0], 0),
                state: 0,
            },
            AlignedSample {
                frame: frame(vec![-1.0, 1.0], 1),
                state: 0,
            },
        ];
        match train(&dataset, &bundle, &TrainConfig::default()) {
            Err(Error::Diverged { epoch: 0, state: 0 }) => {}
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trips_features_and_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let feats = vec![frame(vec![0.5, -1.5], 0), frame(vec![2.0, 0.25], 1)];
        crate::features::write_frames(dir.path().join("u0.btfe"), &feats).unwrap();
        fs::write(dir.path().join("u0.ali"), "u0 0 1\nu0 1 0\n").unwrap();
        fs::write(
            dir.path().join("manifest.txt"),
            "# comment\nu0 u0.btfe u0.ali\n",
        )
        .unwrap();
        let utts = load_manifest(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(utts.len(), 1);
        assert_eq!(utts[0].utt_id, "u0");
        assert_eq!(utts[0].frames, feats);
        assert_eq!(utts[0].alignment, vec![1, 0]);
        let flat = flatten_utterances(&utts);
        assert_eq!(flat.len(), 2);
        assert_eq!(flat[0].state, 1);
    }

    #[test]
    fn alignment_gaps_and_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let feats = vec![frame(vec![0.0], 0), frame(vec![1.0], 1)];
        crate::features::write_frames(dir.path().join("u0.btfe"), &feats).unwrap();
        fs::write(dir.path().join("manifest.txt"), "u0 u0.btfe u0.ali\n").unwrap();

        fs::write(dir.path().join("u0.ali"), "u0 0 1\nu0 2 0\n").unwrap();
        let err = load_manifest(dir.path().join("manifest.txt")).unwrap_err();
        assert!(err.to_string().contains("out of order"), "{err}");

        fs::write(dir.path().join("u0.ali"), "u0 0 1\n").unwrap();
        let err = load_manifest(dir.path().join("manifest.txt")).unwrap_err();
        assert!(err.to_string().contains("covers 1 frames"), "{err}");

        fs::write(dir.path().join("u0.ali"), "wrong 0 1\nwrong 1 0\n").unwrap();
        let err = load_manifest(dir.path().join("manifest.txt")).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }

    proptest! {
        /// Positive loss scales linearly in the scale; negative loss ignores it.
        #[test]
        fn loss_scaling_behaves(o in 0.0f64..1.0, s in 0.1f64..16.0) {
            let unit = state_loss(o, true, 1.0);
            prop_assert!((state_loss(o, true, s) - s * unit).abs() < 1e-12);
            prop_assert_eq!(state_loss(o, false, s), state_loss(o, false, 1.0));
        }

        /// Plan size is positives + min(round(ratio * positives), negatives).
        #[test]
        fn plan_size_follows_the_ratio(
            pos in 1usize..20,
            neg in 0usize..40,
            ratio in 0.0f64..4.0,
            seed in 0u64..1000,
        ) {
            let dataset: Vec<AlignedSample> = (0..pos + neg)
                .map(|i| AlignedSample {
                    frame: FeatureFrame { values: vec![0.0], index: i },
                    state: if i < pos { 0 } else { 1 },
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = sample_batch(&dataset, 0, ratio, &mut rng).unwrap();
            let want_neg = ((ratio * pos as f64).round() as usize).min(neg);
            prop_assert_eq!(plan.len(), pos + want_neg);
            prop_assert_eq!(plan.iter().filter(|(_, p)| *p).count(), pos);
        }
    }
}
