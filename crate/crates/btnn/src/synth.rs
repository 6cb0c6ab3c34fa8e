//! Deterministic synthetic corpus generator: per-state Gaussian feature
//! clouds arranged into keyword and non-keyword utterances, with frame-level
//! alignments, a training manifest, a reference manifest, and a lexicon.
//! Makes the whole pipeline testable at desk scale without audio.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::eval::{PositiveRef, ReferenceSet};
use crate::features::FeatureFrame;
use crate::graph::Lexicon;
use crate::training::Utterance;

/// Nominal duration of one synthetic frame, matching the default 10 ms
/// feature hop; used to convert negative audio length into hours.
pub const FRAME_SECONDS: f64 = 0.01;

/// Shape of a synthetic corpus.  Even-numbered utterances contain exactly
/// one keyword (cycling through `keyword_state_seqs`); odd-numbered ones are
/// keyword-free state sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_states: u32,
    pub feature_dim: usize,
    pub frames_per_state: usize,
    pub num_utterances: usize,
    pub keyword_state_seqs: Vec<Vec<u32>>,
    pub noise_std: f32,
    pub rng_seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0
            || self.feature_dim == 0
            || self.frames_per_state == 0
            || self.num_utterances == 0
        {
            return Err(Error::Config(
                "num_states, feature_dim, frames_per_state and num_utterances must all be ≥ 1"
                    .into(),
            ));
        }
        if self.keyword_state_seqs.is_empty() {
            return Err(Error::Config("at least one keyword is required".into()));
        }
        for (k, seq) in self.keyword_state_seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Config(format!("keyword {k} has no states")));
            }
            if let Some(&s) = seq.iter().find(|&&s| s >= self.num_states) {
                return Err(Error::UnknownState { state: s });
            }
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "noise_std must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Keyword names are positional: `kw0`, `kw1`, …
    pub fn keyword_name(index: usize) -> String {
        format!("kw{index}")
    }
}

/// A generated corpus held in memory: the utterances with alignments, which
/// keyword (if any) each contains and where, and the per-state mean vectors
/// the frames were drawn around.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub utterances: Vec<Utterance>,
    /// Parallel to `utterances`: keyword index and frame span for positives.
    pub keyword_spans: Vec<Option<(usize, (u64, u64))>>,
    pub state_means: Vec<Vec<f32>>,
    pub num_keywords: usize,
}

impl SynthDataset {
    pub fn references(&self) -> Result<ReferenceSet> {
        let mut positives = Vec::new();
        let mut negative_frames = 0usize;
        for (utt, span) in self.utterances.iter().zip(&self.keyword_spans) {
            match span {
                Some((kw, (start, end))) => positives.push(PositiveRef {
                    utt_id: utt.utt_id.clone(),
                    keyword: SynthSpec::keyword_name(*kw),
                    span: Some((*start, *end)),
                }),
                None => negative_frames += utt.frames.len(),
            }
        }
        let hours = negative_frames as f64 * FRAME_SECONDS / 3600.0;
        ReferenceSet::new(positives, hours)
    }

    pub fn lexicon(&self, spec: &SynthSpec) -> Lexicon {
        let mut lex = Lexicon::new();
        for (k, seq) in spec.keyword_state_seqs.iter().enumerate() {
            lex.insert(&SynthSpec::keyword_name(k), seq.clone());
        }
        lex
    }
}

/// True when `needle` occurs as a contiguous run inside `haystack`.
fn contains_subsequence(haystack: &[u32], needle: &[u32]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Draw a keyword-free segment sequence of the requested length.
fn draw_negative_sequence(
    rng: &mut ChaCha8Rng,
    num_states: u32,
    len: usize,
    keywords: &[Vec<u32>],
) -> Result<Vec<u32>> {
    for _ in 0..1000 {
        let seq: Vec<u32> = (0..len).map(|_| rng.random_range(0..num_states)).collect();
        if keywords.iter().all(|kw| !contains_subsequence(&seq, kw)) {
            return Ok(seq);
        }
    }
    Err(Error::Config(
        "could not draw a keyword-free state sequence; \
         the keywords cover too much of the state space"
            .into(),
    ))
}

/// Generate the corpus in memory.  Fully deterministic for a given spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let state_means: Vec<Vec<f32>> = (0..spec.num_states)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect()
        })
        .collect();

    let max_kw_len = spec
        .keyword_state_seqs
        .iter()
        .map(Vec::len)
        .max()
        .expect("validated non-empty");
    let id_width = (spec.num_utterances.max(2) - 1).to_string().len().max(4);

    let mut utterances = Vec::with_capacity(spec.num_utterances);
    let mut keyword_spans = Vec::with_capacity(spec.num_utterances);
    for i in 0..spec.num_utterances {
        let (segments, span) = if i % 2 == 0 {
            let kw = (i / 2) % spec.keyword_state_seqs.len();
            let seq = spec.keyword_state_seqs[kw].clone();
            let len = (seq.len() * spec.frames_per_state) as u64;
            (seq, Some((kw, (0, len))))
        } else {
            let seq = draw_negative_sequence(
                &mut rng,
                spec.num_states,
                2 * max_kw_len,
                &spec.keyword_state_seqs,
            )?;
            (seq, None)
        };

        let mut frames = Vec::with_capacity(segments.len() * spec.frames_per_state);
        let mut alignment = Vec::with_capacity(frames.capacity());
        for &state in &segments {
            for _ in 0..spec.frames_per_state {
                let mean = &state_means[state as usize];
                let values: Vec<f32> = mean
                    .iter()
                    .map(|&m| m + spec.noise_std * rng.sample::<f32, _>(StandardNormal))
                    .collect();
                frames.push(FeatureFrame {
                    values,
                    index: alignment.len(),
                });
                alignment.push(state);
            }
        }
        utterances.push(Utterance {
            utt_id: format!("utt{i:0id_width$}"),
            frames,
            alignment,
        });
        keyword_spans.push(span);
    }

    Ok(SynthDataset {
        utterances,
        keyword_spans,
        state_means,
        num_keywords: spec.keyword_state_seqs.len(),
    })
}

/// Write a generated corpus under `dir`: `feats/*.btfe`, `ali/*.ali`, a
/// training `manifest.txt` with paths relative to the manifest, `refs.txt`
/// for scoring, and `lexicon.txt` for enrollment.
pub fn write_dataset(dataset: &SynthDataset, spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let feats_dir = dir.join("feats");
    let ali_dir = dir.join("ali");
    fs::create_dir_all(&feats_dir).map_err(|e| Error::io(&feats_dir, e))?;
    fs::create_dir_all(&ali_dir).map_err(|e| Error::io(&ali_dir, e))?;

    let mut manifest = String::new();
    for utt in &dataset.utterances {
        let feats_rel = format!("feats/{}.btfe", utt.utt_id);
        let ali_rel = format!("ali/{}.ali", utt.utt_id);
        crate::features::write_frames(dir.join(&feats_rel), &utt.frames)?;
        let mut ali = String::new();
        for (frame, state) in utt.alignment.iter().enumerate() {
            ali.push_str(&format!("{} {frame} {state}\n", utt.utt_id));
        }
        let ali_path = dir.join(&ali_rel);
        fs::write(&ali_path, ali).map_err(|e| Error::io(&ali_path, e))?;
        manifest.push_str(&format!("{} {feats_rel} {ali_rel}\n", utt.utt_id));
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    dataset.references()?.save(dir.join("refs.txt"))?;
    dataset.lexicon(spec).save(dir.join("lexicon.txt"))?;
    Ok(())
}

/// Generate and write in one step, returning the in-memory dataset.
pub fn generate_to_dir(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<SynthDataset> {
    let dataset = generate(spec)?;
    write_dataset(&dataset, spec, dir)?;
    Ok(dataset)
}
