//! Log-mel filterbank front end and the binary feature-file format.
//!
//! Audio is framed with a Hamming window, padded to the FFT size, and the
//! power spectrum is pooled through triangular mel filters.  Extraction is
//! streaming-safe: feeding samples in arbitrary chunks yields exactly the
//! frames a one-shot call produces.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// 16-bit PCM samples with their sample rate.
#[derive(Debug, Clone)]
pub struct AudioBuffer {
    pub samples: Vec<i16>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<i16>, sample_rate_hz: u32) -> Self {
        AudioBuffer {
            samples,
            sample_rate_hz,
        }
    }
}

/// Front-end configuration.  `fft_size` must be a power of two at least as
/// large as the frame length in samples; energies below `log_floor` are
/// clamped before the log so silence maps to `ln(log_floor)` instead of
/// negative infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub num_bins: usize,
    pub frame_length_ms: f32,
    pub frame_hop_ms: f32,
    pub fft_size: usize,
    pub mel_low_hz: f32,
    pub mel_high_hz: f32,
    pub log_floor: f32,
    /// Subtract the running mean of each bin (causal, over frames seen so
    /// far).  Off by default so values stay bounded below by `ln(log_floor)`.
    pub mean_norm: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            num_bins: 40,
            frame_length_ms: 25.0,
            frame_hop_ms: 10.0,
            fft_size: 512,
            mel_low_hz: 20.0,
            mel_high_hz: 8000.0,
            log_floor: 1e-10,
            mean_norm: false,
        }
    }
}

impl FeatureConfig {
    pub fn frame_samples(&self, sample_rate_hz: u32) -> usize {
        (self.frame_length_ms * sample_rate_hz as f32 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate_hz: u32) -> usize {
        (self.frame_hop_ms * sample_rate_hz as f32 / 1000.0).round() as usize
    }

    fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let frame = self.frame_samples(sample_rate_hz);
        let hop = self.hop_samples(sample_rate_hz);
        if self.num_bins == 0 {
            return Err(Error::Config("num_bins must be at least 1".into()));
        }
        if frame == 0 || hop == 0 {
            return Err(Error::Config(format!(
                "frame ({} ms) and hop ({} ms) must each span at least one sample",
                self.frame_length_ms, self.frame_hop_ms
            )));
        }
        if hop > frame {
            return Err(Error::Config(format!(
                "hop ({hop} samples) must not exceed frame length ({frame} samples)"
            )));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < frame {
            return Err(Error::Config(format!(
                "fft_size {} must be a power of two >= frame length {frame}",
                self.fft_size
            )));
        }
        if !(self.mel_low_hz >= 0.0 && self.mel_low_hz < self.mel_high_hz) {
            return Err(Error::Config(format!(
                "mel band [{}, {}] is not a valid range",
                self.mel_low_hz, self.mel_high_hz
            )));
        }
        if self.mel_high_hz > sample_rate_hz as f32 / 2.0 {
            return Err(Error::Config(format!(
                "mel_high_hz {} exceeds Nyquist {}",
                self.mel_high_hz,
                sample_rate_hz as f32 / 2.0
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// One feature vector with its ordinal position in the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub values: Vec<f32>,
    pub index: usize,
}

fn hz_to_mel(hz: f32) -> f32 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f32) -> f32 {
    700.0 * (10f32.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters evaluated at FFT bin centre frequencies.
/// Each filter is a (first_bin, weights) pair covering its support.
fn build_filters(cfg: &FeatureConfig, sample_rate_hz: u32) -> Vec<(usize, Vec<f32>)> {
    let nyquist_bins = cfg.fft_size / 2 + 1;
    let hz_per_bin = sample_rate_hz as f32 / cfg.fft_size as f32;
    let mel_low = hz_to_mel(cfg.mel_low_hz);
    let mel_high = hz_to_mel(cfg.mel_high_hz);
    let mel_step = (mel_high - mel_low) / (cfg.num_bins + 1) as f32;
    let edges: Vec<f32> = (0..cfg.num_bins + 2)
        .map(|i| mel_to_hz(mel_low + i as f32 * mel_step))
        .collect();

    (0..cfg.num_bins)
        .map(|m| {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..nyquist_bins {
                let f = k as f32 * hz_per_bin;
                let w = if f <= left || f >= right {
                    0.0
                } else if f <= centre {
                    (f - left) / (centre - left)
                } else {
                    (right - f) / (right - centre)
                };
                if w > 0.0 {
                    if first.is_none() {
                        first = Some(k);
                    }
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            (first.unwrap_or(0), weights)
        })
        .collect()
}

fn hamming(len: usize) -> Vec<f32> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f32::consts::PI * n as f32 / (len - 1) as f32).cos())
        .collect()
}

/// Streaming feature extractor.  Holds the unconsumed sample tail and the
/// running frame index so chunked input reproduces one-shot extraction.
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    sample_rate_hz: u32,
    frame_len: usize,
    hop: usize,
    window: Vec<f32>,
    filters: Vec<(usize, Vec<f32>)>,
    fft: Arc<dyn Fft<f32>>,
    pending: Vec<i16>,
    next_index: usize,
    mean_accum: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig, sample_rate_hz: u32) -> Result<Self> {
        cfg.validate(sample_rate_hz)?;
        let frame_len = cfg.frame_samples(sample_rate_hz);
        let hop = cfg.hop_samples(sample_rate_hz);
        let window = hamming(frame_len);
        let filters = build_filters(&cfg, sample_rate_hz);
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let mean_accum = vec![0.0; cfg.num_bins];
        Ok(FeatureExtractor {
            cfg,
            sample_rate_hz,
            frame_len,
            hop,
            window,
            filters,
            fft,
            pending: Vec::new(),
            next_index: 0,
            mean_accum,
        })
    }

    /// Feed a chunk of samples; returns every frame that became complete.
    pub fn push(&mut self, samples: &[i16]) -> Vec<FeatureFrame> {
        self.pending.extend_from_slice(samples);
        let mut frames = Vec::new();
        let mut start = 0;
        while start + self.frame_len <= self.pending.len() {
            frames.push(self.frame_at(start));
            start += self.hop;
        }
        self.pending.drain(..start);
        frames
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    fn frame_at(&mut self, start: usize) -> FeatureFrame {
        let mut buf = vec![Complex32::new(0.0, 0.0); self.cfg.fft_size];
        for (n, slot) in buf.iter_mut().take(self.frame_len).enumerate() {
            let s = self.pending[start + n] as f32 / 32768.0;
            slot.re = s * self.window[n];
        }
        self.fft.process(&mut buf);

        let mut values = Vec::with_capacity(self.cfg.num_bins);
        for (first, weights) in &self.filters {
            let mut energy = 0.0f32;
            for (off, w) in weights.iter().enumerate() {
                energy += w * buf[first + off].norm_sqr();
            }
            values.push(energy.max(self.cfg.log_floor).ln());
        }

        if self.cfg.mean_norm {
            let n = (self.next_index + 1) as f64;
            for (b, v) in values.iter_mut().enumerate() {
                self.mean_accum[b] += *v as f64;
                *v -= (self.mean_accum[b] / n) as f32;
            }
        }

        let frame = FeatureFrame {
            values,
            index: self.next_index,
        };
        self.next_index += 1;
        frame
    }
}

/// One-shot extraction over a whole buffer.  Audio shorter than one frame
/// yields an empty stream rather than an error.
pub fn mel_filterbank(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<Vec<FeatureFrame>> {
    let mut extractor = FeatureExtractor::new(cfg.clone(), audio.sample_rate_hz)?;
    Ok(extractor.push(&audio.samples))
}

const FEATURE_MAGIC: &[u8; 4] = b"BTFE";
const FEATURE_VERSION: u32 = 1;

/// Write frames as `BTFE` / version / dim / count header plus contiguous
/// little-endian f32 rows.
pub fn write_frames(path: impl AsRef<Path>, frames: &[FeatureFrame]) -> Result<()> {
    let path = path.as_ref();
    let dim = frames.first().map_or(0, |f| f.values.len());
    for f in frames {
        if f.values.len() != dim {
            return Err(Error::Shape {
                context: format!("frame {} while writing {}", f.index, path.display()),
                expected: dim,
                actual: f.values.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(20 + frames.len() * dim * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(frames.len() as u64).to_le_bytes());
    for f in frames {
        for v in &f.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a feature file, checking the dimension against `expected_dim` when
/// given.  Truncated rows are reported with the first frame index that could
/// not be fully read.
pub fn read_frames(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Vec<FeatureFrame>> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 20];
    file.read_exact(&mut header)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "not a feature file (bad magic)"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported feature file version {version}"),
        ));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
    if dim == 0 && count > 0 {
        return Err(Error::format(path, "zero-dimensional frames"));
    }
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(Error::format(
                path,
                format!("feature dim {dim} does not match expected {expected}"),
            ));
        }
    }
    let mut body = Vec::new();
    file.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let have = body.len() / 4;
    let need = dim * count;
    if have < need || body.len() % 4 != 0 {
        return Err(Error::format(
            path,
            format!("truncated at frame {} of {count}", have / dim.max(1)),
        ));
    }
    if have > need {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after frame {count}", body.len() - need * 4),
        ));
    }
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let row = &body[i * dim * 4..(i + 1) * dim * 4];
        let values = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(FeatureFrame { values, index: i });
    }
    Ok(frames)
}

/// Minimal 16-bit PCM WAV reader (mono; PCM format tag only).
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&data).map_err(|detail| Error::format(path, detail))
}

fn parse_wav(data: &[u8]) -> std::result::Result<AudioBuffer, String> {
    let take = |off: usize, len: usize| -> std::result::Result<&[u8], String> {
        data.get(off..off + len).ok_or_else(|| "truncated".to_string())
    };
    if take(0, 4)? != b"RIFF" || take(8, 4)? != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut off = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut samples = None;
    while off + 8 <= data.len() {
        let id = take(off, 4)?;
        let size = u32::from_le_bytes(take(off + 4, 4)?.try_into().unwrap()) as usize;
        let body = take(off + 8, size)?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err("fmt chunk too small".into());
                }
                let tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                format = Some((tag, channels, rate, bits));
            }
            b"data" => {
                samples = Some(body);
            }
            _ => {}
        }
        off += 8 + size + (size & 1);
    }
    let (tag, channels, rate, bits) = format.ok_or("missing fmt chunk")?;
    if tag != 1 || bits != 16 {
        return Err(format!("unsupported encoding (tag {tag}, {bits}-bit); need 16-bit PCM"));
    }
    if channels != 1 {
        return Err(format!("expected mono audio, found {channels} channels"));
    }
    let body = samples.ok_or("missing data chunk")?;
    let pcm = body
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(AudioBuffer::new(pcm, rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn second_of_silence() -> AudioBuffer {
        AudioBuffer::new(vec![0i16; 16000], 16000)
    }

    #[test]
    fn silence_yields_98_floor_frames() {
        let frames = mel_filterbank(&second_of_silence(), &FeatureConfig::default()).unwrap();
        assert_eq!(frames.len(), 98);
        let floor = 1e-10f32.ln();
        for f in &frames {
            assert_eq!(f.values.len(), 40);
            for v in &f.values {
                assert_eq!(*v, floor);
            }
        }
    }

    #[test]
    fn frame_count_formula_unpadded() {
        // floor((len - frame) / hop) + 1 whenever len >= frame.
        for len in [400usize, 401, 559, 560, 561, 4000, 16000] {
            let audio = AudioBuffer::new(vec![0; len], 16000);
            let frames = mel_filterbank(&audio, &FeatureConfig::default()).unwrap();
            assert_eq!(frames.len(), (len - 400) / 160 + 1, "len {len}");
        }
    }

    #[test]
    fn short_audio_yields_empty_stream() {
        let audio = AudioBuffer::new(vec![0; 399], 16000);
        assert!(mel_filterbank(&audio, &FeatureConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = FeatureConfig::default();
        cfg.frame_hop_ms = 30.0; // hop > frame
        assert!(matches!(
            mel_filterbank(&second_of_silence(), &cfg),
            Err(Error::Config(_))
        ));
        let mut cfg = FeatureConfig::default();
        cfg.fft_size = 300; // not a power of two
        assert!(mel_filterbank(&second_of_silence(), &cfg).is_err());
        let mut cfg = FeatureConfig::default();
        cfg.fft_size = 256; // < 400-sample frame
        assert!(mel_filterbank(&second_of_silence(), &cfg).is_err());
        let mut cfg = FeatureConfig::default();
        cfg.mel_high_hz = 9000.0; // above Nyquist at 16 kHz
        assert!(mel_filterbank(&second_of_silence(), &cfg).is_err());
        let mut cfg = FeatureConfig::default();
        cfg.num_bins = 0;
        assert!(mel_filterbank(&second_of_silence(), &cfg).is_err());
    }

    /// Independent spectral oracle: a pure tone must dump most of its energy
    /// into the mel bin whose triangle peaks nearest the tone frequency.
    #[test]
    fn tone_energy_lands_in_matching_mel_bin() {
        let rate = 16000u32;
        let tone_hz = 1000.0f32;
        let samples: Vec<i16> = (0..16000)
            .map(|n| {
                let t = n as f32 / rate as f32;
                (0.5 * (2.0 * std::f32::consts::PI * tone_hz * t).sin() * 32767.0) as i16
            })
            .collect();
        let cfg = FeatureConfig::default();
        let frames = mel_filterbank(&AudioBuffer::new(samples, rate), &cfg).unwrap();

        // Oracle: recompute the mel geometry directly and find the filter
        // with the largest response at 1 kHz.
        let mel = |hz: f32| 2595.0 * (1.0 + hz / 700.0).log10();
        let unmel = |m: f32| 700.0 * (10f32.powf(m / 2595.0) - 1.0);
        let lo = mel(cfg.mel_low_hz);
        let step = (mel(cfg.mel_high_hz) - lo) / (cfg.num_bins + 1) as f32;
        let edge = |i: usize| unmel(lo + i as f32 * step);
        let mut expected = 0;
        let mut best = -1.0f32;
        for m in 0..cfg.num_bins {
            let (l, c, r) = (edge(m), edge(m + 1), edge(m + 2));
            let w = if tone_hz <= l || tone_hz >= r {
                0.0
            } else if tone_hz <= c {
                (tone_hz - l) / (c - l)
            } else {
                (r - tone_hz) / (r - c)
            };
            if w > best {
                best = w;
                expected = m;
            }
        }

        let mid = &frames[frames.len() / 2];
        let got = mid
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(got, expected, "tone at {tone_hz} Hz peaked in bin {got}");
    }

    #[test]
    fn sign_flip_leaves_features_bit_identical() {
        let samples: Vec<i16> = (0..4000)
            .map(|n| (((n * 7919) % 32768) as i32 - 16384) as i16)
            .collect();
        let flipped: Vec<i16> = samples.iter().map(|s| s.saturating_neg()).collect();
        let cfg = FeatureConfig::default();
        let a = mel_filterbank(&AudioBuffer::new(samples, 16000), &cfg).unwrap();
        let b = mel_filterbank(&AudioBuffer::new(flipped, 16000), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn streaming_matches_one_shot_for_any_chunking() {
        let samples: Vec<i16> = (0..6000)
            .map(|n| (((n * 2654435761u64 as usize) % 65536) as i32 - 32768) as i16)
            .collect();
        for chunk in [1usize, 7, 160, 399, 400, 1000, 6000] {
            for mean_norm in [false, true] {
                let cfg = FeatureConfig {
                    mean_norm,
                    ..FeatureConfig::default()
                };
                let whole = mel_filterbank(&AudioBuffer::new(samples.clone(), 16000), &cfg).unwrap();
                let mut ex = FeatureExtractor::new(cfg, 16000).unwrap();
                let mut streamed = Vec::new();
                for c in samples.chunks(chunk) {
                    streamed.extend(ex.push(c));
                }
                assert_eq!(whole, streamed, "chunk {chunk} mean_norm {mean_norm}");
            }
        }
    }

    #[test]
    fn feature_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.btfe");
        let frames: Vec<FeatureFrame> = (0..5)
            .map(|i| FeatureFrame {
                values: (0..3).map(|j| (i * 3 + j) as f32 * 0.25 - 1.0).collect(),
                index: i,
            })
            .collect();
        write_frames(&path, &frames).unwrap();
        let back = read_frames(&path, Some(3)).unwrap();
        assert_eq!(frames, back);
    }

    #[test]
    fn truncated_feature_file_names_first_bad_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.btfe");
        let frames: Vec<FeatureFrame> = (0..4)
            .map(|i| FeatureFrame {
                values: vec![i as f32; 40],
                index: i,
            })
            .collect();
        write_frames(&path, &frames).unwrap();
        // Drop one value: the file now declares dim 40 but the last row has 39.
        let mut data = fs::read(&path).unwrap();
        data.truncate(data.len() - 4);
        fs::write(&path, &data).unwrap();
        let err = read_frames(&path, None).unwrap_err();
        assert!(
            err.to_string().contains("frame 3"),
            "error should name the offending row: {err}"
        );
    }

    #[test]
    fn dim_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.btfe");
        write_frames(
            &path,
            &[FeatureFrame {
                values: vec![0.0; 39],
                index: 0,
            }],
        )
        .unwrap();
        let err = read_frames(&path, Some(40)).unwrap_err();
        assert!(err.to_string().contains("39"), "{err}");
    }

    #[test]
    fn wav_round_trip_via_handwritten_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let pcm: Vec<i16> = (0..2000).map(|n| ((n % 97) * 300 - 14000) as i16).collect();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36 + pcm.len() as u32 * 2).to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
        bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&32000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&(pcm.len() as u32 * 2).to_le_bytes());
        for s in &pcm {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        let audio = read_wav(&path).unwrap();
        assert_eq!(audio.sample_rate_hz, 16000);
        assert_eq!(audio.samples, pcm);
    }
}
