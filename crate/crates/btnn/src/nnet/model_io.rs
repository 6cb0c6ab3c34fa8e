//! Model bundle serialization: a human-readable header describing the layer
//! stack followed by raw little-endian f32 weight blobs in declared order.
//! Floats in the header are printed with shortest-round-trip formatting, so
//! save/load is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureConfig;

use super::{Activation, DenseLayer, EmbeddingNet, Layer, MemoryLayer, ModelBundle, TailNet};

const MODEL_MAGIC: &str = "BTNNMODEL v1";

fn act_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Sigmoid => "sigmoid",
        Activation::Identity => "identity",
    }
}

fn parse_act(s: &str) -> Option<Activation> {
    match s {
        "relu" => Some(Activation::Relu),
        "sigmoid" => Some(Activation::Sigmoid),
        "identity" => Some(Activation::Identity),
        _ => None,
    }
}

fn push_f32s(blob: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

fn dense_header(d: &DenseLayer) -> String {
    format!("dense in={} out={} act={}", d.in_dim, d.out_dim, act_name(d.activation))
}

pub fn save_model(path: impl AsRef<Path>, bundle: &ModelBundle) -> Result<()> {
    let path = path.as_ref();
    let fc = &bundle.feature_config;
    let mut header = String::new();
    header.push_str(MODEL_MAGIC);
    header.push('\n');
    header.push_str(&format!(
        "features num_bins={} frame_length_ms={} frame_hop_ms={} fft_size={} mel_low_hz={} mel_high_hz={} log_floor={} mean_norm={}\n",
        fc.num_bins,
        fc.frame_length_ms,
        fc.frame_hop_ms,
        fc.fft_size,
        fc.mel_low_hz,
        fc.mel_high_hz,
        fc.log_floor,
        fc.mean_norm as u8,
    ));
    header.push_str(&format!("num_states {}\n", bundle.num_states()));

    let mut blob = Vec::new();
    header.push_str(&format!("embedding layers={}\n", bundle.embedding.layers.len()));
    for layer in &bundle.embedding.layers {
        match layer {
            Layer::Dense(d) => {
                header.push_str(&dense_header(d));
                header.push('\n');
                push_f32s(&mut blob, &d.weights);
                push_f32s(&mut blob, &d.bias);
            }
            Layer::Memory(m) => {
                header.push_str(&format!("memory taps={} dim={}\n", m.taps(), m.dim));
                for coeff in &m.coeffs {
                    push_f32s(&mut blob, coeff);
                }
            }
        }
    }
    for tail in &bundle.tails {
        header.push_str(&format!("tail state={} layers={}\n", tail.state_id, tail.layers.len()));
        for d in &tail.layers {
            header.push_str(&dense_header(d));
            header.push('\n');
            push_f32s(&mut blob, &d.weights);
            push_f32s(&mut blob, &d.bias);
        }
    }
    header.push_str("binary\n");

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(&blob))
        .map_err(|e| Error::io(path, e))
}

/// Incremental reader over the weight blob.
struct BlobReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<Vec<f32>, String> {
        let bytes = n * 4;
        if self.pos + bytes > self.data.len() {
            return Err(format!("weight blob truncated while reading {what}"));
        }
        let out = self.data[self.pos..self.pos + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += bytes;
        Ok(out)
    }
}

struct HeaderLines<'a> {
    lines: std::str::Lines<'a>,
    current: usize,
}

impl<'a> HeaderLines<'a> {
    fn next_line(&mut self) -> std::result::Result<&'a str, String> {
        self.current += 1;
        self.lines
            .next()
            .ok_or_else(|| "header ended early".to_string())
    }
}

fn kv<'a>(token: &'a str, key: &str, line: usize) -> std::result::Result<&'a str, String> {
    token
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| format!("line {line}: expected {key}=..., found '{token}'"))
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> std::result::Result<T, String> {
    s.parse()
        .map_err(|_| format!("line {line}: cannot parse number '{s}'"))
}

fn parse_dense(line: &str, lineno: usize, blob: &mut BlobReader) -> std::result::Result<DenseLayer, String> {
    let mut tok = line.split_whitespace();
    tok.next(); // "dense"
    let in_dim: usize = parse_num(kv(tok.next().unwrap_or(""), "in", lineno)?, lineno)?;
    let out_dim: usize = parse_num(kv(tok.next().unwrap_or(""), "out", lineno)?, lineno)?;
    let act = parse_act(kv(tok.next().unwrap_or(""), "act", lineno)?)
        .ok_or_else(|| format!("line {lineno}: unknown activation"))?;
    let weights = blob.take(in_dim * out_dim, "dense weights")?;
    let bias = blob.take(out_dim, "dense bias")?;
    Ok(DenseLayer {
        in_dim,
        out_dim,
        weights,
        bias,
        activation: act,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_model(&data).map_err(|detail| Error::format(path, detail))
}

fn parse_model(data: &[u8]) -> std::result::Result<ModelBundle, String> {
    // The header is everything up to the "binary" marker line.
    let marker = b"\nbinary\n";
    let split = data
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or("missing 'binary' marker")?;
    let header = std::str::from_utf8(&data[..split + 1]).map_err(|_| "header is not UTF-8")?;
    let mut blob = BlobReader {
        data: &data[split + marker.len()..],
        pos: 0,
    };
    let mut lines = HeaderLines {
        lines: header.lines(),
        current: 0,
    };

    if lines.next_line()? != MODEL_MAGIC {
        return Err("not a model file (bad magic or version)".into());
    }

    let feat_line = lines.next_line()?;
    let lineno = lines.current;
    let mut tok = feat_line.split_whitespace();
    if tok.next() != Some("features") {
        return Err(format!("line {lineno}: expected features line"));
    }
    let feature_config = FeatureConfig {
        num_bins: parse_num(kv(tok.next().unwrap_or(""), "num_bins", lineno)?, lineno)?,
        frame_length_ms: parse_num(kv(tok.next().unwrap_or(""), "frame_length_ms", lineno)?, lineno)?,
        frame_hop_ms: parse_num(kv(tok.next().unwrap_or(""), "frame_hop_ms", lineno)?, lineno)?,
        fft_size: parse_num(kv(tok.next().unwrap_or(""), "fft_size", lineno)?, lineno)?,
        mel_low_hz: parse_num(kv(tok.next().unwrap_or(""), "mel_low_hz", lineno)?, lineno)?,
        mel_high_hz: parse_num(kv(tok.next().unwrap_or(""), "mel_high_hz", lineno)?, lineno)?,
        log_floor: parse_num(kv(tok.next().unwrap_or(""), "log_floor", lineno)?, lineno)?,
        mean_norm: parse_num::<u8>(kv(tok.next().unwrap_or(""), "mean_norm", lineno)?, lineno)? != 0,
    };

    let states_line = lines.next_line()?;
    let num_states: u32 = states_line
        .strip_prefix("num_states ")
        .ok_or_else(|| format!("line {}: expected num_states", lines.current))
        .and_then(|s| parse_num(s, lines.current))?;

    let emb_line = lines.next_line()?;
    let lineno = lines.current;
    let n_emb: usize = parse_num(
        kv(
            emb_line
                .split_whitespace()
                .nth(1)
                .filter(|_| emb_line.starts_with("embedding "))
                .unwrap_or(""),
            "layers",
            lineno,
        )?,
        lineno,
    )?;

    let mut emb_layers = Vec::with_capacity(n_emb);
    for _ in 0..n_emb {
        let line = lines.next_line()?;
        let lineno = lines.current;
        if line.starts_with("dense ") {
            emb_layers.push(Layer::Dense(parse_dense(line, lineno, &mut blob)?));
        } else if line.starts_with("memory ") {
            let mut tok = line.split_whitespace();
            tok.next();
            let taps: usize = parse_num(kv(tok.next().unwrap_or(""), "taps", lineno)?, lineno)?;
            let dim: usize = parse_num(kv(tok.next().unwrap_or(""), "dim", lineno)?, lineno)?;
            if taps == 0 {
                return Err(format!("line {lineno}: memory layer needs at least one tap"));
            }
            let mut coeffs = Vec::with_capacity(taps);
            for _ in 0..taps {
                coeffs.push(blob.take(dim, "memory coefficients")?);
            }
            emb_layers.push(Layer::Memory(MemoryLayer { dim, coeffs }));
        } else {
            return Err(format!("line {lineno}: expected a layer, found '{line}'"));
        }
    }
    let embedding = EmbeddingNet::new(emb_layers).map_err(|e| e.to_string())?;

    let mut tails = Vec::with_capacity(num_states as usize);
    for expected_state in 0..num_states {
        let line = lines.next_line().map_err(|_| {
            format!("missing tail for state {expected_state} of {num_states}")
        })?;
        let lineno = lines.current;
        let mut tok = line.split_whitespace();
        if tok.next() != Some("tail") {
            return Err(format!("line {lineno}: expected tail header, found '{line}'"));
        }
        let state: u32 = parse_num(kv(tok.next().unwrap_or(""), "state", lineno)?, lineno)?;
        if state != expected_state {
            return Err(format!(
                "missing tail for state {expected_state} of {num_states} (found state {state})"
            ));
        }
        let n_layers: usize = parse_num(kv(tok.next().unwrap_or(""), "layers", lineno)?, lineno)?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let line = lines.next_line()?;
            let lineno = lines.current;
            if !line.starts_with("dense ") {
                return Err(format!("line {lineno}: tails are dense-only, found '{line}'"));
            }
            layers.push(parse_dense(line, lineno, &mut blob)?);
        }
        tails.push(TailNet::new(state, layers).map_err(|e| e.to_string())?);
    }

    if blob.pos != blob.data.len() {
        return Err(format!(
            "{} trailing bytes after declared weights",
            blob.data.len() - blob.pos
        ));
    }

    ModelBundle::new(embedding, tails, feature_config).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bundle() -> ModelBundle {
        let cfg = FeatureConfig {
            num_bins: 5,
            ..FeatureConfig::default()
        };
        ModelBundle::desk_default(cfg, 3, 42).unwrap()
    }

    #[test]
    fn save_load_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.btnn");
        let original = bundle();
        save_model(&path, &original).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(original, loaded);
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.btnn");
        let original = bundle();
        save_model(&path, &original).unwrap();
        let data = fs::read(&path).unwrap();
        let tampered = [b"BTNNMODEL v9".as_slice(), &data[MODEL_MAGIC.len()..]].concat();
        fs::write(&path, tampered).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn missing_tail_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.btnn");
        save_model(&path, &bundle()).unwrap();
        let text = fs::read(&path).unwrap();
        // Claim four states while the file only carries three tails.
        let as_str = String::from_utf8_lossy(&text).into_owned();
        let tampered = as_str.replacen("num_states 3", "num_states 4", 1);
        fs::write(&path, tampered).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(
            err.to_string().contains("missing tail for state 3 of 4"),
            "{err}"
        );
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.btnn");
        save_model(&path, &bundle()).unwrap();
        let mut data = fs::read(&path).unwrap();
        data.truncate(data.len() - 10);
        fs::write(&path, &data).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn random_dims_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let embedding = EmbeddingNet::new(vec![
            Layer::Dense(DenseLayer::random(7, 12, Activation::Relu, &mut rng)),
            Layer::Memory(MemoryLayer {
                dim: 12,
                coeffs: (0..5)
                    .map(|_| (0..12).map(|_| 0.1f32 * rng.random_range(-10..10) as f32).collect())
                    .collect(),
            }),
        ])
        .unwrap();
        let tails = (0..2)
            .map(|s| TailNet::pyramid(s, &[12, 5], &mut rng).unwrap())
            .collect();
        let cfg = FeatureConfig {
            num_bins: 7,
            ..FeatureConfig::default()
        };
        let original = ModelBundle::new(embedding, tails, cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.btnn");
        save_model(&path, &original).unwrap();
        assert_eq!(load_model(&path).unwrap(), original);
    }
}
