//! Single-binary front end for the keyword spotter.  One subcommand per
//! pipeline stage: synthesize desk-scale data, train tails, calibrate,
//! adapt scales, enroll keywords, spot, and evaluate.
//!
//! Exit codes: 0 on success, 1 on file or format errors, 2 on usage errors
//! (unknown flags, missing arguments, conflicting inputs).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use btnn::calibration::{
    estimate_calibration_set, load_calibration, save_calibration, FusionOrientation,
    DEFAULT_SCALE_GRID,
};
use btnn::decoder::{DecodeConfig, DetectionEvent, StreamDecoder};
use btnn::eval::{sweep, ReferenceSet, ResultSet};
use btnn::features::{mel_filterbank, read_frames, read_wav, FeatureConfig, FeatureFrame};
use btnn::graph::{build_graph, load_graph, save_graph, JumpConfig, KeywordGraph, Lexicon};
use btnn::nnet::model_io::{load_model, save_model};
use btnn::nnet::{count_macs, MacReport, ModelBundle};
use btnn::synth::{generate_to_dir, SynthSpec};
use btnn::training::{flatten_utterances, load_manifest, Optimizer, PerState, TrainConfig};

#[derive(Parser)]
#[command(
    name = "btnn",
    version,
    about = "Streaming keyword spotting with per-state binary tail classifiers",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the per-state tail classifiers on an aligned dataset.
    Train(TrainArgs),
    /// Estimate per-state score-distribution tables from an aligned dataset.
    Calibrate(CalibrateArgs),
    /// Re-pick per-state fusion scales on held-out data.
    AdaptScales(AdaptScalesArgs),
    /// Build a keyword decoding graph from a lexicon entry.
    Enroll(EnrollArgs),
    /// Run the spotter over audio or precomputed features.
    Spot(SpotArgs),
    /// Score a results file against a reference manifest.
    Eval(EvalArgs),
    /// Generate a deterministic synthetic dataset for desk-scale testing.
    SynthData(SynthDataArgs),
    /// Print the dimensions and per-frame cost of a saved model.
    Inspect(InspectArgs),
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes (e.g. `btnn eval ... | head`)
    // instead of panicking on the failed write.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::AdaptScales(args) => cmd_adapt_scales(args),
        Command::Enroll(args) => cmd_enroll(args),
        Command::Spot(args) => cmd_spot(args),
        Command::Eval(args) => cmd_eval(args),
        Command::SynthData(args) => cmd_synth_data(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

// --- train -------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest: lines of "utt_id feature_file alignment_file".
    #[arg(long)]
    manifest: PathBuf,
    /// Optional TOML settings file; flags override it, it overrides defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the trained model.
    #[arg(long)]
    out: PathBuf,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Minibatch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for batch sampling and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for the random weight initialization.
    #[arg(long)]
    init_seed: Option<u64>,
    /// Number of states; defaults to the largest state in the alignments + 1.
    #[arg(long)]
    num_states: Option<u32>,
    /// Loss weight on positive frames, shared by every state.
    #[arg(long)]
    scale_pos: Option<f64>,
    /// Negative-to-positive sampling ratio, shared by every state.
    #[arg(long)]
    neg_pos_ratio: Option<f64>,
    /// Optimizer.
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Also train the shared embedding instead of freezing it.
    #[arg(long)]
    train_embedding: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

/// TOML mirror of the tunable training settings.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    init_seed: Option<u64>,
    num_states: Option<u32>,
    scale_pos: Option<f64>,
    neg_pos_ratio: Option<f64>,
    optimizer: Option<String>,
    train_embedding: Option<bool>,
}

fn load_train_file(path: &Path) -> Result<TrainFile> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => load_train_file(path)?,
        None => TrainFile::default(),
    };
    let defaults = TrainConfig::default();
    let optimizer = match args.optimizer {
        Some(OptimizerArg::Sgd) => Optimizer::Sgd,
        Some(OptimizerArg::Adam) => Optimizer::adam(),
        None => match file.optimizer.as_deref() {
            Some("sgd") => Optimizer::Sgd,
            Some("adam") => Optimizer::adam(),
            Some(other) => bail!("config file names unknown optimizer {other:?} (sgd or adam)"),
            None => defaults.optimizer,
        },
    };
    let config = TrainConfig {
        scale_pos: PerState::uniform(
            args.scale_pos
                .or(file.scale_pos)
                .unwrap_or(defaults.scale_pos.default),
        ),
        neg_pos_ratio: PerState::uniform(
            args.neg_pos_ratio
                .or(file.neg_pos_ratio)
                .unwrap_or(defaults.neg_pos_ratio.default),
        ),
        learning_rate: args
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(defaults.learning_rate),
        epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        batch_size: args
            .batch_size
            .or(file.batch_size)
            .unwrap_or(defaults.batch_size),
        rng_seed: args.seed.or(file.seed).unwrap_or(defaults.rng_seed),
        optimizer,
        train_embedding: args.train_embedding || file.train_embedding.unwrap_or(false),
    };

    let utterances = load_manifest(&args.manifest)
        .with_context(|| format!("loading manifest {}", args.manifest.display()))?;
    let dataset = flatten_utterances(&utterances);
    if dataset.is_empty() {
        bail!("manifest {} holds no aligned frames", args.manifest.display());
    }
    let feature_dim = dataset[0].frame.values.len();
    let num_states = args
        .num_states
        .or(file.num_states)
        .unwrap_or_else(|| dataset.iter().map(|s| s.state).max().unwrap_or(0) + 1);
    let init_seed = args.init_seed.or(file.init_seed).unwrap_or(0);

    let feature_config = FeatureConfig {
        num_bins: feature_dim,
        ..FeatureConfig::default()
    };
    let bundle = ModelBundle::desk_default(feature_config, num_states, init_seed)?;
    println!(
        "training {num_states} tail networks on {} frames for {} epochs (batch {}, lr {}, {})",
        dataset.len(),
        config.epochs,
        config.batch_size,
        config.learning_rate,
        match config.optimizer {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    );
    let (trained, trace) = btnn::training::train(&dataset, &bundle, &config)?;
    for (state, losses) in &trace {
        if let Some(last) = losses.last() {
            println!("state {state}: final loss {last:.6}");
        }
    }
    save_model(&args.out, &trained)
        .with_context(|| format!("writing model {}", args.out.display()))?;
    println!("wrote model {}", args.out.display());
    Ok(())
}

// --- calibrate -----------------------------------------------------------------

#[derive(Args)]
struct CalibrateArgs {
    /// Dataset manifest used to collect per-state scores.
    #[arg(long)]
    manifest: PathBuf,
    /// Trained model to score with.
    #[arg(long)]
    model: PathBuf,
    /// Number of equal-width table segments.
    #[arg(long, default_value_t = 40)]
    segments: usize,
    /// Initial positive fusion scale for every state.
    #[arg(long, default_value_t = 4.0)]
    scale_pos: f64,
    /// Initial negative fusion scale for every state.
    #[arg(long, default_value_t = 1.0)]
    scale_neg: f64,
    /// How the negative table enters the fusion.
    #[arg(long, value_enum, default_value_t = OrientationArg::Complement)]
    orientation: OrientationArg,
    /// Where to write the calibration file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrientationArg {
    Complement,
    Literal,
}

impl From<OrientationArg> for FusionOrientation {
    fn from(arg: OrientationArg) -> Self {
        match arg {
            OrientationArg::Complement => FusionOrientation::Complement,
            OrientationArg::Literal => FusionOrientation::Literal,
        }
    }
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let bundle = load_model(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let utterances = load_manifest(&args.manifest)
        .with_context(|| format!("loading manifest {}", args.manifest.display()))?;
    let calib = estimate_calibration_set(
        &bundle,
        &utterances,
        args.segments,
        args.scale_pos,
        args.scale_neg,
        args.orientation.into(),
    )?;
    save_calibration(&args.out, &calib)
        .with_context(|| format!("writing calibration {}", args.out.display()))?;
    println!(
        "wrote calibration for {} states ({} segments, scales {} / {}, {}) to {}",
        calib.num_states(),
        args.segments,
        args.scale_pos,
        args.scale_neg,
        calib.orientation.name(),
        args.out.display()
    );
    Ok(())
}

// --- adapt-scales ---------------------------------------------------------------

#[derive(Args)]
struct AdaptScalesArgs {
    /// Held-out dataset manifest the scales are picked on.
    #[arg(long)]
    dev: PathBuf,
    /// Calibration file to adapt.
    #[arg(long)]
    calib: PathBuf,
    /// Trained model the calibration belongs to.
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated scale grid, e.g. "0.5,1,2,4,8".
    #[arg(long)]
    grid: Option<String>,
    /// Where to write the adapted calibration; defaults to --calib in place.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .with_context(|| format!("grid entry {tok:?} is not a number"))
        })
        .collect()
}

fn cmd_adapt_scales(args: AdaptScalesArgs) -> Result<()> {
    let grid = match &args.grid {
        Some(text) => parse_grid(text)?,
        None => DEFAULT_SCALE_GRID.to_vec(),
    };
    let bundle = load_model(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let mut calib = load_calibration(&args.calib)
        .with_context(|| format!("loading calibration {}", args.calib.display()))?;
    let dev = load_manifest(&args.dev)
        .with_context(|| format!("loading manifest {}", args.dev.display()))?;
    btnn::calibration::adapt_calibration_scales(&mut calib, &bundle, &dev, &grid)?;
    for state in 0..calib.num_states() {
        let sc = calib.state(state).unwrap();
        println!("state {state}: scales {} / {}", sc.scale_pos, sc.scale_neg);
    }
    let out = args.out.as_ref().unwrap_or(&args.calib);
    save_calibration(out, &calib)
        .with_context(|| format!("writing calibration {}", out.display()))?;
    println!("wrote adapted calibration to {}", out.display());
    Ok(())
}

// --- enroll ----------------------------------------------------------------------

#[derive(Args)]
struct EnrollArgs {
    /// Keyword to enroll; must appear in the lexicon.
    #[arg(long)]
    keyword: String,
    /// Lexicon file: lines of "word state_id state_id ...".
    #[arg(long)]
    lexicon: PathBuf,
    /// Widest allowed forward jump.
    #[arg(long, default_value_t = btnn::graph::DEFAULT_MAX_SKIP)]
    jump_skip: u32,
    /// Log-score cost per skipped state.
    #[arg(long, default_value_t = btnn::graph::DEFAULT_PUNISHMENT)]
    jump_punishment: f64,
    /// Where to write the keyword graph.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_enroll(args: EnrollArgs) -> Result<()> {
    let lexicon = Lexicon::load(&args.lexicon)
        .with_context(|| format!("loading lexicon {}", args.lexicon.display()))?;
    let states = lexicon.keyword_to_states(&args.keyword)?;
    let graph = build_graph(
        &args.keyword,
        &states,
        &JumpConfig {
            max_skip: args.jump_skip,
            punishment: args.jump_punishment,
        },
    )?;
    save_graph(&args.out, &graph)
        .with_context(|| format!("writing graph {}", args.out.display()))?;
    let num_arcs: usize = (0..graph.num_nodes())
        .map(|node| graph.arcs_from(node).count())
        .sum();
    println!(
        "enrolled {:?} over states {:?} ({} nodes, {} arcs) to {}",
        args.keyword,
        states,
        graph.num_nodes(),
        num_arcs,
        args.out.display()
    );
    Ok(())
}

// --- spot ------------------------------------------------------------------------

#[derive(Args)]
#[command(group = clap::ArgGroup::new("input").required(true).multiple(false))]
struct SpotArgs {
    /// Trained model.
    #[arg(long)]
    model: PathBuf,
    /// Calibration file matching the model.
    #[arg(long)]
    calib: PathBuf,
    /// Keyword graph; repeat to spot several keywords at once.
    #[arg(long, required = true)]
    graph: Vec<PathBuf>,
    /// 16-bit PCM WAV input.
    #[arg(long, group = "input")]
    audio: Option<PathBuf>,
    /// Precomputed feature file.
    #[arg(long, group = "input")]
    features: Option<PathBuf>,
    /// Batch mode: text file with lines "utt_id feature_file" (paths
    /// relative to the list file).
    #[arg(long, group = "input")]
    features_list: Option<PathBuf>,
    /// Write per-utterance results ("utt_id keyword start end confidence").
    #[arg(long)]
    results_out: Option<PathBuf>,
    /// Detection threshold on the average per-frame log confidence
    /// (default -1.0).
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
    /// Keep only the best N tokens per frame; 0 disables the beam
    /// (default 32).
    #[arg(long)]
    beam: Option<usize>,
    /// Minimum consumed frames before a detection may fire (default 20).
    #[arg(long)]
    min_frames: Option<u32>,
    /// Frames to stay quiet after a detection (default 50).
    #[arg(long)]
    refractory: Option<u64>,
    /// Drop tokens whose average log confidence falls below this floor.
    #[arg(long, allow_negative_numbers = true)]
    score_floor: Option<f64>,
    /// Evaluate every tail every frame instead of only the needed ones.
    #[arg(long)]
    exhaustive: bool,
    /// Dump per-frame active-state confidences ("frame state confidence")
    /// to this path; single-stream inputs only.
    #[arg(long, conflicts_with = "features_list")]
    emit_frame_scores: Option<PathBuf>,
}

fn decode_config(args: &SpotArgs) -> Result<DecodeConfig> {
    let defaults = DecodeConfig::default();
    let config = DecodeConfig {
        beam: match args.beam {
            Some(0) => usize::MAX,
            Some(n) => n,
            None => defaults.beam,
        },
        threshold: args.threshold.unwrap_or(defaults.threshold),
        min_frames: args.min_frames.unwrap_or(defaults.min_frames),
        refractory_frames: args.refractory.unwrap_or(defaults.refractory_frames),
        score_floor: args.score_floor.or(defaults.score_floor),
        exhaustive_tails: args.exhaustive,
    };
    config.validate()?;
    Ok(config)
}

fn print_macs(report: &MacReport) {
    println!(
        "MACS embedding={} tail_full={} tail_lazy={} ratio={:.4}",
        report.embedding_macs,
        report.tail_macs_full,
        report.tail_macs_lazy,
        report.tail_ratio()
    );
}

fn run_stream(
    bundle: &ModelBundle,
    calib: &btnn::calibration::CalibrationSet,
    graphs: &[KeywordGraph],
    config: &DecodeConfig,
    frames: &[FeatureFrame],
    frame_scores_out: Option<&Path>,
) -> Result<(Vec<DetectionEvent>, MacReport)> {
    let mut decoder = StreamDecoder::new(bundle, calib, graphs, config.clone())?;
    if frame_scores_out.is_some() {
        decoder.enable_score_recording();
    }
    let mut events = Vec::new();
    for frame in frames {
        events.extend(decoder.push_frame(frame)?);
    }
    if let Some(path) = frame_scores_out {
        let mut text = String::new();
        for (frame, scores) in decoder.frame_scores().iter().enumerate() {
            for (state, conf) in scores {
                writeln!(text, "{frame} {state} {conf}").unwrap();
            }
        }
        fs::write(path, text)
            .with_context(|| format!("writing frame scores {}", path.display()))?;
    }
    let (final_events, report) = decoder.finish();
    debug_assert_eq!(events, final_events);
    Ok((final_events, report))
}

fn load_features_list(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading list {}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let (Some(utt), Some(feat), None) = (tokens.next(), tokens.next(), tokens.next()) else {
            bail!(
                "{}:{}: expected \"utt_id feature_file\"",
                path.display(),
                idx + 1
            );
        };
        entries.push((utt.to_string(), base.join(feat)));
    }
    if entries.is_empty() {
        bail!("feature list {} names no utterances", path.display());
    }
    Ok(entries)
}

fn cmd_spot(args: SpotArgs) -> Result<()> {
    let config = decode_config(&args)?;
    let bundle = load_model(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let calib = load_calibration(&args.calib)
        .with_context(|| format!("loading calibration {}", args.calib.display()))?;
    let graphs: Vec<KeywordGraph> = args
        .graph
        .iter()
        .map(|path| {
            load_graph(path).with_context(|| format!("loading graph {}", path.display()))
        })
        .collect::<Result<_>>()?;
    let input_dim = bundle.embedding.input_dim();

    if let Some(list) = &args.features_list {
        let entries = load_features_list(list)?;
        let mut results = ResultSet::new();
        let mut total = MacReport::default();
        for (utt, feat) in &entries {
            let frames = read_frames(feat, Some(input_dim))
                .with_context(|| format!("reading features {}", feat.display()))?;
            let (events, report) = run_stream(&bundle, &calib, &graphs, &config, &frames, None)?;
            for event in &events {
                println!(
                    "{utt} {} {} {} {}",
                    event.keyword, event.start_frame, event.end_frame, event.confidence
                );
            }
            total.embedding_macs += report.embedding_macs;
            total.tail_macs_full += report.tail_macs_full;
            total.tail_macs_lazy += report.tail_macs_lazy;
            results.record(utt, events);
        }
        print_macs(&total);
        if let Some(out) = &args.results_out {
            results
                .save(out)
                .with_context(|| format!("writing results {}", out.display()))?;
            println!(
                "wrote results for {} utterances to {}",
                results.num_utterances(),
                out.display()
            );
        }
        return Ok(());
    }

    let frames = if let Some(wav) = &args.audio {
        let audio =
            read_wav(wav).with_context(|| format!("reading audio {}", wav.display()))?;
        mel_filterbank(&audio, &bundle.feature_config)?
    } else {
        let path = args.features.as_ref().expect("clap guarantees one input");
        read_frames(path, Some(input_dim))
            .with_context(|| format!("reading features {}", path.display()))?
    };
    let (events, report) = run_stream(
        &bundle,
        &calib,
        &graphs,
        &config,
        &frames,
        args.emit_frame_scores.as_deref(),
    )?;
    for event in &events {
        println!(
            "{} {} {} {}",
            event.keyword, event.start_frame, event.end_frame, event.confidence
        );
    }
    print_macs(&report);
    if let Some(out) = &args.results_out {
        let mut results = ResultSet::new();
        results.record("stream", events);
        results
            .save(out)
            .with_context(|| format!("writing results {}", out.display()))?;
    }
    Ok(())
}

// --- eval ------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Detection results: lines "utt_id keyword start end confidence",
    /// or "utt_id -" to mark a decoded utterance with no events.
    #[arg(long)]
    results: PathBuf,
    /// Reference manifest: "utt_id POS keyword [start end]" / "NEG hours".
    #[arg(long)]
    refs: PathBuf,
    /// Highest acceptable false-alarm rate per 24 hours.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    fa_target: f64,
    /// Output format.
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    output_format: OutputFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Table,
    Tsv,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let results = ResultSet::load(&args.results)
        .with_context(|| format!("loading results {}", args.results.display()))?;
    let refs = ReferenceSet::load(&args.refs)
        .with_context(|| format!("loading references {}", args.refs.display()))?;
    let thresholds = results.candidate_thresholds();
    let (points, best) = sweep(&results, &refs, &thresholds, args.fa_target)?;
    let is_best =
        |threshold: f64| best.as_ref().is_some_and(|b| b.threshold == threshold);
    match args.output_format {
        OutputFormat::Table => {
            println!("{:>12} {:>10} {:>12}  best", "threshold", "wakeup", "fa_per_24h");
            for point in &points {
                println!(
                    "{:>12.4} {:>10.4} {:>12.4}  {}",
                    point.threshold,
                    point.wakeup_rate,
                    point.false_alarms_per_24h,
                    if is_best(point.threshold) { "*" } else { "" }
                );
            }
            match &best {
                Some(b) => println!(
                    "best: threshold {:.4} -> wakeup {:.4} at {:.4} false alarms / 24h",
                    b.threshold, b.wakeup_rate, b.false_alarms_per_24h
                ),
                None => println!(
                    "best: none (no threshold meets the false-alarm target {})",
                    args.fa_target
                ),
            }
        }
        OutputFormat::Tsv => {
            println!("threshold\twakeup_rate\tfalse_alarms_per_24h\tbest");
            for point in &points {
                println!(
                    "{}\t{}\t{}\t{}",
                    point.threshold,
                    point.wakeup_rate,
                    point.false_alarms_per_24h,
                    is_best(point.threshold)
                );
            }
        }
    }
    Ok(())
}

// --- synth-data ---------------------------------------------------------------------

#[derive(Args)]
struct SynthDataArgs {
    /// Directory the dataset is written into.
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of distinct states.
    #[arg(long, default_value_t = 8)]
    num_states: u32,
    /// Feature dimension.
    #[arg(long, default_value_t = 20)]
    feature_dim: usize,
    /// Frames each state segment lasts.
    #[arg(long, default_value_t = 8)]
    frames_per_state: usize,
    /// Total utterances; even indices are keyword utterances.
    #[arg(long, default_value_t = 200)]
    num_utterances: usize,
    /// Keyword as a comma-separated state sequence, e.g. "0,1,2"; repeatable.
    #[arg(long = "keyword", required = true)]
    keywords: Vec<String>,
    /// Standard deviation of the per-frame feature noise.
    #[arg(long, default_value_t = 0.3)]
    noise_std: f32,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<()> {
    let keyword_state_seqs = args
        .keywords
        .iter()
        .map(|text| {
            text.split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<u32>()
                        .with_context(|| format!("keyword state {tok:?} is not a state id"))
                })
                .collect::<Result<Vec<u32>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = SynthSpec {
        num_states: args.num_states,
        feature_dim: args.feature_dim,
        frames_per_state: args.frames_per_state,
        num_utterances: args.num_utterances,
        keyword_state_seqs,
        noise_std: args.noise_std,
        rng_seed: args.seed,
    };
    let dataset = generate_to_dir(&spec, &args.out_dir)
        .with_context(|| format!("writing dataset under {}", args.out_dir.display()))?;
    println!(
        "wrote {} utterances ({} keywords, {} states) under {}",
        dataset.utterances.len(),
        spec.keyword_state_seqs.len(),
        spec.num_states,
        args.out_dir.display()
    );
    println!("manifest: {}", args.out_dir.join("manifest.txt").display());
    println!("references: {}", args.out_dir.join("refs.txt").display());
    println!("lexicon: {}", args.out_dir.join("lexicon.txt").display());
    Ok(())
}

// --- inspect -----------------------------------------------------------------------

#[derive(Args)]
struct InspectArgs {
    /// Saved model to describe.
    #[arg(long)]
    model: PathBuf,
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let bundle = load_model(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let all_states: BTreeSet<u32> = bundle.all_states();
    let full_frame = count_macs(&bundle, std::slice::from_ref(&all_states));
    println!("model: {}", args.model.display());
    println!("input dim: {}", bundle.embedding.input_dim());
    println!("embedding output dim: {}", bundle.embedding.output_dim());
    println!("states: {}", bundle.num_states());
    println!("embedding MACs/frame: {}", bundle.embedding.macs_per_frame());
    for state in &all_states {
        let tail = bundle.tail(*state)?;
        println!("state {state} tail MACs/frame: {}", tail.macs());
    }
    println!(
        "per-frame MACs, full activation: {}",
        full_frame.embedding_macs + full_frame.tail_macs_lazy
    );
    Ok(())
}
