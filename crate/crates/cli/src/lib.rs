//! Command-line driver: synthetic data, training, encoding, separation, evaluation,
//! export and the numerical self-checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

pub mod export;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use musrep::dataset::{is_active, load_and_downmix, segment, Signal, ACTIVITY_EPS, ACTIVITY_THRESHOLD_DB, SAMPLE_RATE};
use musrep::evaluation::{self, EvalConfig, FrontEnd, StftFrontEnd, Track};
use musrep::losses::sinkhorn_plan;
use musrep::training::{self, gradcheck, AdamConfig, TrainConfig};
use musrep::wav::write_wav_f32;
use musrep::{Error, LossConfig, Model, ModelConfig, Objective};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Core(Error::InvalidConfig(_)) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "musrep", version, about = "Learned music signal representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic voice/accompaniment stems
    SynthData(RunArgs),
    /// Train a model on a stems directory
    Train(RunArgs),
    /// Encode a WAV file and report the representation shape
    Encode(RunArgs),
    /// Encode and decode a WAV file
    Reconstruct(RunArgs),
    /// Oracle binary-mask separation of a voice/accompaniment pair
    Separate(RunArgs),
    /// Score a model or the STFT baseline on a stems directory
    Evaluate(RunArgs),
    /// Export a representation as CSV and PGM
    Export(RunArgs),
    /// Compare analytic gradients with finite differences
    GradCheck(RunArgs),
    /// Compare Sinkhorn costs with exact optimal assignments
    OtCheck(RunArgs),
}

#[derive(Debug, Args, Default)]
struct RunArgs {
    /// key = value file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stems: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Input WAV for encode, reconstruct and export
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    voice: Option<String>,
    #[arg(long)]
    accompaniment: Option<String>,
    /// Use a fixed front end instead of a checkpoint
    #[arg(long, value_parser = ["stft"])]
    baseline: Option<String>,
    #[arg(long, value_parser = ["tv", "sinkhorn"])]
    loss: Option<String>,
    #[arg(long)]
    omega: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long, value_parser = ["1", "2"])]
    p: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    components: Option<String>,
    #[arg(long)]
    stride: Option<String>,
    #[arg(long = "kernel-len")]
    kernel_len: Option<String>,
    #[arg(long = "dilated-len")]
    dilated_len: Option<String>,
    #[arg(long)]
    dilation: Option<String>,
    #[arg(long = "square-freq", value_parser = ["on", "off"])]
    square_freq: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long = "gaussian-std")]
    gaussian_std: Option<String>,
    #[arg(long = "early-stop", value_parser = ["on", "off"])]
    early_stop: Option<String>,
    #[arg(long = "max-iters")]
    max_iters: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long = "segment-len")]
    segment_len: Option<String>,
    #[arg(long = "train-hop")]
    train_hop: Option<String>,
    #[arg(long)]
    tracks: Option<String>,
    #[arg(long)]
    seconds: Option<String>,
    #[arg(long, value_parser = ["mixed", "disjoint"])]
    bands: Option<String>,
}

/// Keys with defaults; these are echoed into every output directory.
const DEFAULTS: &[(&str, &str)] = &[
    ("loss", "tv"),
    ("omega", "0.5"),
    ("lambda", "0.5"),
    ("p", "1"),
    ("epochs", "10"),
    ("batch", "8"),
    ("seed", "0"),
    ("components", "800"),
    ("stride", "256"),
    ("kernel-len", "2048"),
    ("dilated-len", "5"),
    ("dilation", "10"),
    ("square-freq", "on"),
    ("lr", "0.0001"),
    ("gaussian-std", "0.0001"),
    ("early-stop", "on"),
    ("max-iters", "100"),
    ("tau", "0.000001"),
    ("segment-len", "44100"),
    ("train-hop", "22050"),
    ("tracks", "4"),
    ("seconds", "6"),
    ("bands", "mixed"),
];

const PATH_KEYS: &[&str] = &["stems", "checkpoint", "out", "input", "voice", "accompaniment", "baseline"];

impl RunArgs {
    fn flags(&self) -> Vec<(&'static str, Option<&String>)> {
        vec![
            ("stems", self.stems.as_ref()),
            ("checkpoint", self.checkpoint.as_ref()),
            ("out", self.out.as_ref()),
            ("input", self.input.as_ref()),
            ("voice", self.voice.as_ref()),
            ("accompaniment", self.accompaniment.as_ref()),
            ("baseline", self.baseline.as_ref()),
            ("loss", self.loss.as_ref()),
            ("omega", self.omega.as_ref()),
            ("lambda", self.lambda.as_ref()),
            ("p", self.p.as_ref()),
            ("epochs", self.epochs.as_ref()),
            ("batch", self.batch.as_ref()),
            ("seed", self.seed.as_ref()),
            ("components", self.components.as_ref()),
            ("stride", self.stride.as_ref()),
            ("kernel-len", self.kernel_len.as_ref()),
            ("dilated-len", self.dilated_len.as_ref()),
            ("dilation", self.dilation.as_ref()),
            ("square-freq", self.square_freq.as_ref()),
            ("lr", self.lr.as_ref()),
            ("gaussian-std", self.gaussian_std.as_ref()),
            ("early-stop", self.early_stop.as_ref()),
            ("max-iters", self.max_iters.as_ref()),
            ("tau", self.tau.as_ref()),
            ("segment-len", self.segment_len.as_ref()),
            ("train-hop", self.train_hop.as_ref()),
            ("tracks", self.tracks.as_ref()),
            ("seconds", self.seconds.as_ref()),
            ("bands", self.bands.as_ref()),
        ]
    }
}

/// Resolved settings: defaults, then the config file, then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    command: String,
    values: BTreeMap<String, String>,
}

pub fn parse_config_file(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
        let key = k.trim().to_string();
        if !DEFAULTS.iter().any(|(d, _)| *d == key) && !PATH_KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("config line {}: unknown key '{key}'", i + 1)));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

impl Settings {
    fn resolve(command: &str, args: &RunArgs) -> CliResult<Self> {
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            values.extend(parse_config_file(&text)?);
        }
        for (k, v) in args.flags() {
            if let Some(v) = v {
                values.insert(k.to_string(), v.clone());
            }
        }
        Ok(Settings {
            command: command.to_string(),
            values,
        })
    }

    fn get<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self
            .values
            .get(key)
            .ok_or_else(|| CliError::Usage(format!("--{key} is required")))?;
        raw.parse()
            .map_err(|e| CliError::Usage(format!("invalid value '{raw}' for --{key}: {e}")))
    }

    fn switch(&self, key: &str) -> CliResult<bool> {
        match self.get::<String>(key)?.as_str() {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            other => Err(CliError::Usage(format!("--{key} expects on or off, got '{other}'"))),
        }
    }

    fn path(&self, key: &str) -> CliResult<PathBuf> {
        self.get::<String>(key).map(PathBuf::from)
    }

    fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(PathBuf::from)
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        Ok(ModelConfig {
            components: self.get("components")?,
            stride: self.get("stride")?,
            kernel_len: self.get("kernel-len")?,
            dilated_len: self.get("dilated-len")?,
            dilation: self.get("dilation")?,
            square_freq: self.switch("square-freq")?,
        })
    }

    pub fn loss_config(&self) -> CliResult<LossConfig> {
        Ok(LossConfig {
            omega: self.get("omega")?,
            lambda: self.get("lambda")?,
            p: self.get("p")?,
            max_iters: self.get("max-iters")?,
            tau: self.get("tau")?,
            ..LossConfig::default()
        })
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.get("batch")?,
            epochs: self.get("epochs")?,
            objective: self.get::<String>("loss")?.parse::<Objective>()?,
            loss: self.loss_config()?,
            adam: AdamConfig {
                lr: self.get("lr")?,
                ..AdamConfig::default()
            },
            seed: self.get("seed")?,
            early_stop: self.switch("early-stop")?,
            gaussian_std: self.get("gaussian-std")?,
            segment_len: self.get("segment-len")?,
        })
    }

    /// `key = value` lines in key order, re-readable with `--config`.
    pub fn echo(&self) -> String {
        let mut s = format!("# musrep {}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn prepare_out(settings: &Settings) -> CliResult<PathBuf> {
    let out = settings.path("out")?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let cfg = out.join("config.txt");
    fs::write(&cfg, settings.echo()).map_err(io_err(&cfg))?;
    Ok(out)
}

/// Reads every `<stems>/<track>/{voice,accompaniment}.wav` pair, in directory-name order.
pub fn load_tracks(stems: &Path) -> CliResult<Vec<Track>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(stems)
        .map_err(io_err(stems))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("voice.wav").is_file() && p.join("accompaniment.wav").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!(
            "no track directories with voice.wav and accompaniment.wav under {}",
            stems.display()
        )));
    }
    dirs.iter()
        .map(|d| {
            let voice = load_and_downmix(&d.join("voice.wav"))?;
            let accompaniment = load_and_downmix(&d.join("accompaniment.wav"))?;
            if voice.len() != accompaniment.len() {
                return Err(CliError::Core(Error::LengthMismatch(voice.len(), accompaniment.len())));
            }
            Ok(Track {
                name: d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                voice,
                accompaniment,
            })
        })
        .collect()
}

/// Overlapping training segments; voice segments failing the activity rule are dropped.
pub fn training_segments(tracks: &[Track], len: usize, hop: usize) -> CliResult<(Vec<Signal>, Vec<Signal>)> {
    let mut voice = Vec::new();
    let mut acc = Vec::new();
    for t in tracks {
        voice.extend(
            segment(&t.voice, len, hop)?
                .into_iter()
                .filter(|s| is_active(s.as_slice(), ACTIVITY_THRESHOLD_DB, ACTIVITY_EPS)),
        );
        acc.extend(segment(&t.accompaniment, len, hop)?);
    }
    if voice.is_empty() {
        return Err(CliError::Core(Error::NoActiveSegments));
    }
    Ok((voice, acc))
}

fn model_for(settings: &Settings) -> CliResult<Model> {
    match settings.opt_path("checkpoint") {
        Some(p) => Ok(training::load_checkpoint(&p)?),
        None => Ok(Model::init(&settings.model_config()?, settings.get("seed")?)?),
    }
}

fn front_end(settings: &Settings) -> CliResult<Box<dyn FrontEnd>> {
    match settings.values.get("baseline").map(String::as_str) {
        Some("stft") => Ok(Box::new(StftFrontEnd::default())),
        Some(other) => Err(CliError::Usage(format!("unknown baseline '{other}'"))),
        None => {
            if settings.opt_path("checkpoint").is_none() {
                return Err(CliError::Usage("--checkpoint or --baseline stft is required".into()));
            }
            Ok(Box::new(model_for(settings)?))
        }
    }
}

fn cmd_synth(s: &Settings) -> CliResult<()> {
    let out = prepare_out(s)?;
    let cfg = synth::SynthConfig {
        tracks: s.get("tracks")?,
        seconds: s.get("seconds")?,
        seed: s.get("seed")?,
        disjoint_bands: s.get::<String>("bands")? == "disjoint",
    };
    let dirs = synth::write_stems(&out, &cfg)?;
    println!("wrote {} tracks to {}", dirs.len(), out.display());
    Ok(())
}

fn cmd_train(s: &Settings) -> CliResult<()> {
    let out = prepare_out(s)?;
    let cfg = s.train_config()?;
    let hop: usize = s.get("train-hop")?;
    let tracks = load_tracks(&s.path("stems")?)?;
    let (voice, acc) = training_segments(&tracks, cfg.segment_len, hop)?;
    let mut model = Model::init(&s.model_config()?, cfg.seed)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut write_err = None;
    let summary = training::train(&mut model, &voice, &acc, &cfg, |r| {
        if let Err(e) = writeln!(log, "{}", r.to_json_line()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path)(e));
    }
    let ckpt = s.opt_path("checkpoint").unwrap_or_else(|| out.join("model.ckpt"));
    training::save_checkpoint(&ckpt, &model)?;
    for (e, v) in summary.epoch_neg_snr.iter().enumerate() {
        println!("epoch {e}: mean neg-SNR {v:.4} dB");
    }
    if summary.stopped_early {
        println!("stopped early after {} epochs", summary.epoch_neg_snr.len());
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn read_input(s: &Settings, key: &str) -> CliResult<Signal> {
    Ok(load_and_downmix(&s.path(key)?)?)
}

fn cmd_encode(s: &Settings) -> CliResult<()> {
    let model = model_for(s)?;
    let x = read_input(s, "input")?;
    let a = model.encode(x.as_slice()).activations;
    println!("components={} frames={}", a.nrows(), a.ncols());
    if s.values.contains_key("out") {
        let out = prepare_out(s)?;
        let path = out.join("representation.csv");
        fs::write(&path, export::to_csv(&a)).map_err(io_err(&path))?;
    }
    Ok(())
}

fn cmd_reconstruct(s: &Settings) -> CliResult<()> {
    let model = model_for(s)?;
    let x = read_input(s, "input")?;
    let y = model.reconstruct(x.as_slice())?;
    let out = prepare_out(s)?;
    write_wav_f32(&out.join("reconstruction.wav"), &y, SAMPLE_RATE)?;
    println!("SI-SDR {:.3} dB", evaluation::si_sdr(x.as_slice(), &y)?);
    Ok(())
}

fn cmd_separate(s: &Settings) -> CliResult<()> {
    let front = front_end(s)?;
    let v = read_input(s, "voice")?;
    let ac = read_input(s, "accompaniment")?;
    if v.len() != ac.len() {
        return Err(Error::LengthMismatch(v.len(), ac.len()).into());
    }
    let m: Vec<f64> = v.as_slice().iter().zip(ac.as_slice()).map(|(a, b)| a + b).collect();
    let est = evaluation::oracle_separate(front.as_ref(), &m, v.as_slice(), ac.as_slice())?;
    let out = prepare_out(s)?;
    write_wav_f32(&out.join("mixture.wav"), &m, SAMPLE_RATE)?;
    write_wav_f32(&out.join("voice_estimate.wav"), &est, SAMPLE_RATE)?;
    println!("SI-SDR-BM {:.3} dB", evaluation::si_sdr(v.as_slice(), &est)?);
    Ok(())
}

fn cmd_evaluate(s: &Settings) -> CliResult<()> {
    let front = front_end(s)?;
    let tracks = load_tracks(&s.path("stems")?)?;
    let cfg = EvalConfig {
        segment_len: s.get("segment-len")?,
        ..EvalConfig::default()
    };
    let report = evaluation::evaluate(&tracks, front.as_ref(), &cfg)?;
    let out = prepare_out(s)?;
    let csv = out.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(io_err(&csv))?;
    let summary = report.summary();
    let path = out.join("summary.txt");
    fs::write(&path, &summary).map_err(io_err(&path))?;
    print!("{summary}");
    Ok(())
}

fn cmd_export(s: &Settings) -> CliResult<()> {
    let model = model_for(s)?;
    let x = read_input(s, "input")?;
    let a = model.encode(x.as_slice()).activations;
    let out = prepare_out(s)?;
    export::export_representation(&a, &model.decoder.frequency_order(), &out, "representation")?;
    println!("exported {}x{} representation to {}", a.nrows(), a.ncols(), out.display());
    Ok(())
}

fn cmd_grad_check(s: &Settings) -> CliResult<()> {
    let results = gradcheck::run_all(s.get("seed")?)?;
    let mut worst = 0.0f64;
    for r in &results {
        println!(
            "{:<26} entries={:<4} max_rel_error={:.3e} {}",
            r.name,
            r.entries,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error: {worst:.3e} (tolerance {:.0e})", gradcheck::TOLERANCE);
    if results.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed: {worst:.3e}")))
    }
}

/// Exact optimal-assignment cost under uniform marginals, by enumerating permutations.
pub fn exact_assignment_cost(m: &Array2<f64>) -> f64 {
    fn go(m: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let t = m.nrows();
        if row == t {
            *best = best.min(acc);
            return;
        }
        for j in 0..t {
            if !used[j] {
                used[j] = true;
                go(m, row + 1, used, acc + m[[row, j]], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(m, 0, &mut vec![false; m.nrows()], 0.0, &mut best);
    best / m.nrows() as f64
}

/// Random assignment problem: integer costs in `0..10`, so distinct assignments
/// differ by at least one cost unit.
pub fn random_assignment_costs(rng: &mut ChaCha8Rng, t: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, t), |_| rng.random_range(0..10) as f64)
}

/// Worst relative gap `|<P, M> - OT(M)| / OT(M)` over random assignment problems
/// with `T` alternating between 3 and 4.
pub fn ot_gap(seed: u64, trials: usize, lambda: f64, max_iters: usize, tau: f64) -> CliResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..trials {
        let m = random_assignment_costs(&mut rng, 3 + i % 2);
        let plan = sinkhorn_plan(&m, lambda, max_iters, tau)?;
        let cost = (&plan.plan * &m).sum();
        let exact = exact_assignment_cost(&m);
        worst = worst.max((cost - exact).abs() / exact.max(1e-12));
    }
    Ok(worst)
}

pub const OT_CHECK_MAX_ITERS: usize = 10_000;

fn cmd_ot_check(s: &Settings) -> CliResult<()> {
    let tau = s.get("tau")?;
    let worst = ot_gap(s.get("seed")?, 200, 50.0, OT_CHECK_MAX_ITERS, tau)?;
    println!("lambda=50 T in {{3,4}}: max relative gap to exact assignment {worst:.3e}");
    if worst <= 0.01 {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("relative gap {worst:.3e} exceeds 1%")))
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let (name, args, f): (&str, &RunArgs, fn(&Settings) -> CliResult<()>) = match &cli.command {
        Command::SynthData(a) => ("synth-data", a, cmd_synth),
        Command::Train(a) => ("train", a, cmd_train),
        Command::Encode(a) => ("encode", a, cmd_encode),
        Command::Reconstruct(a) => ("reconstruct", a, cmd_reconstruct),
        Command::Separate(a) => ("separate", a, cmd_separate),
        Command::Evaluate(a) => ("evaluate", a, cmd_evaluate),
        Command::Export(a) => ("export", a, cmd_export),
        Command::GradCheck(a) => ("grad-check", a, cmd_grad_check),
        Command::OtCheck(a) => ("ot-check", a, cmd_ot_check),
    };
    f(&Settings::resolve(name, args)?)
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
