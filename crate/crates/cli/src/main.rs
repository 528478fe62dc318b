//! `wgwave`: train, synthesize, evaluate and benchmark the vocoder.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or shape
//! error, 3 numeric failure.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wgwave::bench::bench_synthesis;
use wgwave::checkpoint;
use wgwave::config::{Config, KEYS};
use wgwave::data::{write_toy_dataset, Dataset};
use wgwave::dsp::{MelFile, MelFilterbank, StftConfig, LOG_FLOOR};
use wgwave::model::{signal_mcd, Model};
use wgwave::tensor::Tensor;
use wgwave::trainer::Trainer;
use wgwave::wav::Audio;
use wgwave::{par, Error};

#[derive(Parser, Debug)]
#[command(name = "wgwave", version, about = "Flow vocoder with a convolutional post-filter")]
struct Cli {
    /// Worker threads (1 selects the sequential path).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train (or resume) on a directory of paired WAV/WGMEL files.
    Train(TrainArgs),
    /// Generate audio from a WGMEL condition file.
    Synth(SynthArgs),
    /// Copy synthesis of a WAV file; prints the mel cepstral distortion.
    Resynth(ResynthArgs),
    /// Mel cepstral distortion between two WAV files.
    Mcd(McdArgs),
    /// Synthesis throughput on silence-conditioned utterances.
    Bench(BenchArgs),
    /// Extract a WGMEL condition file from a WAV file.
    Mel(MelArgs),
    /// Print a complete configuration file.
    Config(ConfigArgs),
}

#[derive(Args, Debug)]
struct ConfigSource {
    /// Complete configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: g8, g20 or toy.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Debug)]
#[command(after_help = "Any configuration key can be overridden with `--key value`.")]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Directory of training clips.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and train.csv.
    #[arg(long)]
    out: PathBuf,
    /// Generate the synthetic tone dataset into --data if it holds no WAV files.
    #[arg(long)]
    toy: bool,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this step instead of total_steps.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mel: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Latent standard deviation; defaults to the checkpoint's temperature.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ResynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct McdArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Take STFT settings from this checkpoint instead of the w800 preset.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(after_help = "With --preset, configuration keys can be overridden with `--key value`.")]
struct BenchArgs {
    /// Benchmark a trained checkpoint.
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    source: ConfigSource,
    /// Comma-separated utterance durations in seconds.
    #[arg(long, default_value = "2,3,4,5,6,7,8,9", value_delimiter = ',')]
    seconds: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Also write per-utterance rows to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MelArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// w800 (2048/200/800, 80 bands) or w1600 (4096/400/1600, 160 bands).
    #[arg(long, default_value = "w800")]
    preset: String,
    #[arg(long = "fft_size", alias = "fft-size")]
    fft_size: Option<usize>,
    #[arg(long = "hop_size", alias = "hop-size")]
    hop_size: Option<usize>,
    #[arg(long = "win_size", alias = "win-size")]
    win_size: Option<usize>,
    #[arg(long = "n_mels", alias = "n-mels")]
    n_mels: Option<usize>,
    #[arg(long)]
    fmin: Option<f64>,
    #[arg(long)]
    fmax: Option<f64>,
}

#[derive(Args, Debug)]
#[command(after_help = "Configuration keys can be overridden with `--key value`.")]
struct ConfigArgs {
    #[command(flatten)]
    source: ConfigSource,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if matches!(e, Error::Config { .. }) {
        1
    } else {
        2
    }
}

/// Pull `--key value` / `--key=value` pairs naming configuration keys out of
/// `args` (for commands that build a configuration).
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let command = args.iter().skip(1).find(|a| {
        matches!(
            a.as_str(),
            "train" | "synth" | "resynth" | "mcd" | "bench" | "mel" | "config"
        )
    });
    let takes_config = matches!(command.map(String::as_str), Some("train" | "bench" | "config"));
    if !takes_config {
        return (args, Vec::new());
    }
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let key = name.replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            rest.push(a);
            continue;
        }
        match inline.or_else(|| it.next()) {
            Some(v) => overrides.push((key, v)),
            None => {
                rest.push(a);
            }
        }
    }
    (rest, overrides)
}

fn build_config(source: &ConfigSource, overrides: &[(String, String)], default: &str) -> CliResult<Config> {
    let mut cfg = match (&source.config, &source.preset) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(p)) => Config::preset(p)?,
        (None, None) => Config::preset(default)?,
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn has_wavs(dir: &Path) -> bool {
    std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .any(|e| e.path().extension().is_some_and(|x| x == "wav"))
        })
        .unwrap_or(false)
}

fn train(args: TrainArgs, overrides: &[(String, String)]) -> CliResult<()> {
    let mut trainer: Trainer<f32> = match &args.resume {
        Some(path) => {
            if args.source.config.is_some() || args.source.preset.is_some() || !overrides.is_empty() {
                return Err(Failure::Usage(
                    "--resume takes its configuration from the checkpoint; drop --config, --preset and key overrides"
                        .into(),
                ));
            }
            checkpoint::load(path)?
        }
        None => Trainer::new(Model::new(build_config(&args.source, overrides, "toy")?)?)?,
    };
    let cfg = trainer.model.config.clone();
    if args.toy && !has_wavs(&args.data) {
        eprintln!("generating {} toy clips in {}", cfg.toy_clips, args.data.display());
        write_toy_dataset(&trainer.model, &args.data, cfg.toy_clips, 0)?;
    }
    let data = Dataset::load_dir(&trainer.model, &args.data)?;
    data.check(&cfg)?;
    if args.resume.is_none() {
        trainer.model.mel_stats = data.mel_stats()?;
    }
    std::fs::create_dir_all(&args.out).map_err(Error::from)?;
    let csv_path = args.out.join("train.csv");
    let file = if trainer.step == 0 {
        File::create(&csv_path)
    } else {
        OpenOptions::new().append(true).create(true).open(&csv_path)
    }
    .map_err(Error::from)?;
    let mut log = BufWriter::new(file);
    let until = args.steps.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let out = args.out.clone();
    eprintln!(
        "training {} parameters on {} clips, steps {}..{until}",
        trainer.model.census().total,
        data.len(),
        trainer.step
    );
    trainer.run(&data, until, Some(&mut log), |t, rec| {
        if rec.step % 100 == 0 {
            eprintln!(
                "step {:>7}  lr {:.2e}  L_z {:.5}  L_s {}  {:.0} ms",
                rec.step,
                rec.lr,
                rec.l_z,
                rec.l_s.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into()),
                rec.wall_ms
            );
        }
        if cfg.checkpoint_every > 0 && t.step % cfg.checkpoint_every == 0 && t.step < until {
            checkpoint::save(t, out.join(format!("step_{:08}.ckpt", t.step)))?;
        }
        Ok(())
    })?;
    log.flush().map_err(Error::from)?;
    let final_path = args.out.join("final.ckpt");
    checkpoint::save(&trainer, &final_path)?;
    println!("{}", final_path.display());
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Model<f32>> {
    Ok(checkpoint::load::<f32>(path)?.model)
}

fn write_audio(model: &Model<f32>, samples: Vec<f32>, out: &Path) -> CliResult<()> {
    Audio::new(model.config.sample_rate, samples).write(out)?;
    Ok(())
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let model = load_model(&args.checkpoint)?;
    let mel = MelFile::load(&args.mel)?;
    let cfg = &model.config;
    if mel.n_mels as usize != cfg.n_mels {
        return Err(Error::Dimension {
            op: "synth",
            detail: format!("condition has {} bands, model expects {}", mel.n_mels, cfg.n_mels),
        }
        .into());
    }
    if mel.sample_rate != cfg.sample_rate || mel.hop_size as usize != cfg.hop_size {
        return Err(Error::Format {
            what: "mel file",
            detail: format!(
                "{} Hz / hop {} does not match model {} Hz / hop {}",
                mel.sample_rate, mel.hop_size, cfg.sample_rate, cfg.hop_size
            ),
        }
        .into());
    }
    let cond = model.condition(&mel.condition::<f32>())?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let out = model.synthesize(&cond, args.temperature.unwrap_or(cfg.temperature), &mut rng)?;
    let n = out.numel();
    write_audio(&model, out.into_data(), &args.out)?;
    println!("{n} samples -> {}", args.out.display());
    Ok(())
}

fn resynth(args: ResynthArgs) -> CliResult<()> {
    let model = load_model(&args.checkpoint)?;
    let input = Audio::read(&args.input)?;
    if input.sample_rate != model.config.sample_rate {
        return Err(Error::Format {
            what: "wav",
            detail: format!(
                "input is {} Hz, model is {} Hz",
                input.sample_rate, model.config.sample_rate
            ),
        }
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let temperature = args.temperature.unwrap_or(model.config.temperature);
    let out = model.resynthesize(&input.samples, temperature, &mut rng)?;
    let mcd = model.mcd(&input.samples, &out)?;
    write_audio(&model, out, &args.out)?;
    println!("MCD {mcd:.4} dB");
    Ok(())
}

fn mcd_cmd(args: McdArgs) -> CliResult<()> {
    let a = Audio::read(&args.reference)?;
    let b = Audio::read(&args.test)?;
    if a.sample_rate != b.sample_rate {
        return Err(Error::Format {
            what: "wav",
            detail: format!("sample rates differ: {} vs {}", a.sample_rate, b.sample_rate),
        }
        .into());
    }
    let cfg = match &args.checkpoint {
        Some(p) => load_model(p)?.config,
        None => {
            let mut c = Config::g8();
            c.sample_rate = a.sample_rate;
            c.fmax = a.sample_rate as f64 / 2.0;
            c
        }
    };
    if cfg.sample_rate != a.sample_rate {
        return Err(Error::Format {
            what: "wav",
            detail: "sample rate differs from the checkpoint".into(),
        }
        .into());
    }
    println!("MCD {:.4} dB", signal_mcd(&cfg, &a.samples, &b.samples)?);
    Ok(())
}

fn bench(args: BenchArgs, overrides: &[(String, String)]) -> CliResult<()> {
    if args.checkpoint.is_some() && !overrides.is_empty() {
        return Err(Failure::Usage(
            "key overrides apply to --preset/--config, not --checkpoint".into(),
        ));
    }
    if args.seconds.iter().any(|s| !(*s > 0.0)) {
        return Err(Failure::Usage("--seconds must be positive".into()));
    }
    let (model, label) = match &args.checkpoint {
        Some(p) => (load_model(p)?, p.display().to_string()),
        None => {
            let cfg = build_config(&args.source, overrides, "g8")?;
            let label = match (&args.source.config, &args.source.preset) {
                (Some(p), _) => p.display().to_string(),
                (None, Some(p)) => format!("preset {p} (untrained)"),
                (None, None) => "preset g8 (untrained)".into(),
            };
            (Model::new(cfg)?, label)
        }
    };
    println!("# synthesis wall time only; model loading and file I/O excluded");
    let report = bench_synthesis(&model, &label, &args.seconds, args.repeats)?;
    println!("{report}");
    if let Some(path) = &args.csv {
        let mut w = BufWriter::new(File::create(path).map_err(Error::from)?);
        writeln!(w, "duration_s,samples,wall_s,samples_per_s").map_err(Error::from)?;
        for r in &report.runs {
            writeln!(w, "{},{},{},{}", r.seconds, r.samples, r.wall_s, r.throughput()).map_err(Error::from)?;
        }
        w.flush().map_err(Error::from)?;
    }
    Ok(())
}

fn mel(args: MelArgs) -> CliResult<()> {
    let (fft, hop, win, bands) = match args.preset.as_str() {
        "w800" => (2048, 200, 800, 80),
        "w1600" => (4096, 400, 1600, 160),
        other => return Err(Failure::Usage(format!("unknown mel preset `{other}` (w800, w1600)"))),
    };
    let audio = Audio::read(&args.input)?;
    let stft = StftConfig::new(
        args.fft_size.unwrap_or(fft),
        args.hop_size.unwrap_or(hop),
        args.win_size.unwrap_or(win),
    )?;
    let fb = std::sync::Arc::new(MelFilterbank::<f32>::slaney(
        args.n_mels.unwrap_or(bands),
        stft.fft_size,
        audio.sample_rate,
        args.fmin.unwrap_or(0.0),
        args.fmax.unwrap_or(audio.sample_rate as f64 / 2.0),
    )?);
    let x = Tensor::new(&[audio.samples.len()], audio.samples)?;
    let lm = wgwave::dsp::log_mel(&x, &stft, &fb, LOG_FLOOR)?;
    let file = MelFile::from_condition(&lm, audio.sample_rate, stft.hop_size as u32)?;
    file.save(&args.out)?;
    println!(
        "{} bands x {} frames -> {}",
        file.n_mels,
        file.n_frames,
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> CliResult<()> {
    if let Some(n) = cli.threads {
        par::set_threads(n).map_err(Failure::Usage)?;
    }
    match cli.cmd {
        Cmd::Train(a) => train(a, overrides),
        Cmd::Synth(a) => synth(a),
        Cmd::Resynth(a) => resynth(a),
        Cmd::Mcd(a) => mcd_cmd(a),
        Cmd::Bench(a) => bench(a, overrides),
        Cmd::Mel(a) => mel(a),
        Cmd::Config(a) => {
            print!("{}", build_config(&a.source, overrides, "g8")?.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
