use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mixit_core::audio_io::{build_manifest, read_wav, write_wav};
use mixit_core::config::RunConfig;
use mixit_core::gradcheck::{self, GradCheckConfig};
use mixit_core::loss::enumerate_allowed;
use mixit_core::mixer::{gen_synth_corpus, CorpusCounts};
use mixit_core::postproc::{remix, snr_db};
use mixit_core::trainer::{self, enhance, load_model};
use mixit_core::{Error, Manifest, ModelConfig, SourceKind};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "mixit", version, about = "Semi-supervised MixIT speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index the .wav files of a directory into a JSON-lines manifest.
    Manifest {
        /// Directory to scan (not recursive).
        root: PathBuf,
        /// Role of the files: clean, noise or noisy.
        #[arg(long)]
        kind: SourceKind,
        /// Manifest file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic clean/noise/noisy corpus with manifests.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        clean: usize,
        #[arg(long, default_value_t = 200)]
        noise: usize,
        #[arg(long, default_value_t = 200)]
        noisy: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a JSON run configuration.
    Train {
        /// RunConfig JSON file.
        config: PathBuf,
        /// Directory for checkpoints, metrics.jsonl and the resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the training and the sampler seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Enhance one file or every .wav in a directory.
    Enhance {
        /// Checkpoint (.mxc) with its .json sidecar next to it.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input .wav file or directory.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add the unprocessed input back at this SNR (dB).
        #[arg(long)]
        remix_beta: Option<f64>,
    },
    /// SNR report of processed files against clean references.
    EvalSnr {
        /// Manifest whose clean entries are the references.
        #[arg(long)]
        clean: PathBuf,
        /// Directory of processed files, named like the references.
        #[arg(long)]
        processed: PathBuf,
        /// Directory of unprocessed inputs, named like the references.
        #[arg(long)]
        noisy: PathBuf,
        /// CSV file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ModelSize::Tiny)]
        model: ModelSize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, hide = true)]
        break_gradient: bool,
    },
    /// Print the allowed mixing matrices for M outputs.
    EnumMix {
        outputs: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelSize {
    Tiny,
    Full,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::UnsupportedOutputs(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = std::result::Result<ExitCode, Failure>;

fn require_dir(path: &Path) -> std::result::Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("not a directory: {}", path.display())))
    }
}

fn runtime<E: std::fmt::Display>(ctx: &Path) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", ctx.display()))
}

fn cmd_manifest(root: &Path, kind: SourceKind, out: &Path) -> CmdResult {
    require_dir(root)?;
    let scan = build_manifest(root, kind)?;
    for (path, reason) in &scan.skipped {
        eprintln!("skipped {}: {reason}", path.display());
    }
    scan.manifest.write_jsonl(out)?;
    eprintln!(
        "{} entries written to {}, {} skipped",
        scan.manifest.len(),
        out.display(),
        scan.skipped.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(out: &Path, counts: CorpusCounts, seed: u64) -> CmdResult {
    let paths = gen_synth_corpus(out, counts, seed)?;
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    if !config.is_file() {
        return Err(Failure::Usage(format!("no such config file: {}", config.display())));
    }
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
        cfg.sampler.seed = seed;
    }
    let manifest = cfg.load_manifests()?;
    fs::create_dir_all(out).map_err(runtime(out))?;
    let resolved = out.join("config.resolved.json");
    fs::write(&resolved, cfg.to_json_pretty()).map_err(runtime(&resolved))?;
    let report = trainer::train(&manifest, &cfg.setup(), out)?;
    eprintln!(
        "best epoch {} -> {}",
        report.best_epoch,
        out.join(trainer::BEST_CHECKPOINT).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn wav_files(dir: &Path) -> std::result::Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(runtime(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_enhance(checkpoint: &Path, input: &Path, out: &Path, beta: Option<f64>) -> CmdResult {
    if !input.exists() {
        return Err(Failure::Usage(format!("no such input: {}", input.display())));
    }
    if let Some(b) = beta {
        if !b.is_finite() {
            return Err(Failure::Usage(format!("--remix-beta must be finite, got {b}")));
        }
    }
    let (params, meta) = load_model(checkpoint)?;
    let files = if input.is_dir() {
        wav_files(input)?
    } else {
        vec![input.to_path_buf()]
    };
    fs::create_dir_all(out).map_err(runtime(out))?;
    for file in files {
        let noisy = read_wav(&file)?;
        let mut y = enhance(&params, &meta.model, &meta.stft, &noisy)?;
        if let Some(b) = beta {
            y = remix(&y, &noisy, b)?;
        }
        let name = file.file_name().expect("file has a name");
        let dst = out.join(name);
        write_wav(&y, &dst)?;
        eprintln!("{} -> {}", file.display(), dst.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval_snr(clean: &Path, processed: &Path, noisy: &Path, out: &Path) -> CmdResult {
    require_dir(processed)?;
    require_dir(noisy)?;
    let manifest = Manifest::read_jsonl(clean)?;
    let mut writer = csv::Writer::from_path(out).map_err(runtime(out))?;
    writer
        .write_record(["path", "snr_in_db", "snr_out_db", "snri_db"])
        .map_err(runtime(out))?;
    let mut rows = 0usize;
    for entry in manifest.of_kind(SourceKind::Clean) {
        let path = Path::new(&entry.path);
        let name = path
            .file_name()
            .ok_or_else(|| Failure::Usage(format!("manifest entry without file name: {}", entry.path)))?;
        let reference = read_wav(path)?;
        let x = read_wav(noisy.join(name))?;
        let y = read_wav(processed.join(name))?;
        let snr_in = snr_db(&reference, &x)?;
        let snr_out = snr_db(&reference, &y)?;
        writer
            .write_record([
                entry.path.clone(),
                format!("{snr_in:.6}"),
                format!("{snr_out:.6}"),
                format!("{:.6}", snr_out - snr_in),
            ])
            .map_err(runtime(out))?;
        rows += 1;
    }
    writer.flush().map_err(runtime(out))?;
    eprintln!("{rows} rows written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, model: ModelSize, frames: usize, corrupt: bool) -> CmdResult {
    let model = match model {
        ModelSize::Tiny => ModelConfig::tiny(),
        ModelSize::Full => ModelConfig::default(),
    };
    if frames < model.min_frames() {
        return Err(Failure::Usage(format!(
            "--frames must be at least {} for this model",
            model.min_frames()
        )));
    }
    let report = gradcheck::run(&GradCheckConfig {
        model,
        frames,
        seed,
        corrupt,
        ..Default::default()
    })?;
    for t in &report.tensors {
        println!("{:<24} probed {:>3}  max rel error {:.3e}", t.name, t.probed, t.max_rel_error);
    }
    println!("max relative error: {:.6e}", report.max_rel_error);
    if report.passes(GRADCHECK_TOL) {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {:.3e} > {GRADCHECK_TOL:e}", report.max_rel_error);
        Ok(ExitCode::from(1))
    }
}

fn cmd_enum_mix(outputs: usize) -> CmdResult {
    for a in enumerate_allowed(outputs)? {
        println!("{a}");
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Manifest { root, kind, out } => cmd_manifest(&root, kind, &out),
        Command::Simulate {
            out,
            clean,
            noise,
            noisy,
            seed,
        } => cmd_simulate(&out, CorpusCounts { clean, noise, noisy }, seed),
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Enhance {
            checkpoint,
            input,
            out,
            remix_beta,
        } => cmd_enhance(&checkpoint, &input, &out, remix_beta),
        Command::EvalSnr {
            clean,
            processed,
            noisy,
            out,
        } => cmd_eval_snr(&clean, &processed, &noisy, &out),
        Command::Gradcheck {
            seed,
            model,
            frames,
            break_gradient,
        } => cmd_gradcheck(seed, model, frames, break_gradient),
        Command::EnumMix { outputs } => cmd_enum_mix(outputs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
