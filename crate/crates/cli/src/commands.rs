use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use ynet_core::audio::{read_wav, write_wav, AudioClip, WavEncoding, CANONICAL_RATE};
use ynet_core::dsp::{mel_render, stft, StftConfig};
use ynet_core::gradcheck::{format_table, run_suite, GradcheckConfig};
use ynet_core::kv::KeyValues;
use ynet_core::metrics::evaluate_pairs;
use ynet_core::model::{separate, Architecture};
use ynet_core::train::{synth_dataset, train, Checkpoint, DataSource, TrainConfig};
use ynet_core::Error;

#[derive(Debug)]
pub enum CommandError {
    Core(Error),
    CheckFailed(String),
}

impl fmt::Display for CommandError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommandError::Core(e) => e.fmt(f),
            CommandError::CheckFailed(msg) => write!(f, "check failed: {msg}"),
        }
    }
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        CommandError::Core(e)
    }
}

type CmdResult = Result<(), CommandError>;

/// Hybrid waveform/spectrogram singing-voice separation.
#[derive(Parser, Debug)]
#[command(name = "ynet", version, about)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic mixture/vocal pairs as a stems directory.
    SynthData(SynthArgs),
    /// Train a model and write a checkpoint plus a loss log.
    #[command(after_help = FULL_SCALE_RECIPE)]
    Train(Box<TrainArgs>),
    /// Separate the vocal from a mixture WAV.
    Separate(SeparateArgs),
    /// Score estimated vocals against references (SDR, SI-SNR, STOI).
    Evaluate(EvaluateArgs),
    /// Render a log-mel spectrogram of a WAV file as a PGM image.
    Render(RenderArgs),
    /// Finite-difference check of every differentiable op and a miniature model.
    Gradcheck(GradcheckArgs),
}

const FULL_SCALE_RECIPE: &str = "\
Full-scale recipe (not reproducible at desk scale; needs the MUSDB18 stems and
about 100 GPU-epochs):
  1. Convert each song to mono 44.1 kHz WAV stems laid out as
     <root>/<song>/mixture.wav and <root>/<song>/vocals.wav
     (100 songs for training, 25 for validation, 25 held out for testing).
  2. ynet train --data <root>/train --val-data <root>/valid \\
       --arch ynet --base-channels 16 --epochs 100 --batch 16 --lr 1e-4 \\
       --ckpt ynet.ckpt --loss-log loss.csv
  3. Run `ynet separate` on every test mixture, then
     `ynet evaluate --ref <vocals dir> --est <separated dir> --out report.csv`.

Flags override values read from --config (a key=value file using the same
names as the checkpoint config plus data_root, synth_pairs, synth_seed,
val_root, val_synth_pairs, val_synth_seed, epochs, batch_size, lr, seed,
checkpoint and loss_log).";

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; pair i is written to <out>/<i>/{mixture,vocals}.wav.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// key=value config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stems directory <root>/<song>/{mixture,vocals}.wav.
    #[arg(long, conflicts_with = "synth_pairs")]
    data: Option<PathBuf>,
    /// Train on this many generated pairs instead of a stems directory.
    #[arg(long)]
    synth_pairs: Option<usize>,
    #[arg(long)]
    synth_seed: Option<u64>,
    /// Validation stems directory; its loss is logged each epoch.
    #[arg(long, conflicts_with = "val_synth_pairs")]
    val_data: Option<PathBuf>,
    #[arg(long)]
    val_synth_pairs: Option<usize>,
    #[arg(long)]
    val_synth_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// ynet, unet-spec or unet-wave.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Feed ln(1 + magnitude) to the spectral branch.
    #[arg(long)]
    log_mag: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Loss log CSV path (epoch,step,train_loss[,val_loss]).
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SeparateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Separated vocal, written as 32-bit float WAV.
    #[arg(long)]
    out: PathBuf,
    /// Optional mask image: width = time bins, height = frequency bins,
    /// low frequencies at the bottom.
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of reference vocals.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Directory of estimates with the same file names.
    #[arg(long)]
    est: PathBuf,
    /// CSV report (clip,sdr_db,si_snr_db,stoi plus mean and median rows).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of mel bands (image height).
    #[arg(long, default_value_t = 128)]
    mel: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// First of the ten seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: corrupt the analytic gradient of this case.
    #[arg(long, hide = true)]
    break_op: Option<String>,
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(*a),
        Command::Separate(a) => separate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth_data(a: SynthArgs) -> CmdResult {
    let pairs = synth_dataset(a.seed, a.pairs)?;
    for (i, p) in pairs.iter().enumerate() {
        let dir = a.out.join(i.to_string());
        create_dir(&dir)?;
        let mix = AudioClip::new(p.mixture.clone(), CANONICAL_RATE)?;
        let voc = AudioClip::new(p.vocal.clone(), CANONICAL_RATE)?;
        write_wav(&mix, dir.join("mixture.wav"), WavEncoding::Float32)?;
        write_wav(&voc, dir.join("vocals.wav"), WavEncoding::Float32)?;
    }
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut kv = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            KeyValues::parse(&text)?
        }
        None => KeyValues::default(),
    };
    let mut flags = KeyValues::default();
    if let Some(d) = &a.data {
        flags.set("data_root", d.display());
    }
    if let Some(n) = a.synth_pairs {
        flags.set("synth_pairs", n);
    }
    if let Some(s) = a.synth_seed {
        flags.set("synth_seed", s);
    }
    if let Some(d) = &a.val_data {
        flags.set("val_root", d.display());
    }
    if let Some(n) = a.val_synth_pairs {
        flags.set("val_synth_pairs", n);
    }
    if let Some(s) = a.val_synth_seed {
        flags.set("val_synth_seed", s);
    }
    if let Some(v) = a.epochs {
        flags.set("epochs", v);
    }
    if let Some(v) = a.batch {
        flags.set("batch_size", v);
    }
    if let Some(v) = a.lr {
        flags.set("lr", v);
    }
    if let Some(v) = &a.arch {
        flags.set("architecture", v.parse::<Architecture>()?);
    }
    if let Some(v) = a.base_channels {
        flags.set("base_channels", v);
    }
    if let Some(v) = a.dropout {
        flags.set("dropout", v);
    }
    if a.log_mag {
        flags.set("log_mag", true);
    }
    if let Some(v) = a.seed {
        flags.set("seed", v);
    }
    if let Some(p) = &a.ckpt {
        flags.set("checkpoint", p.display());
    }
    if let Some(p) = &a.loss_log {
        flags.set("loss_log", p.display());
    }
    // A source given on the command line replaces one from the file.
    for (root, pairs, seed) in [
        ("data_root", "synth_pairs", "synth_seed"),
        ("val_root", "val_synth_pairs", "val_synth_seed"),
    ] {
        if flags.contains(root) {
            kv.remove(pairs);
            kv.remove(seed);
        }
        if flags.contains(pairs) {
            kv.remove(root);
        }
    }
    kv.merge(&flags);
    let cfg = TrainConfig::from_key_values(&kv)?;
    if cfg.checkpoint.is_none() {
        return Err(Error::Usage("no checkpoint path: pass --ckpt or set `checkpoint`".into()));
    }
    if !kv.contains("data_root") && !kv.contains("synth_pairs") {
        return Err(Error::Usage("no training data: pass --data or --synth-pairs".into()));
    }
    if let DataSource::Stems(root) = &cfg.data {
        if !root.is_dir() {
            return Err(Error::Io {
                path: root.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            });
        }
    }
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let mut cfg = train_config(&a)?;
    if cfg.loss_log.is_none() {
        let ckpt = cfg.checkpoint.as_ref().expect("checked");
        let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
        name.push(".loss.csv");
        cfg.loss_log = Some(ckpt.with_file_name(name));
    }
    info!(
        "training {} (base {}) for {} epochs, batch {}, lr {}",
        cfg.model.architecture, cfg.model.base_channels, cfg.epochs, cfg.batch_size, cfg.lr
    );
    let outcome = train(&cfg)?;
    let last = outcome.epochs.last().expect("at least one epoch");
    println!(
        "checkpoint {} loss log {}",
        cfg.checkpoint.as_ref().expect("checked").display(),
        cfg.loss_log.as_ref().expect("set").display()
    );
    println!("final train loss {:.6e}", last.train_loss);
    Ok(())
}

fn separate_cmd(a: SeparateArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mut model = ckpt.to_model()?;
    let mixture = read_wav(&a.input)?;
    let sep = separate(&mut model, &mixture)?;
    write_wav(&sep.vocal, &a.out, WavEncoding::Float32)?;
    if let Some(p) = &a.mask_out {
        write_text(p, &sep.mask.to_matrix().to_pgm())?;
    }
    println!(
        "separated {} samples at {} Hz into {}",
        sep.vocal.len(),
        sep.vocal.sample_rate,
        a.out.display()
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> CmdResult {
    let report = evaluate_pairs(&a.reference, &a.est)?;
    write_text(&a.out, &report.to_csv())?;
    if report.rows.is_empty() {
        warn!("no pairs evaluated");
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn render_cmd(a: RenderArgs) -> CmdResult {
    if a.mel == 0 {
        return Err(Error::Usage("--mel must be at least 1".into()).into());
    }
    let clip = read_wav(&a.input)?;
    let spec = stft(&clip, StftConfig::default())?;
    let image = mel_render(&spec, a.mel)?;
    write_text(&a.out, &image.to_pgm())?;
    println!("{} x {} mel image written to {}", image.cols, image.rows, a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    let mut cfg = GradcheckConfig::with_base_seed(a.seed);
    cfg.corrupt = a.break_op;
    let reports = run_suite(&cfg)?;
    print!("{}", format_table(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} cases passed", reports.len());
        Ok(())
    } else {
        Err(CommandError::CheckFailed(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
