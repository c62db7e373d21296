//! Command-line laboratory: teacher training, quantized student training,
//! diagnostics, ablation/sensitivity suites, and size/compute accounting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qvit::autodiff::{Tape, TapeOptions};
use qvit::checkpoint;
use qvit::config::{parse_bits, RunConfig};
use qvit::diagnostics;
use qvit::error::Error;
use qvit::model::{self, ForwardMode, QVit};
use qvit::suites::{self, SuiteConfig};
use qvit::train;

#[derive(Parser)]
#[command(name = "qvit", about = "Quantization-aware training laboratory for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AnalysisKind {
    Entropy,
    Hist,
    AttnDist,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision teacher.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a quantized student from a teacher checkpoint.
    TrainStudent {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Override the body bit-width, e.g. 2-2.
        #[arg(long)]
        bits: Option<String>,
        /// Override whether the q/k rectifier is enabled.
        #[arg(long)]
        irm: Option<Toggle>,
        /// Override whether the similarity-distillation term is enabled.
        #[arg(long)]
        dgd: Option<Toggle>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write diagnostics for a checkpoint: entropy report, value histograms,
    /// or the attention-distance matrix.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config providing the evaluation data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Component ablation (baseline / +irm / +dgd / both) per bit-width.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Comma-separated bit-widths, e.g. 2-2,4-4.
        #[arg(long)]
        bits: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-module sensitivity protocol at the config's bit-width.
    Sensitivity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter count, size and bit-operations for an architecture.
    Stats {
        /// Preset name: deit-s, deit-b or tiny. Mutually exclusive with --config.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bits: String,
    },
}

#[derive(Serialize)]
struct OutputManifest {
    command: String,
    files: Vec<String>,
}

fn write_manifest(out_dir: &Path, command: &str, files: &[PathBuf]) -> qvit::Result<()> {
    let manifest = OutputManifest {
        command: command.to_string(),
        files: files
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn load_teacher(path: &Path) -> qvit::Result<QVit> {
    let (teacher, _) = checkpoint::load(path)?;
    if !teacher.cfg.is_fully_float() {
        return Err(Error::config(format!(
            "teacher checkpoint {} is not a full-precision model",
            path.display()
        )));
    }
    Ok(teacher)
}

fn cmd_train_teacher(config: &Path, out: Option<PathBuf>) -> qvit::Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out_dir)?;
    let (train_ds, eval_ds) = cfg.data.load()?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.w_bits = 32;
    model_cfg.a_bits = 32;
    model_cfg.irm_enabled = false;
    let mut teacher = QVit::new(model_cfg, cfg.train.seed)?;
    let log = train::train_teacher(&mut teacher, &train_ds, &eval_ds, &cfg.train)?;

    let ckpt = out_dir.join("teacher.qvit");
    let log_path = out_dir.join("teacher_log.jsonl");
    checkpoint::save(&teacher, log.records.len() as u64, &ckpt)?;
    fs::write(&log_path, log.to_jsonl()?)?;
    write_manifest(&out_dir, "train-teacher", &[ckpt.clone(), log_path])?;
    if let Some(top1) = log.final_top1() {
        println!("teacher top1 {top1:.4} -> {}", ckpt.display());
    }
    Ok(())
}

fn cmd_train_student(
    config: &Path,
    teacher_path: &Path,
    bits: Option<String>,
    irm: Option<Toggle>,
    dgd: Option<Toggle>,
    out: Option<PathBuf>,
) -> qvit::Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out_dir)?;
    let (train_ds, eval_ds) = cfg.data.load()?;

    let mut model_cfg = cfg.model.clone();
    if let Some(bits) = bits {
        let (w, a) = parse_bits(&bits)?;
        model_cfg.w_bits = w;
        model_cfg.a_bits = a;
    }
    if let Some(t) = irm {
        model_cfg.irm_enabled = matches!(t, Toggle::On);
    }
    let mut dcfg = cfg.distill.clone();
    if let Some(t) = dgd {
        match t {
            Toggle::Off => dcfg.lambda_dgd = 0.0,
            Toggle::On => {
                if dcfg.lambda_dgd == 0.0 {
                    dcfg.lambda_dgd = 1.0;
                }
            }
        }
    }

    let mut teacher = load_teacher(teacher_path)?;
    let mut student = QVit::new(model_cfg, cfg.train.seed)?;
    let log = train::train_student(
        &mut student,
        &mut teacher,
        &train_ds,
        &eval_ds,
        &cfg.train,
        &dcfg,
    )?;

    let ckpt = out_dir.join("student.qvit");
    let log_path = out_dir.join("student_log.jsonl");
    checkpoint::save(&student, log.records.len() as u64, &ckpt)?;
    fs::write(&log_path, log.to_jsonl()?)?;
    write_manifest(&out_dir, "train-student", &[ckpt.clone(), log_path])?;
    if let Some(top1) = log.final_top1() {
        println!("student top1 {top1:.4} -> {}", ckpt.display());
    }
    Ok(())
}

fn cmd_analyze(
    kind: AnalysisKind,
    ckpt_path: &Path,
    data_config: &Path,
    out: Option<PathBuf>,
) -> qvit::Result<()> {
    let cfg = RunConfig::from_file(data_config)?;
    let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out_dir)?;
    let (_, eval_ds) = cfg.data.load()?;
    let (mut model, _) = checkpoint::load(ckpt_path)?;

    // one fixed evaluation batch drives every instrument
    let norm = eval_ds.normalizer();
    let idx: Vec<usize> = (0..cfg.train.batch_size.min(eval_ds.n)).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let (images, _) = qvit::data::normalize_and_augment(&eval_ds, &idx, &norm, false, &mut rng);
    let mut tape = Tape::with_options(TapeOptions { nan_check: false });
    let fwd = model.forward(&mut tape, &images, ForwardMode::Quantized, false)?;
    let snap = model.snapshot_telemetry(&tape, &fwd.telemetry, true)?;

    let mut files = Vec::new();
    match kind {
        AnalysisKind::Entropy => {
            let report = diagnostics::entropy_report(&model, &snap)?;
            let path = out_dir.join("entropy.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            files.push(path);
        }
        AnalysisKind::Hist => {
            for h in diagnostics::histogram_exports(&snap)? {
                let path = out_dir.join(format!(
                    "hist_layer{}_head{}_{}.csv",
                    h.layer, h.head, h.tensor
                ));
                fs::write(&path, h.to_csv())?;
                files.push(path);
            }
        }
        AnalysisKind::AttnDist => {
            let m = diagnostics::attention_distance(&snap)?;
            let path = out_dir.join("attn_dist.csv");
            fs::write(&path, m.to_csv())?;
            files.push(path);
        }
    }
    write_manifest(&out_dir, "analyze", &files)?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

fn parse_bits_list(s: &str) -> qvit::Result<Vec<(u8, u8)>> {
    let list: Vec<(u8, u8)> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_bits(p.trim()))
        .collect::<qvit::Result<_>>()?;
    if list.is_empty() {
        return Err(Error::config("empty bit-width list".to_string()));
    }
    Ok(list)
}

fn suite_config(cfg: &RunConfig, seeds: usize, epochs: Option<usize>) -> qvit::Result<SuiteConfig> {
    if seeds == 0 {
        return Err(Error::config("--seeds must be at least 1".to_string()));
    }
    Ok(SuiteConfig {
        epochs: epochs.unwrap_or(cfg.train.epochs),
        batch_size: cfg.train.batch_size,
        base_lr: cfg.train.base_lr,
        optimizer: cfg.train.optimizer,
        seeds: (0..seeds as u64).collect(),
        lambda_dgd: if cfg.distill.lambda_dgd > 0.0 {
            cfg.distill.lambda_dgd
        } else {
            1.0
        },
    })
}

fn cmd_ablate(
    config: &Path,
    teacher_path: &Path,
    bits: &str,
    seeds: usize,
    epochs: Option<usize>,
    out: Option<PathBuf>,
) -> qvit::Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let bit_widths = parse_bits_list(bits)?;
    let suite = suite_config(&cfg, seeds, epochs)?;
    let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out_dir)?;
    let (train_ds, eval_ds) = cfg.data.load()?;
    let mut teacher = load_teacher(teacher_path)?;

    let report = suites::ablation_suite(
        &cfg.model,
        &bit_widths,
        &mut teacher,
        &train_ds,
        &eval_ds,
        &suite,
        &out_dir,
    )?;
    let json_path = out_dir.join("ablation.json");
    let csv_path = out_dir.join("ablation.csv");
    fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    fs::write(&csv_path, report.to_csv())?;
    write_manifest(&out_dir, "ablate", &[json_path, csv_path])?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_sensitivity(
    config: &Path,
    teacher_path: &Path,
    seeds: usize,
    epochs: Option<usize>,
    out: Option<PathBuf>,
) -> qvit::Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let suite = suite_config(&cfg, seeds, epochs)?;
    let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out_dir)?;
    let (train_ds, eval_ds) = cfg.data.load()?;
    let mut teacher = load_teacher(teacher_path)?;

    let report = suites::sensitivity_suite(
        &cfg.model,
        &mut teacher,
        &train_ds,
        &eval_ds,
        &suite,
        &out_dir,
    )?;
    let json_path = out_dir.join("sensitivity.json");
    let csv_path = out_dir.join("sensitivity.csv");
    fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    fs::write(&csv_path, report.to_csv())?;
    write_manifest(&out_dir, "sensitivity", &[json_path, csv_path])?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_stats(arch: Option<String>, config: Option<PathBuf>, bits: &str) -> qvit::Result<()> {
    let (w, a) = parse_bits(bits)?;
    let model_cfg = match (arch, config) {
        (Some(name), None) => model::preset(&name, w, a)?,
        (None, Some(path)) => {
            let cfg = RunConfig::from_file(&path)?;
            let mut m = cfg.model;
            m.w_bits = w;
            m.a_bits = a;
            m
        }
        _ => {
            return Err(Error::config(
                "stats needs exactly one of --arch or --config".to_string(),
            ))
        }
    };
    let stats = model::model_stats(&model_cfg)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn is_usage_error(err: &Error) -> bool {
    matches!(err, Error::Config(_))
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("QVIT_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainTeacher { config, out } => cmd_train_teacher(&config, out),
        Command::TrainStudent { config, teacher, bits, irm, dgd, out } => {
            cmd_train_student(&config, &teacher, bits, irm, dgd, out)
        }
        Command::Analyze { kind, checkpoint, data, out } => {
            cmd_analyze(kind, &checkpoint, &data, out)
        }
        Command::Ablate { config, teacher, bits, seeds, epochs, out } => {
            cmd_ablate(&config, &teacher, &bits, seeds, epochs, out)
        }
        Command::Sensitivity { config, teacher, seeds, epochs, out } => {
            cmd_sensitivity(&config, &teacher, seeds, epochs, out)
        }
        Command::Stats { arch, config, bits } => cmd_stats(arch, config, &bits),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if is_usage_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
