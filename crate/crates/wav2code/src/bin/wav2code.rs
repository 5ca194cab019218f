//! Thin CLI over the library: corpus synthesis, the three training stages,
//! evaluation, ablation sweeps, and feature export. Exits non-zero when a
//! command or its post-run self-checks fail.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wav2code::corpus::{self, Manifest, Split};
use wav2code::error::{Error, Result};
use wav2code::harness::{
    self, AblationGrid, Checkpoint, FeatureKind, PipelineConfig, Stage,
};

#[derive(Parser)]
#[command(name = "wav2code", about = "Codebook-based clean speech restoration, desk scale")]
struct Cli {
    /// Pipeline config (TOML or JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; falls back to $WAV2CODE_OUT, then ./wav2code-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the corpus and write wavs plus manifests under <out>/data.
    SynthData,
    /// Stage 1: contrastive backbone pre-training.
    PretrainBackbone {
        /// Resume from a mid-stage checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: codebook learning on clean representations.
    PretrainCodebook {
        /// Stage-1 (or mid-stage-2) checkpoint to start from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 3: joint finetuning with code prediction and fusion.
    Finetune {
        /// Stage-2 (or mid-stage-3) checkpoint to start from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Proceed with a randomly initialized codebook.
        #[arg(long)]
        allow_random_codebook: bool,
    },
    /// Evaluate a finetuned checkpoint and write metrics.csv.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the ablation grid and write ablation.csv.
    Ablate {
        /// Grid spec as JSON: {"axes": {"fusion.kind": ["none", "iffnet"]}}.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Export a feature matrix (binary container + PCA companion CSV).
    ExportFeatures {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// One of z_n, z_c, z_q, z_f, codebook.
        #[arg(long, default_value = "z_f")]
        which: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let out_root = cli
        .out
        .or_else(|| std::env::var_os("WAV2CODE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("wav2code-out"));
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    let data_dir = out_root.join("data");
    let ckpt_dir = out_root.join("checkpoints");

    match cli.command {
        Command::SynthData => {
            let manifest = corpus::build_manifest(&cfg.corpus, &data_dir)?;
            let json = serde_json::to_string_pretty(&manifest)
                .map_err(|e| Error::Format(e.to_string()))?;
            fs::write(data_dir.join("manifest.json"), json)?;
            // self-check: every written pair reloads and hits its target SNR
            for entry in &manifest.entries {
                let pair = corpus::load_pair(entry, &data_dir)?;
                let remade = corpus::make_noisy_pair(
                    &pair.clean,
                    entry.noise_type.expect("synthetic entries carry noise"),
                    entry.snr_db.expect("synthetic entries carry snr"),
                    entry.seed,
                )?;
                let achieved =
                    corpus::achieved_snr_db(&remade.clean.samples, &remade.noisy_samples);
                if (achieved - entry.snr_db.unwrap()).abs() > 0.1 {
                    return Err(Error::invalid_state(format!(
                        "{}: achieved SNR {achieved:.2} dB off target {:.2} dB",
                        entry.id,
                        entry.snr_db.unwrap()
                    )));
                }
            }
            println!(
                "wrote {} utterances to {}",
                manifest.entries.len(),
                data_dir.display()
            );
        }
        Command::PretrainBackbone { resume } => {
            run_training_stage(&cfg, Stage::PretrainBackbone, &data_dir, &ckpt_dir, resume)?;
        }
        Command::PretrainCodebook { resume } => {
            let resume = resume.unwrap_or_else(|| ckpt_dir.join("pretrain_backbone.json"));
            run_training_stage(&cfg, Stage::PretrainCodebook, &data_dir, &ckpt_dir, Some(resume))?;
        }
        Command::Finetune {
            resume,
            allow_random_codebook,
        } => {
            let mut cfg = cfg;
            if allow_random_codebook {
                cfg.train.allow_random_codebook = true;
            }
            let resume = resume.unwrap_or_else(|| {
                let stage2 = ckpt_dir.join("pretrain_codebook.json");
                if stage2.exists() {
                    stage2
                } else {
                    ckpt_dir.join("pretrain_backbone.json")
                }
            });
            run_training_stage(&cfg, Stage::Finetune, &data_dir, &ckpt_dir, Some(resume))?;
        }
        Command::Evaluate { checkpoint, split } => {
            let split = parse_split(&split)?;
            let path = checkpoint.unwrap_or_else(|| ckpt_dir.join("finetune.json"));
            let ckpt = Checkpoint::load(&path)?;
            let manifest = load_data_manifest(&data_dir)?;
            let report = harness::evaluate(&ckpt, &manifest, &data_dir, split)?;
            // self-check: finite, bounded metrics
            for c in &report.conditions {
                if !c.wer.is_finite() || c.wer < 0.0 {
                    return Err(Error::invalid_state(format!("bad WER for {}", c.noise_type)));
                }
                if let Some(a) = c.code_acc {
                    if !(0.0..=1.0).contains(&a) {
                        return Err(Error::invalid_state("code accuracy out of [0,1]"));
                    }
                }
            }
            let csv_path = out_root.join("metrics.csv");
            fs::write(&csv_path, report.to_csv())?;
            println!("mean WER {:.4}", report.mean_wer());
            for (snr, acc) in report.code_accuracy_by_snr() {
                println!("code accuracy @ {snr:>5.1} dB: {acc:.4}");
            }
            println!("wrote {}", csv_path.display());
        }
        Command::Ablate { grid, seeds } => {
            let grid = match grid {
                Some(path) => {
                    let text = fs::read_to_string(path)?;
                    serde_json::from_str::<AblationGrid>(&text)
                        .map_err(|e| Error::Config(e.to_string()))?
                }
                None => {
                    let mut g = AblationGrid::default();
                    g.axes.insert(
                        "fusion.kind".into(),
                        vec!["none".into(), "concat".into(), "iffnet".into()],
                    );
                    g
                }
            };
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::invalid_argument(format!("bad seed: {s}")))
                })
                .collect::<Result<_>>()?;
            let manifest = load_data_manifest(&data_dir)?;
            let (rows, csv) = harness::run_ablation(&cfg, &grid, &manifest, &data_dir, &seeds)?;
            let failures: Vec<&str> = rows
                .iter()
                .filter_map(|r| r.error.as_deref())
                .collect();
            let csv_path = out_root.join("ablation.csv");
            fs::write(&csv_path, &csv)?;
            println!("{csv}");
            println!("wrote {}", csv_path.display());
            if !failures.is_empty() {
                return Err(Error::invalid_state(format!(
                    "{} of {} ablation cells failed (first: {})",
                    failures.len(),
                    rows.len(),
                    failures[0]
                )));
            }
        }
        Command::ExportFeatures {
            checkpoint,
            which,
            output,
        } => {
            let which: FeatureKind = which.parse()?;
            let path = checkpoint.unwrap_or_else(|| ckpt_dir.join("finetune.json"));
            let ckpt = Checkpoint::load(&path)?;
            let manifest = load_data_manifest(&data_dir)?;
            let out = output
                .unwrap_or_else(|| out_root.join(format!("features_{}.bin", which.name())));
            harness::export_features(&ckpt, &manifest, &data_dir, which, &out)?;
            // self-check: the container reads back with consistent shapes
            let (header, matrix) = harness::read_feature_file(&out)?;
            if header.rows != matrix.nrows() || header.ids.len() != header.rows {
                return Err(Error::invalid_state("feature container is inconsistent"));
            }
            println!(
                "wrote {} ({} x {}) and {}",
                out.display(),
                header.rows,
                header.cols,
                harness::pca_path(&out).display()
            );
        }
    }
    Ok(())
}

fn run_training_stage(
    cfg: &PipelineConfig,
    stage: Stage,
    data_dir: &Path,
    ckpt_dir: &Path,
    resume: Option<PathBuf>,
) -> Result<()> {
    let manifest = load_data_manifest(data_dir)?;
    let resume_ckpt = match &resume {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    let ckpt = harness::run_stage(cfg, stage, &manifest, data_dir, resume_ckpt.as_ref())?;
    // self-check: the curve is full-length and finite
    if ckpt.loss_curve.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_state("non-finite loss encountered"));
    }
    let out = ckpt_dir.join(format!("{}.json", stage.name()));
    ckpt.save(&out)?;
    let (first, last) = (
        ckpt.loss_curve.first().copied().unwrap_or(0.0),
        ckpt.loss_curve.last().copied().unwrap_or(0.0),
    );
    println!(
        "{}: {} steps, loss {first:.4} -> {last:.4}, saved {}",
        stage.name(),
        ckpt.loss_curve.len(),
        out.display()
    );
    Ok(())
}

fn load_data_manifest(data_dir: &Path) -> Result<Manifest> {
    let path = data_dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::invalid_state(format!(
            "{} not found; run `wav2code synth-data` first",
            path.display()
        )));
    }
    corpus::load_manifest(&path)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(Error::invalid_argument(format!("unknown split: {other}"))),
    }
}
