use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Axis;

use qareid::checkpoint::load_model;
use qareid::config::RunConfig;
use qareid::data::manifest::read_pair;
use qareid::data::{generate_synthetic, Split};
use qareid::eval::{evaluate, heatmap, Protocol};
use qareid::mask::build_body_mask;
use qareid::model::Scorer;
use qareid::train::train;
use qareid::Error;

/// Clothes-changing person re-identification with quality-aware matching.
#[derive(Parser)]
#[command(name = "qareid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark to disk.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes checkpoints and a loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the query and gallery splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// general, sc or cc (overrides `eval.protocol`).
        #[arg(long)]
        protocol: Option<String>,
    },
    /// Print the match probability of two images.
    ScorePair {
        #[arg(long)]
        checkpoint: PathBuf,
        img1: PathBuf,
        seg1: PathBuf,
        img2: PathBuf,
        seg2: PathBuf,
    },
    /// Write a saliency map of the fused features as a grayscale PNG.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
        seg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

/// Creates `dir` and checks that a file can be written there.
fn ensure_writable(dir: &Path) -> anyhow::Result<()> {
    let probe = dir.join(".write_probe");
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(&probe, b""))
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| Error::Validation(format!("output directory {} is not writable: {e}", dir.display())))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = load_config(&common)?;
            let syn = cfg.dataset.synthetic.clone();
            syn.validate()?;
            ensure_writable(&cfg.output_dir)?;
            let manifest = generate_synthetic(&syn, &cfg.output_dir)?;
            println!(
                "wrote {} samples to {}",
                manifest.records.len(),
                cfg.output_dir.display()
            );
        }
        Command::Train {
            common,
            checkpoint,
            epochs,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            if let Some(ckpt) = &checkpoint {
                if !ckpt.exists() {
                    return Err(Error::MissingFile(ckpt.clone()).into());
                }
            }
            ensure_writable(&cfg.output_dir)?;
            let samples = cfg.samples()?;
            let outcome = train(&cfg.train, &cfg.model, &samples, &cfg.output_dir, checkpoint.as_deref())?;
            println!(
                "trained {} epochs; checkpoint {}",
                outcome.epochs_done,
                outcome.checkpoint.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            protocol,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = protocol {
                cfg.eval.protocol = p.parse::<Protocol>()?;
            }
            let (model, _) = load_model(&checkpoint)?;
            cfg.model = model.config.clone();
            cfg.validate()?;
            ensure_writable(&cfg.output_dir)?;
            let samples = cfg.samples()?;
            let query: Vec<_> = samples.iter().filter(|s| s.split == Split::Query).cloned().collect();
            let gallery: Vec<_> = samples.iter().filter(|s| s.split == Split::Gallery).cloned().collect();
            let result = evaluate(&model, &query, &gallery, cfg.eval.protocol, cfg.scorer())?;
            let path = cfg.output_dir.join(format!("eval_{}.json", cfg.eval.protocol));
            let json = serde_json::to_string_pretty(&result)?;
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            println!(
                "{}: top1 {:.2} mAP {:.2} ({} queries, {} excluded) -> {}",
                result.protocol,
                result.top1,
                result.map,
                result.evaluated,
                result.excluded,
                path.display()
            );
        }
        Command::ScorePair {
            checkpoint,
            img1,
            seg1,
            img2,
            seg2,
        } => {
            let (model, _) = load_model(&checkpoint)?;
            let (i1, s1) = read_pair(&img1, &seg1)?;
            let (i2, s2) = read_pair(&img2, &seg2)?;
            if i1.dim() != i2.dim() {
                return Err(Error::Validation(format!(
                    "images differ in size: {:?} vs {:?}",
                    i1.dim(),
                    i2.dim()
                ))
                .into());
            }
            if model.matcher.is_none() {
                return Err(Error::Config("checkpoint has no matcher".into()).into());
            }
            let labels = &model.config.identity_labels;
            let encode = |img: &ndarray::Array3<f64>, seg| {
                model.encode(&img.clone().insert_axis(Axis(0)), &[build_body_mask(seg, labels)])
            };
            let p = model.score(&encode(&i1, &s1)?, &encode(&i2, &s2)?, Scorer::Match)?[[0, 0]];
            println!("{p:.6}");
        }
        Command::Heatmap {
            checkpoint,
            image,
            seg,
            out,
        } => {
            let (model, _) = load_model(&checkpoint)?;
            let (img, s) = read_pair(&image, &seg)?;
            let mask = build_body_mask(&s, &model.config.identity_labels);
            let sal = heatmap(&model, &img, &mask)?;
            let (h, w) = sal.dim();
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([(sal[[y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8])
            });
            buf.save(&out)
                .map_err(|e| Error::io(&out, std::io::Error::other(e)))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation = err
                .chain()
                .find_map(|e| e.downcast_ref::<Error>())
                .map_or(false, Error::is_validation);
            ExitCode::from(if validation { 2 } else { 3 })
        }
    }
}
