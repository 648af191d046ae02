use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use fusiondet::config::{load_config, PipelineConfig};
use fusiondet::features::Channel;
use fusiondet::pipeline::{compare_reports, run_all, Dataset, DetectOptions, Pipeline, Scoring};
use fusiondet::synth::synth_generate;

/// Selective-search detector with HOG, Fisher vector and CNN channels,
/// stacked score fusion and a whole-image presence prior.
#[derive(Parser)]
#[command(name = "fusiondet", version)]
struct Cli {
    /// `key = value` configuration file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory receiving models, features, detections, reports and logs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArg {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic shapes dataset (images and train/test manifests) to the output directory.
    Synth,
    /// Selective-search proposals for every image.
    Propose(ManifestArg),
    /// Fit the PCA projection and GMM codebook of the Fisher vector channel.
    TrainCodebook(ManifestArg),
    /// Compute per-proposal features.
    Extract {
        #[command(flatten)]
        m: ManifestArg,
        /// Channels to extract; all three when omitted.
        #[arg(long = "channel", value_parser = parse_channel)]
        channels: Vec<Channel>,
    },
    /// One-vs-rest SVM banks, one per channel.
    TrainSvm(ManifestArg),
    /// Stacked fusion SVMs over the channel scores.
    TrainFusion(ManifestArg),
    /// Per-category bounding-box regressors.
    TrainRegressor(ManifestArg),
    /// Whole-image presence prior and its thresholds.
    TrainPrior(ManifestArg),
    /// Score, refine, suppress and gate proposals; write a detection dump.
    Detect {
        #[command(flatten)]
        m: ManifestArg,
        /// `fused`, or a single channel: `cnn`, `hog`, `ifv`.
        #[arg(long, default_value = "fused")]
        scoring: String,
        /// Skip presence-prior gating.
        #[arg(long)]
        no_prior: bool,
        /// Output name inside the dataset directory.
        #[arg(long, default_value = "detections")]
        output: String,
    },
    /// Per-class AP and mAP of a detection dump.
    Eval {
        #[command(flatten)]
        m: ManifestArg,
        #[arg(long, default_value = "detections")]
        detections: String,
        #[arg(long, default_value = "report")]
        report: String,
    },
    /// Count categories won across reports given as `name=path`.
    Compare {
        #[arg(long = "report", required = true, value_parser = parse_named)]
        reports: Vec<(String, PathBuf)>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Draw ground truth and detections onto copies of the images.
    Render {
        #[command(flatten)]
        m: ManifestArg,
        #[arg(long, default_value = "detections")]
        detections: String,
        /// Detections scoring below this are not drawn.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        min_score: f64,
    },
    /// Generate the synthetic dataset and run every stage on it.
    All,
}

fn parse_channel(s: &str) -> Result<Channel, String> {
    s.parse().map_err(|e: fusiondet::Error| e.to_string())
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected name=path")?;
    if name.is_empty() {
        return Err("empty report name".into());
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.synth.seed = cfg.seed;
    Ok(cfg)
}

fn dataset(m: &ManifestArg) -> Result<Dataset> {
    Ok(Dataset::load(&m.manifest)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    let out = cli.out_dir.as_path();
    let pipeline = |cfg: PipelineConfig| -> Result<Pipeline> { Ok(Pipeline::new(cfg, out)?) };
    match &cli.command {
        Command::Synth => {
            let (train, test) = synth_generate(&cfg.synth, out)?;
            println!("{}\n{}", train.display(), test.display());
        }
        Command::Propose(m) => {
            let set = pipeline(cfg)?.propose(&dataset(m)?)?;
            println!("{} proposals", set.len());
        }
        Command::TrainCodebook(m) => {
            pipeline(cfg)?.train_codebook(&dataset(m)?)?;
        }
        Command::Extract { m, channels } => {
            let channels = if channels.is_empty() { Channel::ALL.to_vec() } else { channels.clone() };
            pipeline(cfg)?.extract(&dataset(m)?, &channels)?;
        }
        Command::TrainSvm(m) => {
            pipeline(cfg)?.train_svm_banks(&dataset(m)?)?;
        }
        Command::TrainFusion(m) => {
            pipeline(cfg)?.train_fusion_model(&dataset(m)?)?;
        }
        Command::TrainRegressor(m) => {
            pipeline(cfg)?.train_regressor(&dataset(m)?)?;
        }
        Command::TrainPrior(m) => {
            pipeline(cfg)?.train_prior(&dataset(m)?)?;
        }
        Command::Detect { m, scoring, no_prior, output } => {
            let opts = DetectOptions {
                scoring: scoring.parse::<Scoring>()?,
                use_prior: !no_prior,
                output: output.clone(),
            };
            let dets = pipeline(cfg)?.detect(&dataset(m)?, &opts)?;
            println!("{} detections", dets.len());
        }
        Command::Eval { m, detections, report } => {
            let rep = pipeline(cfg)?.eval(&dataset(m)?, detections, report)?;
            print!("{}", fusiondet::eval::format_report(&rep));
        }
        Command::Compare { reports, output } => {
            for (name, wins) in compare_reports(reports, output)? {
                println!("{name} {wins}");
            }
        }
        Command::Render { m, detections, min_score } => {
            if !min_score.is_finite() {
                bail!("--min-score must be finite");
            }
            let n = pipeline(cfg)?.render(&dataset(m)?, detections, *min_score)?;
            println!("{n} images rendered");
        }
        Command::All => {
            let s = run_all(cfg, out)?;
            println!("mAP {}", s.map);
            println!("mAP_without_prior {}", s.map_without_prior);
            for (ch, map) in &s.channel_maps {
                println!("mAP_{ch} {map}");
            }
            println!("proposal_recall {}", s.proposal_recall);
            println!("max_proposals_per_image {}", s.max_proposals);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already carry their causes in the message
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
