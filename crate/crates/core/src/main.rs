use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stylekit::pipeline::{
    cmd_embed, cmd_evaluate, cmd_extract, cmd_gen_toy, cmd_project, cmd_train, Arm,
    PipelineConfig, PipelineError,
};

#[derive(Parser)]
#[command(name = "stylekit", version, about = "Style-encoder pre-training pipeline")]
struct Cli {
    /// JSON pipeline config; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    arm: Option<Arm>,
    /// Worker threads; 1 gives the single-threaded reference mode.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy corpus and its manifest.
    GenToy {
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract mel features, shifted variants, contours and speaker stats.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// Feature cache directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the style encoder.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Embed every manifest entry into a STYB file.
    Embed {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Centroids, style accuracy, leakage probe and SECS.
    Evaluate {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCA projection to CSV.
    Project {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(arm) = cli.arm {
        cfg.arm = arm;
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::GenToy { out } => {
            let (manifest, summary) = cmd_gen_toy(&cfg, &out)?;
            print!("{summary}");
            println!("manifest: {}", manifest.display());
        }
        Command::Extract { manifest, out } => {
            let s = cmd_extract(&manifest, &cfg, &out)?;
            println!("computed {} skipped {}", s.computed, s.skipped);
            for (spk, st) in &s.stats {
                println!(
                    "{spk}: median F0 {:.1} Hz over {} utterances",
                    st.f0_median, st.n_utterances
                );
            }
        }
        Command::Train {
            manifest,
            cache,
            out,
            resume,
        } => {
            let o = cmd_train(&manifest, &cfg, &cache, &out, resume)?;
            println!(
                "trained {} steps on {} utterances ({} synthetic)",
                o.final_step, o.n_train, o.n_synthetic
            );
        }
        Command::Embed {
            manifest,
            cache,
            checkpoint,
            out,
        } => {
            let set = cmd_embed(&manifest, &cfg, &cache, &checkpoint, &out)?;
            println!("{} embeddings written to {}", set.len(), out.display());
        }
        Command::Evaluate { embeddings, out } => {
            let r = cmd_evaluate(&embeddings, &cfg, &out)?;
            println!(
                "style accuracy {:.3}, speaker probe accuracy {:.3}",
                r.style_accuracy, r.leakage.speaker_accuracy
            );
        }
        Command::Project { embeddings, out } => {
            let [a, b] = cmd_project(&embeddings, &out)?;
            eprintln!("explained variance: {a:.4} {b:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
