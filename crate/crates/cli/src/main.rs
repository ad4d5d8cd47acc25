use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slidelab::classify::{self, STAGE_GRIDSEARCH, STAGE_INFERENCE, STAGE_PATCHES, STAGE_SPLIT, STAGE_TEST, STAGE_TRAIN, STAGE_VISUALIZE};
use slidelab::{generation_table, report, run_classification_pipeline, run_finetune, run_generation_pipeline, RunConfig};
use slidelab_core::synthetic::SyntheticCorpus;
use slidelab_diffusion::Regime;

#[derive(Parser)]
#[command(name = "slidelab", version, about = "Whole-slide classification and histology image generation")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output root.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    /// Overrides the configured corpus manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Single-threaded, byte-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural five-class corpus with its manifest.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        slides_per_class: usize,
        #[arg(long, default_value_t = 160)]
        size: u32,
        #[arg(long, default_value_t = 2023)]
        corpus_seed: u64,
    },
    /// Print the effective configuration as TOML, or write it to a file.
    Config { out: Option<PathBuf> },
    /// Assign slides to train, validation and test.
    Split,
    /// Extract tissue patches and balance the training split.
    Preprocess,
    /// Train the patch classifier.
    Train,
    /// Predict patches of validation and test slides.
    Infer,
    /// Search aggregation thresholds on validation slides.
    Gridsearch,
    /// Aggregate test slides and write metrics.
    Test,
    /// Render prediction overlays for test slides.
    Visualize,
    /// Run all seven classification stages.
    Pipeline,
    /// Fine-tune the diffusion backend under one regime.
    Finetune {
        #[arg(long)]
        regime: Regime,
    },
    /// Generate images, fine-tuning first unless --reuse is given.
    Generate {
        /// control, dreambooth_unet, dreambooth_unet_text_encoder or textual_inversion
        #[arg(long, default_value = "dreambooth_unet")]
        regime: String,
        /// Use the backend saved by an earlier `finetune`.
        #[arg(long)]
        reuse: bool,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Summarize metrics and timings of a run directory.
    Report { dir: Option<PathBuf> },
}

fn load_config(cli: &Cli) -> slidelab::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(root) = &cli.output_root {
        config.output_root = root.clone();
    }
    if let Some(m) = &cli.manifest {
        config.manifest = m.clone();
    }
    config.deterministic |= cli.deterministic;
    Ok(config)
}

fn run(cli: Cli) -> slidelab::Result<()> {
    let mut config = load_config(&cli)?;
    let stage = |config: &RunConfig, name: &str| -> slidelab::Result<()> {
        let t = classify::run_stage(config, name)?;
        print!("{}", t.to_text());
        Ok(())
    };
    match cli.command {
        Command::Synth {
            out,
            slides_per_class,
            size,
            corpus_seed,
        } => {
            let corpus = SyntheticCorpus {
                slides_per_class,
                slide_size: size,
                seed: corpus_seed,
                ..Default::default()
            };
            let manifest = corpus.write(&out)?;
            println!("{}", manifest.display());
        }
        Command::Config { out } => match out {
            Some(path) => config.save(&path)?,
            None => print!("{}", config.to_toml()?),
        },
        Command::Split => stage(&config, STAGE_SPLIT)?,
        Command::Preprocess => stage(&config, STAGE_PATCHES)?,
        Command::Train => stage(&config, STAGE_TRAIN)?,
        Command::Infer => stage(&config, STAGE_INFERENCE)?,
        Command::Gridsearch => stage(&config, STAGE_GRIDSEARCH)?,
        Command::Test => {
            stage(&config, STAGE_TEST)?;
            let text = config.output_root.join(STAGE_TEST).join(classify::METRICS_TEXT);
            print!("{}", std::fs::read_to_string(&text).unwrap_or_default());
        }
        Command::Visualize => stage(&config, STAGE_VISUALIZE)?,
        Command::Pipeline => {
            let out = run_classification_pipeline(&config)?;
            print!("{}\n{}", out.report.to_text(), out.timing.to_text());
        }
        Command::Finetune { regime } => {
            let t = run_finetune(&config, regime)?;
            print!("{}", t.to_text());
        }
        Command::Generate {
            regime,
            reuse,
            count,
            prompt,
            steps,
        } => {
            if reuse {
                config.diffusion.finetune_enabled = false;
            }
            if let Some(c) = count {
                config.generation.count = c;
            }
            if let Some(p) = prompt {
                config.generation.prompt = p;
            }
            if let Some(s) = steps {
                config.generation.steps = s;
            }
            let out = run_generation_pipeline(&config, &regime)?;
            for p in &out.images {
                println!("{}", p.display());
            }
            print!("{}", generation_table(&[out.row]));
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or(config.output_root);
            let text = report(&dir)?;
            let out = dir.join("report").join("summary.md");
            std::fs::create_dir_all(out.parent().unwrap()).map_err(|source| slidelab::Error::Io {
                path: out.clone(),
                source,
            })?;
            std::fs::write(&out, &text).map_err(|source| slidelab::Error::Io { path: out.clone(), source })?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
