use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use osr_core::config::{PipelineConfig, Preset};
use osr_core::eval::{EvaluationSplit, Protocol};
use osr_core::gallery::GalleryMode;
use osr_core::pipeline::{
    load_registry, load_test_images, resolve_splits, write_scores, Pipeline, REGISTRY_FILE,
    SCORES_FILE, STORE_DIR,
};
use osr_core::store::FeatureStore;
use osr_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "osr",
    version,
    about = "Training-free open-set recognition pipeline"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML pipeline config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    protocol: Option<Protocol>,
    #[arg(long, global = true)]
    split_file: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (a split directory for single-stage commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Cap for both the self-checking and the cross-assessing loop.
    #[arg(long, global = true)]
    max_cycles: Option<usize>,
    #[arg(long, global = true)]
    mode: Option<GalleryMode>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate virtual classes and write registry.json.
    Simulate {
        /// Closed classes, comma separated. Defaults to the closed classes of --split-index.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long, default_value_t = 0)]
        split_index: usize,
    },
    /// Build galleries for the registry in --out.
    Gallery,
    /// Pre-store text and gallery features for --out.
    Precompute,
    /// Score the test images of one split with the artifacts in --out.
    Score {
        #[arg(long, default_value_t = 0)]
        split_index: usize,
    },
    /// Run every split of the protocol and write the report.
    Evaluate {
        /// Reuse stage artifacts already present under --out.
        #[arg(long)]
        resume: bool,
    },
    /// Run the protocol with a named variant of the pipeline.
    Ablate {
        preset: Preset,
        #[arg(long)]
        resume: bool,
        /// Print the config keys the preset changes and exit.
        #[arg(long)]
        dry_run: bool,
    },
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env();
    if let Some(p) = c.protocol {
        cfg.eval.protocol = p;
    }
    if let Some(f) = &c.split_file {
        cfg.eval.split_file = Some(f.clone());
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(a) = c.alpha {
        cfg.scoring.alpha = a;
    }
    if let Some(k) = c.k {
        cfg.gallery.k = k;
    }
    if let Some(m) = c.max_cycles {
        cfg.simulation.max_selfcheck_cycles = m;
        cfg.gallery.max_crossassess_cycles = m;
    }
    if let Some(m) = c.mode {
        cfg.gallery.mode = m;
    }
    if let Some(p) = c.parallelism {
        cfg.parallelism = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split(
    cfg: &PipelineConfig,
    index: usize,
) -> Result<(osr_core::eval::DatasetManifest, EvaluationSplit)> {
    let (manifest, splits) = resolve_splits(cfg)?;
    let split = splits
        .into_iter()
        .find(|s| s.split_index == index)
        .ok_or_else(|| Error::Config(format!("no split with index {index}")))?;
    Ok((manifest, split))
}

fn write_config(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    osr_core::fsutil::write_atomic(&dir.join("config.toml"), cfg.dump()?.as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = cfg.out_dir.clone();

    if let Command::Ablate {
        preset,
        dry_run: true,
        ..
    } = &cli.command
    {
        for (key, from, to) in cfg.diff(&cfg.with_preset(*preset))? {
            println!(
                "{key}: {} -> {}",
                from.unwrap_or_default(),
                to.unwrap_or_default()
            );
        }
        return Ok(());
    }

    let cfg = match &cli.command {
        Command::Ablate { preset, .. } => cfg.with_preset(*preset),
        _ => cfg,
    };
    let backends = cfg.build_backends()?;
    let pipeline = Pipeline::new(&cfg, &backends)?;

    match cli.command {
        Command::Simulate {
            classes,
            split_index,
        } => {
            let closed = if classes.is_empty() {
                split(&cfg, split_index)?.1.closed_classes
            } else {
                classes
            };
            match pipeline.simulate(&closed) {
                Ok(outcome) => {
                    Pipeline::save_simulation(&out, &outcome)?;
                    println!(
                        "{} classes -> {}",
                        outcome.registry.len(),
                        out.join(REGISTRY_FILE).display()
                    );
                }
                Err(Error::PartialSimulation { failures, partial }) => {
                    osr_core::fsutil::write_atomic(
                        &out.join("registry.partial.json"),
                        partial.to_json()?.as_bytes(),
                    )?;
                    return Err(Error::PartialSimulation { failures, partial });
                }
                Err(e) => return Err(e),
            }
        }
        Command::Gallery => {
            let registry = load_registry(&out)?;
            let galleries = pipeline.build_galleries(&registry)?;
            Pipeline::save_galleries(&out, &galleries)?;
            for g in &galleries {
                println!(
                    "{}: {} accepted, {} discarded, {} failed",
                    g.class,
                    g.images.len(),
                    g.discarded_count,
                    g.failed_count
                );
            }
        }
        Command::Precompute => {
            let registry = load_registry(&out)?;
            let galleries = Pipeline::load_galleries(&out)?;
            let store = pipeline.precompute(&registry, &galleries)?;
            store.save(&out.join(STORE_DIR))?;
            println!(
                "{} vectors -> {}",
                store.vector_count(),
                out.join(STORE_DIR).display()
            );
        }
        Command::Score { split_index } => {
            let (manifest, split) = split(&cfg, split_index)?;
            let registry = load_registry(&out)?;
            let store = FeatureStore::load(&out.join(STORE_DIR))?;
            let images = load_test_images(&manifest, &split)?;
            let scores = pipeline.score(&registry, &store, &images)?;
            write_scores(&out.join(SCORES_FILE), &scores)?;
            println!(
                "{} scores -> {}",
                scores.len(),
                out.join(SCORES_FILE).display()
            );
        }
        Command::Evaluate { resume } => {
            let (manifest, splits) = resolve_splits(&cfg)?;
            write_config(&cfg, &out)?;
            let report = pipeline.run_protocol(&manifest, &splits, &out, "full", resume)?;
            print!("{}", report.to_table());
        }
        Command::Ablate { preset, resume, .. } => {
            let (manifest, splits) = resolve_splits(&cfg)?;
            write_config(&cfg, &out)?;
            let report =
                pipeline.run_protocol(&manifest, &splits, &out, preset.as_str(), resume)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::PartialProtocol { report, .. } = &e {
                eprint!("{}", report.to_table());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
