use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use placemine::config::{load_config, RunConfig};
use placemine::descriptor::AggregationShape;
use placemine::error::{Error, Result};
use placemine::graph::write_graph_dump;
use placemine::interact::EncoderConfig;
use placemine::manifest::{read_dataset_manifest, write_batch_manifest};
use placemine::pipeline::{
    aggregate_patches, batch_manifest_name, evaluate, ModelParams, Pipeline, BATCH_DIR, EMBEDDINGS_NAME, REPORT_NAME,
    STAGE_AGGREGATE, STAGE_CONFIG, STAGE_EVALUATE, STAGE_LOAD, STAGE_SYNTH, STAGE_WRITE,
};
use placemine::store::{read_store, write_store, EmbeddingStore, F32Matrix};
use placemine::synth::write_synth_dataset;

#[derive(Parser)]
#[command(name = "placemine", version, about = "Geo-visual hard-batch mining and place-recognition evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Number of epochs; overrides `epochs` in the config
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Synthetic drift per epoch in radians; overrides `synth.drift_rate`
    #[arg(long)]
    drift: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(d) = self.drift {
            cfg.synth.drift_rate = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest plus one store per epoch)
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// SoftP + aggregation (+ optional InteractHead) over a patch store
    Aggregate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patches: PathBuf,
        /// Class-token store, one row per image
        #[arg(long)]
        tokens: Option<PathBuf>,
        /// Dataset manifest naming the images in store order
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Parameter file; seeded weights are used when absent
        #[arg(long)]
        params: Option<PathBuf>,
        /// Write the parameters actually used to this file
        #[arg(long)]
        save_params: Option<PathBuf>,
        #[arg(long)]
        interact: bool,
    },
    /// Build one epoch of graphs and dump retained edges
    Graph {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
    },
    /// Build one epoch of graphs and write its batch manifest
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
    },
    /// Recall@N, PCA variants and AID for a database/query pair
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        database: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Multi-epoch orchestration: graphs, batches and a run report
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).in_stage(STAGE_WRITE))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e).in_stage(STAGE_WRITE))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.config().map_err(|e| e.in_stage(STAGE_CONFIG))?;
            let out = write_synth_dataset(&cfg.synth_config(), cfg.epochs, &common.out_dir).map_err(|e| e.in_stage(STAGE_SYNTH))?;
            println!("wrote {} and {} epoch stores", out.manifest.display(), out.stores.len());
        }
        Command::Aggregate {
            common,
            patches,
            tokens,
            manifest,
            params,
            save_params,
            interact,
        } => {
            let cfg = common.config().map_err(|e| e.in_stage(STAGE_CONFIG))?;
            let p = read_store(&patches).map_err(|e| e.in_stage(STAGE_LOAD))?;
            let t = tokens
                .as_ref()
                .map(|t| read_store(t).map_err(|e| e.in_stage(STAGE_LOAD)))
                .transpose()?;
            let params = params.or(cfg.params.clone());
            let model = match &params {
                Some(path) => ModelParams::load(path).map_err(|e| e.in_stage(STAGE_LOAD))?,
                None => {
                    let mut shape = AggregationShape::standard(p.vectors.cols());
                    if t.is_none() {
                        shape.token_dim = None;
                    }
                    let enc = (interact || cfg.interact).then(EncoderConfig::default);
                    ModelParams::seeded(shape, enc, cfg.seed).map_err(|e| e.in_stage(STAGE_AGGREGATE))?
                }
            };
            let per_image = p
                .section(placemine::pipeline::PATCHES_PER_IMAGE)
                .and_then(|s| s.data().first().copied())
                .unwrap_or(1.0)
                .max(1.0) as usize;
            let ids: Vec<String> = match &manifest {
                Some(m) => read_dataset_manifest(m)?.into_iter().map(|r| r.id).collect(),
                None => (0..p.vectors.rows() / per_image).map(|i| format!("{i}")).collect(),
            };
            let batch = (interact || cfg.interact).then_some(cfg.interact_batch);
            let descs = aggregate_patches(&p, t.as_ref(), &ids, &model, batch).map_err(|e| e.in_stage(STAGE_AGGREGATE))?;
            create_dir(&common.out_dir)?;
            let out = common.out_dir.join(EMBEDDINGS_NAME);
            let rows: Vec<Vec<f64>> = descs.into_iter().map(|d| d.vector).collect();
            write_store(&EmbeddingStore::new(F32Matrix::from_f64_rows(&rows)?), &out).map_err(|e| e.in_stage(STAGE_WRITE))?;
            if let Some(sp) = save_params {
                model.save(&sp).map_err(|e| e.in_stage(STAGE_WRITE))?;
            }
            println!("wrote {} descriptors of dim {} to {}", rows.len(), rows.first().map_or(0, Vec::len), out.display());
        }
        Command::Graph { common, epoch } => {
            let cfg = common.config().map_err(|e| e.in_stage(STAGE_CONFIG))?;
            create_dir(&common.out_dir)?;
            let pipeline = Pipeline::prepare(cfg, &common.out_dir)?;
            for (source, g) in pipeline.graphs(epoch)? {
                let path = common.out_dir.join(format!("graphs_{source}_epoch_{epoch:03}.csv"));
                let mut buf = Vec::new();
                write_graph_dump(&g.graphs, &mut buf).map_err(|e| Error::io(&path, e))?;
                std::fs::write(&path, buf).map_err(|e| Error::io(&path, e).in_stage(STAGE_WRITE))?;
                println!(
                    "{source}: {} graphs from {} attempts, {} retained edges -> {}",
                    g.graphs.len(),
                    g.attempts,
                    g.graphs.iter().map(|x| x.edges.len()).sum::<usize>(),
                    path.display()
                );
            }
        }
        Command::Sample { common, epoch } => {
            let cfg = common.config().map_err(|e| e.in_stage(STAGE_CONFIG))?;
            create_dir(&common.out_dir)?;
            let pipeline = Pipeline::prepare(cfg, &common.out_dir)?;
            let graphs = pipeline.graphs(epoch)?;
            let plan = pipeline.sample(epoch, &graphs)?;
            let dir = common.out_dir.join(BATCH_DIR);
            create_dir(&dir)?;
            let path = dir.join(batch_manifest_name(epoch));
            write_batch_manifest(&plan, &path).map_err(|e| e.in_stage(STAGE_WRITE))?;
            for w in &plan.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} batches -> {}", plan.batches.len(), path.display());
        }
        Command::Evaluate {
            common,
            database,
            queries,
        } => {
            let cfg = common.config().map_err(|e| e.in_stage(STAGE_CONFIG))?;
            let missing = |what: &str| Error::invalid(format!("--{what} or eval.{what} is required")).in_stage(STAGE_CONFIG);
            let db = database.or(cfg.eval.database.clone()).ok_or_else(|| missing("database"))?;
            let q = queries.or(cfg.eval.queries.clone()).ok_or_else(|| missing("queries"))?;
            let model = cfg
                .params
                .as_ref()
                .map(|p| ModelParams::load(p).map_err(|e| e.in_stage(STAGE_LOAD)))
                .transpose()?;
            let text = evaluate(&cfg, &db, &q, model.as_ref()).map_err(|e| e.in_stage(STAGE_EVALUATE))?;
            create_dir(&common.out_dir)?;
            let path = common.out_dir.join("results.csv");
            write_text(&path, &text)?;
            print!("{text}");
        }
        Command::Pipeline { common } => {
            let cfg = common.config().map_err(|e| e.in_stage(STAGE_CONFIG))?;
            create_dir(&common.out_dir)?;
            let report = Pipeline::prepare(cfg, &common.out_dir)?.run(&common.out_dir)?;
            for (e, w) in &report.warnings {
                eprintln!("warning: epoch {e}: {w}");
            }
            println!(
                "{} epochs, {} manifests, report -> {}",
                report.epochs,
                report.manifests.len(),
                common.out_dir.join(REPORT_NAME).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                // Stage and Io errors already print their source inline
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!("\n  caused by: {s}"));
                }
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
