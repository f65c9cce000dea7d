//! Artifact plumbing and multi-epoch orchestration.
//!
//! A dataset directory holds `manifest.csv` plus descriptors in one of three
//! forms, tried in order: per-epoch global stores `epoch_XXX.bin`, a static
//! global store `embeddings.bin`, or raw `patches.bin` (with optional
//! `tokens.bin`) that are aggregated with a parameter file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;

use crate::config::RunConfig;
use crate::descriptor::{
    cfp_aggregate, softp_modulate, AggregationParams, AggregationShape, GlobalDescriptor, PatchDescriptorSet, SoftPParams,
};
use crate::error::{Error, Result};
use crate::eval::{aid_metric, recall_at_n, AidSection, ItemMeta, PcaModel, Query, RecallLine, RetrievalIndex};
use crate::graph::{jaccard, Dataset, DescriptorTable, EpochGraphs};
use crate::interact::{interact_head_batched, EncoderConfig, EncoderParams};
use crate::manifest::{read_dataset_manifest, write_batch_manifest, ManifestRow};
use crate::rng::Streams;
use crate::sampler::{assemble_epoch_batches, BatchPlan};
use crate::store::{read_store, write_store, EmbeddingStore, F32Matrix};
use crate::synth::{epoch_store_name, write_synth_dataset, MANIFEST_NAME};

pub const STAGE_CONFIG: &str = "config";
pub const STAGE_SYNTH: &str = "synth";
pub const STAGE_LOAD: &str = "load";
pub const STAGE_AGGREGATE: &str = "aggregate";
pub const STAGE_GRAPH: &str = "graph";
pub const STAGE_SAMPLE: &str = "sample";
pub const STAGE_WRITE: &str = "write";
pub const STAGE_EVALUATE: &str = "evaluate";

pub const EMBEDDINGS_NAME: &str = "embeddings.bin";
pub const PATCHES_NAME: &str = "patches.bin";
pub const TOKENS_NAME: &str = "tokens.bin";
/// Section of a patch store holding the per-image patch count `L`.
pub const PATCHES_PER_IMAGE: &str = "patches_per_image";

pub const REPORT_NAME: &str = "report.txt";
pub const TIMINGS_NAME: &str = "timings.csv";
pub const BATCH_DIR: &str = "batches";
pub const SYNTH_DIR: &str = "synth";
pub const SYNTH_SOURCE: &str = "synth";

pub fn batch_manifest_name(epoch: u64) -> String {
    format!("epoch_{epoch:03}.csv")
}

/// SoftP, aggregation and (optionally) InteractHead weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub softp: SoftPParams,
    pub agg: AggregationParams,
    pub encoder: Option<EncoderParams>,
}

impl ModelParams {
    pub fn seeded(shape: AggregationShape, encoder: Option<EncoderConfig>, seed: u64) -> Result<Self> {
        let streams = Streams::new(seed);
        let softp = SoftPParams::seeded(
            SoftPParams::DEFAULT_ALPHA,
            SoftPParams::DEFAULT_EPSILON,
            SoftPParams::DEFAULT_HIDDEN,
            &mut streams.stream("params.softp", 0, 0),
        )?;
        let agg = AggregationParams::seeded(shape, &mut streams.stream("params.agg", 0, 0))?;
        let encoder = encoder
            .map(|c| EncoderParams::seeded(c, &mut streams.stream("params.encoder", 0, 0)))
            .transpose()?;
        Ok(Self { softp, agg, encoder })
    }

    pub fn to_store(&self) -> Result<EmbeddingStore> {
        let mut sections = Vec::new();
        self.softp.push_sections(&mut sections)?;
        self.agg.push_sections(&mut sections)?;
        if let Some(e) = &self.encoder {
            e.push_sections(&mut sections)?;
        }
        Ok(EmbeddingStore {
            vectors: F32Matrix::new(0, 0, Vec::new())?,
            sections,
        })
    }

    pub fn from_store(store: &EmbeddingStore) -> Result<Self> {
        Ok(Self {
            softp: SoftPParams::from_store(store)?,
            agg: AggregationParams::from_store(store)?,
            encoder: EncoderParams::from_store(store)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_store(&self.to_store()?, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&read_store(path)?)
    }
}

/// Packs patch sets into one store of `images * L` rows.
pub fn patch_store(sets: &[PatchDescriptorSet]) -> Result<EmbeddingStore> {
    let first = sets.first().ok_or_else(|| Error::invalid("no patch sets to store"))?;
    let (l, m) = (first.patch_count(), first.dim());
    let mut data = Vec::with_capacity(sets.len() * l * m);
    for s in sets {
        if s.patch_count() != l || s.dim() != m {
            return Err(Error::DimensionMismatch {
                what: format!("patch set `{}`", s.image_id()),
                expected: l * m,
                actual: s.patch_count() * s.dim(),
            });
        }
        let x = s.descriptors();
        for r in 0..l {
            data.extend((0..m).map(|c| x[(r, c)] as f32));
        }
    }
    Ok(EmbeddingStore::new(F32Matrix::new(sets.len() * l, m, data)?)
        .with_section(PATCHES_PER_IMAGE, F32Matrix::new(1, 1, vec![l as f32])?))
}

/// Splits a patch store back into per-image sets named by `ids`.
pub fn patch_sets(store: &EmbeddingStore, ids: &[String]) -> Result<Vec<PatchDescriptorSet>> {
    let l = store
        .section(PATCHES_PER_IMAGE)
        .and_then(|s| s.data().first().copied())
        .ok_or_else(|| Error::invalid(format!("patch store lacks section `{PATCHES_PER_IMAGE}`")))?;
    if !(l >= 1.0 && l.fract() == 0.0) {
        return Err(Error::invalid(format!("invalid patches_per_image value {l}")));
    }
    let l = l as usize;
    let v = &store.vectors;
    if v.rows() != ids.len() * l {
        return Err(Error::DimensionMismatch {
            what: "patch store rows (images x patches)".into(),
            expected: ids.len() * l,
            actual: v.rows(),
        });
    }
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let rows: Vec<Vec<f64>> = (i * l..(i + 1) * l).map(|r| v.row_f64(r)).collect();
            PatchDescriptorSet::from_rows(id.as_str(), &rows)
        })
        .collect()
}

/// SoftP + aggregation per image, then InteractHead over chunks of
/// `interact_batch` images when requested and the model has an encoder.
pub fn aggregate_patches(
    patches: &EmbeddingStore,
    tokens: Option<&EmbeddingStore>,
    ids: &[String],
    model: &ModelParams,
    interact_batch: Option<usize>,
) -> Result<Vec<GlobalDescriptor>> {
    use rayon::prelude::*;
    let sets = patch_sets(patches, ids)?;
    if let Some(t) = tokens {
        if t.vectors.rows() != ids.len() {
            return Err(Error::DimensionMismatch {
                what: "class-token store rows".into(),
                expected: ids.len(),
                actual: t.vectors.rows(),
            });
        }
    }
    let descs: Vec<GlobalDescriptor> = sets
        .par_iter()
        .enumerate()
        .map(|(i, set)| {
            let token = tokens.map(|t| t.vectors.row_f64(i));
            let (x_mod, _) = softp_modulate(set, &model.softp)?;
            cfp_aggregate(&x_mod, token.as_deref(), &model.agg)?.l2_normalize()
        })
        .collect::<Result<_>>()?;
    match (interact_batch, &model.encoder) {
        (Some(b), Some(enc)) => interact_head_batched(&descs, enc, b),
        (Some(_), None) => Err(Error::invalid("InteractHead requested but the parameter file has no encoder")),
        (None, _) => Ok(descs),
    }
}

fn exists(p: &Path) -> bool {
    p.is_file()
}

/// Loads the epoch's descriptors for a dataset directory, aligned with `rows`.
pub fn load_descriptors(
    dir: &Path,
    rows: &[ManifestRow],
    epoch: u64,
    model: Option<&ModelParams>,
    interact_batch: Option<usize>,
) -> Result<Vec<GlobalDescriptor>> {
    let per_epoch = dir.join(epoch_store_name(epoch));
    let global = dir.join(EMBEDDINGS_NAME);
    let patches = dir.join(PATCHES_NAME);
    let ids: Vec<String> = rows.iter().map(|r| r.id.clone()).collect();
    if exists(&per_epoch) || exists(&global) {
        let path = if exists(&per_epoch) { per_epoch } else { global };
        let store = read_store(&path).map_err(|e| e.in_stage(STAGE_LOAD))?;
        if store.vectors.rows() != rows.len() {
            return Err(Error::Manifest {
                path: path.display().to_string(),
                reason: format!("store has {} rows but the manifest lists {}", store.vectors.rows(), rows.len()),
            }
            .in_stage(STAGE_LOAD));
        }
        return ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| GlobalDescriptor::unit(id, store.vectors.row_f64(i)))
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage(STAGE_LOAD));
    }
    if exists(&patches) {
        let model = model.ok_or_else(|| {
            Error::invalid(format!("{} needs a parameter file (aggregate.params)", patches.display())).in_stage(STAGE_AGGREGATE)
        })?;
        let p = read_store(&patches).map_err(|e| e.in_stage(STAGE_LOAD))?;
        let tokens_path = dir.join(TOKENS_NAME);
        let t = if exists(&tokens_path) {
            Some(read_store(&tokens_path).map_err(|e| e.in_stage(STAGE_LOAD))?)
        } else {
            None
        };
        return aggregate_patches(&p, t.as_ref(), &ids, model, interact_batch).map_err(|e| e.in_stage(STAGE_AGGREGATE));
    }
    Err(Error::io(
        global,
        std::io::Error::new(std::io::ErrorKind::NotFound, "no embedding store found for this dataset"),
    )
    .in_stage(STAGE_LOAD))
}

/// One dataset source with its own random substreams.
#[derive(Debug, Clone)]
pub struct Source {
    pub name: String,
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub dataset: Dataset,
    pub streams: Streams,
}

/// Per-source master seed derived from the run seed and the source name.
pub fn source_seed(seed: u64, name: &str) -> u64 {
    Streams::new(seed).stream(&format!("source:{name}"), 0, 0).random()
}

pub fn open_source(name: &str, dir: &Path, seed: u64) -> Result<Source> {
    let rows = read_dataset_manifest(dir.join(MANIFEST_NAME)).map_err(|e| e.in_stage(STAGE_LOAD))?;
    let dataset = Dataset::from_rows(&rows).map_err(|e| e.in_stage(STAGE_LOAD))?;
    Ok(Source {
        name: name.to_string(),
        dir: dir.to_path_buf(),
        rows,
        dataset,
        streams: Streams::new(source_seed(seed, name)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphStats {
    pub epoch: u64,
    pub source: String,
    pub graphs: usize,
    pub attempts: usize,
    pub nodes: usize,
    pub edges: usize,
    pub mean_w: f64,
}

impl GraphStats {
    pub fn from_epoch(source: &str, g: &EpochGraphs) -> Self {
        let n = g.graphs.len().max(1) as f64;
        Self {
            epoch: g.epoch,
            source: source.to_string(),
            graphs: g.graphs.len(),
            attempts: g.attempts,
            nodes: g.graphs.iter().map(|x| x.node_count()).sum(),
            edges: g.graphs.iter().map(|x| x.edges.len()).sum(),
            mean_w: g.graphs.iter().map(|x| x.mean_weight()).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDrift {
    pub from: u64,
    pub to: u64,
    pub source: String,
    pub jaccard: f64,
}

/// Run summary. Wall-clock timings are kept apart from [`RunReport::render`]
/// so the rendered report is a pure function of config and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: u64,
    pub sources: Vec<String>,
    /// InteractHead sequence length when refinement is on
    pub interact: Option<usize>,
    pub graph_stats: Vec<GraphStats>,
    /// (epoch, batches, cliques)
    pub batch_stats: Vec<(u64, usize, usize)>,
    pub warnings: Vec<(u64, String)>,
    pub edge_drift: Vec<EdgeDrift>,
    pub manifests: Vec<PathBuf>,
    /// (stage, epoch, elapsed)
    pub timings: Vec<(&'static str, u64, Duration)>,
}

impl RunReport {
    pub fn render(&self) -> String {
        let mut o = String::new();
        let w = &mut o;
        writeln!(w, "config_hash = {}", self.config_hash).ok();
        writeln!(w, "seed = {}", self.seed).ok();
        writeln!(w, "epochs = {}", self.epochs).ok();
        writeln!(w, "sources = {}", self.sources.join(",")).ok();
        match self.interact {
            Some(b) => writeln!(w, "interact = batch {b}").ok(),
            None => writeln!(w, "interact = off").ok(),
        };
        writeln!(w, "# graphs\nepoch,source,graphs,attempts,nodes,edges,mean_w").ok();
        for g in &self.graph_stats {
            writeln!(
                w,
                "{},{},{},{},{},{},{:.9}",
                g.epoch, g.source, g.graphs, g.attempts, g.nodes, g.edges, g.mean_w
            )
            .ok();
        }
        writeln!(w, "# batches\nepoch,batches,cliques").ok();
        for (e, b, c) in &self.batch_stats {
            writeln!(w, "{e},{b},{c}").ok();
        }
        writeln!(w, "# edge_jaccard\nfrom,to,source,jaccard").ok();
        for d in &self.edge_drift {
            writeln!(w, "{},{},{},{:.6}", d.from, d.to, d.source, d.jaccard).ok();
        }
        writeln!(w, "# warnings\nepoch,message").ok();
        for (e, m) in &self.warnings {
            writeln!(w, "{e},{m}").ok();
        }
        o
    }

    pub fn render_timings(&self) -> String {
        let mut o = String::from("stage,epoch,seconds\n");
        for (s, e, d) in &self.timings {
            writeln!(o, "{s},{e},{:.6}", d.as_secs_f64()).ok();
        }
        o
    }
}

/// Configured sources plus optional model, ready to run epochs.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub sources: Vec<Source>,
    pub model: Option<ModelParams>,
}

impl Pipeline {
    /// Opens every configured source. Without sources, a synthetic dataset
    /// is generated under `<out_dir>/synth` first.
    pub fn prepare(config: RunConfig, out_dir: &Path) -> Result<Self> {
        config.validate().map_err(|e| e.in_stage(STAGE_CONFIG))?;
        let mut dirs: Vec<(String, PathBuf)> = config.sources.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        if dirs.is_empty() {
            let dir = out_dir.join(SYNTH_DIR);
            write_synth_dataset(&config.synth_config(), config.epochs, &dir).map_err(|e| e.in_stage(STAGE_SYNTH))?;
            dirs.push((SYNTH_SOURCE.to_string(), dir));
        }
        let sources = dirs
            .iter()
            .map(|(name, dir)| open_source(name, dir, config.seed))
            .collect::<Result<_>>()?;
        let model = config
            .params
            .as_ref()
            .map(|p| ModelParams::load(p).map_err(|e| e.in_stage(STAGE_LOAD)))
            .transpose()?;
        Ok(Self { config, sources, model })
    }

    pub fn stream_epoch(&self, epoch: u64) -> u64 {
        if self.config.fixed_streams {
            0
        } else {
            epoch
        }
    }

    fn interact_batch(&self) -> Option<usize> {
        self.config.interact.then_some(self.config.interact_batch)
    }

    pub fn descriptors(&self, source: &Source, epoch: u64) -> Result<DescriptorTable> {
        let d = load_descriptors(&source.dir, &source.rows, epoch, self.model.as_ref(), self.interact_batch())?;
        DescriptorTable::new(d).map_err(|e| e.in_stage(STAGE_LOAD))
    }

    pub fn graphs(&self, epoch: u64) -> Result<BTreeMap<String, EpochGraphs>> {
        self.graphs_timed(epoch, &mut Vec::new())
    }

    fn graphs_timed(
        &self,
        epoch: u64,
        timings: &mut Vec<(&'static str, u64, Duration)>,
    ) -> Result<BTreeMap<String, EpochGraphs>> {
        let mut out = BTreeMap::new();
        for s in &self.sources {
            let t = Instant::now();
            let table = self.descriptors(s, epoch)?;
            timings.push((STAGE_LOAD, epoch, t.elapsed()));
            let t = Instant::now();
            let g = crate::graph::rebuild_epoch(&s.dataset, &table, &self.config.graph, &s.streams, epoch, self.stream_epoch(epoch))
                .map_err(|e| e.in_stage(STAGE_GRAPH))?;
            timings.push((STAGE_GRAPH, epoch, t.elapsed()));
            out.insert(s.name.clone(), g);
        }
        Ok(out)
    }

    pub fn sample(&self, epoch: u64, graphs: &BTreeMap<String, EpochGraphs>) -> Result<BatchPlan> {
        let by_source = graphs.iter().map(|(k, v)| (k.clone(), v.graphs.clone())).collect();
        let mut rng = Streams::new(self.config.seed).stream("batches", self.stream_epoch(epoch), 0);
        assemble_epoch_batches(epoch, &by_source, self.config.batch, &mut rng).map_err(|e| e.in_stage(STAGE_SAMPLE))
    }

    /// Runs every epoch, writing `batches/epoch_XXX.csv`, `report.txt` and
    /// `timings.csv` under `out_dir`.
    pub fn run(&self, out_dir: &Path) -> Result<RunReport> {
        let batch_dir = out_dir.join(BATCH_DIR);
        std::fs::create_dir_all(&batch_dir).map_err(|e| Error::io(&batch_dir, e).in_stage(STAGE_WRITE))?;
        let mut report = RunReport {
            config_hash: self.config.hash(),
            seed: self.config.seed,
            epochs: self.config.epochs,
            sources: self.sources.iter().map(|s| s.name.clone()).collect(),
            interact: self.interact_batch(),
            graph_stats: Vec::new(),
            batch_stats: Vec::new(),
            warnings: Vec::new(),
            edge_drift: Vec::new(),
            manifests: Vec::new(),
            timings: Vec::new(),
        };
        let mut previous: Option<BTreeMap<String, EpochGraphs>> = None;
        for epoch in 0..self.config.epochs {
            let graphs = self.graphs_timed(epoch, &mut report.timings)?;
            for (name, g) in &graphs {
                report.graph_stats.push(GraphStats::from_epoch(name, g));
                if let Some(prev) = previous.as_ref().and_then(|p| p.get(name)) {
                    report.edge_drift.push(EdgeDrift {
                        from: epoch - 1,
                        to: epoch,
                        source: name.clone(),
                        jaccard: jaccard(&prev.indexed_edge_keys(), &g.indexed_edge_keys()),
                    });
                }
            }
            let t = Instant::now();
            let plan = self.sample(epoch, &graphs)?;
            report.timings.push((STAGE_SAMPLE, epoch, t.elapsed()));
            let t = Instant::now();
            let path = batch_dir.join(batch_manifest_name(epoch));
            write_batch_manifest(&plan, &path).map_err(|e| e.in_stage(STAGE_WRITE))?;
            report.timings.push((STAGE_WRITE, epoch, t.elapsed()));
            report.batch_stats.push((
                epoch,
                plan.batches.len(),
                plan.batches.iter().map(|b| b.cliques.len()).sum(),
            ));
            report.warnings.extend(plan.warnings.iter().map(|w| (epoch, w.to_string())));
            report.manifests.push(path);
            previous = Some(graphs);
        }
        let write = |name: &str, text: String| -> Result<()> {
            let p = out_dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e).in_stage(STAGE_WRITE))
        };
        write(REPORT_NAME, report.render())?;
        write(TIMINGS_NAME, report.render_timings())?;
        Ok(report)
    }
}

/// Convenience wrapper: prepare and run.
pub fn run_epoch_pipeline(config: RunConfig, out_dir: &Path) -> Result<RunReport> {
    Pipeline::prepare(config, out_dir)?.run(out_dir)
}

fn dataset_label(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

/// Recall for every configured criterion and N, at full dimension and at
/// each PCA dimension, plus AID over the database grouped by place.
pub fn evaluate(config: &RunConfig, database: &Path, queries: &Path, model: Option<&ModelParams>) -> Result<String> {
    let interact = config.interact.then_some(config.interact_batch);
    let load = |dir: &Path| -> Result<(Vec<ManifestRow>, Vec<GlobalDescriptor>)> {
        let rows = read_dataset_manifest(dir.join(MANIFEST_NAME)).map_err(|e| e.in_stage(STAGE_LOAD))?;
        let d = load_descriptors(dir, &rows, 0, model, interact)?;
        Ok((rows, d))
    };
    let (db_rows, db_desc) = load(database)?;
    let (q_rows, q_desc) = load(queries)?;
    let label = dataset_label(queries);
    let ev = |e: Error| e.in_stage(STAGE_EVALUATE);

    let db_vecs: Vec<Vec<f64>> = db_desc.iter().map(|d| d.vector.clone()).collect();
    let q_vecs: Vec<Vec<f64>> = q_desc.iter().map(|d| d.vector.clone()).collect();
    let db_meta: Vec<ItemMeta> = db_rows.iter().map(ItemMeta::from).collect();
    let q_meta: Vec<ItemMeta> = q_rows.iter().map(ItemMeta::from).collect();

    let mut variants: Vec<(String, Vec<Vec<f64>>, Vec<Vec<f64>>)> = vec![(label.clone(), db_vecs.clone(), q_vecs.clone())];
    for &dim in &config.eval.pca_dims {
        let pca = PcaModel::fit(&db_vecs, dim, config.eval.whiten).map_err(ev)?;
        variants.push((
            format!("{label}@pca{dim}"),
            pca.project_all(&db_vecs).map_err(ev)?,
            pca.project_all(&q_vecs).map_err(ev)?,
        ));
    }
    let mut recalls = Vec::new();
    for (name, db, q) in variants {
        let index = RetrievalIndex::new(db, db_meta.clone()).map_err(ev)?;
        let queries: Vec<Query> = q
            .into_iter()
            .zip(&q_meta)
            .map(|(descriptor, meta)| Query {
                descriptor,
                meta: meta.clone(),
            })
            .collect();
        for c in &config.eval.criteria {
            let r = recall_at_n(&queries, &index, c, &config.eval.recall_n).map_err(ev)?;
            for (&n, recall) in config.eval.recall_n.iter().zip(r) {
                recalls.push(RecallLine {
                    dataset: name.clone(),
                    criterion: c.to_string(),
                    n,
                    recall,
                });
            }
        }
    }

    let mut classes: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (row, d) in db_rows.iter().zip(&db_desc) {
        classes
            .entry(format!("{}/{}", row.city, row.cluster))
            .or_default()
            .push(d.vector.clone());
    }
    let (names, groups): (Vec<String>, Vec<Vec<Vec<f64>>>) = classes.into_iter().unzip();
    let (ids, aid) = aid_metric(&groups).map_err(ev)?;
    let aids = vec![AidSection {
        dataset: dataset_label(database),
        classes: names.into_iter().zip(ids).collect(),
        aid,
    }];
    let mut out = crate::eval::render_results(&recalls, &aids);
    let refine = interact.map_or("off".to_string(), |b| format!("batch {b}"));
    writeln!(out, "# settings\ninteract = {refine}\nwhiten = {}", config.eval.whiten).ok();
    Ok(out)
}
