//! Retrieval evaluation: test-time-augmented embedding extraction,
//! exhaustive street→satellite cosine ranking, Recall@K and average
//! precision, a binary embedding dump, and the ablation harness that
//! re-trains the pipeline over configuration grids and emits one result
//! row per configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::aggregation::{Embedding, EmbeddingView, HeadKind};
use crate::bridge3d::{BridgeCache, ReconstructionBackend};
use crate::bytes::{push_str, push_u32, Reader};
use crate::data::{
    build_tuples, scan_dataset, street_pools, ImageRecord, ScanOptions, Split, View,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::grem::{prepare_grem, MeanPoolExtractor};
use crate::imageio::PixelImage;
use crate::params::ParamStore;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::synth::scan_aux_pool;
use crate::trainer::{SgdMomentum, TrainConfig, TrainState, Trainer};

// ---------------------------------------------------------------------------
// Test-time augmentation
// ---------------------------------------------------------------------------

/// A test-time view of an image. Flips and quarter-turns are exact pixel
/// permutations, so they lose nothing to interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    HFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl Transform {
    pub fn apply(&self, image: &PixelImage) -> PixelImage {
        match self {
            Transform::Identity => image.clone(),
            Transform::HFlip => image.hflip(),
            Transform::Rot90 => image.rot90(1),
            Transform::Rot180 => image.rot90(2),
            Transform::Rot270 => image.rot90(3),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::HFlip => "hflip",
            Transform::Rot90 => "rot90",
            Transform::Rot180 => "rot180",
            Transform::Rot270 => "rot270",
        }
    }
}

pub const IDENTITY_ONLY: &[Transform] = &[Transform::Identity];

/// Default transform set per view. Rotations apply only to the overhead
/// view: a satellite tile has no canonical heading, a street photo does.
/// Drone images embed through the scene bridge, so their set is trivial.
pub fn tta_set(view: View) -> &'static [Transform] {
    match view {
        View::Street => &[Transform::Identity, Transform::HFlip],
        View::Satellite => &[
            Transform::Identity,
            Transform::HFlip,
            Transform::Rot90,
            Transform::Rot180,
            Transform::Rot270,
        ],
        View::Drone => IDENTITY_ONLY,
    }
}

/// Embed every transform variant of `image`, average the descriptors, and
/// L2-normalize the mean. A singleton set therefore reproduces the plain
/// embedding exactly, and a set closed under some transform makes the
/// result invariant to applying that transform to the input.
pub fn embed_with_tta(
    pipeline: &Pipeline,
    store: &ParamStore,
    image: &PixelImage,
    view: View,
    transforms: &[Transform],
) -> Result<Embedding> {
    let tagged = match view {
        View::Street => EmbeddingView::Street,
        View::Satellite => EmbeddingView::Satellite,
        View::Drone => {
            return Err(Error::InvalidInput(
                "drone images embed through the scene bridge".into(),
            ))
        }
    };
    if transforms.is_empty() {
        return Err(Error::InvalidInput("empty TTA transform set".into()));
    }
    let resized = image.resize(pipeline.input_size());
    let mut sum: Option<Array2<f64>> = None;
    for transform in transforms {
        let variant = transform.apply(&resized);
        let tensor = pipeline.config.backbone.normalization().apply(&variant);
        let mut g = Graph::new();
        let out = pipeline.embed_graph(&mut g, store, &tensor)?;
        let value = g.value(out);
        sum = Some(match sum {
            None => value.clone(),
            Some(acc) => acc + value,
        });
    }
    let mean = sum.expect("non-empty transform set") / transforms.len() as f64;
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::DegenerateEmbedding(format!(
            "TTA average for the {tagged} view has zero norm"
        )));
    }
    let unit = mean / norm;
    Ok(Embedding::from_row(&unit, tagged, transforms.len() > 1))
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

/// One retrieval participant: an image id, the location that defines its
/// ground-truth matches, and its unit-norm descriptor.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub location_id: String,
    pub embedding: Embedding,
}

/// Embed records for retrieval (street and satellite views only). With
/// `use_tta` each record gets its view's default transform set, otherwise
/// identity only.
pub fn embed_records(
    pipeline: &Pipeline,
    store: &ParamStore,
    records: &[ImageRecord],
    use_tta: bool,
) -> Result<Vec<EvalItem>> {
    let mut items = Vec::with_capacity(records.len());
    for rec in records {
        let transforms = if use_tta { tta_set(rec.view) } else { IDENTITY_ONLY };
        let image = PixelImage::load(&rec.path)?;
        let embedding = embed_with_tta(pipeline, store, &image, rec.view, transforms)?;
        items.push(EvalItem {
            id: rec.image_id.clone(),
            location_id: rec.location_id.clone(),
            embedding,
        });
    }
    Ok(items)
}

/// Full ranking of the gallery for one query, best first.
#[derive(Debug, Clone, Serialize)]
pub struct RetrievalResult {
    pub query_id: String,
    /// `(gallery_id, cosine_score)` sorted descending by score; ties broken
    /// by ascending gallery id, so the ordering is deterministic.
    pub ranked: Vec<(String, f64)>,
    /// Gallery ids sharing the query's location.
    pub true_ids: BTreeSet<String>,
}

/// Exhaustive cosine ranking of `gallery` for every query. All embeddings
/// must be unit-norm and of one dimension; gallery ids must be unique
/// (the tie rule and the metrics both key on them).
pub fn rank(queries: &[EvalItem], gallery: &[EvalItem]) -> Result<Vec<RetrievalResult>> {
    if gallery.is_empty() {
        return Err(Error::InvalidInput("retrieval gallery is empty".into()));
    }
    let dim = gallery[0].embedding.dim();
    let mut seen = BTreeSet::new();
    for item in gallery {
        if !seen.insert(item.id.as_str()) {
            return Err(Error::Data(format!("duplicate gallery id {:?}", item.id)));
        }
        check_item(item, dim)?;
    }
    let mut results = Vec::with_capacity(queries.len());
    for query in queries {
        check_item(query, dim)?;
        let mut ranked: Vec<(String, f64)> = gallery
            .iter()
            .map(|g| (g.id.clone(), query.embedding.dot(&g.embedding)))
            .collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        let true_ids = gallery
            .iter()
            .filter(|g| g.location_id == query.location_id)
            .map(|g| g.id.clone())
            .collect();
        results.push(RetrievalResult {
            query_id: query.id.clone(),
            ranked,
            true_ids,
        });
    }
    Ok(results)
}

fn check_item(item: &EvalItem, dim: usize) -> Result<()> {
    if item.embedding.dim() != dim {
        return Err(Error::Shape(format!(
            "embedding for {:?} has dimension {}, expected {dim}",
            item.id,
            item.embedding.dim()
        )));
    }
    item.embedding.validate_unit()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// How a query's average precision is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApMode {
    /// Standard AP over the full relevant set: mean of precision-at-hit
    /// over every relevant item. A single relevant item reduces to 1/rank.
    Standard,
    /// 1/rank of the first relevant item only, regardless of how many
    /// relevant items the gallery holds.
    ReciprocalRank,
}

impl ApMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ApMode::Standard),
            "reciprocal_rank" => Ok(ApMode::ReciprocalRank),
            other => Err(Error::Config(format!(
                "unknown ap mode {other:?} (expected standard | reciprocal_rank)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ApMode::Standard => "standard",
            ApMode::ReciprocalRank => "reciprocal_rank",
        }
    }
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Aggregate retrieval quality, all values in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// K → share of queries whose top-K holds at least one true id.
    pub recall_at: BTreeMap<usize, f64>,
    /// Mean per-query average precision.
    pub ap: f64,
    /// Queries that contributed to the means.
    pub n_queries: usize,
    /// Queries skipped because no true id appears in their ranking —
    /// diagnostic only, reachable when the gallery is subset.
    pub n_excluded: usize,
}

/// Fold rankings into Recall@K and AP. Queries without any relevant item
/// in their ranking are excluded and counted; if every query is excluded
/// there is nothing to average and the call errors.
pub fn compute_metrics(
    results: &[RetrievalResult],
    ks: &[usize],
    mode: ApMode,
) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no retrieval results to score".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidInput("recall cutoffs must be positive".into()));
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut ap_sum = 0.0;
    let mut scored = 0usize;
    let mut excluded = 0usize;
    for result in results {
        let relevant: Vec<bool> = result
            .ranked
            .iter()
            .map(|(id, _)| result.true_ids.contains(id))
            .collect();
        let n_relevant = relevant.iter().filter(|&&r| r).count();
        if n_relevant == 0 {
            excluded += 1;
            continue;
        }
        scored += 1;
        for (&k, count) in hits.iter_mut() {
            if relevant.iter().take(k).any(|&r| r) {
                *count += 1;
            }
        }
        ap_sum += match mode {
            ApMode::ReciprocalRank => {
                let first = relevant.iter().position(|&r| r).expect("relevant item");
                1.0 / (first + 1) as f64
            }
            ApMode::Standard => {
                let mut seen = 0usize;
                let mut acc = 0.0;
                for (i, &rel) in relevant.iter().enumerate() {
                    if rel {
                        seen += 1;
                        acc += seen as f64 / (i + 1) as f64;
                    }
                }
                acc / n_relevant as f64
            }
        };
    }
    if scored == 0 {
        return Err(Error::InvalidInput(format!(
            "all {excluded} queries lack a relevant gallery item"
        )));
    }
    let recall_at = hits
        .into_iter()
        .map(|(k, h)| (k, 100.0 * h as f64 / scored as f64))
        .collect();
    Ok(MetricsReport {
        recall_at,
        ap: 100.0 * ap_sum / scored as f64,
        n_queries: scored,
        n_excluded: excluded,
    })
}

// ---------------------------------------------------------------------------
// Embedding dump
// ---------------------------------------------------------------------------

const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

fn view_code(view: EmbeddingView) -> u8 {
    match view {
        EmbeddingView::Street => 0,
        EmbeddingView::Satellite => 1,
        EmbeddingView::DroneS1 => 2,
        EmbeddingView::DroneS2 => 3,
        EmbeddingView::DroneS3 => 4,
    }
}

fn view_from_code(code: u8) -> Result<EmbeddingView> {
    Ok(match code {
        0 => EmbeddingView::Street,
        1 => EmbeddingView::Satellite,
        2 => EmbeddingView::DroneS1,
        3 => EmbeddingView::DroneS2,
        4 => EmbeddingView::DroneS3,
        other => return Err(Error::Data(format!("unknown view code {other}"))),
    })
}

/// Write embeddings as a compact binary table: magic, count, dimension, an
/// id table (image id, location id, view tag, tta flag), then one
/// little-endian f32 row per item. Values are quantized to f32 here; a
/// read/write round trip of the file itself is bitwise exact.
pub fn write_embeddings(path: &Path, items: &[EvalItem]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::InvalidInput(
            "refusing to write an empty embedding dump".into(),
        ));
    }
    let dim = items[0].embedding.dim();
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDING_MAGIC);
    push_u32(&mut out, items.len());
    push_u32(&mut out, dim);
    for item in items {
        if item.embedding.dim() != dim {
            return Err(Error::Shape(format!(
                "embedding for {:?} has dimension {}, expected {dim}",
                item.id,
                item.embedding.dim()
            )));
        }
        push_str(&mut out, &item.id);
        push_str(&mut out, &item.location_id);
        out.push(view_code(item.embedding.view));
        out.push(u8::from(item.embedding.tta));
    }
    for item in items {
        for &v in &item.embedding.vector {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EvalItem>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, Error::Data);
    if r.take(4)? != EMBEDDING_MAGIC {
        return Err(Error::Data(format!(
            "{} is not an embedding dump (bad magic)",
            path.display()
        )));
    }
    let count = r.u32()?;
    let dim = r.u32()?;
    let mut heads = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.string()?;
        let location_id = r.string()?;
        let view = view_from_code(r.take(1)?[0])?;
        let tta = r.take(1)?[0] != 0;
        heads.push((id, location_id, view, tta));
    }
    let mut items = Vec::with_capacity(count);
    for (id, location_id, view, tta) in heads {
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(r.f32()? as f64);
        }
        items.push(EvalItem {
            id,
            location_id,
            embedding: Embedding {
                vector,
                normalized: true,
                view,
                tta,
            },
        });
    }
    r.finish()?;
    Ok(items)
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// Which configuration grid to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    /// Component stack: head only, + self-supervision, + scene bridge,
    /// + both, + pool mining.
    Components,
    /// Aggregation head swap: netvlad, gem, conv_ap, pafa.
    Heads,
    /// Self-supervision weight λ ∈ {1.0, …, 5.0}.
    Lambda,
}

impl AblationSuite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(AblationSuite::Components),
            "heads" => Ok(AblationSuite::Heads),
            "lambda" => Ok(AblationSuite::Lambda),
            other => Err(Error::Config(format!(
                "unknown ablation suite {other:?} (expected components | heads | lambda)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationSuite::Components => "components",
            AblationSuite::Heads => "heads",
            AblationSuite::Lambda => "lambda",
        }
    }
}

/// Shared inputs of every row: the dataset root and the base configuration
/// each variant is derived from.
pub struct AblationContext<'a> {
    pub root: &'a Path,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub backend: Option<&'a dyn ReconstructionBackend>,
    pub cache: Option<&'a BridgeCache>,
    /// Pretrained values copied over matching freshly-initialized
    /// parameters before each variant trains (full-scale runs load the
    /// exported backbone this way). `None` trains from scratch.
    pub init_overrides: Option<&'a ParamStore>,
    /// Apply the per-view default TTA sets during evaluation.
    pub use_tta: bool,
    pub ap_mode: ApMode,
}

/// One table row. A variant that aborts anywhere (training, embedding,
/// ranking) keeps its row with the error recorded instead of metrics.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub suite: String,
    pub label: String,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// A variant row before execution: pipeline/train overrides plus whether
/// the street pool is expanded by mining.
struct Variant {
    label: String,
    pipeline: PipelineConfig,
    train: TrainConfig,
    mine_pool: bool,
}

fn with_lambda(train: &TrainConfig, lambda: f64) -> TrainConfig {
    let mut t = train.clone();
    t.loss.lambda = lambda;
    t
}

fn without_bridge(pipeline: &PipelineConfig) -> PipelineConfig {
    let mut p = pipeline.clone();
    p.bridge = None;
    p
}

fn suite_variants(suite: AblationSuite, ctx: &AblationContext) -> Result<Vec<Variant>> {
    let base_p = &ctx.pipeline;
    let base_t = &ctx.train;
    Ok(match suite {
        AblationSuite::Components => {
            if base_p.bridge.is_none() {
                return Err(Error::Config(
                    "components suite needs a bridge-enabled base configuration".into(),
                ));
            }
            if base_t.loss.lambda <= 0.0 {
                return Err(Error::Config(
                    "components suite needs a positive lambda in the base configuration".into(),
                ));
            }
            vec![
                Variant {
                    label: "pafa".into(),
                    pipeline: without_bridge(base_p),
                    train: with_lambda(base_t, 0.0),
                    mine_pool: false,
                },
                Variant {
                    label: "pafa+ssl".into(),
                    pipeline: without_bridge(base_p),
                    train: base_t.clone(),
                    mine_pool: false,
                },
                Variant {
                    label: "pafa+msbm".into(),
                    pipeline: base_p.clone(),
                    train: with_lambda(base_t, 0.0),
                    mine_pool: false,
                },
                Variant {
                    label: "pafa+ssl+msbm".into(),
                    pipeline: base_p.clone(),
                    train: base_t.clone(),
                    mine_pool: false,
                },
                Variant {
                    label: "pafa+ssl+msbm+grem".into(),
                    pipeline: base_p.clone(),
                    train: base_t.clone(),
                    mine_pool: true,
                },
            ]
        }
        AblationSuite::Heads => [HeadKind::NetVlad, HeadKind::Gem, HeadKind::ConvAp, HeadKind::Pafa]
            .into_iter()
            .map(|kind| {
                let mut pipeline = base_p.clone();
                pipeline.head_kind = kind;
                Variant {
                    label: kind.name().into(),
                    pipeline,
                    train: base_t.clone(),
                    mine_pool: false,
                }
            })
            .collect(),
        AblationSuite::Lambda => [1.0, 2.0, 3.0, 4.0, 5.0]
            .into_iter()
            .map(|lambda| Variant {
                label: format!("lambda={lambda:.1}"),
                pipeline: base_p.clone(),
                train: with_lambda(base_t, lambda),
                mine_pool: false,
            })
            .collect(),
    })
}

/// Run one configuration grid: each variant trains from fresh parameters on
/// the train split and is scored street→satellite on the test splits. A
/// failing variant marks its row and the remaining rows still run.
pub fn run_ablation(suite: AblationSuite, ctx: &AblationContext) -> Result<Vec<AblationRow>> {
    if ctx.pipeline.bridge.is_some() && ctx.backend.is_none() {
        return Err(Error::Config(
            "base configuration enables the bridge but no reconstruction backend is given".into(),
        ));
    }
    let variants = suite_variants(suite, ctx)?;
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        log::info!("ablation {}: running {}", suite.name(), variant.label);
        let row = match run_variant(ctx, &variant) {
            Ok(metrics) => AblationRow {
                suite: suite.name().into(),
                label: variant.label,
                metrics: Some(metrics),
                error: None,
            },
            Err(e) => {
                log::warn!("ablation row {} failed: {e}", variant.label);
                AblationRow {
                    suite: suite.name().into(),
                    label: variant.label,
                    metrics: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

fn run_variant(ctx: &AblationContext, variant: &Variant) -> Result<MetricsReport> {
    let scan = scan_dataset(ctx.root, Split::Train, &ScanOptions::default())?;
    let (tuples, warnings) = build_tuples(&scan.records)?;
    for w in scan.warnings.iter().chain(&warnings) {
        log::warn!("{}: {w}", variant.label);
    }

    let mut pool_records = scan.records.clone();
    if variant.mine_pool {
        let street: Vec<ImageRecord> = scan
            .records
            .iter()
            .filter(|r| r.view == View::Street)
            .cloned()
            .collect();
        let aux = scan_aux_pool(ctx.root)?;
        if aux.is_empty() {
            return Err(Error::Data("auxiliary pool is empty".into()));
        }
        let mined = prepare_grem(&street, &aux, &MeanPoolExtractor::default())?;
        for w in &mined.warnings {
            log::warn!("{}: {w}", variant.label);
        }
        pool_records.extend(mined.augmented);
    }

    let pipeline = Pipeline::new(variant.pipeline.clone())?;
    let mut store = ParamStore::new();
    pipeline.init_params(&mut store)?;
    if let Some(overrides) = ctx.init_overrides {
        let applied = store.apply_overrides(overrides)?;
        log::info!("{}: applied {applied} pretrained parameters", variant.label);
    }
    let mut optimizer = SgdMomentum::new(variant.train.momentum, variant.train.weight_decay);
    let mut state = TrainState::fresh();
    let trainer = Trainer {
        config: variant.train.clone(),
        pipeline: &pipeline,
        backend: ctx.backend,
        cache: ctx.cache,
        street_pools: street_pools(&pool_records),
    };
    trainer.train(&tuples, &mut store, &mut optimizer, &mut state, None)?;

    let queries = embed_split(ctx, &pipeline, &store, Split::TestQuery, View::Street)?;
    let gallery = embed_split(ctx, &pipeline, &store, Split::TestGallery, View::Satellite)?;
    let results = rank(&queries, &gallery)?;
    compute_metrics(&results, &DEFAULT_KS, ctx.ap_mode)
}

fn embed_split(
    ctx: &AblationContext,
    pipeline: &Pipeline,
    store: &ParamStore,
    split: Split,
    view: View,
) -> Result<Vec<EvalItem>> {
    let scan = scan_dataset(ctx.root, split, &ScanOptions::default())?;
    let records: Vec<ImageRecord> =
        scan.records.into_iter().filter(|r| r.view == view).collect();
    embed_records(pipeline, store, &records, ctx.use_tta)
}

/// Render rows as an aligned text table for terminal output.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>8} {:>8} {:>8} {:>8}  {}\n",
        "configuration", "R@1", "R@5", "R@10", "AP", "status"
    ));
    for row in rows {
        match &row.metrics {
            Some(m) => {
                let r = |k: usize| m.recall_at.get(&k).copied().unwrap_or(f64::NAN);
                out.push_str(&format!(
                    "{:<22} {:>8.2} {:>8.2} {:>8.2} {:>8.2}  ok\n",
                    row.label,
                    r(1),
                    r(5),
                    r(10),
                    m.ap
                ));
            }
            None => {
                out.push_str(&format!(
                    "{:<22} {:>8} {:>8} {:>8} {:>8}  failed: {}\n",
                    row.label,
                    "-",
                    "-",
                    "-",
                    "-",
                    row.error.as_deref().unwrap_or("unknown")
                ));
            }
        }
    }
    out
}
