//! `cvgl` command line: synthetic dataset generation, dataset scanning,
//! street-pool mining, training, embedding extraction, retrieval
//! evaluation, and the ablation suites.
//!
//! Every subcommand runs at desk scale by default (toy backbone, synthetic
//! or small data, CPU). `train --full` / `ablate --full` select the
//! full-scale path, which requires externally exported foundation-model
//! weights and GPU-class compute; no numeric expectations are attached to
//! it here.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cvgl::bridge3d::{BridgeCache, StubReconstruction};
use cvgl::config::Config;
use cvgl::data::{
    build_tuples, read_manifest, scan_dataset, street_pools, write_manifest, ImageRecord,
    ScanOptions, Split, View,
};
use cvgl::error::{Error, Result};
use cvgl::evaluator::{
    compute_metrics, embed_records, format_ablation_table, rank, read_embeddings, run_ablation,
    write_embeddings, AblationContext, AblationSuite, ApMode, DEFAULT_KS,
};
use cvgl::grem::{prepare_grem, MeanPoolExtractor};
use cvgl::params::ParamStore;
use cvgl::pipeline::{Pipeline, PipelineConfig};
use cvgl::synth::{generate, scan_aux_pool, SynthConfig};
use cvgl::trainer::{load_checkpoint, SgdMomentum, TrainConfig, TrainState, Trainer};

#[derive(Parser)]
#[command(
    name = "cvgl",
    version,
    about = "Cross-view geo-localization: generate data, train, embed, evaluate, ablate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    TestQuery,
    TestGallery,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::TestQuery => Split::TestQuery,
            SplitArg::TestGallery => Split::TestGallery,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Street,
    Satellite,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> View {
        match v {
            ViewArg::Street => View::Street,
            ViewArg::Satellite => View::Satellite,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ApModeArg {
    Standard,
    ReciprocalRank,
}

impl From<ApModeArg> for ApMode {
    fn from(m: ApModeArg) -> ApMode {
        match m {
            ApModeArg::Standard => ApMode::Standard,
            ApModeArg::ReciprocalRank => ApMode::ReciprocalRank,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Components,
    Heads,
    Lambda,
}

impl From<SuiteArg> for AblationSuite {
    fn from(s: SuiteArg) -> AblationSuite {
        match s {
            SuiteArg::Components => AblationSuite::Components,
            SuiteArg::Heads => AblationSuite::Heads,
            SuiteArg::Lambda => AblationSuite::Lambda,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic correlated-views dataset (layout matches the
    /// real corpus: train/test splits plus an auxiliary street pool).
    Synth {
        /// Directory to generate into.
        #[arg(long)]
        root: PathBuf,
        /// Flat key=value config; `synth.*` keys override the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },

    /// Scan one dataset split and report (optionally manifest) its records.
    Scan {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Drone files are ordered high-to-low altitude instead of low-to-high.
        #[arg(long)]
        invert_altitude: bool,
        /// Write the records as newline-delimited JSON.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },

    /// Mine the auxiliary street pool: embed candidates with the frozen
    /// extractor, keep each anchor's top half, and write the augmented
    /// street records as a manifest for `train --grem-manifest`.
    PrepareGrem {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },

    /// Train on the train split; one checkpoint per epoch plus a JSONL log
    /// in the run directory.
    Train {
        #[arg(long)]
        root: PathBuf,
        /// Flat key=value config (backbone.*, head.*, pafa.*, bridge.*,
        /// loss.*, augment.*, train.*).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from a checkpoint written by this exact configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Street records mined by `prepare-grem` to widen the per-location
        /// sampling pools.
        #[arg(long)]
        grem_manifest: Option<PathBuf>,
        /// Cache directory for reconstructed clouds and view features.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        invert_altitude: bool,
        /// full-scale run: requires --weights with the exported foundation
        /// backbone and GPU-class time. Desk-scale runs omit this.
        #[arg(long)]
        full: bool,
        /// Checkpoint holding pretrained parameter values to copy over the
        /// fresh initialization (names must match the configured model).
        #[arg(long)]
        weights: Option<PathBuf>,
    },

    /// Embed one split's street or satellite images into a binary dump.
    Embed {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long, value_enum)]
        view: ViewArg,
        #[arg(long)]
        config: PathBuf,
        /// Trained checkpoint; omitting it embeds with fresh random
        /// parameters (useful only for smoke tests).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Skip test-time augmentation (identity transform only).
        #[arg(long)]
        no_tta: bool,
        #[arg(long)]
        invert_altitude: bool,
    },

    /// Rank query embeddings against a gallery and print Recall@K and AP.
    Evaluate {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// AP definition: standard average precision over the relevant set,
        /// or reciprocal rank of the first relevant item only.
        #[arg(long, value_enum, default_value = "standard")]
        ap_mode: ApModeArg,
        /// Also write the metrics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Train and evaluate a configuration grid; one table row per variant.
    Ablate {
        #[arg(long)]
        root: PathBuf,
        /// Base configuration every variant derives from.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        suite: SuiteArg,
        /// Also write the rows as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        no_tta: bool,
        /// full-scale grid: requires --weights and GPU-class time.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { root, config } => cmd_synth(&root, config.as_deref()),
        Command::Scan {
            root,
            split,
            invert_altitude,
            manifest,
        } => cmd_scan(&root, split.into(), invert_altitude, manifest.as_deref()),
        Command::PrepareGrem { root, manifest } => cmd_prepare_grem(&root, &manifest),
        Command::Train {
            root,
            config,
            run_dir,
            resume,
            grem_manifest,
            cache_dir,
            invert_altitude,
            full,
            weights,
        } => cmd_train(
            &root,
            &config,
            &run_dir,
            resume.as_deref(),
            grem_manifest.as_deref(),
            cache_dir.as_deref(),
            invert_altitude,
            full,
            weights.as_deref(),
        ),
        Command::Embed {
            root,
            split,
            view,
            config,
            checkpoint,
            out,
            no_tta,
            invert_altitude,
        } => cmd_embed(
            &root,
            split.into(),
            view.into(),
            &config,
            checkpoint.as_deref(),
            &out,
            no_tta,
            invert_altitude,
        ),
        Command::Evaluate {
            query,
            gallery,
            ap_mode,
            out,
        } => cmd_evaluate(&query, &gallery, ap_mode.into(), out.as_deref()),
        Command::Ablate {
            root,
            config,
            suite,
            out,
            cache_dir,
            no_tta,
            full,
            weights,
        } => cmd_ablate(
            &root,
            &config,
            suite.into(),
            out.as_deref(),
            cache_dir.as_deref(),
            no_tta,
            full,
            weights.as_deref(),
        ),
    }
}

fn cmd_synth(root: &Path, config: Option<&Path>) -> Result<()> {
    let synth_config = match config {
        Some(path) => SynthConfig::from_config(&Config::load(path)?)?,
        None => SynthConfig::default(),
    };
    let summary = generate(root, &synth_config)?;
    println!(
        "generated {} locations ({} images) under {}",
        summary.locations,
        summary.images_written,
        summary.root.display()
    );
    Ok(())
}

fn cmd_scan(root: &Path, split: Split, invert_altitude: bool, manifest: Option<&Path>) -> Result<()> {
    let options = ScanOptions {
        invert_altitude_order: invert_altitude,
    };
    let scan = scan_dataset(root, split, &options)?;
    for w in &scan.warnings {
        log::warn!("{w}");
    }
    let count = |view: View| scan.records.iter().filter(|r| r.view == view).count();
    println!(
        "{}: {} records (street {}, satellite {}, drone {}), {} warnings",
        split.dir_name(),
        scan.records.len(),
        count(View::Street),
        count(View::Satellite),
        count(View::Drone),
        scan.warnings.len()
    );
    if let Some(path) = manifest {
        write_manifest(&scan.records, path)?;
        println!("manifest written to {}", path.display());
    }
    Ok(())
}

fn cmd_prepare_grem(root: &Path, manifest: &Path) -> Result<()> {
    let scan = scan_dataset(root, Split::Train, &ScanOptions::default())?;
    for w in &scan.warnings {
        log::warn!("{w}");
    }
    let street: Vec<ImageRecord> = scan
        .records
        .into_iter()
        .filter(|r| r.view == View::Street)
        .collect();
    let aux = scan_aux_pool(root)?;
    if aux.is_empty() {
        return Err(Error::Data(format!(
            "auxiliary pool under {} is empty",
            root.display()
        )));
    }
    let output = prepare_grem(&street, &aux, &MeanPoolExtractor::default())?;
    for w in &output.warnings {
        log::warn!("{w}");
    }
    write_manifest(&output.augmented, manifest)?;
    println!(
        "mined pool: {} anchors, {} selections ({} distinct candidates); {} augmented records written to {}",
        output.audit.anchors,
        output.audit.raw_selected,
        output.audit.distinct_selected,
        output.augmented.len(),
        manifest.display()
    );
    Ok(())
}

/// The full-scale gate: `--full` is accepted everywhere but only proceeds
/// when the externally exported backbone weights are supplied, because
/// nothing in this repository can stand in for them.
fn full_mode_weights(pipeline: &PipelineConfig, weights: Option<&Path>) -> Result<ParamStore> {
    let path = weights.ok_or_else(|| {
        Error::Config(
            "--full selects the full-scale configuration and needs --weights <checkpoint> \
             holding the exported foundation backbone parameters; expect GPU-class runtime. \
             The desk-scale default needs neither."
                .into(),
        )
    })?;
    if pipeline.backbone.backend == cvgl::backbone::Backend::Toy {
        return Err(Error::Config(
            "--full expects a foundation backbone in the config (backbone.backend), not toy".into(),
        ));
    }
    Ok(load_checkpoint(path)?.store)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    root: &Path,
    config: &Path,
    run_dir: &Path,
    resume: Option<&Path>,
    grem_manifest: Option<&Path>,
    cache_dir: Option<&Path>,
    invert_altitude: bool,
    full: bool,
    weights: Option<&Path>,
) -> Result<()> {
    let cfg = Config::load(config)?;
    let pipeline_config = PipelineConfig::from_config(&cfg)?;
    let train_config = TrainConfig::from_config(&cfg)?;
    let pretrained = if full {
        Some(full_mode_weights(&pipeline_config, weights)?)
    } else {
        None
    };

    let options = ScanOptions {
        invert_altitude_order: invert_altitude,
    };
    let scan = scan_dataset(root, Split::Train, &options)?;
    for w in &scan.warnings {
        log::warn!("{w}");
    }
    let (tuples, warnings) = build_tuples(&scan.records)?;
    for w in &warnings {
        log::warn!("{w}");
    }

    let mut pool_records = scan.records.clone();
    if let Some(path) = grem_manifest {
        let mined = read_manifest(path)?;
        log::info!("widening street pools with {} mined records", mined.len());
        pool_records.extend(mined);
    }

    let pipeline = Pipeline::new(pipeline_config)?;
    let backend = StubReconstruction;
    let cache = cache_dir.map(BridgeCache::new).transpose()?;
    let trainer = Trainer {
        config: train_config,
        pipeline: &pipeline,
        backend: Some(&backend),
        cache: cache.as_ref(),
        street_pools: street_pools(&pool_records),
    };

    let (mut store, mut optimizer, mut state) = match resume {
        Some(ckpt) => {
            if pretrained.is_some() {
                log::warn!("--weights ignored: --resume restores all parameters");
            }
            trainer.resume_from(ckpt)?
        }
        None => {
            let mut store = ParamStore::new();
            pipeline.init_params(&mut store)?;
            if let Some(values) = &pretrained {
                let applied = store.apply_overrides(values)?;
                log::info!("applied {applied} pretrained parameters");
            }
            (
                store,
                SgdMomentum::new(trainer.config.momentum, trainer.config.weight_decay),
                TrainState::fresh(),
            )
        }
    };

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    trainer.train(&tuples, &mut store, &mut optimizer, &mut state, Some(run_dir))?;
    println!(
        "trained {} epochs ({} steps); last epoch mean loss {:.6}; artifacts in {}",
        state.next_epoch,
        state.step,
        state.epoch_mean_losses.last().copied().unwrap_or(f64::NAN),
        run_dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_embed(
    root: &Path,
    split: Split,
    view: View,
    config: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    no_tta: bool,
    invert_altitude: bool,
) -> Result<()> {
    let cfg = Config::load(config)?;
    let pipeline = Pipeline::from_config(&cfg)?;
    let mut store = ParamStore::new();
    pipeline.init_params(&mut store)?;
    match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let applied = store.apply_overrides(&ck.store)?;
            if applied < store.len() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint covers {applied} of {} parameters; wrong configuration?",
                    store.len()
                )));
            }
        }
        None => log::warn!("no checkpoint given: embedding with untrained parameters"),
    }

    let options = ScanOptions {
        invert_altitude_order: invert_altitude,
    };
    let scan = scan_dataset(root, split, &options)?;
    for w in &scan.warnings {
        log::warn!("{w}");
    }
    let records: Vec<ImageRecord> = scan
        .records
        .into_iter()
        .filter(|r| r.view == view)
        .collect();
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no {} images in {}",
            view.dir_name(),
            split.dir_name()
        )));
    }
    let items = embed_records(&pipeline, &store, &records, !no_tta)?;
    write_embeddings(out, &items)?;
    println!(
        "embedded {} {} images ({}-dim) to {}",
        items.len(),
        view.dir_name(),
        items[0].embedding.dim(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(query: &Path, gallery: &Path, ap_mode: ApMode, out: Option<&Path>) -> Result<()> {
    let queries = read_embeddings(query)?;
    let gallery_items = read_embeddings(gallery)?;
    let results = rank(&queries, &gallery_items)?;
    let report = compute_metrics(&results, &DEFAULT_KS, ap_mode)?;
    println!(
        "{} queries vs {} gallery items (ap mode: {})",
        report.n_queries,
        gallery_items.len(),
        ap_mode.name()
    );
    if report.n_excluded > 0 {
        println!(
            "excluded {} queries with no relevant gallery item",
            report.n_excluded
        );
    }
    for (k, v) in &report.recall_at {
        println!("R@{k}: {v:.2}");
    }
    println!("AP: {:.2}", report.ap);
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Data(format!("serializing metrics: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
        println!("metrics written to {}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    root: &Path,
    config: &Path,
    suite: AblationSuite,
    out: Option<&Path>,
    cache_dir: Option<&Path>,
    no_tta: bool,
    full: bool,
    weights: Option<&Path>,
) -> Result<()> {
    let cfg = Config::load(config)?;
    let pipeline_config = PipelineConfig::from_config(&cfg)?;
    let train_config = TrainConfig::from_config(&cfg)?;
    let pretrained = if full {
        Some(full_mode_weights(&pipeline_config, weights)?)
    } else {
        None
    };
    let backend = StubReconstruction;
    let cache = cache_dir.map(BridgeCache::new).transpose()?;
    let ctx = AblationContext {
        root,
        pipeline: pipeline_config,
        train: train_config,
        backend: Some(&backend),
        cache: cache.as_ref(),
        init_overrides: pretrained.as_ref(),
        use_tta: !no_tta,
        ap_mode: ApMode::Standard,
    };
    let rows = run_ablation(suite, &ctx)?;
    print!("{}", format_ablation_table(&rows));
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&rows)
            .map_err(|e| Error::Data(format!("serializing rows: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
        println!("rows written to {}", path.display());
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| r.failed())
        .map(|r| r.label.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(Error::Data(format!(
            "{} of {} rows failed: {}",
            failed.len(),
            rows.len(),
            failed.join(", ")
        )));
    }
    Ok(())
}
