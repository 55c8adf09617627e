//! The optimization loop: SGD with momentum on a cosine-annealed learning
//! rate with linear warmup, two augmentation draws per image per step,
//! per-epoch checkpoints, and a JSONL training log.
//!
//! Everything is deterministic given (config, seed, dataset): batch order,
//! street-pool picks and augmentation draws are derived from labeled RNG
//! streams keyed by absolute step, never from a shared stateful generator,
//! so a resumed run replays the exact trajectory of an uninterrupted one.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{azip, Array2};
use serde::Serialize;

use crate::augment::{augment, draw_rng, AugmentConfig};
use crate::bridge3d::{BridgeCache, ReconstructionBackend};
use crate::bytes::{push_matrix, push_str, push_u32, push_u64, Reader};
use crate::config::Config;
use crate::data::{make_batches, Batch, ImageRecord, LocationTuple, Scale, View};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::imageio::PixelImage;
use crate::losses::{total_loss_graph, BatchEmbeddings, LossConfig, LossReport};
use crate::params::ParamStore;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::rng::{hash64, hash_hex, seeded_rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Fraction of total steps spent ramping linearly from 0 to `lr_max`.
    pub warmup_fraction: f64,
    pub momentum: f64,
    /// Disabled by default; applied as `grad + weight_decay · param`.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            lr_max: 5e-4,
            lr_min: 1e-4,
            warmup_fraction: 0.10,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 8,
            seed: 0,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 < lr_min ≤ lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must be in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be ≥ 2".into()));
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    /// Read `train.*` (plus nested `loss.*`, `augment.*`) keys of a flat
    /// config file.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = TrainConfig::default();
        let config = TrainConfig {
            epochs: cfg.usize_or("train.epochs", d.epochs)?,
            lr_max: cfg.f64_or("train.lr_max", d.lr_max)?,
            lr_min: cfg.f64_or("train.lr_min", d.lr_min)?,
            warmup_fraction: cfg.f64_or("train.warmup_fraction", d.warmup_fraction)?,
            momentum: cfg.f64_or("train.momentum", d.momentum)?,
            weight_decay: cfg.f64_or("train.weight_decay", d.weight_decay)?,
            batch_size: cfg.usize_or("train.batch_size", d.batch_size)?,
            seed: cfg.u64_or("train.seed", d.seed)?,
            loss: LossConfig::from_config(cfg)?,
            augment: AugmentConfig::from_config(cfg)?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Learning rate at `step` of `total_steps`: linear ramp from 0 to `lr_max`
/// over the warmup prefix, then half-cosine decay to `lr_min` over the rest.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} out of range for {total_steps} total steps"
        )));
    }
    let warmup = (config.warmup_fraction * total_steps as f64).floor() as usize;
    if step < warmup {
        return Ok(config.lr_max * step as f64 / warmup as f64);
    }
    // t′ spans [0, 1] from warmup end to the final step.
    let span = (total_steps - 1).saturating_sub(warmup).max(1);
    let t = (step - warmup) as f64 / span as f64;
    Ok(config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + (PI * t).cos()))
}

/// SGD with classical momentum: `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
/// Velocities are keyed by parameter name and persist in checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocities: BTreeMap<String, Array2<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            velocities: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        let v = self
            .velocities
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(param.dim()));
        let (mu, wd) = (self.momentum, self.weight_decay);
        azip!((v in &mut *v, &g in grad, &p in &*param) *v = mu * *v + g + wd * p);
        azip!((p in param, &v in &*v) *p -= lr * v);
    }
}

/// Progress of a run; serialized into every checkpoint as the metric
/// snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainState {
    /// Global step counter (batches consumed so far).
    pub step: usize,
    /// First epoch that has not finished yet.
    pub next_epoch: usize,
    /// Mean `l_total` of each completed epoch.
    pub epoch_mean_losses: Vec<f64>,
}

impl TrainState {
    pub fn fresh() -> Self {
        TrainState::default()
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Hash identifying the (model, optimization) configuration a run was
/// started with; resuming under a different configuration is refused.
pub fn config_fingerprint(pipeline: &PipelineConfig, train: &TrainConfig) -> String {
    hash_hex(format!("{pipeline:?}|{train:?}").as_bytes())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

/// Everything needed to continue a run: parameters (with their frozen
/// flags), optimizer velocities, progress counters, and the fingerprint of
/// the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub store: ParamStore,
    pub velocities: BTreeMap<String, Array2<f64>>,
    pub state: TrainState,
    pub fingerprint: String,
}

/// Serialize parameters, optimizer velocities and progress to `path`.
/// Floats are stored as little-endian IEEE-754 bits, so a load reproduces
/// them bitwise.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    optimizer: &SgdMomentum,
    state: &TrainState,
    fingerprint: &str,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u64(&mut out, state.step as u64);
    push_u64(&mut out, state.next_epoch as u64);
    push_str(&mut out, fingerprint);
    push_u32(&mut out, state.epoch_mean_losses.len());
    for v in &state.epoch_mean_losses {
        out.extend_from_slice(&v.to_le_bytes());
    }
    push_u32(&mut out, store.len());
    for (name, entry) in store.iter() {
        push_str(&mut out, name);
        out.push(u8::from(entry.trainable));
        push_matrix(&mut out, &entry.value);
    }
    push_u32(&mut out, optimizer.velocities.len());
    for (name, v) in &optimizer.velocities {
        push_str(&mut out, name);
        push_matrix(&mut out, v);
    }
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, Error::Checkpoint);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let step = r.u64()? as usize;
    let next_epoch = r.u64()? as usize;
    let fingerprint = r.string()?;
    let n_losses = r.u32()?;
    let mut epoch_mean_losses = Vec::with_capacity(n_losses);
    for _ in 0..n_losses {
        epoch_mean_losses.push(r.f64()?);
    }
    let mut store = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let trainable = r.take(1)?[0] != 0;
        let value = r.matrix()?;
        store.insert(&name, value, trainable);
    }
    let mut velocities = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        velocities.insert(name, r.matrix()?);
    }
    r.finish()?;
    Ok(CheckpointData {
        store,
        velocities,
        state: TrainState {
            step,
            next_epoch,
            epoch_mean_losses,
        },
        fingerprint,
    })
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

/// Drives optimization of one [`Pipeline`]. The reconstruction backend and
/// disk cache are only consulted when the pipeline has a scene bridge.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub pipeline: &'a Pipeline,
    pub backend: Option<&'a dyn ReconstructionBackend>,
    pub cache: Option<&'a BridgeCache>,
    /// Street images per location, typically expanded with mined pool
    /// entries; locations absent here always train on the tuple's own
    /// street image.
    pub street_pools: BTreeMap<String, Vec<ImageRecord>>,
}

/// Pick the street image for `tuple` at `step`, uniformly from its pool.
pub fn pick_street<'t>(
    pools: &'t BTreeMap<String, Vec<ImageRecord>>,
    tuple: &'t LocationTuple,
    seed: u64,
    step: usize,
) -> &'t ImageRecord {
    match pools.get(&tuple.location_id) {
        Some(pool) if !pool.is_empty() => {
            let mut rng = seeded_rng(seed, &format!("street-pick/{step}/{}", tuple.location_id));
            use rand::Rng;
            &pool[rng.random_range(0..pool.len())]
        }
        _ => &tuple.street,
    }
}

impl Trainer<'_> {
    pub fn fingerprint(&self) -> String {
        config_fingerprint(&self.pipeline.config, &self.config)
    }

    /// Load a checkpoint written by a run with this exact configuration.
    pub fn resume_from(&self, path: &Path) -> Result<(ParamStore, SgdMomentum, TrainState)> {
        let ck = load_checkpoint(path)?;
        let expect = self.fingerprint();
        if ck.fingerprint != expect {
            return Err(Error::Checkpoint(format!(
                "checkpoint fingerprint {} does not match run configuration {expect}",
                ck.fingerprint
            )));
        }
        let mut optimizer = SgdMomentum::new(self.config.momentum, self.config.weight_decay);
        optimizer.velocities = ck.velocities;
        Ok((ck.store, optimizer, ck.state))
    }

    /// Run (or continue) training over `tuples`. Progress accumulates in
    /// `state`; when `run_dir` is given, every epoch ends with a checkpoint
    /// `epoch_NNN.ckpt` and each step appends one line to
    /// `train_log.jsonl`.
    pub fn train(
        &self,
        tuples: &[LocationTuple],
        store: &mut ParamStore,
        optimizer: &mut SgdMomentum,
        state: &mut TrainState,
        run_dir: Option<&Path>,
    ) -> Result<()> {
        self.config.validate()?;
        if self.pipeline.bridge.is_some() && self.backend.is_none() {
            return Err(Error::Config(
                "pipeline has a scene bridge but no reconstruction backend was provided".into(),
            ));
        }
        let fingerprint = self.fingerprint();
        let mut log_file = match run_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let fp_path = dir.join("fingerprint.txt");
                match fs::read_to_string(&fp_path) {
                    Ok(existing) if existing.trim() != fingerprint => {
                        return Err(Error::Checkpoint(format!(
                            "run directory {} belongs to configuration {}, not {fingerprint}",
                            dir.display(),
                            existing.trim()
                        )));
                    }
                    Ok(_) => {}
                    Err(_) => {
                        fs::write(&fp_path, format!("{fingerprint}\n"))
                            .map_err(|e| Error::io(&fp_path, e))?
                    }
                }
                let log_path = dir.join("train_log.jsonl");
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&log_path)
                    .map_err(|e| Error::io(&log_path, e))?;
                Some(file)
            }
            None => None,
        };

        let per_epoch = make_batches(tuples, self.config.batch_size, self.epoch_seed(0))?.len();
        let total_steps = self.config.epochs * per_epoch;
        let mut image_cache: BTreeMap<PathBuf, PixelImage> = BTreeMap::new();
        // Scene features are frozen, so each (location, scale) is encoded
        // once per run; failures are remembered and the scale is dropped
        // from every batch containing that location.
        let mut scene_cache: BTreeMap<(String, usize), Option<Array2<f64>>> = BTreeMap::new();

        for epoch in state.next_epoch..self.config.epochs {
            let batches = make_batches(tuples, self.config.batch_size, self.epoch_seed(epoch))?;
            let mut loss_sum = 0.0;
            for batch in &batches {
                let lr = lr_at(state.step, total_steps, &self.config)?;
                let report = self.train_step(
                    batch,
                    store,
                    optimizer,
                    lr,
                    state.step,
                    &mut image_cache,
                    &mut scene_cache,
                )?;
                loss_sum += report.l_total;
                if let Some(file) = &mut log_file {
                    let record = StepRecord {
                        step: state.step,
                        epoch,
                        lr,
                        report,
                    };
                    let line = serde_json::to_string(&record)
                        .map_err(|e| Error::Checkpoint(format!("log serialization: {e}")))?;
                    writeln!(file, "{line}").map_err(|e| Error::io(Path::new("train_log.jsonl"), e))?;
                }
                state.step += 1;
            }
            let mean = loss_sum / batches.len() as f64;
            state.epoch_mean_losses.push(mean);
            state.next_epoch = epoch + 1;
            log::info!(
                "epoch {}/{}: mean loss {mean:.6} over {} steps",
                epoch + 1,
                self.config.epochs,
                batches.len()
            );
            if let Some(dir) = run_dir {
                let path = dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
                save_checkpoint(&path, store, optimizer, state, &fingerprint)?;
            }
        }
        Ok(())
    }

    fn epoch_seed(&self, epoch: usize) -> u64 {
        hash64(format!("epoch-batches/{}/{epoch}", self.config.seed).as_bytes())
    }

    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &self,
        batch: &Batch,
        store: &mut ParamStore,
        optimizer: &mut SgdMomentum,
        lr: f64,
        step: usize,
        image_cache: &mut BTreeMap<PathBuf, PixelImage>,
        scene_cache: &mut BTreeMap<(String, usize), Option<Array2<f64>>>,
    ) -> Result<LossReport> {
        let mut g = Graph::new();
        let size = self.pipeline.input_size();
        let norm = self.pipeline.config.backbone.normalization();
        let seed = self.config.seed;

        // Frozen scene features per scale; a scale participates only if it
        // is available for every tuple in the batch.
        let mut scale_features: [Option<Vec<Array2<f64>>>; 3] = [None, None, None];
        if let Some(bridge) = &self.pipeline.bridge {
            let backend = self.backend.expect("checked in train()");
            for scale in Scale::ALL {
                let mut features = Vec::with_capacity(batch.tuples.len());
                let mut complete = true;
                for tuple in &batch.tuples {
                    let key = (tuple.location_id.clone(), scale.index());
                    if !scene_cache.contains_key(&key) {
                        let computed =
                            match bridge.scene_features(tuple.scene(scale), backend, store, self.cache) {
                                Ok(f) => Some(f),
                                Err(e) => {
                                    log::warn!(
                                        "scene {}@{} dropped: {e}",
                                        tuple.location_id,
                                        scale.name()
                                    );
                                    None
                                }
                            };
                        scene_cache.insert(key.clone(), computed);
                    }
                    match &scene_cache[&key] {
                        Some(f) => features.push(f.clone()),
                        None => {
                            complete = false;
                            break;
                        }
                    }
                }
                if complete {
                    scale_features[scale.index()] = Some(features);
                }
            }
        }

        // Two independent augmentation draws of each image, encoded through
        // the shared backbone and head.
        let mut street = (Vec::new(), Vec::new());
        let mut satellite = (Vec::new(), Vec::new());
        for tuple in &batch.tuples {
            let street_rec = pick_street(&self.street_pools, tuple, seed, step);
            for (rec, view, rows) in [
                (street_rec, View::Street, &mut street),
                (&tuple.satellite, View::Satellite, &mut satellite),
            ] {
                let image = load_resized(image_cache, &rec.path, size)?;
                for (draw, out) in [('a', &mut rows.0), ('b', &mut rows.1)] {
                    let mut rng = draw_rng(seed, step, &rec.image_id, draw);
                    let tensor = augment(&image, view, &self.config.augment, &norm, &mut rng)?;
                    out.push(self.pipeline.embed_graph(&mut g, store, &tensor)?);
                }
            }
        }

        // Scene embeddings re-use one node per tuple for both loss draws:
        // the 3D path is frozen up to the adapter, so the two "views" of a
        // scene are identical by construction.
        let mut drone: [Option<VarId>; 3] = [None, None, None];
        if let Some(bridge) = &self.pipeline.bridge {
            for scale in Scale::ALL {
                if let Some(features) = &scale_features[scale.index()] {
                    let nodes = features
                        .iter()
                        .map(|f| bridge.adapter_fuse_graph(&mut g, store, f, scale))
                        .collect::<Result<Vec<_>>>()?;
                    drone[scale.index()] = Some(stack_rows(&mut g, &nodes));
                }
            }
        }

        let embeddings = BatchEmbeddings {
            street_a: stack_rows(&mut g, &street.0),
            street_b: stack_rows(&mut g, &street.1),
            satellite_a: stack_rows(&mut g, &satellite.0),
            satellite_b: stack_rows(&mut g, &satellite.1),
            drone_a: drone,
            drone_b: drone,
        };
        let (root, report) = total_loss_graph(&mut g, &embeddings, &self.config.loss)?;
        if !report.l_total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                locations: batch.location_ids().iter().map(|s| s.to_string()).collect(),
            });
        }

        let grads = g.backward(root);
        for (name, id) in g.named_ids() {
            if !store.is_trainable(name) {
                continue;
            }
            if let Some(grad) = grads.get(id) {
                let param = store
                    .get_mut(name)
                    .expect("graph leaf names come from the store");
                optimizer.step(name, param, grad, lr);
            }
        }
        Ok(report)
    }
}

fn stack_rows(g: &mut Graph, rows: &[VarId]) -> VarId {
    rows[1..]
        .iter()
        .fold(rows[0], |acc, &row| g.concat_rows(acc, row))
}

fn load_resized(
    cache: &mut BTreeMap<PathBuf, PixelImage>,
    path: &Path,
    size: usize,
) -> Result<PixelImage> {
    if let Some(hit) = cache.get(path) {
        return Ok(hit.clone());
    }
    let image = PixelImage::load(path)?.resize(size);
    cache.insert(path.to_path_buf(), image.clone());
    Ok(image)
}
