//! Dataset ingestion, core record types, and batch assembly.
//!
//! The on-disk layout follows the University-1652 convention, view-major
//! under each split:
//!
//! ```text
//! root/
//!   train/
//!     street/<location>/*.png|jpg
//!     satellite/<location>/*.png|jpg
//!     drone/<location>/*.png|jpg       (54 altitude-ordered images)
//!   test_query/street/<location>/...
//!   test_gallery/satellite/<location>/...
//! ```
//!
//! Drone sequences are altitude-ordered by filename; indices 0–17, 18–35,
//! 36–53 form the low/medium/high scene groups.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

pub const SCENE_GROUP_SIZE: usize = 18;
pub const SCENE_SCALES: usize = 3;
pub const DRONE_IMAGES_PER_LOCATION: usize = SCENE_GROUP_SIZE * SCENE_SCALES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Street,
    Satellite,
    Drone,
}

impl View {
    pub fn dir_name(&self) -> &'static str {
        match self {
            View::Street => "street",
            View::Satellite => "satellite",
            View::Drone => "drone",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Drone altitude band: s1 = low, s2 = medium, s3 = high.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    S1,
    S2,
    S3,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::S1, Scale::S2, Scale::S3];

    pub fn index(&self) -> usize {
        match self {
            Scale::S1 => 0,
            Scale::S2 => 1,
            Scale::S3 => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scale::S1 => "s1",
            Scale::S2 => "s2",
            Scale::S3 => "s3",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Original,
    GremAugmented,
}

/// One image in the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub location_id: String,
    pub view: View,
    pub scale: Option<Scale>,
    pub source: Source,
    pub path: PathBuf,
    pub height_px: u32,
    pub width_px: u32,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if (self.view == View::Drone) != self.scale.is_some() {
            return Err(Error::Data(format!(
                "record {}: scale must be present iff view is drone",
                self.image_id
            )));
        }
        if self.height_px == 0 || self.width_px == 0 {
            return Err(Error::Data(format!(
                "record {}: zero image dimensions",
                self.image_id
            )));
        }
        Ok(())
    }
}

/// Ordered group of exactly 18 drone images at one scale of one location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGroup {
    pub location_id: String,
    pub scale: Scale,
    pub images: Vec<ImageRecord>,
}

impl SceneGroup {
    pub fn new(images: Vec<ImageRecord>) -> Result<Self> {
        if images.len() != SCENE_GROUP_SIZE {
            return Err(Error::Data(format!(
                "scene group needs exactly {SCENE_GROUP_SIZE} images, got {}",
                images.len()
            )));
        }
        let location_id = images[0].location_id.clone();
        let scale = images[0].scale.ok_or_else(|| {
            Error::Data(format!("scene group image {} has no scale", images[0].image_id))
        })?;
        for img in &images {
            if img.view != View::Drone {
                return Err(Error::Data(format!(
                    "scene group image {} is not a drone image",
                    img.image_id
                )));
            }
            if img.location_id != location_id || img.scale != Some(scale) {
                return Err(Error::Data(format!(
                    "scene group image {} does not match location {location_id}/{scale}",
                    img.image_id
                )));
            }
        }
        Ok(SceneGroup {
            location_id,
            scale,
            images,
        })
    }
}

/// Training unit for one location: a street image, a satellite image, and
/// the three altitude-scale scene groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationTuple {
    pub location_id: String,
    pub street: ImageRecord,
    pub satellite: ImageRecord,
    /// Ordered s1, s2, s3.
    pub scenes: Vec<SceneGroup>,
}

impl LocationTuple {
    pub fn new(street: ImageRecord, satellite: ImageRecord, mut scenes: Vec<SceneGroup>) -> Result<Self> {
        let location_id = street.location_id.clone();
        if street.view != View::Street || satellite.view != View::Satellite {
            return Err(Error::Data(format!(
                "tuple for {location_id}: view mismatch on street/satellite components"
            )));
        }
        if satellite.location_id != location_id {
            return Err(Error::Data(format!(
                "tuple for {location_id}: satellite belongs to {}",
                satellite.location_id
            )));
        }
        scenes.sort_by_key(|s| s.scale.index());
        let scales: Vec<Scale> = scenes.iter().map(|s| s.scale).collect();
        if scales != Scale::ALL {
            return Err(Error::Data(format!(
                "tuple for {location_id}: scenes must cover s1, s2, s3 exactly once, got {scales:?}"
            )));
        }
        if scenes.iter().any(|s| s.location_id != location_id) {
            return Err(Error::Data(format!(
                "tuple for {location_id}: scene group from another location"
            )));
        }
        Ok(LocationTuple {
            location_id,
            street,
            satellite,
            scenes,
        })
    }

    pub fn scene(&self, scale: Scale) -> &SceneGroup {
        &self.scenes[scale.index()]
    }
}

/// A training batch; location ids are pairwise distinct so every other tuple
/// serves as a negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tuples: Vec<LocationTuple>,
    pub seed: u64,
}

impl Batch {
    pub fn new(tuples: Vec<LocationTuple>, seed: u64) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &tuples {
            if !seen.insert(&t.location_id) {
                return Err(Error::Data(format!(
                    "batch contains location {} twice",
                    t.location_id
                )));
            }
        }
        Ok(Batch { tuples, seed })
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn location_ids(&self) -> Vec<&str> {
        self.tuples.iter().map(|t| t.location_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    TestQuery,
    TestGallery,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestQuery => "test_query",
            Split::TestGallery => "test_gallery",
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScanOptions {
    /// Swap the s1/s3 assignment when drone files are ordered high-to-low
    /// altitude instead of low-to-high.
    pub invert_altitude_order: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ScanResult {
    pub records: Vec<ImageRecord>,
    pub warnings: Vec<String>,
}

/// Scan one split of a dataset tree into records.
///
/// Locations whose drone directory does not hold exactly 54 readable images
/// are skipped entirely (all views) with a warning: padding or truncating
/// would fabricate scene content.
pub fn scan_dataset(root: &Path, split: Split, options: &ScanOptions) -> Result<ScanResult> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} does not exist", root.display())));
    }
    let mut result = ScanResult::default();
    let split_dir = root.join(split.dir_name());
    if !split_dir.is_dir() {
        result
            .warnings
            .push(format!("split directory {} not found; no records", split_dir.display()));
        return Ok(result);
    }

    // location -> view -> sorted file names
    let mut locations: BTreeMap<String, BTreeMap<View, Vec<String>>> = BTreeMap::new();
    for view in [View::Street, View::Satellite, View::Drone] {
        let view_dir = split_dir.join(view.dir_name());
        if !view_dir.is_dir() {
            continue;
        }
        for entry in sorted_dir(&view_dir)? {
            if !entry.is_dir() {
                continue;
            }
            let loc = file_name(&entry);
            let files: Vec<String> = sorted_dir(&entry)?
                .into_iter()
                .filter(|p| is_image_file(p))
                .map(|p| file_name(&p))
                .collect();
            if !files.is_empty() {
                locations.entry(loc).or_default().insert(view, files);
            }
        }
    }

    if locations.is_empty() {
        result
            .warnings
            .push(format!("no locations found under {}", split_dir.display()));
        return Ok(result);
    }

    'locations: for (loc, views) in &locations {
        if let Some(drone_files) = views.get(&View::Drone) {
            if drone_files.len() != DRONE_IMAGES_PER_LOCATION {
                result.warnings.push(format!(
                    "location {loc}: {} drone images, need exactly {DRONE_IMAGES_PER_LOCATION}; location skipped",
                    drone_files.len()
                ));
                continue 'locations;
            }
        }
        let mut pending = Vec::new();
        for (view, files) in views {
            for (index, name) in files.iter().enumerate() {
                let rel = format!("{}/{}/{}/{}", split.dir_name(), view.dir_name(), loc, name);
                let path = root.join(&rel);
                let (width_px, height_px) = match image::image_dimensions(&path) {
                    Ok(dims) => dims,
                    Err(e) => {
                        result.warnings.push(format!(
                            "location {loc}: unreadable image {rel} ({e}); location skipped"
                        ));
                        continue 'locations;
                    }
                };
                let scale = if *view == View::Drone {
                    Some(altitude_scale(index, options.invert_altitude_order))
                } else {
                    None
                };
                pending.push(ImageRecord {
                    image_id: rel,
                    location_id: loc.clone(),
                    view: *view,
                    scale,
                    source: Source::Original,
                    path,
                    height_px,
                    width_px,
                });
            }
        }
        result.records.extend(pending);
    }
    Ok(result)
}

fn altitude_scale(index: usize, invert: bool) -> Scale {
    let band = index / SCENE_GROUP_SIZE; // 0, 1, 2
    let band = if invert { 2 - band } else { band };
    Scale::ALL[band]
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    Ok(entries)
}

fn file_name(path: &Path) -> String {
    path.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

fn is_image_file(path: &Path) -> bool {
    if !path.is_file() {
        return false;
    }
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Partition drone records into scene groups of 18 per (location, scale).
pub fn group_scenes(records: &[ImageRecord]) -> Result<Vec<SceneGroup>> {
    let mut by_key: BTreeMap<(String, usize), Vec<ImageRecord>> = BTreeMap::new();
    for rec in records.iter().filter(|r| r.view == View::Drone) {
        rec.validate()?;
        let scale = rec.scale.expect("validated drone record has a scale");
        by_key
            .entry((rec.location_id.clone(), scale.index()))
            .or_default()
            .push(rec.clone());
    }
    let mut groups = Vec::new();
    for ((loc, scale_idx), mut images) in by_key {
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if images.len() != SCENE_GROUP_SIZE {
            return Err(Error::Data(format!(
                "location {loc} scale {}: {} drone images, need {SCENE_GROUP_SIZE}",
                Scale::ALL[scale_idx],
                images.len()
            )));
        }
        groups.push(SceneGroup::new(images)?);
    }
    Ok(groups)
}

/// Assemble one tuple per location that has a street image, a satellite
/// image, and all three scene groups. The street slot takes the first
/// street image in id order; the trainer re-samples from the full street
/// pool (including augmented entries) each step.
pub fn build_tuples(records: &[ImageRecord]) -> Result<(Vec<LocationTuple>, Vec<String>)> {
    let groups = group_scenes(records)?;
    let mut scenes_by_loc: BTreeMap<String, Vec<SceneGroup>> = BTreeMap::new();
    for g in groups {
        scenes_by_loc.entry(g.location_id.clone()).or_default().push(g);
    }
    let pools = street_pools(records);
    let mut satellites: BTreeMap<String, ImageRecord> = BTreeMap::new();
    for rec in records.iter().filter(|r| r.view == View::Satellite) {
        satellites
            .entry(rec.location_id.clone())
            .or_insert_with(|| rec.clone());
    }

    let mut locations: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    locations.extend(pools.keys().cloned());
    locations.extend(satellites.keys().cloned());
    locations.extend(scenes_by_loc.keys().cloned());

    let mut tuples = Vec::new();
    let mut warnings = Vec::new();
    for loc in locations {
        let street = pools.get(&loc).and_then(|p| p.first());
        let satellite = satellites.get(&loc);
        let scenes = scenes_by_loc.get(&loc);
        match (street, satellite, scenes) {
            (Some(street), Some(satellite), Some(scenes)) if scenes.len() == SCENE_SCALES => {
                tuples.push(LocationTuple::new(
                    street.clone(),
                    satellite.clone(),
                    scenes.clone(),
                )?);
            }
            _ => warnings.push(format!(
                "location {loc}: incomplete (street: {}, satellite: {}, scene groups: {}); skipped",
                street.is_some(),
                satellite.is_some(),
                scenes.map(|s| s.len()).unwrap_or(0)
            )),
        }
    }
    Ok((tuples, warnings))
}

/// Street images per location, id-ordered — original and grem-augmented.
pub fn street_pools(records: &[ImageRecord]) -> BTreeMap<String, Vec<ImageRecord>> {
    let mut pools: BTreeMap<String, Vec<ImageRecord>> = BTreeMap::new();
    for rec in records.iter().filter(|r| r.view == View::Street) {
        pools.entry(rec.location_id.clone()).or_default().push(rec.clone());
    }
    for pool in pools.values_mut() {
        pool.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    }
    pools
}

/// Deterministic shuffle and chunking. A trailing remainder batch is kept
/// unless it has fewer than 2 tuples (a single tuple has no negatives).
pub fn make_batches(tuples: &[LocationTuple], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::InvalidInput(format!(
            "batch_size must be ≥ 2, got {batch_size}"
        )));
    }
    if tuples.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 tuples for contrastive training, got {}",
            tuples.len()
        )));
    }
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    order.shuffle(&mut seeded_rng(seed, "make-batches"));
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let batch_tuples: Vec<LocationTuple> = chunk.iter().map(|&i| tuples[i].clone()).collect();
        batches.push(Batch::new(batch_tuples, seed)?);
    }
    Ok(batches)
}

/// Write records as newline-delimited JSON.
pub fn write_manifest(records: &[ImageRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Data(format!("serializing record {}: {e}", rec.image_id)))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: bad manifest line: {e}", path.display(), lineno + 1))
        })?;
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}
