//! Multi-scale 3D scene bridge: per-scale point-cloud reconstruction from
//! drone scene groups behind a backend interface, orthographic multi-view
//! depth projection, a frozen per-view encoder, and the residual adapter
//! that fuses view features into one unit-norm scene embedding per scale.
//!
//! Only the adapter weights are trainable in this path; reconstruction and
//! the per-view encoder are frozen, so their outputs enter training graphs
//! as constants and are cached on disk.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::aggregation::{Embedding, EmbeddingView};
use crate::backbone::{Backbone, BackboneConfig, Backend};
use crate::data::{Scale, SceneGroup, View, SCENE_GROUP_SIZE};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::imageio::{ImageTensor, PixelImage};
use crate::params::{xavier_uniform, ParamStore};
use crate::rng::hash_hex;

/// Points the stub backend emits per input image.
pub const POINTS_PER_IMAGE: usize = 24;
/// Upper bound of projected depth values (background sentinel stays 0).
pub const MAX_DEPTH: f64 = 2.0;

/// Reconstructed 3D points for one scene at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    /// `(N, 3)` world coordinates, arbitrary but consistent units.
    pub points: Array2<f64>,
    /// Optional `(N, 3)` colors in [0, 1].
    pub colors: Option<Array2<f64>>,
    pub scale: Scale,
    pub location_id: String,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.nrows() == 0 {
            return Err(Error::Data(format!(
                "empty point cloud for {}/{}",
                self.location_id,
                self.scale.name()
            )));
        }
        if self.points.ncols() != 3 {
            return Err(Error::Shape(format!(
                "points must be (N, 3), got (N, {})",
                self.points.ncols()
            )));
        }
        if self.points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite coordinates in cloud for {}/{}",
                self.location_id,
                self.scale.name()
            )));
        }
        if let Some(colors) = &self.colors {
            if colors.dim() != (self.points.nrows(), 3) {
                return Err(Error::Shape("colors must match points (N, 3)".into()));
            }
            if colors.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data("colors outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// M orthographic depth maps with their forward directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthViewSet {
    pub views: Vec<Array2<f64>>,
    pub camera_dirs: Vec<[f64; 3]>,
}

impl DepthViewSet {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Data("depth view set is empty".into()));
        }
        if self.views.len() != self.camera_dirs.len() {
            return Err(Error::Shape("view/direction count mismatch".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            if v.iter().any(|d| !d.is_finite() || *d < 0.0) {
                return Err(Error::Data(format!("view {i} has negative or non-finite depth")));
            }
        }
        Ok(())
    }
}

/// Produces point clouds from scene groups. The production slot is a
/// pretrained feed-forward reconstruction network; tests use the stub.
pub trait ReconstructionBackend {
    /// Stable tag (name + version) that keys the reconstruction cache.
    fn name(&self) -> &str;
    /// Reconstruct from the scene's decoded images, ordered as in the group.
    fn reconstruct_images(
        &self,
        images: &[PixelImage],
        scale: Scale,
        location_id: &str,
    ) -> Result<PointCloud>;
}

/// Deterministic synthetic backend: a fixed parametric base curve per scale
/// plus per-image jitter derived from image content.
///
/// Each image contributes [`POINTS_PER_IMAGE`] samples of a closed ring
/// whose radius wobbles with angle and whose vertical span grows with the
/// altitude scale. Jitter is drawn from a ChaCha stream seeded by the
/// image's content hash, with amplitude proportional to the image's pixel
/// standard deviation — so constant (blank) images contribute zero jitter
/// and the cloud degenerates to the documented canonical shape. Coordinates
/// are quantized to f32 at creation so cached and fresh clouds compare
/// bitwise equal.
#[derive(Debug, Clone, Default)]
pub struct StubReconstruction;

impl StubReconstruction {
    /// Vertical span of the base curve per scale band.
    fn height_span(scale: Scale) -> f64 {
        match scale {
            Scale::S1 => 0.5,
            Scale::S2 => 1.0,
            Scale::S3 => 1.5,
        }
    }

    fn base_point(scale: Scale, image_index: usize, sample: usize, images: usize) -> [f64; 3] {
        let u = (image_index * POINTS_PER_IMAGE + sample) as f64
            / (images * POINTS_PER_IMAGE) as f64;
        let theta = std::f64::consts::TAU * u;
        let rho = 1.0 + 0.25 * (3.0 * theta).sin();
        let z = Self::height_span(scale) * (u - 0.5);
        [rho * theta.cos(), rho * theta.sin(), z]
    }

    /// The jitter-free curve: what the stub emits for blank input images.
    pub fn canonical_shape(scale: Scale, location_id: &str, images: usize) -> PointCloud {
        let n = images * POINTS_PER_IMAGE;
        let mut points = Array2::zeros((n, 3));
        for j in 0..images {
            for t in 0..POINTS_PER_IMAGE {
                let p = Self::base_point(scale, j, t, images);
                let row = j * POINTS_PER_IMAGE + t;
                for c in 0..3 {
                    points[[row, c]] = p[c] as f32 as f64;
                }
            }
        }
        PointCloud {
            points,
            colors: Some(Array2::zeros((n, 3))),
            scale,
            location_id: location_id.to_string(),
        }
    }
}

fn pixel_stats(image: &PixelImage) -> (f64, f64, [f64; 3]) {
    let data = &image.data;
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut channel_means = [0.0; 3];
    let per_channel = (data.len() / 3) as f64;
    for y in 0..image.height() {
        for x in 0..image.width() {
            for c in 0..3 {
                channel_means[c] += data[[y, x, c]];
            }
        }
    }
    for m in &mut channel_means {
        *m /= per_channel;
    }
    (mean, var.sqrt(), channel_means)
}

impl ReconstructionBackend for StubReconstruction {
    fn name(&self) -> &str {
        "stub-v1"
    }

    fn reconstruct_images(
        &self,
        images: &[PixelImage],
        scale: Scale,
        location_id: &str,
    ) -> Result<PointCloud> {
        if images.is_empty() {
            return Err(Error::Backend("no images to reconstruct from".into()));
        }
        let n = images.len() * POINTS_PER_IMAGE;
        let mut points = Array2::zeros((n, 3));
        let mut colors = Array2::zeros((n, 3));
        for (j, image) in images.iter().enumerate() {
            let (_, std, channel_means) = pixel_stats(image);
            let digest = Sha256::digest(image.content_bytes());
            let mut key = [0u8; 32];
            key.copy_from_slice(&digest);
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::from_seed(key);
            let amplitude = 0.5 * std;
            for t in 0..POINTS_PER_IMAGE {
                let base = Self::base_point(scale, j, t, images.len());
                let row = j * POINTS_PER_IMAGE + t;
                for c in 0..3 {
                    let jitter =
                        amplitude * rand::Rng::random_range(&mut rng, -1.0..1.0);
                    points[[row, c]] = (base[c] + jitter) as f32 as f64;
                    colors[[row, c]] = channel_means[c] as f32 as f64;
                }
            }
        }
        let cloud = PointCloud {
            points,
            colors: Some(colors),
            scale,
            location_id: location_id.to_string(),
        };
        cloud.validate()?;
        Ok(cloud)
    }
}

/// Reconstruct a scene by loading its images from disk and delegating to
/// the backend. A backend failure surfaces as an error; callers mark the
/// scale unavailable and drop its loss terms.
pub fn reconstruct(scene: &SceneGroup, backend: &dyn ReconstructionBackend) -> Result<PointCloud> {
    let mut images = Vec::with_capacity(scene.images.len());
    for record in &scene.images {
        images.push(PixelImage::load(&record.path)?);
    }
    backend.reconstruct_images(&images, scene.scale, &scene.location_id)
}

/// Forward directions for M views: up to 4 on a horizontal ring, a top
/// view from the 5th, a bottom view from the 6th; beyond 6 the extra views
/// extend the ring. Cardinal ring angles use exact components.
pub fn camera_directions(m: usize) -> Result<Vec<[f64; 3]>> {
    if m == 0 {
        return Err(Error::InvalidInput("need at least one view".into()));
    }
    let ring = match m {
        1..=4 => m,
        5 => 4,
        _ => m - 2,
    };
    let mut dirs = Vec::with_capacity(m);
    for k in 0..ring {
        let (cos, sin) = ring_components(k, ring);
        dirs.push([-cos, -sin, 0.0]);
    }
    if m >= 5 {
        dirs.push([0.0, 0.0, -1.0]); // top, looking down
    }
    if m >= 6 {
        dirs.push([0.0, 0.0, 1.0]); // bottom, looking up
    }
    Ok(dirs)
}

/// (cos, sin) of 2πk/m with exact values at the four cardinal angles, so
/// quarter-turn symmetries hold bitwise.
fn ring_components(k: usize, m: usize) -> (f64, f64) {
    match (4 * k) % (4 * m) {
        0 => (1.0, 0.0),
        x if x == m => (0.0, 1.0),
        x if x == 2 * m => (-1.0, 0.0),
        x if x == 3 * m => (0.0, -1.0),
        _ => {
            let phi = std::f64::consts::TAU * k as f64 / m as f64;
            (phi.cos(), phi.sin())
        }
    }
}

/// Right/up basis for a forward direction produced by [`camera_directions`].
fn view_basis(dir: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    if dir[2] == 0.0 {
        // ring view at f = (−cos, −sin, 0): right is the tangent, up is +z
        let (cos, sin) = (-dir[0], -dir[1]);
        ([-sin, cos, 0.0], [0.0, 0.0, 1.0])
    } else if dir[2] < 0.0 {
        ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]) // top
    } else {
        ([1.0, 0.0, 0.0], [0.0, -1.0, 0.0]) // bottom
    }
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Orthographic multi-view depth projection of a cloud normalized into the
/// unit cube. Nearest point wins each pixel; on exact depth ties the
/// lowest point index wins (first writer). Empty pixels hold the sentinel
/// 0; occupied depths lie in (0, [`MAX_DEPTH`]).
pub fn project_depth(cloud: &PointCloud, m: usize, resolution: usize) -> Result<DepthViewSet> {
    cloud.validate()?;
    if resolution == 0 {
        return Err(Error::InvalidInput("resolution must be positive".into()));
    }
    let dirs = camera_directions(m)?;

    // normalize to the unit cube: center each axis, single uniform scale
    let n = cloud.points.nrows();
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for i in 0..n {
        for c in 0..3 {
            min[c] = min[c].min(cloud.points[[i, c]]);
            max[c] = max[c].max(cloud.points[[i, c]]);
        }
    }
    let extent = (0..3).map(|c| max[c] - min[c]).fold(0.0, f64::max);
    let inv = if extent > 0.0 { 1.0 / extent } else { 0.0 };
    let centered = |i: usize| -> [f64; 3] {
        let mut q = [0.0; 3];
        for c in 0..3 {
            let center = 0.5 * (min[c] + max[c]);
            q[c] = (cloud.points[[i, c]] - center) * inv;
        }
        q
    };

    let mut views = Vec::with_capacity(dirs.len());
    for &dir in &dirs {
        let (u, v) = view_basis(dir);
        let mut map = Array2::zeros((resolution, resolution));
        for i in 0..n {
            let q = centered(i);
            let px = dot3(q, u) + 0.5;
            let py = 0.5 - dot3(q, v);
            let col = ((px * resolution as f64).floor() as isize).clamp(0, resolution as isize - 1)
                as usize;
            let row = ((py * resolution as f64).floor() as isize).clamp(0, resolution as isize - 1)
                as usize;
            let depth = dot3(q, dir) + 1.0;
            let cell = &mut map[[row, col]];
            if *cell == 0.0 || depth < *cell {
                *cell = depth;
            }
        }
        views.push(map);
    }
    let set = DepthViewSet {
        views,
        camera_dirs: dirs,
    };
    set.validate()?;
    Ok(set)
}

/// Concrete adapter weight matrices (the only trainable part of this path).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    /// `(M·Ce, Ca)` fusion of concatenated view features.
    pub w3: Array2<f64>,
    /// `(Ca, D)` projection to the embedding dimension.
    pub w4: Array2<f64>,
    /// `(D, D)` residual branch.
    pub w5: Array2<f64>,
}

impl AdapterWeights {
    pub fn validate(&self, views: usize, feature_width: usize) -> Result<()> {
        let (rows, ca) = self.w3.dim();
        if rows != views * feature_width {
            return Err(Error::Shape(format!(
                "w3 has {rows} rows, expected M·Ce = {}",
                views * feature_width
            )));
        }
        if self.w4.nrows() != ca {
            return Err(Error::Shape(format!(
                "w4 rows {} do not match w3 cols {ca}",
                self.w4.nrows()
            )));
        }
        let d = self.w4.ncols();
        if self.w4.ncols() != d || self.w5.dim() != (d, d) {
            return Err(Error::Shape(format!(
                "w5 must be ({d}, {d}), got {:?}",
                self.w5.dim()
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.w4.ncols()
    }
}

/// Shared fuse computation over graph nodes: features `(M, Ce)` flattened
/// row-major is exactly the concatenation f₁‖…‖f_M.
fn fuse_nodes(g: &mut Graph, features: VarId, w3: VarId, w4: VarId, w5: VarId) -> Result<VarId> {
    let (m, ce) = g.value(features).dim();
    let concat = g.reshape(features, 1, m * ce);
    let pre = g.matmul(concat, w3);
    let act = g.relu(pre);
    let f_global = g.matmul(act, w4);
    let res_pre = g.matmul(f_global, w5);
    let res = g.relu(res_pre);
    let raw = g.add(f_global, res);
    g.normalize_rows(raw)
}

/// Residual adapter over M view features: `f_global = ReLU(concat·W₃)·W₄`,
/// output `normalize(f_global + ReLU(f_global·W₅))` as a `(1, D)` row. An
/// all-zero pre-normalization output is a degenerate-embedding error.
pub fn adapter_fuse(features: &Array2<f64>, weights: &AdapterWeights) -> Result<Array2<f64>> {
    let (m, ce) = features.dim();
    weights.validate(m, ce)?;
    let mut g = Graph::new();
    let f = g.leaf(features.clone());
    let w3 = g.leaf(weights.w3.clone());
    let w4 = g.leaf(weights.w4.clone());
    let w5 = g.leaf(weights.w5.clone());
    let out = fuse_nodes(&mut g, f, w3, w4, w5)?;
    Ok(g.value(out).clone())
}

/// Bridge configuration. `resolution` is both the depth-map size and the
/// frozen per-view encoder's input size, so it must be divisible by the
/// patch size.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeConfig {
    /// Number of depth views M.
    pub views: usize,
    /// Depth map side length Hd = Wd.
    pub resolution: usize,
    /// Adapter fusion width Ca.
    pub adapter_hidden: usize,
    /// Output embedding dimension D.
    pub embed_dim: usize,
    /// One adapter for all scales (default) or one per scale.
    pub shared_adapter: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            views: 6,
            resolution: 224,
            adapter_hidden: 256,
            embed_dim: 4096,
            shared_adapter: true,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::Config("bridge needs at least one view".into()));
        }
        if self.adapter_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("adapter widths must be positive".into()));
        }
        Ok(())
    }
}

/// The assembled bridge: frozen per-view encoder plus adapter descriptors.
pub struct Bridge {
    pub config: BridgeConfig,
    encoder: Backbone,
}

impl Bridge {
    pub fn new(config: BridgeConfig) -> Result<Self> {
        config.validate()?;
        let encoder_config = BackboneConfig::new(Backend::Toy, config.resolution)?;
        let encoder = Backbone::new(encoder_config, "bridge_encoder")?;
        Ok(Bridge { config, encoder })
    }

    pub fn encoder(&self) -> &Backbone {
        &self.encoder
    }

    /// Per-view feature width Ce.
    pub fn feature_width(&self) -> usize {
        self.encoder.config.channels
    }

    /// Stable tag describing the frozen encoder, part of cache keys.
    pub fn encoder_tag(&self) -> String {
        format!(
            "{}-{}",
            self.encoder.config.backend.name(),
            self.config.resolution
        )
    }

    fn adapter_prefix(&self, scale: Scale) -> String {
        if self.config.shared_adapter {
            "adapter".to_string()
        } else {
            format!("adapter.{}", scale.name())
        }
    }

    /// Create encoder parameters (frozen) and adapter weights (trainable)
    /// if absent.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        self.encoder.init_params(store, seed);
        let m = self.config.views;
        let ce = self.feature_width();
        let (ca, d) = (self.config.adapter_hidden, self.config.embed_dim);
        let scales: &[Scale] = if self.config.shared_adapter {
            &[Scale::S1] // prefix is scale-independent when shared
        } else {
            &Scale::ALL
        };
        for scale in scales {
            let prefix = self.adapter_prefix(*scale);
            let name = format!("{prefix}.w3");
            store.get_or_init(&name, true, || xavier_uniform(seed, &name, m * ce, ca));
            let name = format!("{prefix}.w4");
            store.get_or_init(&name, true, || xavier_uniform(seed, &name, ca, d));
            let name = format!("{prefix}.w5");
            store.get_or_init(&name, true, || xavier_uniform(seed, &name, d, d));
        }
    }

    /// Encode each depth map through the frozen per-view encoder: token
    /// mean, L2-normalized, one row per view. Values are quantized to f32
    /// so cached and fresh features compare bitwise equal.
    pub fn view_features(&self, views: &DepthViewSet, store: &ParamStore) -> Result<Array2<f64>> {
        views.validate()?;
        if views.views.len() != self.config.views {
            return Err(Error::Shape(format!(
                "expected {} views, got {}",
                self.config.views,
                views.views.len()
            )));
        }
        let res = self.config.resolution;
        let ce = self.feature_width();
        let mut out = Array2::zeros((views.views.len(), ce));
        for (i, map) in views.views.iter().enumerate() {
            if map.dim() != (res, res) {
                return Err(Error::Shape(format!(
                    "view {i} is {:?}, expected ({res}, {res})",
                    map.dim()
                )));
            }
            // depth in [0, MAX_DEPTH] → [0,1] → the encoder's normalization
            let mut tensor = ImageTensor::zeros((res, res, 3));
            let norm = self.encoder.config.normalization();
            for y in 0..res {
                for x in 0..res {
                    let gray = map[[y, x]] / MAX_DEPTH;
                    for c in 0..3 {
                        tensor[[y, x, c]] = (gray - norm.mean[c]) / norm.std[c];
                    }
                }
            }
            let fmap = self.encoder.encode_tensor(&tensor, View::Drone, store)?;
            let tokens = fmap.tokens();
            let n = tokens.nrows() as f64;
            let mut mean: Vec<f64> = (0..ce)
                .map(|c| tokens.column(c).sum() / n)
                .collect();
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateEmbedding(format!(
                    "depth view {i} encoded to a zero feature"
                )));
            }
            for v in &mut mean {
                *v = (*v / norm) as f32 as f64;
            }
            for (c, v) in mean.iter().enumerate() {
                out[[i, c]] = *v;
            }
        }
        Ok(out)
    }

    /// Build the adapter over constant view features; the only named leaves
    /// this introduces are the adapter weights, so gradient cannot reach
    /// the frozen extractor.
    pub fn adapter_fuse_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &Array2<f64>,
        scale: Scale,
    ) -> Result<VarId> {
        let (m, ce) = features.dim();
        if m != self.config.views || ce != self.feature_width() {
            return Err(Error::Shape(format!(
                "features {:?} do not match (M, Ce) = ({}, {})",
                features.dim(),
                self.config.views,
                self.feature_width()
            )));
        }
        let prefix = self.adapter_prefix(scale);
        let f = g.leaf(features.clone());
        let w3 = store.bind(g, &format!("{prefix}.w3"));
        let w4 = store.bind(g, &format!("{prefix}.w4"));
        let w5 = store.bind(g, &format!("{prefix}.w5"));
        fuse_nodes(g, f, w3, w4, w5)
    }

    /// Reconstruct → project → encode, with optional disk caching of both
    /// the cloud and the view features.
    pub fn scene_features(
        &self,
        scene: &SceneGroup,
        backend: &dyn ReconstructionBackend,
        store: &ParamStore,
        cache: Option<&BridgeCache>,
    ) -> Result<Array2<f64>> {
        let key = match cache {
            Some(c) => Some(c.scene_key(scene, backend.name(), &self.encoder_tag(), self.config.views, self.config.resolution)?),
            None => None,
        };
        if let (Some(c), Some(k)) = (cache, &key) {
            if let Some(features) = c.load_features(k)? {
                return Ok(features);
            }
        }
        let cloud = match (cache, &key) {
            (Some(c), Some(k)) => match c.load_cloud(k, scene.scale, &scene.location_id)? {
                Some(cloud) => cloud,
                None => {
                    let cloud = reconstruct(scene, backend)?;
                    c.store_cloud(k, &cloud)?;
                    cloud
                }
            },
            _ => reconstruct(scene, backend)?,
        };
        let views = project_depth(&cloud, self.config.views, self.config.resolution)?;
        let features = self.view_features(&views, store)?;
        if let (Some(c), Some(k)) = (cache, &key) {
            c.store_features(k, &features)?;
        }
        Ok(features)
    }

    /// Full composition producing the tagged per-scale embedding (eval
    /// mode: reads the graph value).
    pub fn scene_embedding(
        &self,
        scene: &SceneGroup,
        backend: &dyn ReconstructionBackend,
        store: &ParamStore,
        cache: Option<&BridgeCache>,
    ) -> Result<Embedding> {
        let features = self.scene_features(scene, backend, store, cache)?;
        let mut g = Graph::new();
        let out = self.adapter_fuse_graph(&mut g, store, &features, scene.scale)?;
        Ok(Embedding::from_row(
            g.value(out),
            EmbeddingView::for_scale(scene.scale),
            false,
        ))
    }
}

/// Disk cache for reconstructed clouds (`.pcc`) and encoded view features
/// (`.vfeat`), keyed by a hash over scene identity, image content, backend
/// tag, and projection/encoder settings. Writes are atomic (temp file +
/// rename), so concurrent writers of the same key cannot tear files.
pub struct BridgeCache {
    dir: PathBuf,
}

const PCC_MAGIC: &[u8; 4] = b"PCC1";
const VFEAT_MAGIC: &[u8; 4] = b"VFT1";

impl BridgeCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(BridgeCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Cache key binding everything the cached artifacts depend on.
    pub fn scene_key(
        &self,
        scene: &SceneGroup,
        backend_tag: &str,
        encoder_tag: &str,
        views: usize,
        resolution: usize,
    ) -> Result<String> {
        let mut desc = format!(
            "backend={backend_tag}\nencoder={encoder_tag}\nviews={views}\nresolution={resolution}\nlocation={}\nscale={}\n",
            scene.location_id,
            scene.scale.name()
        );
        for record in &scene.images {
            let bytes = fs::read(&record.path).map_err(|e| Error::io(&record.path, e))?;
            desc.push_str(&format!("{}={}\n", record.image_id, hash_hex(&bytes)));
        }
        Ok(hash_hex(desc.as_bytes()))
    }

    fn path(&self, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{key}.{ext}"))
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn store_cloud(&self, key: &str, cloud: &PointCloud) -> Result<()> {
        cloud.validate()?;
        let n = cloud.len();
        let mut bytes = Vec::with_capacity(9 + n * 12);
        bytes.extend_from_slice(PCC_MAGIC);
        bytes.extend_from_slice(&(n as u32).to_le_bytes());
        bytes.push(u8::from(cloud.colors.is_some()));
        for v in cloud.points.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(colors) = &cloud.colors {
            for v in colors.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        self.write_atomic(&self.path(key, "pcc"), &bytes)
    }

    pub fn load_cloud(&self, key: &str, scale: Scale, location_id: &str) -> Result<Option<PointCloud>> {
        let path = self.path(key, "pcc");
        let mut file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(&path, e))?;
        let fail = |msg: &str| Error::Data(format!("cloud cache {}: {msg}", path.display()));
        if bytes.len() < 9 || &bytes[..4] != PCC_MAGIC {
            return Err(fail("bad header"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let has_colors = bytes[8] != 0;
        let expect = 9 + n * 12 * if has_colors { 2 } else { 1 };
        if bytes.len() != expect {
            return Err(fail("truncated payload"));
        }
        let read_block = |offset: usize| -> Array2<f64> {
            Array2::from_shape_fn((n, 3), |(i, c)| {
                let at = offset + (i * 3 + c) * 4;
                f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64
            })
        };
        let points = read_block(9);
        let colors = has_colors.then(|| read_block(9 + n * 12));
        let cloud = PointCloud {
            points,
            colors,
            scale,
            location_id: location_id.to_string(),
        };
        cloud.validate()?;
        Ok(Some(cloud))
    }

    pub fn store_features(&self, key: &str, features: &Array2<f64>) -> Result<()> {
        let (m, ce) = features.dim();
        let mut bytes = Vec::with_capacity(12 + m * ce * 4);
        bytes.extend_from_slice(VFEAT_MAGIC);
        bytes.extend_from_slice(&(m as u32).to_le_bytes());
        bytes.extend_from_slice(&(ce as u32).to_le_bytes());
        for v in features.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.write_atomic(&self.path(key, "vfeat"), &bytes)
    }

    pub fn load_features(&self, key: &str) -> Result<Option<Array2<f64>>> {
        let path = self.path(key, "vfeat");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let fail = |msg: &str| Error::Data(format!("feature cache {}: {msg}", path.display()));
        if bytes.len() < 12 || &bytes[..4] != VFEAT_MAGIC {
            return Err(fail("bad header"));
        }
        let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let ce = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + m * ce * 4 {
            return Err(fail("truncated payload"));
        }
        Ok(Some(Array2::from_shape_fn((m, ce), |(i, c)| {
            let at = 12 + (i * ce + c) * 4;
            f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64
        })))
    }
}

/// Ensure a scene group meets the bridge's expectations early.
pub fn validate_scene(scene: &SceneGroup) -> Result<()> {
    if scene.images.len() != SCENE_GROUP_SIZE {
        return Err(Error::Data(format!(
            "scene for {} has {} images, expected {SCENE_GROUP_SIZE}",
            scene.location_id,
            scene.images.len()
        )));
    }
    Ok(())
}
