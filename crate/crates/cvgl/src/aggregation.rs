//! Global-descriptor heads over backbone feature maps.
//!
//! The main head mixes per-channel patches with residual MLPs and projects
//! them depth-wise to a fixed-length descriptor; NetVLAD, GeM, and Conv-AP
//! baselines sit behind the same interface for head ablations. Every head
//! emits a unit-norm embedding of the configured dimension.

use std::fmt;

use ndarray::Array2;

use crate::backbone::FeatureMap;
use crate::data::{Scale, View};
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::params::{xavier_uniform, ParamStore};

/// Unit-norm global descriptor with provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
    pub view: EmbeddingView,
    pub tta: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmbeddingView {
    Street,
    Satellite,
    DroneS1,
    DroneS2,
    DroneS3,
}

impl EmbeddingView {
    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::S1 => EmbeddingView::DroneS1,
            Scale::S2 => EmbeddingView::DroneS2,
            Scale::S3 => EmbeddingView::DroneS3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingView::Street => "street",
            EmbeddingView::Satellite => "satellite",
            EmbeddingView::DroneS1 => "drone_s1",
            EmbeddingView::DroneS2 => "drone_s2",
            EmbeddingView::DroneS3 => "drone_s3",
        }
    }
}

impl fmt::Display for EmbeddingView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Embedding {
    /// Wrap a `(1, D)` graph value.
    pub fn from_row(value: &Array2<f64>, view: EmbeddingView, tta: bool) -> Self {
        Embedding {
            vector: value.row(0).to_vec(),
            normalized: true,
            view,
            tta,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn validate_unit(&self) -> Result<()> {
        let norm = self.l2_norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized(format!(
                "{} embedding has norm {norm}",
                self.view
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Pafa,
    NetVlad,
    Gem,
    ConvAp,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Pafa => "pafa",
            HeadKind::NetVlad => "netvlad",
            HeadKind::Gem => "gem",
            HeadKind::ConvAp => "conv_ap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pafa" => Ok(HeadKind::Pafa),
            "netvlad" => Ok(HeadKind::NetVlad),
            "gem" => Ok(HeadKind::Gem),
            "conv_ap" => Ok(HeadKind::ConvAp),
            other => Err(Error::Config(format!("unknown aggregation head {other:?}"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A descriptor head: stateless description of the computation; parameters
/// live in the store under the head's name prefix.
pub trait AggregationHead {
    fn kind(&self) -> HeadKind;
    fn out_dim(&self) -> usize;
    /// Create this head's parameters for the given token geometry if absent.
    fn init_params(&self, store: &mut ParamStore, seed: u64, hp: usize, wp: usize, channels: usize)
        -> Result<()>;
    /// Build the head over `(N, C)` tokens; returns a `(1, D)` unit-norm row.
    fn aggregate_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: VarId,
        hp: usize,
        wp: usize,
    ) -> Result<VarId>;
}

/// Run a head over a feature map in eval mode.
pub fn aggregate_featuremap(
    head: &dyn AggregationHead,
    fmap: &FeatureMap,
    store: &ParamStore,
) -> Result<Embedding> {
    let view = match fmap.source_view {
        View::Street => EmbeddingView::Street,
        View::Satellite => EmbeddingView::Satellite,
        View::Drone => {
            return Err(Error::InvalidInput(
                "drone feature maps are aggregated by the scene bridge".into(),
            ))
        }
    };
    let (hp, wp) = fmap.spatial_dims();
    let mut g = Graph::new();
    let tokens = g.leaf(fmap.tokens());
    let out = head.aggregate_graph(&mut g, store, tokens, hp, wp)?;
    Ok(Embedding::from_row(g.value(out), view, false))
}

/// One residual mixing step on a single patch vector: `W₂·relu(W₁·p) + p`
/// with `W₁: (hidden × n)` and `W₂: (n × hidden)`.
pub fn pafa_mix(patch: &[f64], w1: &Array2<f64>, w2: &Array2<f64>) -> Result<Vec<f64>> {
    let n = patch.len();
    let (h1, n1) = w1.dim();
    let (n2, h2) = w2.dim();
    if n1 != n || n2 != n || h1 != h2 {
        return Err(Error::Shape(format!(
            "mix weights ({h1}x{n1}, {n2}x{h2}) do not fit patch length {n}"
        )));
    }
    let mut hidden = vec![0.0; h1];
    for (i, h) in hidden.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..n {
            acc += w1[[i, j]] * patch[j];
        }
        *h = acc.max(0.0);
    }
    let mut out = patch.to_vec();
    for (i, o) in out.iter_mut().enumerate() {
        for (j, h) in hidden.iter().enumerate() {
            *o += w2[[i, j]] * h;
        }
    }
    Ok(out)
}

/// Patch-mixing head configuration. The embedding dimension is
/// `out_channels × out_rows`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PafaConfig {
    /// Stacked residual mixer blocks.
    pub mixer_depth: usize,
    /// Hidden width of each mixer MLP as a multiple of the patch length.
    pub hidden_ratio: f64,
    /// Channel-projection output size d.
    pub out_channels: usize,
    /// Row-projection output size r.
    pub out_rows: usize,
}

impl Default for PafaConfig {
    fn default() -> Self {
        PafaConfig {
            mixer_depth: 4,
            hidden_ratio: 1.0,
            out_channels: 1024,
            out_rows: 4,
        }
    }
}

impl PafaConfig {
    pub fn embed_dim(&self) -> usize {
        self.out_channels * self.out_rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixer_depth == 0 || self.out_channels == 0 || self.out_rows == 0 {
            return Err(Error::Config("mixer depth and projection sizes must be positive".into()));
        }
        if self.hidden_ratio <= 0.0 {
            return Err(Error::Config(format!(
                "hidden_ratio must be positive, got {}",
                self.hidden_ratio
            )));
        }
        Ok(())
    }

    fn hidden_width(&self, n: usize) -> usize {
        ((self.hidden_ratio * n as f64).round() as usize).max(1)
    }
}

pub struct PafaHead {
    pub config: PafaConfig,
}

impl PafaHead {
    pub fn new(config: PafaConfig) -> Result<Self> {
        config.validate()?;
        Ok(PafaHead { config })
    }

    /// The mixer stack over `Z ∈ (s, n)` (one row per channel patch), before
    /// the two projections.
    fn mixer_stack(&self, g: &mut Graph, store: &ParamStore, mut z: VarId) -> VarId {
        for l in 0..self.config.mixer_depth {
            let w1 = store.bind(g, &format!("head.pafa.mixer{l}.w1"));
            let w2 = store.bind(g, &format!("head.pafa.mixer{l}.w2"));
            let w1t = g.transpose(w1);
            let w2t = g.transpose(w2);
            let h = g.matmul(z, w1t);
            let h = g.relu(h);
            let m = g.matmul(h, w2t);
            z = g.add(m, z);
        }
        z
    }
}

impl AggregationHead for PafaHead {
    fn kind(&self) -> HeadKind {
        HeadKind::Pafa
    }

    fn out_dim(&self) -> usize {
        self.config.embed_dim()
    }

    fn init_params(
        &self,
        store: &mut ParamStore,
        seed: u64,
        hp: usize,
        wp: usize,
        channels: usize,
    ) -> Result<()> {
        let n = hp * wp;
        let hid = self.config.hidden_width(n);
        let (d, r) = (self.config.out_channels, self.config.out_rows);
        for l in 0..self.config.mixer_depth {
            let name = format!("head.pafa.mixer{l}.w1");
            store.get_or_init(&name, true, || xavier_uniform(seed, &name, hid, n));
            let name = format!("head.pafa.mixer{l}.w2");
            store.get_or_init(&name, true, || xavier_uniform(seed, &name, n, hid));
        }
        let name = "head.pafa.proj_channels.w";
        store.get_or_init(name, true, || xavier_uniform(seed, name, d, channels));
        store.get_or_init("head.pafa.proj_channels.b", true, || Array2::zeros((d, 1)));
        let name = "head.pafa.proj_rows.w";
        store.get_or_init(name, true, || xavier_uniform(seed, name, n, r));
        store.get_or_init("head.pafa.proj_rows.b", true, || Array2::zeros((1, r)));
        Ok(())
    }

    /// Five steps: per-channel patches, mixer stack, channel projection
    /// s→d, row projection n→r, flatten + normalize.
    fn aggregate_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: VarId,
        _hp: usize,
        _wp: usize,
    ) -> Result<VarId> {
        let z = g.transpose(tokens); // (s, n): one row per channel
        let z = self.mixer_stack(g, store, z);
        let wc = store.bind(g, "head.pafa.proj_channels.w");
        let bc = store.bind(g, "head.pafa.proj_channels.b");
        let zc = g.matmul(wc, z); // (d, n)
        let zc = g.add_col(zc, bc);
        let wr = store.bind(g, "head.pafa.proj_rows.w");
        let br = store.bind(g, "head.pafa.proj_rows.b");
        let zr = g.matmul(zc, wr); // (d, r)
        let zr = g.add_row(zr, br);
        let flat = g.reshape(zr, 1, self.config.embed_dim());
        g.normalize_rows(flat)
    }
}

/// Generalized-mean pooling with a learnable exponent (init 3.0), followed
/// by a linear projection to the embedding dimension.
pub struct GemHead {
    pub out_dim: usize,
}

const GEM_CLAMP: f64 = 1e-6;

impl GemHead {
    pub fn new(out_dim: usize) -> Self {
        GemHead { out_dim }
    }

    /// `(1, C)` pooled row before projection: `(mean(clamp(x)^p))^(1/p)`.
    fn pool_graph(&self, g: &mut Graph, store: &ParamStore, tokens: VarId) -> VarId {
        let p = store.bind(g, "head.gem.p");
        let clamped = g.clamp_min(tokens, GEM_CLAMP);
        let logs = g.ln(clamped);
        let scaled = g.mul_scalar_var(logs, p);
        let powered = g.exp(scaled);
        let mean = g.mean_axis0(powered);
        let log_mean = g.ln(mean);
        let inv_p = g.recip(p);
        let root = g.mul_scalar_var(log_mean, inv_p);
        g.exp(root)
    }
}

impl AggregationHead for GemHead {
    fn kind(&self) -> HeadKind {
        HeadKind::Gem
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn init_params(
        &self,
        store: &mut ParamStore,
        seed: u64,
        _hp: usize,
        _wp: usize,
        channels: usize,
    ) -> Result<()> {
        store.get_or_init("head.gem.p", true, || Array2::from_elem((1, 1), 3.0));
        let name = "head.gem.proj.w";
        store.get_or_init(name, true, || xavier_uniform(seed, name, channels, self.out_dim));
        store.get_or_init("head.gem.proj.b", true, || Array2::zeros((1, self.out_dim)));
        Ok(())
    }

    fn aggregate_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: VarId,
        _hp: usize,
        _wp: usize,
    ) -> Result<VarId> {
        let pooled = self.pool_graph(g, store, tokens);
        let w = store.bind(g, "head.gem.proj.w");
        let b = store.bind(g, "head.gem.proj.b");
        let proj = g.matmul(pooled, w);
        let proj = g.add_row(proj, b);
        g.normalize_rows(proj)
    }
}

/// Soft-assignment VLAD: residuals of tokens against learnable centroids,
/// weighted by a softmax over cluster logits, intra-normalized per cluster,
/// flattened, and projected to the embedding dimension.
pub struct NetVladHead {
    pub clusters: usize,
    pub out_dim: usize,
}

impl NetVladHead {
    pub fn new(clusters: usize, out_dim: usize) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::Config("cluster count must be positive".into()));
        }
        Ok(NetVladHead { clusters, out_dim })
    }

    /// Raw `(K, C)` aggregated residuals `V` before any normalization:
    /// `V[k] = Σ_i α_ik·x_i − (Σ_i α_ik)·c_k`.
    fn vlad_raw_graph(&self, g: &mut Graph, store: &ParamStore, tokens: VarId) -> VarId {
        let wa = store.bind(g, "head.netvlad.assign.w");
        let ba = store.bind(g, "head.netvlad.assign.b");
        let centroids = store.bind(g, "head.netvlad.centroids");
        let logits = g.matmul(tokens, wa);
        let logits = g.add_row(logits, ba);
        let alpha = g.softmax_rows(logits); // (N, K)
        let alpha_t = g.transpose(alpha); // (K, N)
        let agg = g.matmul(alpha_t, tokens); // (K, C)
        let col_sum = g.sum_axis0(alpha); // (1, K)
        let col = g.transpose(col_sum); // (K, 1)
        let weighted = g.mul_col(centroids, col); // (K, C)
        g.sub(agg, weighted)
    }
}

impl AggregationHead for NetVladHead {
    fn kind(&self) -> HeadKind {
        HeadKind::NetVlad
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn init_params(
        &self,
        store: &mut ParamStore,
        seed: u64,
        _hp: usize,
        _wp: usize,
        channels: usize,
    ) -> Result<()> {
        let k = self.clusters;
        let name = "head.netvlad.assign.w";
        store.get_or_init(name, true, || xavier_uniform(seed, name, channels, k));
        store.get_or_init("head.netvlad.assign.b", true, || Array2::zeros((1, k)));
        let name = "head.netvlad.centroids";
        store.get_or_init(name, true, || xavier_uniform(seed, name, k, channels));
        let name = "head.netvlad.proj.w";
        store.get_or_init(name, true, || xavier_uniform(seed, name, k * channels, self.out_dim));
        store.get_or_init("head.netvlad.proj.b", true, || Array2::zeros((1, self.out_dim)));
        Ok(())
    }

    fn aggregate_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: VarId,
        _hp: usize,
        _wp: usize,
    ) -> Result<VarId> {
        let v = self.vlad_raw_graph(g, store, tokens);
        let (k, c) = g.value(v).dim();
        let intra = g.normalize_rows_safe(v);
        let flat = g.reshape(intra, 1, k * c);
        let flat = g.normalize_rows(flat)?;
        let w = store.bind(g, "head.netvlad.proj.w");
        let b = store.bind(g, "head.netvlad.proj.b");
        let proj = g.matmul(flat, w);
        let proj = g.add_row(proj, b);
        g.normalize_rows(proj)
    }
}

/// 1×1 convolution (per-token linear map) followed by adaptive average
/// pooling to a small spatial grid, flatten, and projection.
pub struct ConvApHead {
    pub channels_out: usize,
    pub bins: usize,
    pub out_dim: usize,
}

impl ConvApHead {
    pub fn new(channels_out: usize, bins: usize, out_dim: usize) -> Result<Self> {
        if channels_out == 0 || bins == 0 {
            return Err(Error::Config("channels_out and bins must be positive".into()));
        }
        Ok(ConvApHead {
            channels_out,
            bins,
            out_dim,
        })
    }

    /// Constant adaptive-average-pooling matrix `(bins², N)` over an
    /// `hp × wp` token grid: bin (u, v) averages rows
    /// `floor(u·hp/b)..floor((u+1)·hp/b)` × the matching column range.
    fn pooling_matrix(&self, hp: usize, wp: usize) -> Result<Array2<f64>> {
        let b = self.bins;
        if hp < b || wp < b {
            return Err(Error::Shape(format!(
                "token grid {hp}x{wp} smaller than pooling bins {b}x{b}"
            )));
        }
        let mut p = Array2::zeros((b * b, hp * wp));
        for u in 0..b {
            let y0 = u * hp / b;
            let y1 = (u + 1) * hp / b;
            for v in 0..b {
                let x0 = v * wp / b;
                let x1 = (v + 1) * wp / b;
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        p[[u * b + v, y * wp + x]] = 1.0 / count;
                    }
                }
            }
        }
        Ok(p)
    }
}

impl AggregationHead for ConvApHead {
    fn kind(&self) -> HeadKind {
        HeadKind::ConvAp
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn init_params(
        &self,
        store: &mut ParamStore,
        seed: u64,
        _hp: usize,
        _wp: usize,
        channels: usize,
    ) -> Result<()> {
        let name = "head.convap.conv.w";
        store.get_or_init(name, true, || xavier_uniform(seed, name, channels, self.channels_out));
        store.get_or_init("head.convap.conv.b", true, || {
            Array2::zeros((1, self.channels_out))
        });
        let raw = self.bins * self.bins * self.channels_out;
        let name = "head.convap.proj.w";
        store.get_or_init(name, true, || xavier_uniform(seed, name, raw, self.out_dim));
        store.get_or_init("head.convap.proj.b", true, || Array2::zeros((1, self.out_dim)));
        Ok(())
    }

    fn aggregate_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: VarId,
        hp: usize,
        wp: usize,
    ) -> Result<VarId> {
        let wc = store.bind(g, "head.convap.conv.w");
        let bc = store.bind(g, "head.convap.conv.b");
        let conv = g.matmul(tokens, wc);
        let conv = g.add_row(conv, bc);
        let pool = g.leaf(self.pooling_matrix(hp, wp)?);
        let pooled = g.matmul(pool, conv); // (bins², c')
        let flat = g.reshape(pooled, 1, self.bins * self.bins * self.channels_out);
        let w = store.bind(g, "head.convap.proj.w");
        let b = store.bind(g, "head.convap.proj.b");
        let proj = g.matmul(flat, w);
        let proj = g.add_row(proj, b);
        g.normalize_rows(proj)
    }
}

/// Build a head by kind with the given embedding dimension. Baseline heads
/// use their documented defaults (64 clusters, 2×2 pooling bins); PAFA's
/// projection sizes come from `pafa`.
pub fn build_head(
    kind: HeadKind,
    pafa: &PafaConfig,
    embed_dim: usize,
    channels: usize,
) -> Result<Box<dyn AggregationHead>> {
    match kind {
        HeadKind::Pafa => {
            if pafa.embed_dim() != embed_dim {
                return Err(Error::Config(format!(
                    "embed_dim {embed_dim} does not equal out_channels×out_rows = {}",
                    pafa.embed_dim()
                )));
            }
            Ok(Box::new(PafaHead::new(*pafa)?))
        }
        HeadKind::NetVlad => {
            // keep the projection input manageable at desk scale
            let clusters = 64.min(channels);
            Ok(Box::new(NetVladHead::new(clusters, embed_dim)?))
        }
        HeadKind::Gem => Ok(Box::new(GemHead::new(embed_dim))),
        HeadKind::ConvAp => Ok(Box::new(ConvApHead::new(channels, 2, embed_dim)?)),
    }
}

/// One-shot baseline aggregation: build the head, create parameters if
/// absent, and run it over the map.
pub fn baseline_aggregate(
    fmap: &FeatureMap,
    kind: HeadKind,
    store: &mut ParamStore,
    seed: u64,
    embed_dim: usize,
) -> Result<Embedding> {
    let (hp, wp) = fmap.spatial_dims();
    let channels = fmap.channels();
    let pafa = PafaConfig {
        out_channels: embed_dim / 4,
        out_rows: 4,
        ..PafaConfig::default()
    };
    let head = build_head(kind, &pafa, embed_dim, channels)?;
    head.init_params(store, seed, hp, wp, channels)?;
    aggregate_featuremap(head.as_ref(), fmap, store)
}
