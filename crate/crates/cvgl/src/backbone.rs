//! Weight-sharing Siamese feature extractor.
//!
//! Both views (street and satellite) are encoded by one parameter set: the
//! Siamese contract is a single set of named parameters with two call sites,
//! which the graph's idempotent named leaves turn into correct gradient
//! accumulation automatically.
//!
//! Backends:
//! - `toy` — a small trainable patch-embed + 2-block transformer used by
//!   desk-scale tests; preserves every shape contract of the real thing.
//! - `foundation_base` / `foundation_large` — stand-ins for a frozen
//!   pretrained foundation model. Shipping multi-GB weights is out of
//!   scope, so these produce deterministic synthetic features with the
//!   correct shapes; slotting in real weights is a backend swap.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::data::View;
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::imageio::{ImageTensor, Normalization, PixelImage};
use crate::params::{xavier_uniform, ParamStore};
use crate::rng::seeded_rng;

pub const PATCH_SIZE: usize = 14;
/// Patch pixels × 3 channels.
pub const PATCH_DIM: usize = PATCH_SIZE * PATCH_SIZE * 3;

const LN_EPS: f64 = 1e-5;
const TOY_BLOCKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    FoundationBase,
    FoundationLarge,
    Toy,
}

impl Backend {
    pub fn channels(&self) -> usize {
        match self {
            Backend::FoundationBase => 768,
            Backend::FoundationLarge => 1024,
            Backend::Toy => 64,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::FoundationBase => "foundation_base",
            Backend::FoundationLarge => "foundation_large",
            Backend::Toy => "toy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "foundation_base" => Ok(Backend::FoundationBase),
            "foundation_large" => Ok(Backend::FoundationLarge),
            "toy" => Ok(Backend::Toy),
            other => Err(Error::Config(format!("unknown backbone backend {other:?}"))),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Backend::Toy)
    }
}

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub backend: Backend,
    pub input_size: usize,
    pub channels: usize,
    /// Both views must share one parameter set.
    pub shared_weights: bool,
    /// Unfreeze the final block (and final norm) of a trainable backend.
    pub train_last_block: bool,
}

impl BackboneConfig {
    pub fn new(backend: Backend, input_size: usize) -> Result<Self> {
        let config = BackboneConfig {
            backend,
            input_size,
            channels: backend.channels(),
            shared_weights: true,
            train_last_block: false,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.shared_weights {
            return Err(Error::Config(
                "shared_weights must be true: both views use one parameter set".into(),
            ));
        }
        if self.channels != self.backend.channels() {
            return Err(Error::Config(format!(
                "channels {} inconsistent with backend {} ({})",
                self.channels,
                self.backend.name(),
                self.backend.channels()
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(PATCH_SIZE) {
            return Err(Error::Config(format!(
                "input_size {} not divisible by patch size {PATCH_SIZE}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Per-channel normalization convention of the backend's pretraining.
    pub fn normalization(&self) -> Normalization {
        match self.backend {
            Backend::Toy => Normalization {
                mean: [0.5, 0.5, 0.5],
                std: [0.5, 0.5, 0.5],
            },
            Backend::FoundationBase | Backend::FoundationLarge => Normalization {
                mean: [0.485, 0.456, 0.406],
                std: [0.229, 0.224, 0.225],
            },
        }
    }

    /// Tokens per side of the output grid.
    pub fn grid_side(&self) -> usize {
        self.input_size / PATCH_SIZE
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

/// Spatial feature grid emitted for one image.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub grid: Array3<f64>,
    pub source_view: View,
    pub patch_size: usize,
}

impl FeatureMap {
    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }

    /// Flatten to `(Hp·Wp, C)` tokens, row-major over the grid.
    pub fn tokens(&self) -> Array2<f64> {
        let (hp, wp) = self.spatial_dims();
        let c = self.channels();
        let mut out = Array2::zeros((hp * wp, c));
        for y in 0..hp {
            for x in 0..wp {
                for ch in 0..c {
                    out[[y * wp + x, ch]] = self.grid[[y, x, ch]];
                }
            }
        }
        out
    }
}

/// A backbone instance. `prefix` scopes its parameter names, letting the
/// main encoder (`backbone.*`) and the frozen depth-view encoder coexist in
/// one store.
pub struct Backbone {
    pub config: BackboneConfig,
    prefix: String,
}

impl Backbone {
    pub fn new(config: BackboneConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        Ok(Backbone {
            config,
            prefix: prefix.to_string(),
        })
    }

    /// The main street/satellite encoder.
    pub fn main(config: BackboneConfig) -> Result<Self> {
        Self::new(config, "backbone")
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    /// Create this backbone's parameters if absent. Only the toy backend has
    /// parameters; they start frozen, with the last block unfrozen when
    /// `train_last_block` is set.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        if self.config.backend != Backend::Toy {
            return;
        }
        let c = self.config.channels;
        let hidden = 2 * c;
        let add = |store: &mut ParamStore, suffix: &str, rows: usize, cols: usize, kind: InitKind| {
            let name = self.name(suffix);
            store.get_or_init(&name, false, || match kind {
                InitKind::Xavier => xavier_uniform(seed, &name, rows, cols),
                InitKind::Zeros => Array2::zeros((rows, cols)),
                InitKind::Ones => Array2::ones((rows, cols)),
            });
        };
        add(store, "patch_embed.w", PATCH_DIM, c, InitKind::Xavier);
        add(store, "patch_embed.b", 1, c, InitKind::Zeros);
        for b in 0..TOY_BLOCKS {
            for suffix in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                add(store, &format!("block{b}.{suffix}"), c, c, InitKind::Xavier);
            }
            for suffix in ["ln1.gamma", "ln2.gamma"] {
                add(store, &format!("block{b}.{suffix}"), 1, c, InitKind::Ones);
            }
            for suffix in ["ln1.beta", "ln2.beta"] {
                add(store, &format!("block{b}.{suffix}"), 1, c, InitKind::Zeros);
            }
            add(store, &format!("block{b}.mlp.w1"), c, hidden, InitKind::Xavier);
            add(store, &format!("block{b}.mlp.b1"), 1, hidden, InitKind::Zeros);
            add(store, &format!("block{b}.mlp.w2"), hidden, c, InitKind::Xavier);
            add(store, &format!("block{b}.mlp.b2"), 1, c, InitKind::Zeros);
        }
        add(store, "ln_f.gamma", 1, c, InitKind::Ones);
        add(store, "ln_f.beta", 1, c, InitKind::Zeros);
        if self.config.train_last_block {
            store.set_trainable_prefix(&self.name(&format!("block{}", TOY_BLOCKS - 1)), true);
            store.set_trainable_prefix(&self.name("ln_f"), true);
        }
    }

    /// Split a normalized `(H, W, 3)` tensor into `(N, 588)` patch rows.
    /// Patches are row-major over the grid; within a patch the layout is
    /// `(y, x, channel)`.
    pub fn patchify(&self, tensor: &ImageTensor) -> Result<Array2<f64>> {
        let shape = tensor.shape();
        let (h, w, ch) = (shape[0], shape[1], shape[2]);
        if ch != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {ch}")));
        }
        if h != w {
            return Err(Error::Shape(format!("non-square input {h}x{w} unsupported")));
        }
        if h % PATCH_SIZE != 0 {
            return Err(Error::Shape(format!(
                "input size {h} not divisible by patch size {PATCH_SIZE}"
            )));
        }
        if h != self.config.input_size {
            return Err(Error::Shape(format!(
                "input size {h} does not match configured size {}",
                self.config.input_size
            )));
        }
        let side = h / PATCH_SIZE;
        let mut out = Array2::zeros((side * side, PATCH_DIM));
        for py in 0..side {
            for px in 0..side {
                let token = py * side + px;
                let mut d = 0;
                for y in 0..PATCH_SIZE {
                    for x in 0..PATCH_SIZE {
                        for c in 0..3 {
                            out[[token, d]] = tensor[[py * PATCH_SIZE + y, px * PATCH_SIZE + x, c]];
                            d += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Encode a normalized tensor into per-patch tokens `(N, C)` as graph
    /// nodes. The toy backend is differentiable through its parameters;
    /// foundation backends enter the graph as constant leaves (frozen).
    pub fn encode_tokens_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tensor: &ImageTensor,
    ) -> Result<VarId> {
        let patches = self.patchify(tensor)?;
        match self.config.backend {
            Backend::Toy => {
                let patches = g.leaf(patches);
                self.toy_forward(g, store, patches)
            }
            Backend::FoundationBase | Backend::FoundationLarge => {
                Ok(g.leaf(self.foundation_tokens(&patches)))
            }
        }
    }

    /// Toy forward pass from an already-bound patch leaf: patch embedding
    /// followed by pre-norm single-head attention blocks and a final norm.
    /// Exposed at the patch level so gradient checks can perturb the input.
    pub fn toy_forward(&self, g: &mut Graph, store: &ParamStore, patches: VarId) -> Result<VarId> {
        if self.config.backend != Backend::Toy {
            return Err(Error::Backend("toy_forward requires the toy backend".into()));
        }
        let c = self.config.channels;
        let scale = 1.0 / (c as f64).sqrt();
        let bind = |g: &mut Graph, suffix: &str| store.bind(g, &self.name(suffix));

        let wp = bind(g, "patch_embed.w");
        let bp = bind(g, "patch_embed.b");
        let emb = g.matmul(patches, wp);
        let mut x = g.add_row(emb, bp);

        for b in 0..TOY_BLOCKS {
            let p = |s: &str| format!("block{b}.{s}");
            let g1 = bind(g, &p("ln1.gamma"));
            let b1 = bind(g, &p("ln1.beta"));
            let h = g.layer_norm_rows(x, g1, b1, LN_EPS);
            let wq = bind(g, &p("attn.wq"));
            let wk = bind(g, &p("attn.wk"));
            let wv = bind(g, &p("attn.wv"));
            let wo = bind(g, &p("attn.wo"));
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scores = g.mul_scalar(scores, scale);
            let att = g.softmax_rows(scores);
            let mixed = g.matmul(att, v);
            let proj = g.matmul(mixed, wo);
            x = g.add(x, proj);

            let g2 = bind(g, &p("ln2.gamma"));
            let b2 = bind(g, &p("ln2.beta"));
            let h2 = g.layer_norm_rows(x, g2, b2, LN_EPS);
            let w1 = bind(g, &p("mlp.w1"));
            let bb1 = bind(g, &p("mlp.b1"));
            let w2 = bind(g, &p("mlp.w2"));
            let bb2 = bind(g, &p("mlp.b2"));
            let m = g.matmul(h2, w1);
            let m = g.add_row(m, bb1);
            let m = g.relu(m);
            let m = g.matmul(m, w2);
            let m = g.add_row(m, bb2);
            x = g.add(x, m);
        }
        let gf = bind(g, "ln_f.gamma");
        let bf = bind(g, "ln_f.beta");
        Ok(g.layer_norm_rows(x, gf, bf, LN_EPS))
    }

    /// Deterministic synthetic features standing in for a frozen pretrained
    /// model: per-patch RGB means through a fixed random projection, plus a
    /// sinusoidal position code. Stable across runs.
    fn foundation_tokens(&self, patches: &Array2<f64>) -> Array2<f64> {
        let (n, _) = patches.dim();
        let c = self.config.channels;
        let mut rng = seeded_rng(
            0xF0DA,
            &format!("foundation-proj-{}", self.config.backend.name()),
        );
        let proj = Array2::from_shape_fn((3, c), |_| rng.random_range(-1.0..1.0));
        let mut means = Array2::zeros((n, 3));
        for i in 0..n {
            for ch in 0..3 {
                let mut sum = 0.0;
                for p in 0..(PATCH_SIZE * PATCH_SIZE) {
                    sum += patches[[i, p * 3 + ch]];
                }
                means[[i, ch]] = sum / (PATCH_SIZE * PATCH_SIZE) as f64;
            }
        }
        let mut tokens = means.dot(&proj);
        for i in 0..n {
            for j in 0..c {
                let freq = 10000f64.powf(-((j / 2 * 2) as f64) / c as f64);
                let angle = i as f64 * freq;
                tokens[[i, j]] += if j % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        tokens
    }

    /// Encode a pixel image (already resized to the configured input size)
    /// in eval mode: normalize per backend convention, run the forward pass,
    /// and reshape tokens into the spatial grid.
    pub fn encode(&self, image: &PixelImage, view: View, store: &ParamStore) -> Result<FeatureMap> {
        if view == View::Drone {
            return Err(Error::InvalidInput(
                "drone images are consumed by the scene bridge, not the Siamese encoder".into(),
            ));
        }
        let tensor = self.config.normalization().apply(image);
        self.encode_tensor(&tensor, view, store)
    }

    /// As [`encode`](Self::encode), but for an already-normalized tensor.
    pub fn encode_tensor(
        &self,
        tensor: &ImageTensor,
        view: View,
        store: &ParamStore,
    ) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let tokens = self.encode_tokens_graph(&mut g, store, tensor)?;
        let value = g.value(tokens);
        let side = self.config.grid_side();
        let c = self.config.channels;
        let mut grid = Array3::zeros((side, side, c));
        for y in 0..side {
            for x in 0..side {
                for ch in 0..c {
                    grid[[y, x, ch]] = value[[y * side + x, ch]];
                }
            }
        }
        Ok(FeatureMap {
            grid,
            source_view: view,
            patch_size: PATCH_SIZE,
        })
    }
}

enum InitKind {
    Xavier,
    Zeros,
    Ones,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_backbone(input: usize) -> (Backbone, ParamStore) {
        let config = BackboneConfig::new(Backend::Toy, input).unwrap();
        let bb = Backbone::main(config).unwrap();
        let mut store = ParamStore::new();
        bb.init_params(&mut store, 11);
        (bb, store)
    }

    fn random_tensor(rng: &mut impl Rng, size: usize) -> ImageTensor {
        Array3::from_shape_fn((size, size, 3), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shape_law_holds_for_all_backends() {
        let mut rng = seeded_rng(5, "backbone-shape");
        for (backend, input, c) in [
            (Backend::Toy, 28, 64),
            (Backend::Toy, 56, 64),
            (Backend::FoundationBase, 448, 768),
            (Backend::FoundationLarge, 448, 1024),
        ] {
            let config = BackboneConfig::new(backend, input).unwrap();
            let bb = Backbone::main(config).unwrap();
            let mut store = ParamStore::new();
            bb.init_params(&mut store, 1);
            let tensor = random_tensor(&mut rng, input);
            let fmap = bb.encode_tensor(&tensor, View::Street, &store).unwrap();
            assert_eq!(fmap.spatial_dims(), (input / 14, input / 14));
            assert_eq!(fmap.channels(), c);
            assert_eq!(fmap.patch_size, 14);
        }
    }

    #[test]
    fn rejects_sizes_not_divisible_by_patch() {
        assert!(BackboneConfig::new(Backend::Toy, 30).is_err());
        let (bb, store) = toy_backbone(28);
        let mut rng = seeded_rng(5, "backbone-reject");
        let tensor = random_tensor(&mut rng, 42);
        assert!(bb.encode_tensor(&tensor, View::Street, &store).is_err());
    }

    #[test]
    fn encoding_is_deterministic_across_views() {
        let (bb, store) = toy_backbone(28);
        let mut rng = seeded_rng(5, "backbone-det");
        let tensor = random_tensor(&mut rng, 28);
        let a = bb.encode_tensor(&tensor, View::Street, &store).unwrap();
        let b = bb.encode_tensor(&tensor, View::Satellite, &store).unwrap();
        assert_eq!(a.grid, b.grid, "same weights serve both views");
    }

    #[test]
    fn siamese_views_share_one_parameter_set() {
        let (bb, mut store) = toy_backbone(28);
        let mut rng = seeded_rng(5, "backbone-siamese");
        let street = random_tensor(&mut rng, 28);
        let satellite = random_tensor(&mut rng, 28);

        // gradients flow into the same named parameter from both views
        let mut g = Graph::new();
        let ts = bb.encode_tokens_graph(&mut g, &store, &street).unwrap();
        let tt = bb.encode_tokens_graph(&mut g, &store, &satellite).unwrap();
        let sum = g.add(ts, tt);
        let loss = g.mean_all(sum);
        let grads = g.backward(loss);
        let wq = g.named_id("backbone.block0.attn.wq").unwrap();
        assert!(grads.get(wq).is_some());

        // mutating the shared set changes both views' outputs
        let before_s = bb.encode_tensor(&street, View::Street, &store).unwrap();
        let before_t = bb.encode_tensor(&satellite, View::Satellite, &store).unwrap();
        store.get_mut("backbone.patch_embed.b").unwrap()[[0, 0]] += 0.25;
        let after_s = bb.encode_tensor(&street, View::Street, &store).unwrap();
        let after_t = bb.encode_tensor(&satellite, View::Satellite, &store).unwrap();
        assert_ne!(before_s.grid, after_s.grid);
        assert_ne!(before_t.grid, after_t.grid);
    }

    #[test]
    fn toy_jacobian_vector_product_matches_finite_differences() {
        let (bb, store) = toy_backbone(28);
        let mut rng = seeded_rng(5, "backbone-jvp");
        let tensor = random_tensor(&mut rng, 28);
        let patches = bb.patchify(&tensor).unwrap();
        let (n, d) = patches.dim();
        let c = bb.config.channels;

        // scalar s(x) = Σ u ⊙ f(x); analytic ∇s·v vs central differences
        let u = Array2::from_shape_fn((n, c), |_| rng.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));

        let scalar_of = |p: &Array2<f64>| -> f64 {
            let mut g = Graph::new();
            let leaf = g.leaf(p.clone());
            let tokens = bb.toy_forward(&mut g, &store, leaf).unwrap();
            (g.value(tokens) * &u).sum()
        };

        let mut g = Graph::new();
        let leaf = g.leaf(patches.clone());
        let tokens = bb.toy_forward(&mut g, &store, leaf).unwrap();
        let uleaf = g.leaf(u.clone());
        let prod = g.mul(tokens, uleaf);
        let mean = g.mean_all(prod);
        let scalar = g.mul_scalar(mean, (n * c) as f64);
        let grads = g.backward(scalar);
        let gx = grads.get(leaf).expect("input receives gradient");
        let jvp_analytic: f64 = (gx * &v).sum();

        let eps = 1e-6;
        let jvp_fd = (scalar_of(&(&patches + &(&v * eps))) - scalar_of(&(&patches - &(&v * eps))))
            / (2.0 * eps);

        let rel = (jvp_analytic - jvp_fd).abs() / (jvp_analytic.abs() + jvp_fd.abs() + 1e-10);
        assert!(rel < 1e-4, "JVP mismatch: analytic {jvp_analytic}, fd {jvp_fd}, rel {rel}");
    }

    #[test]
    fn foundation_stub_is_deterministic_and_input_sensitive() {
        let config = BackboneConfig::new(Backend::FoundationLarge, 448).unwrap();
        let bb = Backbone::main(config).unwrap();
        let store = ParamStore::new();
        let mut rng = seeded_rng(5, "backbone-foundation");
        let tensor = random_tensor(&mut rng, 448);
        let a = bb.encode_tensor(&tensor, View::Street, &store).unwrap();
        let b = bb.encode_tensor(&tensor, View::Street, &store).unwrap();
        assert_eq!(a.grid, b.grid);
        let mut shifted = tensor.clone();
        shifted[[0, 0, 0]] += 0.5;
        let c = bb.encode_tensor(&shifted, View::Street, &store).unwrap();
        assert_ne!(a.grid, c.grid);
    }

    #[test]
    fn tokens_roundtrip_through_feature_map() {
        let (bb, store) = toy_backbone(28);
        let mut rng = seeded_rng(5, "backbone-tokens");
        let tensor = random_tensor(&mut rng, 28);
        let fmap = bb.encode_tensor(&tensor, View::Street, &store).unwrap();
        let tokens = fmap.tokens();
        assert_eq!(tokens.dim(), (4, 64));
        assert_eq!(tokens[[1, 5]], fmap.grid[[0, 1, 5]]);
        assert_eq!(tokens[[2, 7]], fmap.grid[[1, 0, 7]]);
    }
}
