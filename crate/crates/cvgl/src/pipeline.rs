//! Assembly of the full model from configuration: Siamese backbone shared
//! by street and satellite branches, an aggregation head, and optionally
//! the 3D scene bridge for drone scales.

use ndarray::Array3;

use crate::aggregation::{build_head, AggregationHead, Embedding, EmbeddingView, HeadKind, PafaConfig};
use crate::backbone::{Backbone, BackboneConfig, Backend, PATCH_SIZE};
use crate::bridge3d::{Bridge, BridgeConfig};
use crate::config::Config;
use crate::data::View;
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::imageio::{ImageTensor, PixelImage};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    pub head_kind: HeadKind,
    pub pafa: PafaConfig,
    /// Global descriptor dimension D shared by every branch.
    pub embed_dim: usize,
    /// `None` disables the scene bridge (drone scales are then absent).
    pub bridge: Option<BridgeConfig>,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head_kind == HeadKind::Pafa && self.pafa.embed_dim() != self.embed_dim {
            return Err(Error::Config(format!(
                "embed_dim {} does not match PAFA projections {}×{}",
                self.embed_dim, self.pafa.out_channels, self.pafa.out_rows
            )));
        }
        if let Some(bridge) = &self.bridge {
            bridge.validate()?;
            if bridge.embed_dim != self.embed_dim {
                return Err(Error::Config(format!(
                    "bridge embed_dim {} differs from head embed_dim {}",
                    bridge.embed_dim, self.embed_dim
                )));
            }
        }
        Ok(())
    }

    /// Read the model keys of a flat config file. Absent keys take the
    /// published defaults.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let backend = Backend::parse(cfg.str_or("backbone.backend", "foundation_large"))?;
        let input_size = cfg.usize_or("backbone.input_size", 448)?;
        let mut backbone = BackboneConfig::new(backend, input_size)?;
        backbone.train_last_block = cfg.bool_or("backbone.train_last_block", false)?;

        let head_kind = HeadKind::parse(cfg.str_or("head.kind", "pafa"))?;
        let embed_dim = cfg.usize_or("head.embed_dim", 4096)?;
        let out_rows = cfg.usize_or("pafa.out_rows", 4)?;
        if out_rows == 0 || embed_dim % out_rows != 0 {
            return Err(Error::Config(format!(
                "embed_dim {embed_dim} not divisible by pafa.out_rows {out_rows}"
            )));
        }
        let pafa = PafaConfig {
            mixer_depth: cfg.usize_or("pafa.mixer_depth", 4)?,
            hidden_ratio: cfg.f64_or("pafa.hidden_ratio", 1.0)?,
            out_channels: cfg.usize_or("pafa.out_channels", embed_dim / out_rows)?,
            out_rows,
        };
        let bridge = if cfg.bool_or("bridge.enabled", true)? {
            Some(BridgeConfig {
                views: cfg.usize_or("bridge.views", 6)?,
                resolution: cfg.usize_or("bridge.resolution", 224)?,
                adapter_hidden: cfg.usize_or("bridge.adapter_hidden", 256)?,
                embed_dim,
                shared_adapter: cfg.bool_or("bridge.shared_adapter", true)?,
            })
        } else {
            None
        };
        let config = PipelineConfig {
            backbone,
            head_kind,
            pafa,
            embed_dim,
            bridge,
            seed: cfg.u64_or("train.seed", 0)?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// The assembled model. Parameters live in a caller-owned [`ParamStore`].
pub struct Pipeline {
    pub config: PipelineConfig,
    pub backbone: Backbone,
    pub head: Box<dyn AggregationHead>,
    pub bridge: Option<Bridge>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::main(config.backbone.clone())?;
        let head = build_head(
            config.head_kind,
            &config.pafa,
            config.embed_dim,
            config.backbone.channels,
        )?;
        let bridge = match &config.bridge {
            Some(bc) => Some(Bridge::new(bc.clone())?),
            None => None,
        };
        Ok(Pipeline {
            config,
            backbone,
            head,
            bridge,
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        Self::new(PipelineConfig::from_config(cfg)?)
    }

    pub fn input_size(&self) -> usize {
        self.config.backbone.input_size
    }

    /// Tokens per grid side of the backbone output.
    pub fn grid_side(&self) -> usize {
        self.config.backbone.grid_side()
    }

    /// Create all parameters that are absent: backbone (frozen by default),
    /// head (trainable), bridge encoder (frozen) and adapter (trainable).
    pub fn init_params(&self, store: &mut ParamStore) -> Result<()> {
        let seed = self.config.seed;
        self.backbone.init_params(store, seed);
        let side = self.grid_side();
        self.head
            .init_params(store, seed, side, side, self.config.backbone.channels)?;
        if let Some(bridge) = &self.bridge {
            bridge.init_params(store, seed);
        }
        Ok(())
    }

    /// Encode + aggregate one normalized tensor into a `(1, D)` unit-norm
    /// graph node.
    pub fn embed_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tensor: &ImageTensor,
    ) -> Result<VarId> {
        let tokens = self.backbone.encode_tokens_graph(g, store, tensor)?;
        let side = self.grid_side();
        self.head.aggregate_graph(g, store, tokens, side, side)
    }

    /// Eval-mode embedding of a street or satellite image (resized here).
    pub fn embed_image(
        &self,
        image: &PixelImage,
        view: View,
        store: &ParamStore,
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
        let resized = image.resize(self.input_size());
        let tensor = self.config.backbone.normalization().apply(&resized);
        let mut g = Graph::new();
        let out = self.embed_graph(&mut g, store, &tensor)?;
        Ok(Embedding::from_row(g.value(out), tagged, false))
    }
}

/// A small toy profile used throughout the test suite: 28-pixel inputs,
/// the trainable toy backbone, PAFA at 8×4 = 32 dimensions, and a
/// 3-view bridge at the same resolution.
pub fn toy_pipeline_config(seed: u64, with_bridge: bool) -> PipelineConfig {
    let backbone = BackboneConfig::new(Backend::Toy, 2 * PATCH_SIZE).expect("toy config");
    let pafa = PafaConfig {
        mixer_depth: 2,
        hidden_ratio: 1.0,
        out_channels: 8,
        out_rows: 4,
    };
    PipelineConfig {
        backbone,
        head_kind: HeadKind::Pafa,
        pafa,
        embed_dim: 32,
        bridge: with_bridge.then_some(BridgeConfig {
            views: 3,
            resolution: 2 * PATCH_SIZE,
            adapter_hidden: 16,
            embed_dim: 32,
            shared_adapter: true,
        }),
        seed,
    }
}

/// Deterministic colored test image for pipeline-level tests.
pub fn checker_image(size: usize, phase: usize) -> PixelImage {
    PixelImage::new(Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let cell = (y / 4 + x / 4 + phase) % 3;
        if cell == c {
            0.9
        } else {
            0.15 + 0.05 * c as f64
        }
    }))
}
