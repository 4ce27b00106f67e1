use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::backbone::Backbone;
use crate::nn::layers::{Conv3dLayer, EdgeGatedLayer, ResidualBlock};
use crate::nn::params::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const MODEL_CONFIG_VERSION: u32 = 1;

/// Architecture description, stored verbatim in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    /// Number of encoder resolutions `R`.
    pub resolutions: usize,
    /// Channel width `B` at full resolution.
    pub base_channels: usize,
    /// Segmentation classes `K`, background included.
    pub classes: usize,
    /// Upper bound on GroupNorm groups per layer.
    pub groups: usize,
    pub edge_stream: bool,
    pub seed: u64,
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            version: MODEL_CONFIG_VERSION,
            resolutions: 3,
            base_channels: 8,
            classes: 3,
            groups: 8,
            edge_stream: true,
            seed: 0,
            in_channels: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported model config version {}", self.version)));
        }
        if self.resolutions == 0 || self.resolutions > 6 {
            return Err(Error::Config(format!("resolutions must be in 1..=6, got {}", self.resolutions)));
        }
        if self.base_channels == 0 || self.classes == 0 || self.groups == 0 || self.in_channels == 0 {
            return Err(Error::Config("base_channels, classes, groups and in_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Auxiliary stream of residual blocks and edge-gated layers.
///
/// Stage `s` handles main-stream level `r = R - 1 - s`: residual block,
/// trilinear upsampling to level `r`, then the gate against encoder tap `r`.
/// The stream enters from the first decoder feature map through a 1x1x1
/// projection to the stream width.
#[derive(Clone, Debug)]
pub struct EdgeStream {
    pub entry: Conv3dLayer,
    pub stages: Vec<(ResidualBlock, EdgeGatedLayer)>,
    pub head: Conv3dLayer,
}

#[derive(Clone, Debug)]
pub struct EdgeStreamOutput {
    pub features: Var,
    pub logits: Var,
    pub alphas: Vec<Var>,
}

impl EdgeStream {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, backbone: &Backbone, max_groups: usize) -> Self {
        let r_max = backbone.resolutions;
        let width = backbone.base_channels;
        let entry = Conv3dLayer::new(store, rng, "edge.entry", backbone.channels_at(r_max - 1), width, 1, 1);
        let stages = (0..r_max)
            .map(|s| {
                let level = r_max - 1 - s;
                let block = ResidualBlock::new(store, rng, &format!("edge.stage{s}.block"), width, max_groups);
                let gate = EdgeGatedLayer::new(
                    store,
                    rng,
                    &format!("edge.stage{s}.gate"),
                    level,
                    width,
                    backbone.channels_at(level),
                );
                (block, gate)
            })
            .collect();
        let head = Conv3dLayer::new(store, rng, "edge.head", width, 1, 1, 1);
        Self { entry, stages, head }
    }

    pub fn forward(&self, g: &mut Graph, taps: &[Var]) -> Result<EdgeStreamOutput> {
        let r_max = self.stages.len();
        if taps.len() != r_max + 1 {
            return Err(Error::shape(
                "edge_stream_forward",
                format!("expected {} taps for {r_max} resolutions, got {}", r_max + 1, taps.len()),
            ));
        }
        let mut e = self.entry.forward(g, taps[r_max])?;
        let mut alphas = Vec::with_capacity(r_max);
        for (block, gate) in &self.stages {
            e = block.forward(g, e)?;
            let target = taps[gate.resolution];
            let from = g.tape.value(e).shape()[2];
            let to = g.tape.value(target).shape()[2];
            if to % from != 0 {
                return Err(Error::shape(
                    "edge_stream_forward",
                    format!("cannot upsample extent {from} to {to}"),
                ));
            }
            e = g.tape.trilinear_upsample(e, to / from)?;
            let gated = gate.forward(g, e, target)?;
            alphas.push(gated.alpha);
            e = gated.output;
        }
        let logits = self.head.forward(g, e)?;
        Ok(EdgeStreamOutput {
            features: e,
            logits,
            alphas,
        })
    }
}

/// Main stream, optional edge stream, and the segmentation head.
///
/// With the edge stream enabled the head is a 1x1x1 convolution over the
/// concatenation of backbone features and edge features; without it, the head
/// sees backbone features only.
#[derive(Clone, Debug)]
pub struct EgModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub edge: Option<EdgeStream>,
    pub head: Conv3dLayer,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub semantic_logits: Var,
    pub edge_logits: Option<Var>,
    pub edge_features: Option<Var>,
    pub alphas: Vec<Var>,
    pub taps: Vec<Var>,
}

impl EgModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(
            &mut params,
            &mut rng,
            config.in_channels,
            config.resolutions,
            config.base_channels,
            config.groups,
        );
        let edge = config
            .edge_stream
            .then(|| EdgeStream::new(&mut params, &mut rng, &backbone, config.groups));
        let head_in = if edge.is_some() { 2 } else { 1 } * config.base_channels;
        let head = Conv3dLayer::new(&mut params, &mut rng, "head", head_in, config.classes, 1, 1);
        Ok(Self {
            config,
            params,
            backbone,
            edge,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_edge_gated_layers(&self) -> usize {
        self.edge.as_ref().map_or(0, |e| e.stages.len())
    }

    pub fn graph(&self, trainable: bool) -> Result<Graph> {
        Graph::new(&self.params, trainable)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ModelOutput> {
        let c = g.tape.value(x).dims5("model_forward")?.c;
        if c != self.config.in_channels {
            return Err(Error::shape(
                "model_forward",
                format!("model expects {} input channels, got {c}", self.config.in_channels),
            ));
        }
        let main = self.backbone.forward(g, x)?;
        match &self.edge {
            Some(edge) => {
                let out = edge.forward(g, &main.taps)?;
                let fused = g.tape.concat_channels(&[main.features, out.features])?;
                let semantic_logits = self.head.forward(g, fused)?;
                Ok(ModelOutput {
                    semantic_logits,
                    edge_logits: Some(out.logits),
                    edge_features: Some(out.features),
                    alphas: out.alphas,
                    taps: main.taps,
                })
            }
            None => Ok(ModelOutput {
                semantic_logits: self.head.forward(g, main.features)?,
                edge_logits: None,
                edge_features: None,
                alphas: Vec::new(),
                taps: main.taps,
            }),
        }
    }

    /// Inference-only forward pass returning `(semantic logits, edge logits)`.
    pub fn predict(&self, input: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = self.graph(false)?;
        let x = g.tape.constant(input.clone())?;
        let out = self.forward(&mut g, x)?;
        Ok((
            g.tape.value(out.semantic_logits).clone(),
            out.edge_logits.map(|e| g.tape.value(e).clone()),
        ))
    }
}
