use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{Conv3dLayer, GroupNormLayer, ResidualBlock};
use crate::nn::params::{Graph, ParamStore};
use crate::tape::Var;

/// Encoder-decoder main stream with `resolutions` levels and channel width
/// `base * 2^r` at level `r`.
///
/// Level `r` runs at `extent / 2^r`. The decoder starts with a residual block
/// at the coarsest level (the first decoder feature map), then per finer level
/// projects, upsamples, concatenates the encoder skip and fuses with a 3x3x3
/// convolution.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub resolutions: usize,
    pub base_channels: usize,
    pub stem: Conv3dLayer,
    pub encoder: Vec<ResidualBlock>,
    pub down: Vec<(Conv3dLayer, GroupNormLayer)>,
    pub bottleneck: ResidualBlock,
    pub decoder: Vec<DecoderStage>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub level: usize,
    pub reduce: Conv3dLayer,
    pub fuse: Conv3dLayer,
    pub norm: GroupNormLayer,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Full-resolution decoder output with `base` channels.
    pub features: Var,
    /// Encoder feature maps, fine to coarse, followed by the first decoder
    /// feature map.
    pub taps: Vec<Var>,
}

impl Backbone {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        resolutions: usize,
        base: usize,
        max_groups: usize,
    ) -> Self {
        let width = |r: usize| base << r;
        let stem = Conv3dLayer::new(store, rng, "backbone.stem", in_channels, base, 3, 1);
        let mut encoder = Vec::with_capacity(resolutions);
        let mut down = Vec::with_capacity(resolutions.saturating_sub(1));
        for r in 0..resolutions {
            if r > 0 {
                let conv = Conv3dLayer::new(store, rng, &format!("backbone.down{r}"), width(r - 1), width(r), 3, 2);
                let norm = GroupNormLayer::new(store, &format!("backbone.down{r}.norm"), width(r), max_groups);
                down.push((conv, norm));
            }
            encoder.push(ResidualBlock::new(store, rng, &format!("backbone.enc{r}"), width(r), max_groups));
        }
        let bottleneck = ResidualBlock::new(
            store,
            rng,
            "backbone.dec_first",
            width(resolutions - 1),
            max_groups,
        );
        let decoder = (0..resolutions.saturating_sub(1))
            .rev()
            .map(|level| DecoderStage {
                level,
                reduce: Conv3dLayer::new(store, rng, &format!("backbone.dec{level}.reduce"), width(level + 1), width(level), 1, 1),
                fuse: Conv3dLayer::new(store, rng, &format!("backbone.dec{level}.fuse"), 2 * width(level), width(level), 3, 1),
                norm: GroupNormLayer::new(store, &format!("backbone.dec{level}.norm"), width(level), max_groups),
            })
            .collect();
        Self {
            resolutions,
            base_channels: base,
            stem,
            encoder,
            down,
            bottleneck,
            decoder,
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<BackboneOutput> {
        let dims = g.tape.value(x).dims5("backbone_forward")?;
        let factor = 1usize << (self.resolutions - 1);
        if [dims.d, dims.h, dims.w].iter().any(|&e| e % factor != 0 || e == 0) {
            return Err(Error::shape(
                "backbone_forward",
                format!(
                    "spatial extents {:?} must be positive multiples of {factor}",
                    [dims.d, dims.h, dims.w]
                ),
            ));
        }
        let mut h = self.stem.forward(g, x)?;
        let mut taps = Vec::with_capacity(self.resolutions + 1);
        for r in 0..self.resolutions {
            if r > 0 {
                let (conv, norm) = &self.down[r - 1];
                h = conv.forward(g, h)?;
                h = norm.forward(g, h)?;
                h = g.tape.relu(h)?;
            }
            h = self.encoder[r].forward(g, h)?;
            taps.push(h);
        }
        let mut d = self.bottleneck.forward(g, h)?;
        taps.push(d);
        for stage in &self.decoder {
            let reduced = stage.reduce.forward(g, d)?;
            let up = g.tape.trilinear_upsample(reduced, 2)?;
            let cat = g.tape.concat_channels(&[up, taps[stage.level]])?;
            let fused = stage.fuse.forward(g, cat)?;
            let fused = stage.norm.forward(g, fused)?;
            d = g.tape.relu(fused)?;
        }
        Ok(BackboneOutput { features: d, taps })
    }
}
