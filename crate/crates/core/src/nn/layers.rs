use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::params::{Graph, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Largest group count `<= max_groups` that divides `channels`.
pub(crate) fn groups_for(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv3dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = store.add_conv_weight(
            format!("{name}.weight"),
            [out_channels, in_channels, kernel, kernel, kernel],
            rng,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.conv3d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, max_groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: groups_for(channels, max_groups),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.tape.group_norm(x, self.groups, gamma, beta, NORM_EPS)
    }
}

/// `x + conv2(relu(gn2(conv1(relu(gn1(x))))))` with 3x3x3 convolutions.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub channels: usize,
    pub norm1: GroupNormLayer,
    pub conv1: Conv3dLayer,
    pub norm2: GroupNormLayer,
    pub conv2: Conv3dLayer,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        max_groups: usize,
    ) -> Self {
        Self {
            channels,
            norm1: GroupNormLayer::new(store, &format!("{name}.norm1"), channels, max_groups),
            conv1: Conv3dLayer::new(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1),
            norm2: GroupNormLayer::new(store, &format!("{name}.norm2"), channels, max_groups),
            conv2: Conv3dLayer::new(store, rng, &format!("{name}.conv2"), channels, channels, 3, 1),
        }
    }

    /// The two-conv residual branch alone.
    pub fn body(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.tape.value(x).dims5("residual_forward")?.c;
        if c != self.channels {
            return Err(Error::shape(
                "residual_forward",
                format!("block has {} channels, input has {c}", self.channels),
            ));
        }
        let h = self.norm1.forward(g, x)?;
        let h = g.tape.relu(h)?;
        let h = self.conv1.forward(g, h)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.tape.relu(h)?;
        self.conv2.forward(g, h)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let body = self.body(g, x)?;
        g.tape.add(x, body)
    }
}

/// Gate between the edge stream and one main-stream resolution.
///
/// `alpha = sigmoid(relu(proj_e(e_in) + proj_m(m)))` is a single-channel
/// attention map; the output is `e_in * alpha + e_in` with `alpha` repeated
/// across the edge channels.
#[derive(Clone, Debug)]
pub struct EdgeGatedLayer {
    pub resolution: usize,
    pub proj_e: Conv3dLayer,
    pub proj_m: Conv3dLayer,
}

#[derive(Clone, Copy, Debug)]
pub struct GatedOutput {
    pub output: Var,
    pub alpha: Var,
}

impl EdgeGatedLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        resolution: usize,
        edge_channels: usize,
        main_channels: usize,
    ) -> Self {
        Self {
            resolution,
            proj_e: Conv3dLayer::new(store, rng, &format!("{name}.proj_e"), edge_channels, 1, 1, 1),
            proj_m: Conv3dLayer::new(store, rng, &format!("{name}.proj_m"), main_channels, 1, 1, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, e_in: Var, m: Var) -> Result<GatedOutput> {
        let ed = g.tape.value(e_in).dims5("edge_gated_forward")?;
        let md = g.tape.value(m).dims5("edge_gated_forward")?;
        if (ed.n, ed.d, ed.h, ed.w) != (md.n, md.d, md.h, md.w) {
            return Err(Error::shape(
                "edge_gated_forward",
                format!(
                    "edge stream {:?} and main stream {:?} are not spatially aligned",
                    ed.to_vec(),
                    md.to_vec()
                ),
            ));
        }
        let pe = self.proj_e.forward(g, e_in)?;
        let pm = self.proj_m.forward(g, m)?;
        let fused = g.tape.add(pe, pm)?;
        let fused = g.tape.relu(fused)?;
        let alpha = g.tape.sigmoid(fused)?;
        let gate = g.tape.expand_channels(alpha, ed.c)?;
        let gated = g.tape.mul(e_in, gate)?;
        let output = g.tape.add(gated, e_in)?;
        Ok(GatedOutput { output, alpha })
    }
}
