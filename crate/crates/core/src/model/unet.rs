use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::ops::{
    batch_norm, concat_channels, conv3d, leaky_relu, max_pool, softmax_channels, upsample, warp, BatchStats, Interp,
    NormMode,
};
use crate::tensor::{Graph, NodeId, Tensor};

use super::params::{ConvBlock, NetRole, ParameterSet};

/// Output node of one network pass plus what the trainer needs afterwards.
#[derive(Clone, Debug)]
pub struct UnetTrace {
    pub output: NodeId,
    /// Parameter nodes aligned with [`ParameterSet::learnable`].
    pub params: Vec<NodeId>,
    /// Per-block batch statistics (train mode only).
    pub stats: Vec<BatchStats>,
}

struct Builder {
    mode: NormMode,
    slope: f64,
    params: Vec<NodeId>,
    stats: Vec<BatchStats>,
}

impl Builder {
    fn block(&mut self, g: &mut Graph, x: NodeId, b: &ConvBlock) -> Result<NodeId> {
        let w = g.param(b.conv.weight.clone());
        let bias = g.param(b.conv.bias.clone());
        let scale = g.param(b.norm.scale.clone());
        let shift = g.param(b.norm.shift.clone());
        self.params.extend([w, bias, scale, shift]);
        let y = conv3d(g, x, w, bias)?;
        let (y, stats) = batch_norm(g, y, scale, shift, &b.norm, self.mode)?;
        self.stats.extend(stats);
        Ok(leaky_relu(g, y, self.slope))
    }
}

/// Encoder `[block, block, pool]` per level, a double-block bottleneck and a
/// decoder `[upsample, concat skip, block, block]` per level, followed by the
/// role's head (softmax over channels, or a linear displacement).
pub fn unet_forward(g: &mut Graph, input: NodeId, params: &ParameterSet, mode: NormMode) -> Result<UnetTrace> {
    let cfg = params.config();
    let (c, spatial) = g.shape(input).volume()?;
    cfg.check_input(c, spatial)?;
    let mut b = Builder {
        mode,
        slope: cfg.leaky_slope,
        params: Vec::with_capacity(4 * params.blocks.len() + 2),
        stats: Vec::new(),
    };
    let depth = cfg.depth();
    let mut blocks = params.blocks.iter();
    let mut next = || blocks.next().expect("block layout follows the config");

    let mut x = input;
    let mut skips = Vec::with_capacity(depth);
    for _ in 0..depth {
        x = b.block(g, x, next())?;
        x = b.block(g, x, next())?;
        skips.push(x);
        x = max_pool(g, x)?;
    }
    x = b.block(g, x, next())?;
    x = b.block(g, x, next())?;
    for skip in skips.into_iter().rev() {
        x = upsample(g, x)?;
        x = concat_channels(g, x, skip)?;
        x = b.block(g, x, next())?;
        x = b.block(g, x, next())?;
    }

    let hw = g.param(params.head.weight.clone());
    let hb = g.param(params.head.bias.clone());
    b.params.extend([hw, hb]);
    let logits = conv3d(g, x, hw, hb)?;
    let output = match params.role() {
        NetRole::Segmentation => softmax_channels(g, logits)?,
        NetRole::Registration => logits,
    };
    Ok(UnetTrace {
        output,
        params: b.params,
        stats: b.stats,
    })
}

fn expect_role(p: &ParameterSet, role: NetRole) -> Result<()> {
    if p.role() != role {
        return Err(Error::Contract(format!(
            "expected {role:?} parameters, got {:?}",
            p.role()
        )));
    }
    Ok(())
}

/// `F_Θ(I)`: posterior `[2, D, H, W]` from a six-component tensor image.
pub fn segment(g: &mut Graph, tensor: &Tensor, theta: &ParameterSet, mode: NormMode) -> Result<UnetTrace> {
    expect_role(theta, NetRole::Segmentation)?;
    let x = g.input(tensor.clone());
    unet_forward(g, x, theta, mode)
}

/// `G_Φ(FA_t, FA_s)`: displacement `[3, D, H, W]` mapping target voxels into
/// the source grid.
pub fn register(g: &mut Graph, fa_t: &Tensor, fa_s: &Tensor, phi: &ParameterSet, mode: NormMode) -> Result<UnetTrace> {
    expect_role(phi, NetRole::Registration)?;
    let x = g.input(fa_t.concat_channels(fa_s)?);
    unet_forward(g, x, phi, mode)
}

pub struct HybridInputs<'a> {
    pub tensor_s: &'a Tensor,
    pub fa_s: &'a Tensor,
    pub fa_t: &'a Tensor,
}

/// Nodes of one hybrid pass. Absent networks leave their outputs `None`.
#[derive(Clone, Debug)]
pub struct HybridOutput {
    pub prob_s: Option<NodeId>,
    pub disp: Option<NodeId>,
    pub warped_fa: Option<NodeId>,
    pub warped_prob: Option<NodeId>,
    pub theta: Option<UnetTrace>,
    pub phi: Option<UnetTrace>,
}

/// Runs whichever of `F_Θ` and `G_Φ` are given on one graph, then warps the
/// source FA and (when both exist) the source posterior with the predicted
/// field so that gradients of warped terms reach both networks.
pub fn hybrid_forward(
    g: &mut Graph,
    inputs: &HybridInputs<'_>,
    theta: Option<&ParameterSet>,
    phi: Option<&ParameterSet>,
    mode: NormMode,
) -> Result<HybridOutput> {
    let (_, spatial) = inputs.tensor_s.shape().volume()?;
    for (name, t) in [("fa_s", inputs.fa_s), ("fa_t", inputs.fa_t)] {
        let (c, s) = t.shape().volume()?;
        if c != 1 || s != spatial {
            return Err(Error::shape(format!(
                "{name} is {}, expected [1, {}, {}, {}]",
                t.shape(),
                spatial[0],
                spatial[1],
                spatial[2]
            )));
        }
    }
    let theta = theta.map(|p| segment(g, inputs.tensor_s, p, mode)).transpose()?;
    let phi = phi
        .map(|p| register(g, inputs.fa_t, inputs.fa_s, p, mode))
        .transpose()?;
    let prob_s = theta.as_ref().map(|t| t.output);
    let disp = phi.as_ref().map(|t| t.output);
    let (mut warped_fa, mut warped_prob) = (None, None);
    if let Some(d) = disp {
        let fa = g.input(inputs.fa_s.clone());
        warped_fa = Some(warp(g, fa, d, Interp::Trilinear)?);
        if let Some(p) = prob_s {
            warped_prob = Some(warp(g, p, d, Interp::Trilinear)?);
        }
    }
    Ok(HybridOutput {
        prob_s,
        disp,
        warped_fa,
        warped_prob,
        theta,
        phi,
    })
}

/// Foreground (channel 1) strictly above `threshold`.
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<BinaryMask> {
    let (c, _) = prob.shape().volume()?;
    if c < 2 {
        return Err(Error::shape(format!(
            "binarize needs a background/foreground pair, got {c} channels"
        )));
    }
    BinaryMask::threshold(&prob.channels(1, 1)?, threshold)
}
