use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{BatchStats, ConvParams, NormParams, KERNEL_VOLUME};
use crate::tensor::Tensor;

pub const PAPER_WIDTHS: [usize; 9] = [16, 32, 64, 128, 256, 128, 64, 32, 16];
pub const DESK_WIDTHS: [usize; 9] = [4, 8, 16, 32, 64, 32, 16, 8, 4];

/// Multiplier applied to the registration head at initialization.
const REGISTRATION_HEAD_SCALE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetRole {
    /// Softmax head over background/foreground.
    Segmentation,
    /// Linear three-channel displacement head.
    Registration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub channel_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub input_channels: usize,
    pub output_channels: usize,
    pub seed: u64,
}

impl NetConfig {
    /// Desk-scale segmentation net over six tensor components.
    pub fn segmentation(seed: u64) -> Self {
        NetConfig {
            channel_widths: DESK_WIDTHS.to_vec(),
            leaky_slope: 0.2,
            input_channels: 6,
            output_channels: 2,
            seed,
        }
    }

    /// Desk-scale registration net over `(FA_t, FA_s)`.
    pub fn registration(seed: u64) -> Self {
        NetConfig {
            channel_widths: DESK_WIDTHS.to_vec(),
            leaky_slope: 0.2,
            input_channels: 2,
            output_channels: 3,
            seed,
        }
    }

    pub fn with_widths(mut self, widths: &[usize]) -> Self {
        self.channel_widths = widths.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.channel_widths;
        if w.is_empty() || w.len() % 2 == 0 {
            return Err(Error::Contract(format!(
                "channel widths need an odd length, got {}",
                w.len()
            )));
        }
        if w.contains(&0) || self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::Contract("channel counts must be positive".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Contract("leaky slope must be finite".into()));
        }
        Ok(())
    }

    /// Number of pooling levels.
    pub fn depth(&self) -> usize {
        (self.channel_widths.len() - 1) / 2
    }

    pub fn check_input(&self, channels: usize, spatial: [usize; 3]) -> Result<()> {
        if channels != self.input_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {channels}",
                self.input_channels
            )));
        }
        let k = 1usize << self.depth();
        if spatial.iter().any(|s| s % k != 0) {
            return Err(Error::shape(format!(
                "spatial extents {spatial:?} must be divisible by {k}"
            )));
        }
        Ok(())
    }

    /// `(in, out)` channels of every double-conv stage in execution order:
    /// encoder levels, bottleneck, decoder levels.
    pub(crate) fn stage_channels(&self) -> Vec<(usize, usize)> {
        let w = &self.channel_widths;
        let d = self.depth();
        let mut stages = Vec::with_capacity(w.len());
        for i in 0..=d {
            let c_in = if i == 0 { self.input_channels } else { w[i - 1] };
            stages.push((c_in, w[i]));
        }
        for j in 0..d {
            stages.push((w[d + j] + w[d - 1 - j], w[d + 1 + j]));
        }
        stages
    }

    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize| KERNEL_VOLUME * i * o + o;
        let stages: usize = self
            .stage_channels()
            .iter()
            .map(|&(i, o)| conv(i, o) + conv(o, o) + 4 * o)
            .sum();
        stages + conv(*self.channel_widths.last().unwrap(), self.output_channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvParams,
    pub norm: NormParams,
}

/// All weights and normalization statistics of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    role: NetRole,
    config: NetConfig,
    /// Two blocks per stage, in execution order.
    pub blocks: Vec<ConvBlock>,
    pub head: ConvParams,
}

impl ParameterSet {
    /// All-zero weights with unit norm scales, shaped by `config`.
    pub fn zeros(role: NetRole, config: &NetConfig) -> Result<Self> {
        config.validate()?;
        match (role, config.output_channels) {
            (NetRole::Segmentation, c) if c < 2 => {
                return Err(Error::Contract("segmentation head needs >= 2 channels".into()))
            }
            (NetRole::Registration, c) if c != 3 => {
                return Err(Error::Contract(format!(
                    "registration head must have 3 channels, got {c}"
                )))
            }
            _ => {}
        }
        let mut blocks = Vec::new();
        for (c_in, c_out) in config.stage_channels() {
            for i in [c_in, c_out] {
                blocks.push(ConvBlock {
                    conv: ConvParams::zeros(i, c_out)?,
                    norm: NormParams::new(c_out)?,
                });
            }
        }
        let last = *config.channel_widths.last().unwrap();
        Ok(ParameterSet {
            role,
            config: config.clone(),
            blocks,
            head: ConvParams::zeros(last, config.output_channels)?,
        })
    }

    pub fn role(&self) -> NetRole {
        self.role
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Learnable tensors with stable names, in graph-registration order.
    pub fn learnable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv.weight"), &b.conv.weight));
            out.push((format!("block{i}.conv.bias"), &b.conv.bias));
            out.push((format!("block{i}.norm.scale"), &b.norm.scale));
            out.push((format!("block{i}.norm.shift"), &b.norm.shift));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            out.push(&mut b.norm.scale);
            out.push(&mut b.norm.shift);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Learnable tensors followed by the running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.learnable();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.norm.running_mean"), &b.norm.running_mean));
            out.push((format!("block{i}.norm.running_var"), &b.norm.running_var));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut learn: Vec<&mut Tensor> = Vec::with_capacity(names.len());
        let mut stats: Vec<&mut Tensor> = Vec::with_capacity(2 * self.blocks.len());
        for b in &mut self.blocks {
            let norm = &mut b.norm;
            learn.extend([&mut b.conv.weight, &mut b.conv.bias, &mut norm.scale, &mut norm.shift]);
            stats.extend([&mut norm.running_mean, &mut norm.running_var]);
        }
        learn.extend([&mut self.head.weight, &mut self.head.bias]);
        learn.extend(stats);
        names.into_iter().zip(learn).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Folds per-block batch statistics from a train-mode pass into the
    /// running estimates.
    pub fn absorb_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "expected {} batch statistics, got {}",
                self.blocks.len(),
                stats.len()
            )));
        }
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            b.norm.update_running(s);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// He-normal convolution weights (`std = sqrt(2 / (C_in * 27))`) drawn in
/// block order from a ChaCha8 stream seeded by `config.seed`; biases 0, norm
/// scale 1 and shift 0. The registration head is scaled by 1e-3 so the
/// initial transform is close to the identity.
pub fn init_params(role: NetRole, config: &NetConfig) -> Result<ParameterSet> {
    let mut p = ParameterSet::zeros(role, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fill = |conv: &mut ConvParams, gain: f64| {
        let std = (2.0 / (conv.in_channels() * KERNEL_VOLUME) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in conv.weight.data_mut() {
            *w = normal.sample(&mut rng) * gain;
        }
    };
    for b in &mut p.blocks {
        fill(&mut b.conv, 1.0);
    }
    let gain = match role {
        NetRole::Segmentation => 1.0,
        NetRole::Registration => REGISTRATION_HEAD_SCALE,
    };
    fill(&mut p.head, gain);
    for b in p.head.bias.data_mut() {
        *b *= gain;
    }
    Ok(p)
}
