use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, NodeId, Shape, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the statistics of the current sample.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Per-channel affine parameters and running statistics of a batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Per-channel mean and (biased) variance of one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormParams {
    pub fn new(channels: usize) -> Result<Self> {
        let s = Shape::new([channels])?;
        Ok(NormParams {
            scale: Tensor::full(s.clone(), 1.0),
            shift: Tensor::zeros(s.clone()),
            running_mean: Tensor::zeros(s.clone()),
            running_var: Tensor::full(s, 1.0),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&batch.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Batch normalization over the spatial positions of a single sample.
///
/// `scale` and `shift` are graph nodes so their gradients are collected; the
/// running statistics are read from `params`. In train mode the batch
/// statistics are returned so the caller can fold them into `params`.
pub fn batch_norm(
    g: &mut Graph,
    input: NodeId,
    scale: NodeId,
    shift: NodeId,
    params: &NormParams,
    mode: NormMode,
) -> Result<(NodeId, Option<BatchStats>)> {
    let (c, spatial) = g.shape(input).volume()?;
    if params.channels() != c || g.shape(scale).dims() != [c] || g.shape(shift).dims() != [c] {
        return Err(Error::shape(format!(
            "batch_norm over {c} channels got {} parameters",
            params.channels()
        )));
    }
    let n = spatial.iter().product::<usize>();
    let x = g.value(input).data();
    let (gamma, beta) = (g.value(scale).data(), g.value(shift).data());

    let (mean, var) = match mode {
        NormMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let xs = &x[ch * n..(ch + 1) * n];
                let m = xs.iter().sum::<f64>() / n as f64;
                let v = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                mean[ch] = m;
                var[ch] = v;
            }
            (mean, var)
        }
        NormMode::Eval => (params.running_mean.data().to_vec(), params.running_var.data().to_vec()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.epsilon).sqrt()).collect();
    let mut normalized = vec![0.0; c * n];
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for i in ch * n..(ch + 1) * n {
            let xh = (x[i] - mean[ch]) * inv_std[ch];
            normalized[i] = xh;
            out[i] = gamma[ch] * xh + beta[ch];
        }
    }
    let value = Tensor::new(g.shape(input).clone(), out)?;
    let id = g.record(
        value,
        vec![input, scale, shift],
        Box::new(BatchNormOp {
            normalized,
            inv_std,
            channels: c,
            mode,
        }),
    );
    let stats = (mode == NormMode::Train).then_some(BatchStats { mean, var });
    Ok((id, stats))
}

struct BatchNormOp {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    mode: NormMode,
}

impl Backward for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = self.channels;
        let dy = grad.data();
        let n = dy.len() / c;
        let gamma = inputs[1].data();
        let xh = &self.normalized;
        let mut dx = vec![0.0; dy.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let r = ch * n..(ch + 1) * n;
            let (sum_dy, sum_dy_xh) = dy[r.clone()]
                .iter()
                .zip(&xh[r.clone()])
                .fold((0.0, 0.0), |(a, b), (g, h)| (a + g, b + g * h));
            dgamma[ch] = sum_dy_xh;
            dbeta[ch] = sum_dy;
            let k = gamma[ch] * self.inv_std[ch];
            match self.mode {
                NormMode::Train => {
                    let nf = n as f64;
                    for i in r {
                        dx[i] = k / nf * (nf * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                    }
                }
                NormMode::Eval => {
                    for i in r {
                        dx[i] = k * dy[i];
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(inputs[0].shape().clone(), dx).expect("input shape")),
            Some(Tensor::new(inputs[1].shape().clone(), dgamma).expect("scale shape")),
            Some(Tensor::new(inputs[2].shape().clone(), dbeta).expect("shift shape")),
        ]
    }
}
