use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, NodeId, Tensor};

/// `x` for `x >= 0`, `slope * x` otherwise. The derivative at exactly zero
/// is taken from the positive branch.
pub fn leaky_relu(g: &mut Graph, input: NodeId, slope: f64) -> NodeId {
    let value = g.value(input).map(|v| if v >= 0.0 { v } else { slope * v });
    g.record(value, vec![input], Box::new(LeakyReluOp { slope }))
}

struct LeakyReluOp {
    slope: f64,
}

impl Backward for LeakyReluOp {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x >= 0.0 { g } else { self.slope * g })
            .collect();
        vec![Some(Tensor::new(grad.shape().clone(), data).expect("same shape"))]
    }
}

/// Per-voxel softmax across the channel axis of a `[C, D, H, W]` volume.
pub fn softmax_channels(g: &mut Graph, input: NodeId) -> Result<NodeId> {
    let (c, spatial) = g.shape(input).volume()?;
    if c < 2 {
        return Err(Error::shape(format!("softmax needs at least 2 channels, got {c}")));
    }
    let n = spatial.iter().product::<usize>();
    let x = g.value(input).data();
    let mut out = vec![0.0; x.len()];
    for v in 0..n {
        let max = (0..c).map(|ch| x[ch * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for ch in 0..c {
            let e = (x[ch * n + v] - max).exp();
            out[ch * n + v] = e;
            total += e;
        }
        for ch in 0..c {
            out[ch * n + v] /= total;
        }
    }
    let value = Tensor::new(g.shape(input).clone(), out)?;
    Ok(g.record(value, vec![input], Box::new(SoftmaxOp { channels: c })))
}

struct SoftmaxOp {
    channels: usize,
}

impl Backward for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = self.channels;
        let (y, dy) = (output.data(), grad.data());
        let n = y.len() / c;
        let mut dx = vec![0.0; y.len()];
        for v in 0..n {
            let dot: f64 = (0..c).map(|ch| y[ch * n + v] * dy[ch * n + v]).sum();
            for ch in 0..c {
                let i = ch * n + v;
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
        vec![Some(Tensor::new(grad.shape().clone(), dx).expect("same shape"))]
    }
}
