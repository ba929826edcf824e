use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, NodeId, Tensor};

/// Channel-axis concatenation, `a` first.
pub fn concat_channels(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let value = g.value(a).concat_channels(g.value(b))?;
    let split = g.value(a).numel();
    Ok(g.record(value, vec![a, b], Box::new(ConcatOp { split })))
}

struct ConcatOp {
    split: usize,
}

impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (lo, hi) = grad.data().split_at(self.split);
        vec![
            Some(Tensor::new(inputs[0].shape().clone(), lo.to_vec()).expect("a shape")),
            Some(Tensor::new(inputs[1].shape().clone(), hi.to_vec()).expect("b shape")),
        ]
    }
}

/// Channels `start..start + len` of a volume.
pub fn slice_channels(g: &mut Graph, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
    let value = g.value(input).channels(start, len)?;
    let (c, _) = g.shape(input).volume()?;
    if c == 0 {
        return Err(Error::shape("empty volume"));
    }
    let plane = g.value(input).numel() / c;
    Ok(g.record(value, vec![input], Box::new(SliceOp { offset: start * plane })))
}

struct SliceOp {
    offset: usize,
}

impl Backward for SliceOp {
    fn name(&self) -> &'static str {
        "slice_channels"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut full = Tensor::zeros(inputs[0].shape().clone());
        full.data_mut()[self.offset..self.offset + grad.numel()].copy_from_slice(grad.data());
        vec![Some(full)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn concat_order_and_gradient_split() {
        let mut g = Graph::new();
        let a = g.param(Tensor::full(Shape::new([1, 2, 2, 2]).unwrap(), 1.0));
        let b = g.param(Tensor::full(Shape::new([1, 2, 2, 2]).unwrap(), 2.0));
        let c = concat_channels(&mut g, a, b).unwrap();
        assert_eq!(g.shape(c).dims(), &[2, 2, 2, 2]);
        assert!(g.value(c).data()[..8].iter().all(|&v| v == 1.0));
        let w = g.input(Tensor::from_vec([2, 2, 2, 2], (0..16).map(|i| i as f64).collect()).unwrap());
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        let ga: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let gb: Vec<f64> = (8..16).map(|i| i as f64).collect();
        assert_eq!(g.grad(a).unwrap().data(), ga.as_slice());
        assert_eq!(g.grad(b).unwrap().data(), gb.as_slice());
    }

    #[test]
    fn concat_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(Shape::new([1, 2, 2, 2]).unwrap()));
        let b = g.input(Tensor::zeros(Shape::new([1, 2, 2, 4]).unwrap()));
        assert!(matches!(concat_channels(&mut g, a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn slice_routes_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec([3, 1, 1, 2], (0..6).map(f64::from).collect()).unwrap());
        let s = slice_channels(&mut g, x, 1, 1).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 3.0]);
        let t = g.sum(s);
        g.backward(t).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(slice_channels(&mut g, x, 2, 2).is_err());
    }
}
