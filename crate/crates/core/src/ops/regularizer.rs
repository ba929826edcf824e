use super::{lin, DisplacementField};
use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, NodeId, Tensor};

/// Per axis (z, y, x): the linear-index stride and the number of positions
/// that have a forward neighbour.
fn axes(dims: [usize; 3]) -> Result<[(usize, usize); 3]> {
    if dims.iter().any(|&n| n < 2) {
        return Err(Error::shape(format!(
            "diffusion penalty needs every spatial extent >= 2, got {dims:?}"
        )));
    }
    let n = dims.iter().product::<usize>();
    Ok([
        (dims[1] * dims[2], n / dims[0] * (dims[0] - 1)),
        (dims[2], n / dims[1] * (dims[1] - 1)),
        (1, n / dims[2] * (dims[2] - 1)),
    ])
}

/// Visits every position `p` whose forward neighbour along `axis` exists.
fn for_interior(dims: [usize; 3], axis: usize, mut f: impl FnMut(usize)) {
    let mut hi = dims;
    hi[axis] -= 1;
    for z in 0..hi[0] {
        for y in 0..hi[1] {
            for x in 0..hi[2] {
                f(lin(z, y, x, dims));
            }
        }
    }
}

fn penalty(u: &[f64], dims: [usize; 3]) -> Result<f64> {
    let ax = axes(dims)?;
    let n = dims.iter().product::<usize>();
    let mut total = 0.0;
    for c in 0..3 {
        let comp = &u[c * n..(c + 1) * n];
        for (a, &(stride, count)) in ax.iter().enumerate() {
            let mut acc = 0.0;
            for_interior(dims, a, |p| {
                let d = comp[p + stride] - comp[p];
                acc += d * d;
            });
            total += acc / count as f64;
        }
    }
    Ok(total / 9.0)
}

/// Mean squared forward difference of the field: the average, over the
/// nine (component, axis) pairs, of the mean of `(u_c(p + e_a) - u_c(p))^2`
/// over positions where the neighbour exists.
pub fn diffusion_penalty(g: &mut Graph, disp: NodeId) -> Result<NodeId> {
    let (c, dims) = g.shape(disp).volume()?;
    if c != 3 {
        return Err(Error::shape(format!("displacement has {c} channels, expected 3")));
    }
    let value = penalty(g.value(disp).data(), dims)?;
    Ok(g.record(Tensor::scalar(value), vec![disp], Box::new(DiffusionOp { dims })))
}

pub fn diffusion_penalty_value(disp: &DisplacementField) -> Result<f64> {
    penalty(disp.as_tensor().data(), disp.spatial())
}

struct DiffusionOp {
    dims: [usize; 3],
}

impl Backward for DiffusionOp {
    fn name(&self) -> &'static str {
        "diffusion_penalty"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let dims = self.dims;
        let ax = axes(dims).expect("validated in forward");
        let n = dims.iter().product::<usize>();
        let u = inputs[0].data();
        let g0 = grad.data()[0];
        let mut du = vec![0.0; 3 * n];
        for c in 0..3 {
            let comp = &u[c * n..(c + 1) * n];
            let dst = &mut du[c * n..(c + 1) * n];
            for (a, &(stride, count)) in ax.iter().enumerate() {
                let k = 2.0 * g0 / (9.0 * count as f64);
                for_interior(dims, a, |p| {
                    let w = k * (comp[p + stride] - comp[p]);
                    dst[p + stride] += w;
                    dst[p] -= w;
                });
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().clone(), du).expect("field shape"))]
    }
}
