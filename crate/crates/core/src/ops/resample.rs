use super::lin;
use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, NodeId, Tensor};

/// Non-overlapping `2 x 2 x 2` max pooling. On ties the first element in
/// row-major order wins and receives the whole gradient.
pub fn max_pool(g: &mut Graph, input: NodeId) -> Result<NodeId> {
    let (c, [d, h, w]) = g.shape(input).volume()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "max_pool needs even spatial extents, got {:?}",
            [d, h, w]
        )));
    }
    let src = [d, h, w];
    let dst = [d / 2, h / 2, w / 2];
    let (n_src, n_dst) = (d * h * w, dst.iter().product::<usize>());
    let x = g.value(input).data();
    let mut out = Vec::with_capacity(c * n_dst);
    let mut argmax = Vec::with_capacity(c * n_dst);
    for ch in 0..c {
        let plane = &x[ch * n_src..(ch + 1) * n_src];
        for z in 0..dst[0] {
            for y in 0..dst[1] {
                for xx in 0..dst[2] {
                    let mut best = lin(2 * z, 2 * y, 2 * xx, src);
                    for (dz, dy, dx) in BLOCK {
                        let i = lin(2 * z + dz, 2 * y + dy, 2 * xx + dx, src);
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                    out.push(plane[best]);
                    argmax.push(ch * n_src + best);
                }
            }
        }
    }
    let value = Tensor::from_vec([c, dst[0], dst[1], dst[2]], out)?;
    Ok(g.record(value, vec![input], Box::new(MaxPoolOp { argmax })))
}

const BLOCK: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

struct MaxPoolOp {
    argmax: Vec<usize>,
}

impl Backward for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max_pool"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(inputs[0].shape().clone());
        for (&src, &gv) in self.argmax.iter().zip(grad.data()) {
            dx.data_mut()[src] += gv;
        }
        vec![Some(dx)]
    }
}

/// Nearest-neighbour upsampling by two along every spatial axis.
pub fn upsample(g: &mut Graph, input: NodeId) -> Result<NodeId> {
    let (c, [d, h, w]) = g.shape(input).volume()?;
    let src = [d, h, w];
    let dst = [2 * d, 2 * h, 2 * w];
    let x = g.value(input).data();
    let (n_src, n_dst) = (d * h * w, dst.iter().product::<usize>());
    let mut out = vec![0.0; c * n_dst];
    for ch in 0..c {
        for z in 0..dst[0] {
            for y in 0..dst[1] {
                for xx in 0..dst[2] {
                    out[ch * n_dst + lin(z, y, xx, dst)] = x[ch * n_src + lin(z / 2, y / 2, xx / 2, src)];
                }
            }
        }
    }
    let value = Tensor::from_vec([c, dst[0], dst[1], dst[2]], out)?;
    Ok(g.record(value, vec![input], Box::new(UpsampleOp { src, channels: c })))
}

struct UpsampleOp {
    src: [usize; 3],
    channels: usize,
}

impl Backward for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let src = self.src;
        let dst = [2 * src[0], 2 * src[1], 2 * src[2]];
        let (n_src, n_dst) = (src.iter().product::<usize>(), dst.iter().product::<usize>());
        let dy = grad.data();
        let mut dx = vec![0.0; self.channels * n_src];
        for ch in 0..self.channels {
            for z in 0..src[0] {
                for y in 0..src[1] {
                    for x in 0..src[2] {
                        let acc: f64 = BLOCK
                            .iter()
                            .map(|&(a, b, c)| dy[ch * n_dst + lin(2 * z + a, 2 * y + b, 2 * x + c, dst)])
                            .sum();
                        dx[ch * n_src + lin(z, y, x, src)] = acc;
                    }
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().clone(), dx).expect("input shape"))]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_takes_block_max() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec([1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap());
        let y = max_pool(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[8.0]);

        let x = g.input(Tensor::full(Shape::new([2, 4, 2, 6]).unwrap(), 3.5));
        let y = max_pool(&mut g, x).unwrap();
        assert_eq!(g.shape(y).dims(), &[2, 2, 1, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 3.5));

        let x = g.input(Tensor::zeros(Shape::new([1, 3, 2, 2]).unwrap()));
        assert!(matches!(max_pool(&mut g, x), Err(Error::Shape(_))));
    }

    #[test]
    fn tie_routes_gradient_to_first_element() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(Shape::new([1, 2, 2, 2]).unwrap(), 1.0));
        let y = max_pool(&mut g, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let mut expect = [0.0; 8];
        expect[0] = 1.0;
        assert_eq!(g.grad(x).unwrap().data(), &expect);

        // Same routing as when element 0 is the unique maximum.
        let mut g2 = Graph::new();
        let mut bumped = Tensor::full(Shape::new([1, 2, 2, 2]).unwrap(), 1.0);
        bumped.data_mut()[0] += 1e-9;
        let x2 = g2.param(bumped);
        let y2 = max_pool(&mut g2, x2).unwrap();
        let s2 = g2.sum(y2);
        g2.backward(s2).unwrap();
        assert_eq!(g2.grad(x2).unwrap(), g.grad(x).unwrap());
    }

    #[test]
    fn upsample_replicates_and_sums_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(Shape::new([1, 1, 1, 1]).unwrap(), 1.0));
        let y = upsample(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 8]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn pool_inverts_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..2 * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::from_vec([2, 3, 3, 3], data).unwrap();
        let mut g = Graph::new();
        let x = g.input(t.clone());
        let up = upsample(&mut g, x).unwrap();
        let back = max_pool(&mut g, up).unwrap();
        assert_eq!(g.value(back), &t);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_vec([2, 4, 4, 4], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let err = finite_diff_check(
            |g, xi| {
                let p = max_pool(g, xi)?;
                let sq = g.square(p)?;
                Ok(g.reduce_mean(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let x = Tensor::from_vec([2, 2, 2, 2], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let r = Tensor::from_vec([2, 4, 4, 4], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let err = finite_diff_check(
            |g, xi| {
                let u = upsample(g, xi)?;
                let ri = g.input(r.clone());
                let p = g.mul(u, ri)?;
                let sq = g.square(p)?;
                Ok(g.reduce_mean(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
