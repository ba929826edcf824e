use rayon::prelude::*;

use super::lin;
use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, NodeId, Shape, Tensor};

/// Number of taps in a `3 x 3 x 3` kernel.
pub const KERNEL_VOLUME: usize = 27;

/// Weights `[C_out, C_in, 3, 3, 3]` and bias `[C_out]` of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn zeros(c_in: usize, c_out: usize) -> Result<Self> {
        Ok(ConvParams {
            weight: Tensor::zeros(Shape::new([c_out, c_in, 3, 3, 3])?),
            bias: Tensor::zeros(Shape::new([c_out])?),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Stride-1, zero-padded ("same") 3-D cross-correlation.
pub fn conv3d(g: &mut Graph, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let (c_in, spatial) = g.shape(input).volume()?;
    let wdims = g.shape(weight).dims().to_vec();
    let [c_out, wc_in, 3, 3, 3] = wdims[..] else {
        return Err(Error::shape(format!(
            "conv3d kernels must be [C_out, C_in, 3, 3, 3], got {wdims:?}"
        )));
    };
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv3d expects {wc_in} input channels, input has {c_in}"
        )));
    }
    if g.shape(bias).dims() != [c_out] {
        return Err(Error::shape(format!(
            "conv3d bias must be [{c_out}], got {}",
            g.shape(bias)
        )));
    }
    let out = forward(
        g.value(input).data(),
        g.value(weight).data(),
        g.value(bias).data(),
        c_in,
        c_out,
        spatial,
    );
    let [d, h, w] = spatial;
    let value = Tensor::from_vec([c_out, d, h, w], out)?;
    Ok(g.record(
        value,
        vec![input, weight, bias],
        Box::new(Conv3dOp { c_in, c_out, spatial }),
    ))
}

/// Valid output range along one axis for a tap offset of `o`.
#[inline]
fn span(n: usize, o: isize) -> (usize, usize) {
    let lo = if o < 0 { (-o) as usize } else { 0 };
    let hi = if o > 0 { n - o as usize } else { n };
    (lo, hi.max(lo))
}

/// `dst[p] += k * src[p + off]` over every `p` where `p + off` is in range.
fn axpy_shifted(dst: &mut [f64], src: &[f64], k: f64, off: [isize; 3], dims: [usize; 3]) {
    if k == 0.0 {
        return;
    }
    let (d0, d1) = span(dims[0], off[0]);
    let (h0, h1) = span(dims[1], off[1]);
    let (w0, w1) = span(dims[2], off[2]);
    if w0 >= w1 {
        return;
    }
    for d in d0..d1 {
        let sd = (d as isize + off[0]) as usize;
        for h in h0..h1 {
            let sh = (h as isize + off[1]) as usize;
            let o = lin(d, h, w0, dims);
            let s = lin(sd, sh, (w0 as isize + off[2]) as usize, dims);
            let n = w1 - w0;
            for (a, b) in dst[o..o + n].iter_mut().zip(&src[s..s + n]) {
                *a += k * b;
            }
        }
    }
}

/// `sum_p a[p] * b[p + off]`.
fn dot_shifted(a: &[f64], b: &[f64], off: [isize; 3], dims: [usize; 3]) -> f64 {
    let (d0, d1) = span(dims[0], off[0]);
    let (h0, h1) = span(dims[1], off[1]);
    let (w0, w1) = span(dims[2], off[2]);
    let mut acc = 0.0;
    if w0 >= w1 {
        return acc;
    }
    for d in d0..d1 {
        let sd = (d as isize + off[0]) as usize;
        for h in h0..h1 {
            let sh = (h as isize + off[1]) as usize;
            let o = lin(d, h, w0, dims);
            let s = lin(sd, sh, (w0 as isize + off[2]) as usize, dims);
            let n = w1 - w0;
            for (x, y) in a[o..o + n].iter().zip(&b[s..s + n]) {
                acc += x * y;
            }
        }
    }
    acc
}

#[inline]
fn tap_offset(k: usize) -> [isize; 3] {
    [(k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1]
}

fn forward(x: &[f64], w: &[f64], b: &[f64], c_in: usize, c_out: usize, dims: [usize; 3]) -> Vec<f64> {
    let plane = dims.iter().product::<usize>();
    let mut out = vec![0.0; c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(co, dst)| {
        dst.fill(b[co]);
        for ci in 0..c_in {
            let src = &x[ci * plane..(ci + 1) * plane];
            let kernel = &w[(co * c_in + ci) * KERNEL_VOLUME..][..KERNEL_VOLUME];
            for (k, &kv) in kernel.iter().enumerate() {
                axpy_shifted(dst, src, kv, tap_offset(k), dims);
            }
        }
    });
    out
}

struct Conv3dOp {
    c_in: usize,
    c_out: usize,
    spatial: [usize; 3],
}

impl Backward for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let dy = grad.data();
        let dims = self.spatial;
        let plane = dims.iter().product::<usize>();
        let (c_in, c_out) = (self.c_in, self.c_out);

        let mut dx = vec![0.0; c_in * plane];
        dx.par_chunks_mut(plane).enumerate().for_each(|(ci, dst)| {
            for co in 0..c_out {
                let src = &dy[co * plane..(co + 1) * plane];
                let kernel = &w[(co * c_in + ci) * KERNEL_VOLUME..][..KERNEL_VOLUME];
                for (k, &kv) in kernel.iter().enumerate() {
                    let [a, b, c] = tap_offset(k);
                    axpy_shifted(dst, src, kv, [-a, -b, -c], dims);
                }
            }
        });

        let mut dw = vec![0.0; c_out * c_in * KERNEL_VOLUME];
        dw.par_chunks_mut(c_in * KERNEL_VOLUME)
            .enumerate()
            .for_each(|(co, dst)| {
                let gy = &dy[co * plane..(co + 1) * plane];
                for ci in 0..c_in {
                    let src = &x[ci * plane..(ci + 1) * plane];
                    for k in 0..KERNEL_VOLUME {
                        dst[ci * KERNEL_VOLUME + k] = dot_shifted(gy, src, tap_offset(k), dims);
                    }
                }
            });

        let db: Vec<f64> = (0..c_out)
            .map(|co| dy[co * plane..(co + 1) * plane].iter().sum())
            .collect();

        vec![
            Some(Tensor::new(inputs[0].shape().clone(), dx).expect("input shape")),
            Some(Tensor::new(inputs[1].shape().clone(), dw).expect("weight shape")),
            Some(Tensor::new(inputs[2].shape().clone(), db).expect("bias shape")),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = dims.iter().product();
        Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct evaluation of the correlation sum, one output voxel at a time.
    fn brute_force(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (c_in, [d, h, wd]) = x.shape().volume().unwrap();
        let c_out = w.dims()[0];
        let mut out = Vec::new();
        for co in 0..c_out {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[co];
                        for ci in 0..c_in {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (sz, sy, sx) = (
                                            z as isize + kz as isize - 1,
                                            y as isize + ky as isize - 1,
                                            xx as isize + kx as isize - 1,
                                        );
                                        if sz < 0
                                            || sy < 0
                                            || sx < 0
                                            || sz >= d as isize
                                            || sy >= h as isize
                                            || sx >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xv =
                                            x.data()[((ci * d + sz as usize) * h + sy as usize) * wd + sx as usize];
                                        let wv = w.data()[(((co * c_in + ci) * 3 + kz) * 3 + ky) * 3 + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    fn run(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = conv3d(&mut g, xi, wi, bi).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 4, 5, 3], &mut rng);
        let mut w = Tensor::zeros(Shape::new([1, 1, 3, 3, 3]).unwrap());
        w.data_mut()[13] = 1.0;
        let b = Tensor::zeros(Shape::new([1]).unwrap());
        assert_eq!(run(&x, &w, &b), x);
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let x = Tensor::full(Shape::new([1, 3, 3, 3]).unwrap(), 1.0);
        let w = Tensor::full(Shape::new([1, 1, 3, 3, 3]).unwrap(), 1.0);
        let b = Tensor::zeros(Shape::new([1]).unwrap());
        let y = run(&x, &w, &b);
        assert_eq!(y.data()[13], 27.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 4, 3, 5], &mut rng);
        let w = random(&[2, 3, 3, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let y = run(&x, &w, &b);
        for (a, e) in y.data().iter().zip(brute_force(&x, &w, &b)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(Shape::new([2, 2, 2, 2]).unwrap()));
        let w = g.input(Tensor::zeros(Shape::new([1, 3, 3, 3, 3]).unwrap()));
        let b = g.input(Tensor::zeros(Shape::new([1]).unwrap()));
        assert!(matches!(conv3d(&mut g, x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 4, 4, 4], &mut rng);
        let w = random(&[2, 2, 3, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let r = random(&[2, 4, 4, 4], &mut rng);
        let loss = |g: &mut Graph, y: NodeId| -> Result<NodeId> {
            let ri = g.input(r.clone());
            let p = g.mul(y, ri)?;
            Ok(g.reduce_mean(p))
        };
        let (w1, b1) = (w.clone(), b.clone());
        let ex = finite_diff_check(
            |g, xi| {
                let (wi, bi) = (g.input(w1.clone()), g.input(b1.clone()));
                let y = conv3d(g, xi, wi, bi)?;
                loss(g, y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        let (x2, b2) = (x.clone(), b.clone());
        let ew = finite_diff_check(
            |g, wi| {
                let (xi, bi) = (g.input(x2.clone()), g.input(b2.clone()));
                let y = conv3d(g, xi, wi, bi)?;
                loss(g, y)
            },
            &w,
            1e-6,
        )
        .unwrap();
        let eb = finite_diff_check(
            |g, bi| {
                let (xi, wi) = (g.input(x.clone()), g.input(w.clone()));
                let y = conv3d(g, xi, wi, bi)?;
                loss(g, y)
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "{ex} {ew} {eb}");
    }
}
