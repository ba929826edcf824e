//! Spatial transformer: `out(c, x) = image(c, x + u(x))`.
//!
//! Sample coordinates outside the grid are clamped to its edge, so a
//! constant image stays constant under any displacement. Trilinear sampling
//! is written as nested lerps that skip a zero fraction; integer sample
//! positions therefore reproduce voxel values bit-exactly.

use rayon::prelude::*;

use super::{lin, DisplacementField};
use crate::error::{Error, Result};
use crate::tensor::{Backward, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    /// Differentiable w.r.t. both the image and the displacement.
    Trilinear,
    /// Evaluation only; the result is recorded as a constant.
    Nearest,
}

impl std::str::FromStr for Interp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trilinear" => Ok(Interp::Trilinear),
            "nearest" => Ok(Interp::Nearest),
            other => Err(Error::Contract(format!("unknown interpolation {other:?}"))),
        }
    }
}

/// Linear interpolation stencil along one axis.
#[derive(Clone, Copy, Debug)]
struct Axis {
    i0: usize,
    i1: usize,
    frac: f64,
    /// d(sample position)/d(displacement): 0 once the coordinate is clamped.
    live: f64,
}

impl Axis {
    fn new(raw: f64, n: usize) -> Axis {
        let hi = (n - 1) as f64;
        let (p, live) = if raw < 0.0 {
            (0.0, 0.0)
        } else if raw > hi {
            (hi, 0.0)
        } else {
            (raw, 1.0)
        };
        let base = p.floor();
        let i0 = base as usize;
        Axis {
            i0,
            i1: (i0 + 1).min(n - 1),
            frac: p - base,
            live,
        }
    }

    fn nearest(raw: f64, n: usize) -> usize {
        raw.clamp(0.0, (n - 1) as f64).round() as usize
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Stencils for every voxel, in (z, y, x) axis order.
fn stencils(disp: &[f64], dims: [usize; 3]) -> Vec<[Axis; 3]> {
    let n = dims.iter().product::<usize>();
    let (ux, uy, uz) = (&disp[..n], &disp[n..2 * n], &disp[2 * n..3 * n]);
    let mut out = Vec::with_capacity(n);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = lin(z, y, x, dims);
                out.push([
                    Axis::new(z as f64 + uz[i], dims[0]),
                    Axis::new(y as f64 + uy[i], dims[1]),
                    Axis::new(x as f64 + ux[i], dims[2]),
                ]);
            }
        }
    }
    out
}

#[inline]
fn sample(plane: &[f64], s: &[Axis; 3], dims: [usize; 3]) -> f64 {
    let [az, ay, ax] = *s;
    let row = |z: usize, y: usize| lerp(plane[lin(z, y, ax.i0, dims)], plane[lin(z, y, ax.i1, dims)], ax.frac);
    let near = if ay.frac == 0.0 {
        row(az.i0, ay.i0)
    } else {
        lerp(row(az.i0, ay.i0), row(az.i0, ay.i1), ay.frac)
    };
    if az.frac == 0.0 {
        return near;
    }
    let far = if ay.frac == 0.0 {
        row(az.i1, ay.i0)
    } else {
        lerp(row(az.i1, ay.i0), row(az.i1, ay.i1), ay.frac)
    };
    lerp(near, far, az.frac)
}

fn check_shapes(image: &Tensor, disp: &Tensor) -> Result<(usize, [usize; 3])> {
    let (c, spatial) = image.shape().volume()?;
    let (dc, dspatial) = disp.shape().volume()?;
    if dc != 3 {
        return Err(Error::shape(format!("displacement has {dc} channels, expected 3")));
    }
    if spatial != dspatial {
        return Err(Error::shape(format!(
            "image spatial shape {spatial:?} differs from displacement {dspatial:?}"
        )));
    }
    Ok((c, spatial))
}

fn resample(image: &Tensor, disp: &Tensor, interp: Interp) -> Result<(Tensor, Option<Vec<[Axis; 3]>>)> {
    let (c, dims) = check_shapes(image, disp)?;
    if !disp.is_finite() {
        return Err(Error::Numeric("displacement is not finite".into()));
    }
    let n = dims.iter().product::<usize>();
    let x = image.data();
    let mut out = vec![0.0; c * n];
    match interp {
        Interp::Trilinear => {
            let st = stencils(disp.data(), dims);
            out.par_chunks_mut(n).enumerate().for_each(|(ch, dst)| {
                let plane = &x[ch * n..(ch + 1) * n];
                for (o, s) in dst.iter_mut().zip(&st) {
                    *o = sample(plane, s, dims);
                }
            });
            Ok((Tensor::new(image.shape().clone(), out)?, Some(st)))
        }
        Interp::Nearest => {
            let u = disp.data();
            let mut src = Vec::with_capacity(n);
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for xx in 0..dims[2] {
                        let i = lin(z, y, xx, dims);
                        src.push(lin(
                            Axis::nearest(z as f64 + u[2 * n + i], dims[0]),
                            Axis::nearest(y as f64 + u[n + i], dims[1]),
                            Axis::nearest(xx as f64 + u[i], dims[2]),
                            dims,
                        ));
                    }
                }
            }
            for ch in 0..c {
                for (i, &s) in src.iter().enumerate() {
                    out[ch * n + i] = x[ch * n + s];
                }
            }
            Ok((Tensor::new(image.shape().clone(), out)?, None))
        }
    }
}

/// Warps a plain tensor outside any graph.
pub fn warp_tensor(image: &Tensor, disp: &DisplacementField, interp: Interp) -> Result<Tensor> {
    resample(image, disp.as_tensor(), interp).map(|(t, _)| t)
}

/// Records `image(x + u(x))`. `disp` is a `[3, D, H, W]` node.
pub fn warp(g: &mut Graph, image: NodeId, disp: NodeId, interp: Interp) -> Result<NodeId> {
    let (value, st) = resample(g.value(image), g.value(disp), interp)?;
    match (interp, st) {
        (Interp::Trilinear, Some(stencils)) => Ok(g.record(value, vec![image, disp], Box::new(WarpOp { stencils }))),
        _ => Ok(g.input(value)),
    }
}

struct WarpOp {
    stencils: Vec<[Axis; 3]>,
}

impl Backward for WarpOp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let image = inputs[0];
        let (c, dims) = image.shape().volume().expect("validated in forward");
        let n = dims.iter().product::<usize>();
        let (x, dy) = (image.data(), grad.data());

        let mut dimage = vec![0.0; c * n];
        dimage.par_chunks_mut(n).enumerate().for_each(|(ch, dst)| {
            let gy = &dy[ch * n..(ch + 1) * n];
            for (s, &gv) in self.stencils.iter().zip(gy) {
                if gv == 0.0 {
                    continue;
                }
                let [az, ay, ax] = *s;
                for (zi, wz) in [(az.i0, 1.0 - az.frac), (az.i1, az.frac)] {
                    for (yi, wy) in [(ay.i0, 1.0 - ay.frac), (ay.i1, ay.frac)] {
                        for (xi, wx) in [(ax.i0, 1.0 - ax.frac), (ax.i1, ax.frac)] {
                            let w = wz * wy * wx;
                            if w != 0.0 {
                                dst[lin(zi, yi, xi, dims)] += gv * w;
                            }
                        }
                    }
                }
            }
        });

        let mut ddisp = vec![0.0; 3 * n];
        let (dux, rest) = ddisp.split_at_mut(n);
        let (duy, duz) = rest.split_at_mut(n);
        for (i, s) in self.stencils.iter().enumerate() {
            let [az, ay, ax] = *s;
            let (fz, fy, fx) = (az.frac, ay.frac, ax.frac);
            let (mut gz, mut gy, mut gx) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let gv = dy[ch * n + i];
                if gv == 0.0 {
                    continue;
                }
                let plane = &x[ch * n..(ch + 1) * n];
                let v = |z, y, xx| plane[lin(z, y, xx, dims)];
                let (v000, v001) = (v(az.i0, ay.i0, ax.i0), v(az.i0, ay.i0, ax.i1));
                let (v010, v011) = (v(az.i0, ay.i1, ax.i0), v(az.i0, ay.i1, ax.i1));
                let (v100, v101) = (v(az.i1, ay.i0, ax.i0), v(az.i1, ay.i0, ax.i1));
                let (v110, v111) = (v(az.i1, ay.i1, ax.i0), v(az.i1, ay.i1, ax.i1));
                let c00 = v000 + fx * (v001 - v000);
                let c01 = v010 + fx * (v011 - v010);
                let c10 = v100 + fx * (v101 - v100);
                let c11 = v110 + fx * (v111 - v110);
                let c0 = c00 + fy * (c01 - c00);
                let c1 = c10 + fy * (c11 - c10);
                gz += gv * (c1 - c0);
                gy += gv * ((1.0 - fz) * (c01 - c00) + fz * (c11 - c10));
                let e0 = (1.0 - fy) * (v001 - v000) + fy * (v011 - v010);
                let e1 = (1.0 - fy) * (v101 - v100) + fy * (v111 - v110);
                gx += gv * ((1.0 - fz) * e0 + fz * e1);
            }
            duz[i] = gz * az.live;
            duy[i] = gy * ay.live;
            dux[i] = gx * ax.live;
        }

        vec![
            Some(Tensor::new(image.shape().clone(), dimage).expect("image shape")),
            Some(Tensor::new(inputs[1].shape().clone(), ddisp).expect("field shape")),
        ]
    }
}
