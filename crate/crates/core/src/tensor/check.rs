use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Largest relative disagreement between an analytic gradient and central
/// differences of `eval`, over `indices` (all elements when `None`).
///
/// The per-element error is `|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)`.
pub fn gradient_error(
    x: &Tensor,
    analytic: &Tensor,
    indices: Option<&[usize]>,
    eps: f64,
    mut eval: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    if x.shape() != analytic.shape() {
        return Err(Error::shape("analytic gradient shape differs from x"));
    }
    if !analytic.is_finite() {
        return Err(Error::Numeric("analytic gradient is not finite".into()));
    }
    let all: Vec<usize>;
    let indices = match indices {
        Some(idx) => idx,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while perturbing element {i}"
            )));
        }
        let fd = (plus - minus) / (2.0 * eps);
        let ad = analytic.data()[i];
        let err = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks the tape's gradient of a scalar function against central
/// differences. `f` builds the loss from the leaf holding `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic = g.grad_or_zeros(leaf);
    gradient_error(x, &analytic, None, eps, |probe| {
        let mut g = Graph::new();
        let leaf = g.input(probe.clone());
        let loss = f(&mut g, leaf)?;
        g.value(loss).item()
    })
}

/// Deterministic weights with magnitudes in `[0.5, 1.5]` and random signs.
///
/// `mean(w * y)` over such weights is a probe loss whose gradient has no
/// elements near zero, which keeps relative finite-difference errors
/// meaningful.
pub fn probe_weights(dims: &[usize], seed: u64) -> Result<Tensor> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(dims.to_vec(), data)
}

/// Records `mean(w * y)` for probe weights `w` of `y`'s shape.
pub fn probe_loss(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let w = probe_weights(g.shape(y).dims(), seed)?;
    let wi = g.input(w);
    let p = g.mul(y, wi)?;
    Ok(g.reduce_mean(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn analytic_mean_square_is_tight() {
        let x = Tensor::from_vec([5], vec![0.3, -1.1, 2.0, 0.7, -0.2]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let sq = g.square(x)?;
                Ok(g.reduce_mean(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec([3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(|g, _| Ok(g.constant(Shape::scalar(), 4.0)), &x, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_eps_and_nan() {
        let x = Tensor::from_vec([1], vec![1.0]).unwrap();
        let sq = |g: &mut Graph, x| {
            let s = g.square(x)?;
            Ok(g.reduce_mean(s))
        };
        assert!(matches!(finite_diff_check(sq, &x, 0.0), Err(Error::Contract(_))));
        let nan = Tensor::from_vec([1], vec![f64::NAN]).unwrap();
        assert!(matches!(finite_diff_check(sq, &nan, 1e-6), Err(Error::Numeric(_))));
    }
}
