use serde::{Serialize, Serializer};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Mean and sample standard deviation (`n - 1`); a single value has sd 0.
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some((mean, (ss / (n - 1) as f64).sqrt()))
}

/// Result of a two-sided paired t-test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TTest {
    /// Infinite (serialized as `null`) when the differences have zero spread
    /// but a nonzero mean.
    #[serde(serialize_with = "finite_or_null")]
    pub t: f64,
    pub p: f64,
    pub n: usize,
    pub degenerate: bool,
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

/// Paired samples t-test on `d_i = x_i - y_i` with `n - 1` degrees of
/// freedom. The two-sided p-value is `I_{v/(v+t^2)}(v/2, 1/2)`.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Contract(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite paired difference".into()));
    }
    let (mean, sd) = mean_sd(&d).expect("n >= 2");
    if sd == 0.0 {
        if mean == 0.0 {
            return Ok(TTest {
                t: 0.0,
                p: 1.0,
                n,
                degenerate: false,
            });
        }
        return Ok(TTest {
            t: f64::INFINITY.copysign(mean),
            p: 0.0,
            n,
            degenerate: true,
        });
    }
    let t = mean * (n as f64).sqrt() / sd;
    let dof = (n - 1) as f64;
    let p = beta_reg(dof / 2.0, 0.5, dof / (dof + t * t));
    Ok(TTest {
        t,
        p,
        n,
        degenerate: false,
    })
}
