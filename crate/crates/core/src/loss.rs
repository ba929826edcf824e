//! Terms of the joint objective and their weighted composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::ops::diffusion_penalty;
use crate::tensor::{Graph, NodeId, Tensor};

/// Smoothing constant in the soft-overlap denominator.
pub const OVERLAP_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Image similarity weight.
    pub alpha: f64,
    /// Deformation smoothness weight.
    pub beta: f64,
    /// Warped-label consistency weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 10.0,
            beta: 0.1,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub reg: f64,
    pub def: f64,
    pub cons: f64,
    pub total: f64,
}

/// `((seg + α·reg) + β·def) + γ·cons`, evaluated in that order.
pub fn total_loss(seg: f64, reg: f64, def: f64, cons: f64, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    for (name, v) in [("seg", seg), ("reg", reg), ("def", def), ("cons", cons)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {v}")));
        }
    }
    let total = ((seg + w.alpha * reg) + w.beta * def) + w.gamma * cons;
    Ok(LossBreakdown {
        seg,
        reg,
        def,
        cons,
        total,
    })
}

/// Graph nodes of the active terms; absent terms contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub seg: Option<NodeId>,
    pub reg: Option<NodeId>,
    pub def: Option<NodeId>,
    pub cons: Option<NodeId>,
}

impl LossTerms {
    /// Records the weighted sum with the same operation order as
    /// [`total_loss`], so both agree bit for bit.
    pub fn compose(&self, g: &mut Graph, w: &LossWeights) -> Result<NodeId> {
        w.validate()?;
        let weighted = [
            self.seg.map(|n| (n, None)),
            self.reg.map(|n| (n, Some(w.alpha))),
            self.def.map(|n| (n, Some(w.beta))),
            self.cons.map(|n| (n, Some(w.gamma))),
        ];
        let mut acc: Option<NodeId> = None;
        for (node, k) in weighted.into_iter().flatten() {
            let term = match k {
                Some(k) => g.scale(node, k),
                None => node,
            };
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        acc.ok_or_else(|| Error::Contract("objective has no active terms".into()))
    }

    /// Scalar values of the active terms (0 for absent ones) and the total.
    pub fn breakdown(&self, g: &Graph, w: &LossWeights) -> Result<LossBreakdown> {
        let v = |n: Option<NodeId>| n.map(|n| g.value(n).item()).transpose().map(|v| v.unwrap_or(0.0));
        total_loss(v(self.seg)?, v(self.reg)?, v(self.def)?, v(self.cons)?, w)
    }
}

/// `1 - (2·Σ w·p·g + ε₀) / (Σ w·p + Σ w·g + ε₀)` with an optional per-voxel
/// weight map (uniform when `None`). Empty prediction and empty label give 0.
pub fn soft_overlap(g: &mut Graph, prob_fg: NodeId, label: &BinaryMask, weights: Option<&Tensor>) -> Result<NodeId> {
    let (c, dims) = g.shape(prob_fg).volume()?;
    if c != 1 || dims != label.dims() {
        return Err(Error::shape(format!(
            "overlap of {} against a {:?} label",
            g.shape(prob_fg),
            label.dims()
        )));
    }
    let mut target = label.to_volume();
    let mut p = prob_fg;
    if let Some(w) = weights {
        if w.shape() != target.shape() {
            return Err(Error::shape(format!(
                "weight map {} does not match {}",
                w.shape(),
                target.shape()
            )));
        }
        for (t, wv) in target.data_mut().iter_mut().zip(w.data()) {
            *t *= wv;
        }
        let wn = g.input(w.clone());
        p = g.mul(p, wn)?;
    }
    // With weights folded into both p and g, Σ p·g needs the unweighted label.
    let label_node = g.input(label.to_volume());
    let target_node = g.input(target);
    let inter = g.mul(p, label_node)?;
    let inter = g.sum(inter);
    let sp = g.sum(p);
    let sg = g.sum(target_node);
    let den = g.add(sp, sg)?;
    let den = g.add_scalar(den, OVERLAP_EPS);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, OVERLAP_EPS);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Segmentation accuracy term on the source foreground posterior.
pub fn l_seg(g: &mut Graph, prob_fg: NodeId, label: &BinaryMask, weights: Option<&Tensor>) -> Result<NodeId> {
    soft_overlap(g, prob_fg, label, weights)
}

/// Consistency term: warped source posterior against the target label.
pub fn l_cons(g: &mut Graph, warped_prob_fg: NodeId, label_t: &BinaryMask, weights: Option<&Tensor>) -> Result<NodeId> {
    soft_overlap(g, warped_prob_fg, label_t, weights)
}

/// Mean squared difference between the warped source and the target image.
pub fn l_reg(g: &mut Graph, warped: NodeId, target: NodeId) -> Result<NodeId> {
    let d = g.sub(warped, target)?;
    let sq = g.square(d)?;
    Ok(g.reduce_mean(sq))
}

/// Diffusion smoothness of the displacement.
pub fn l_def(g: &mut Graph, disp: NodeId) -> Result<NodeId> {
    diffusion_penalty(g, disp)
}

/// `1 + (w_fg - 1)·label`: uniform when `w_fg = 1`.
pub fn foreground_weight_map(label: &BinaryMask, w_fg: f64) -> Tensor {
    label.to_volume().map(|v| 1.0 + (w_fg - 1.0) * v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overlap(p: &[f64], gl: &[u8]) -> f64 {
        let n = p.len();
        let mut g = Graph::new();
        let pn = g.input(Tensor::from_vec([1, 1, 1, n], p.to_vec()).unwrap());
        let label = BinaryMask::new([1, 1, n], gl.to_vec()).unwrap();
        let l = soft_overlap(&mut g, pn, &label, None).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn overlap_examples() {
        assert!(overlap(&[1.0, 0.0, 1.0], &[1, 0, 1]).abs() < 1e-6);
        assert!((overlap(&[1.0, 0.0], &[0, 1]) - 1.0).abs() < 1e-6);
        assert!((overlap(&[1.0, 0.0], &[1, 1]) - 1.0 / 3.0).abs() < 1e-6);
        assert!(overlap(&[0.0, 0.0], &[0, 0]).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_change_nothing() {
        let mut g = Graph::new();
        let p = g.input(Tensor::from_vec([1, 1, 1, 3], vec![0.2, 0.9, 0.4]).unwrap());
        let label = BinaryMask::new([1, 1, 3], vec![0, 1, 1]).unwrap();
        let a = soft_overlap(&mut g, p, &label, None).unwrap();
        let w = foreground_weight_map(&label, 1.0);
        let b = soft_overlap(&mut g, p, &label, Some(&w)).unwrap();
        assert_eq!(g.value(a).item().unwrap(), g.value(b).item().unwrap());
        let w3 = foreground_weight_map(&label, 3.0);
        let c = soft_overlap(&mut g, p, &label, Some(&w3)).unwrap();
        // 1 - (2·3·1.3 + eps) / (3·1.3 + 0.2 + 6 + eps)
        let expect = 1.0 - (2.0 * 3.9 + OVERLAP_EPS) / (3.9 + 0.2 + 6.0 + OVERLAP_EPS);
        assert!((g.value(c).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let v = |g: &mut Graph, d: Vec<f64>| g.input(Tensor::from_vec([2], d).unwrap());
        let (a, b, c) = (
            v(&mut g, vec![0.0, 0.0]),
            v(&mut g, vec![1.0, 1.0]),
            v(&mut g, vec![0.0, 1.0]),
        );
        let ab = l_reg(&mut g, a, b).unwrap();
        let cb = l_reg(&mut g, c, b).unwrap();
        let bb = l_reg(&mut g, b, b).unwrap();
        assert_eq!(g.value(ab).item().unwrap(), 1.0);
        assert_eq!(g.value(cb).item().unwrap(), 0.5);
        assert_eq!(g.value(bb).item().unwrap(), 0.0);
    }

    #[test]
    fn composition_identity() {
        let w = LossWeights::default();
        let b = total_loss(0.2, 0.01, 0.5, 0.3, &w).unwrap();
        assert!((b.total - 0.65).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap().total, 0.0);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert_eq!(total_loss(0.37, 5.0, 2.0, 9.0, &zero).unwrap().total, 0.37);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, 0.0, &w),
            Err(Error::Numeric(_))
        ));
        assert!(total_loss(0.0, 0.0, 0.0, 0.0, &LossWeights { alpha: -1.0, ..w }).is_err());
    }

    #[test]
    fn graph_composition_matches_scalar_composition() {
        let w = LossWeights {
            alpha: 10.0,
            beta: 0.1,
            gamma: 1.0,
        };
        let mut g = Graph::new();
        let s = |g: &mut Graph, v: f64| g.input(Tensor::scalar(v));
        let terms = LossTerms {
            seg: Some(s(&mut g, 0.123)),
            reg: Some(s(&mut g, 0.0456)),
            def: Some(s(&mut g, 0.789)),
            cons: Some(s(&mut g, 0.321)),
        };
        let total = terms.compose(&mut g, &w).unwrap();
        let b = terms.breakdown(&g, &w).unwrap();
        assert_eq!(g.value(total).item().unwrap(), b.total);

        let reg_only = LossTerms {
            seg: None,
            cons: None,
            ..terms
        };
        let t = reg_only.compose(&mut g, &w).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 10.0 * 0.0456 + 0.1 * 0.789);
        assert!(LossTerms::default().compose(&mut g, &w).is_err());
    }
}
