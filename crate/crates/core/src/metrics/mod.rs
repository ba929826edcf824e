//! Longitudinal evaluation: overlap accuracy, two-directional consistency,
//! chance-corrected agreement, scan-rescan FA reproducibility, endpoint error
//! and paired significance testing.

mod mask;
mod report;
mod stats;

pub use mask::BinaryMask;
pub use report::{build_report, compare_reports, Aggregate, CompareReport, EvalReport, PairRecord, METRIC_COLUMNS};
pub use stats::{mean_sd, paired_t_test, TTest};

use crate::error::{Error, Result};
use crate::ops::DisplacementField;
use crate::tensor::Tensor;

/// `2|a ∩ b| / (|a| + |b|)`; two empty masks agree perfectly (1).
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += usize::from(x & y);
        na += usize::from(x);
        nb += usize::from(y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Dice between `seg_t` and `seg_s` warped by `disp` (nearest neighbour).
/// `disp` maps target coordinates into the source grid.
pub fn consistency_pair(seg_t: &BinaryMask, seg_s: &BinaryMask, disp: &DisplacementField) -> Result<f64> {
    seg_t.same_dims(seg_s)?;
    if disp.spatial() != seg_s.dims() {
        return Err(Error::shape(format!(
            "field {:?} does not match masks {:?}",
            disp.spatial(),
            seg_s.dims()
        )));
    }
    dice(seg_t, &seg_s.warp(disp)?)
}

/// Cohen's kappa over the two classes {0, 1}.
pub fn kappa(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let n = a.data().len() as f64;
    let (mut agree, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        agree += usize::from(x == y);
        na += usize::from(x);
        nb += usize::from(y);
    }
    let p_o = agree as f64 / n;
    let (pa, pb) = (na as f64 / n, nb as f64 / n);
    let p_e = pa * pb + (1.0 - pa) * (1.0 - pb);
    if p_e == 1.0 {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Median FA over the mask; the mean of the two middle values for an even
/// count.
pub fn tract_median_fa(fa: &Tensor, mask: &BinaryMask) -> Result<f64> {
    let (c, dims) = fa.shape().volume()?;
    if c != 1 || dims != mask.dims() {
        return Err(Error::shape(format!(
            "FA volume {} does not match mask {:?}",
            fa.shape(),
            mask.dims()
        )));
    }
    let mut vals: Vec<f64> = fa
        .data()
        .iter()
        .zip(mask.data())
        .filter_map(|(&v, &m)| (m == 1).then_some(v))
        .collect();
    let n = vals.len();
    if n == 0 {
        return Err(Error::EmptyRegion("tract mask is empty".into()));
    }
    let (_, &mut upper, _) = vals.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        return Ok(upper);
    }
    let lower = vals[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(0.5 * (lower + upper))
}

/// Scan-rescan error `2 |a - b| / |a + b| * 100`, in percent.
pub fn repro_epsilon(fa1: f64, fa2: f64) -> Result<f64> {
    let denom = (fa1 + fa2).abs();
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Numeric(format!(
            "reproducibility error undefined for ({fa1}, {fa2})"
        )));
    }
    Ok(2.0 * (fa1 - fa2).abs() / denom * 100.0)
}

/// Mean Euclidean length of `est - gt` in voxels, over `roi` when given.
pub fn endpoint_error(est: &DisplacementField, gt: &DisplacementField, roi: Option<&BinaryMask>) -> Result<f64> {
    let dims = est.spatial();
    if gt.spatial() != dims || roi.is_some_and(|r| r.dims() != dims) {
        return Err(Error::shape("endpoint error operands differ in shape"));
    }
    let (a, b) = (est.as_tensor().data(), gt.as_tensor().data());
    let n = a.len() / 3;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if roi.is_some_and(|r| r.data()[i] == 0) {
            continue;
        }
        let sq: f64 = (0..3).map(|c| (a[c * n + i] - b[c * n + i]).powi(2)).sum();
        total += sq.sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyRegion("endpoint error ROI is empty".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new([1, 1, bits.len()], bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice(&a, &mask(&[0, 1, 1, 0])).unwrap(), 0.5);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert!(matches!(dice(&a, &mask(&[1])), Err(Error::Shape(_))));
    }

    #[test]
    fn kappa_examples() {
        let a = mask(&[1, 1, 0, 0, 0, 0, 0, 0]);
        let b = mask(&[1, 0, 1, 0, 0, 0, 0, 0]);
        assert!((kappa(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let c = mask(&[1, 0, 1, 0, 1, 1, 0, 0]);
        let comp = mask(&[0, 1, 0, 1, 0, 0, 1, 1]);
        assert_eq!(kappa(&c, &c).unwrap(), 1.0);
        assert_eq!(kappa(&c, &comp).unwrap(), -1.0);
        assert_eq!(kappa(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
    }

    #[test]
    fn median_conventions() {
        let fa = Tensor::from_vec([1, 1, 1, 4], vec![0.1, 0.5, 0.3, 0.9]).unwrap();
        assert_eq!(tract_median_fa(&fa, &mask(&[1, 1, 1, 0])).unwrap(), 0.3);
        let fa2 = Tensor::from_vec([1, 1, 1, 2], vec![0.4, 0.2]).unwrap();
        assert!((tract_median_fa(&fa2, &mask(&[1, 1])).unwrap() - 0.3).abs() < 1e-15);
        let flat = Tensor::from_vec([1, 1, 1, 3], vec![0.4; 3]).unwrap();
        assert_eq!(tract_median_fa(&flat, &mask(&[1, 0, 1])).unwrap(), 0.4);
        assert!(matches!(
            tract_median_fa(&fa, &mask(&[0, 0, 0, 0])),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(repro_epsilon(0.4, 0.4).unwrap(), 0.0);
        let e = repro_epsilon(0.5, 0.4).unwrap();
        assert!((e - 200.0 * 0.1 / 0.9).abs() < 1e-12);
        assert!((e - 22.222222222222).abs() < 1e-9);
        assert!((repro_epsilon(0.05, 0.04).unwrap() - e).abs() < 1e-12);
        assert_eq!(repro_epsilon(0.4, 0.5).unwrap(), e);
        assert!(matches!(repro_epsilon(0.3, -0.3), Err(Error::Numeric(_))));
    }

    #[test]
    fn endpoint_examples() {
        let dims = [2, 2, 2];
        let zero = DisplacementField::zeros(dims).unwrap();
        let gt = DisplacementField::uniform(dims, [3.0, 4.0, 0.0]).unwrap();
        assert_eq!(endpoint_error(&gt, &gt, None).unwrap(), 0.0);
        assert_eq!(endpoint_error(&zero, &gt, None).unwrap(), 5.0);
        let shifted = DisplacementField::uniform(dims, [4.0, 4.0, 0.0]).unwrap();
        assert_eq!(endpoint_error(&shifted, &gt, None).unwrap(), 1.0);
        let roi = BinaryMask::empty(dims).unwrap();
        assert!(endpoint_error(&zero, &gt, Some(&roi)).is_err());
    }

    #[test]
    fn consistency_of_shifted_mask() {
        let dims = [6, 6, 6];
        let src = BinaryMask::from_fn(dims, |z, y, x| (1..3).contains(&z) && y < 3 && x == 2).unwrap();
        // Target is the source moved one voxel towards lower x:
        // target(x) = source(x + 1).
        let tgt = BinaryMask::from_fn(dims, |z, y, x| (1..3).contains(&z) && y < 3 && x == 1).unwrap();
        let f = DisplacementField::uniform(dims, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(consistency_pair(&tgt, &src, &f).unwrap(), 1.0);
        let zero = DisplacementField::zeros(dims).unwrap();
        assert_eq!(consistency_pair(&tgt, &src, &zero).unwrap(), dice(&tgt, &src).unwrap());
    }
}
