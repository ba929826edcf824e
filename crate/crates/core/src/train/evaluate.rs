use std::collections::BTreeMap;

use rayon::prelude::*;

use super::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{
    build_report, consistency_pair, dice, endpoint_error, kappa, repro_epsilon, tract_median_fa, BinaryMask,
    EvalReport, PairRecord,
};
use crate::model::{binarize, register, segment, ParameterSet};
use crate::ops::{DisplacementField, NormMode};
use crate::synth::{Direction, Interval, PairSample};
use crate::tensor::{Graph, Tensor};

/// Externally computed `T_{t,s}` fields keyed by sample id.
pub type ExternalFields = BTreeMap<String, DisplacementField>;

fn predict(theta: &ParameterSet, tensor: &Tensor) -> Result<BinaryMask> {
    let mut g = Graph::new();
    let t = segment(&mut g, tensor, theta, NormMode::Eval)?;
    binarize(g.value(t.output), 0.5)
}

fn field(phi: &ParameterSet, fa_t: &Tensor, fa_s: &Tensor) -> Result<DisplacementField> {
    let mut g = Graph::new();
    let t = register(&mut g, fa_t, fa_s, phi, NormMode::Eval)?;
    DisplacementField::new(g.value(t.output).clone())
}

fn median_or_none(fa: &Tensor, mask: &BinaryMask) -> Result<Option<f64>> {
    match tract_median_fa(fa, mask) {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyRegion(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Metrics of one ordered sample.
///
/// Segmentations come from `F_Θ` when the checkpoint has one, otherwise the
/// reference labels stand in. Fields come from `external` when given
/// (`fwd` required, `bwd` optional), else from `G_Φ` in both directions,
/// else the zero field. Kappa and the reproducibility error are reported on
/// short-interval (rescan) samples only.
pub fn evaluate_sample(
    ck: &Checkpoint,
    sample: &PairSample,
    external: Option<(&DisplacementField, Option<&DisplacementField>)>,
) -> Result<PairRecord> {
    let (src, tgt) = (&sample.source, &sample.target);
    let (seg_s, seg_t) = match &ck.theta {
        Some(theta) => (predict(theta, &src.tensor)?, predict(theta, &tgt.tensor)?),
        None => (src.label.clone(), tgt.label.clone()),
    };
    let (fwd, bwd) = match (external, &ck.phi) {
        (Some((f, b)), _) => (f.clone(), b.cloned()),
        (None, Some(phi)) => (field(phi, &tgt.fa, &src.fa)?, Some(field(phi, &src.fa, &tgt.fa)?)),
        (None, None) => {
            let z = DisplacementField::zeros(sample.spatial())?;
            (z.clone(), Some(z))
        }
    };
    let accuracy = ck.theta.is_some();
    let rescan = sample.meta.interval == Interval::Short;
    let (kappa_v, eps_v) = if rescan {
        let k = kappa(&seg_t, &seg_s.warp(&fwd)?)?;
        let e = match (median_or_none(&src.fa, &seg_s)?, median_or_none(&tgt.fa, &seg_t)?) {
            (Some(a), Some(b)) => Some(repro_epsilon(a, b)?),
            _ => None,
        };
        (Some(k), e)
    } else {
        (None, None)
    };
    Ok(PairRecord {
        sample_id: sample.meta.id.clone(),
        subject_id: sample.meta.subject_id.clone(),
        split: sample.meta.split.to_string(),
        direction: sample.meta.direction.as_str().to_string(),
        dice_accuracy_s: accuracy.then(|| dice(&seg_s, &src.label)).transpose()?,
        dice_accuracy_t: accuracy.then(|| dice(&seg_t, &tgt.label)).transpose()?,
        consistency_fwd: Some(consistency_pair(&seg_t, &seg_s, &fwd)?),
        consistency_bwd: bwd.as_ref().map(|b| consistency_pair(&seg_s, &seg_t, b)).transpose()?,
        kappa: kappa_v,
        epsilon_percent: eps_v,
        endpoint_error: sample
            .gt_disp
            .as_ref()
            .map(|gt| endpoint_error(&fwd, gt, None))
            .transpose()?,
        unregistered_dice: Some(dice(&seg_t, &seg_s)?),
    })
}

/// Evaluates every sample (in parallel) and assembles the report in input
/// order. With `external`, each sample's own field must be present; the
/// opposite ordering's field, if present, drives backward consistency.
pub fn evaluate(ck: &Checkpoint, samples: &[PairSample], external: Option<&ExternalFields>) -> Result<EvalReport> {
    let reverse_id = |s: &PairSample| -> Option<String> {
        let dir = match s.meta.direction {
            Direction::Forward => "bwd",
            Direction::Backward => "fwd",
        };
        s.meta.id.rsplit_once('-').map(|(stem, _)| format!("{stem}-{dir}"))
    };
    let records = samples
        .par_iter()
        .map(|s| {
            let ext = match external {
                Some(map) => {
                    let own = map.get(&s.meta.id).ok_or_else(|| {
                        Error::Manifest(format!("sample {}: no external displacement field", s.meta.id))
                    })?;
                    let rev = reverse_id(s).and_then(|id| map.get(&id));
                    Some((own, rev))
                }
                None => None,
            };
            evaluate_sample(ck, s, ext)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut method = ck.config.mode.to_string();
    if external.is_some() {
        method.push_str("+external");
    }
    build_report(&method, records)
}
