use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::stats::{mean_sd, paired_t_test, TTest};
use crate::error::{Error, Result};

pub const REPORT_VERSION: &str = "1";

/// Metrics of one ordered (source, target) sample.
///
/// `consistency_fwd` warps the source segmentation onto the target with
/// `T_{t,s}`; `consistency_bwd` warps the target segmentation onto the
/// source with `T_{s,t}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub sample_id: String,
    pub subject_id: String,
    pub split: String,
    pub direction: String,
    pub dice_accuracy_s: Option<f64>,
    pub dice_accuracy_t: Option<f64>,
    pub consistency_fwd: Option<f64>,
    pub consistency_bwd: Option<f64>,
    pub kappa: Option<f64>,
    pub epsilon_percent: Option<f64>,
    pub endpoint_error: Option<f64>,
    /// Dice of the two segmentations without any registration.
    pub unregistered_dice: Option<f64>,
}

/// Per-record metric columns, in report order.
pub const METRIC_COLUMNS: [&str; 8] = [
    "dice_accuracy_s",
    "dice_accuracy_t",
    "consistency_fwd",
    "consistency_bwd",
    "kappa",
    "epsilon_percent",
    "endpoint_error",
    "unregistered_dice",
];

impl PairRecord {
    pub fn column(&self, name: &str) -> Option<f64> {
        match name {
            "dice_accuracy_s" => self.dice_accuracy_s,
            "dice_accuracy_t" => self.dice_accuracy_t,
            "consistency_fwd" => self.consistency_fwd,
            "consistency_bwd" => self.consistency_bwd,
            "kappa" => self.kappa,
            "epsilon_percent" => self.epsilon_percent,
            "endpoint_error" => self.endpoint_error,
            "unregistered_dice" => self.unregistered_dice,
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub version: String,
    pub method: String,
    pub records: Vec<PairRecord>,
    /// Mean and sample sd per column, plus `consistency`, which pools both
    /// directions.
    pub aggregates: BTreeMap<String, Aggregate>,
}

fn aggregate(values: &[f64]) -> Option<Aggregate> {
    mean_sd(values).map(|(mean, sd)| Aggregate {
        mean,
        sd,
        n: values.len(),
    })
}

pub fn build_report(method: &str, records: Vec<PairRecord>) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Contract("cannot build a report from zero samples".into()));
    }
    let mut aggregates = BTreeMap::new();
    for col in METRIC_COLUMNS {
        let vals: Vec<f64> = records.iter().filter_map(|r| r.column(col)).collect();
        if let Some(a) = aggregate(&vals) {
            aggregates.insert(col.to_string(), a);
        }
    }
    let pooled: Vec<f64> = records
        .iter()
        .flat_map(|r| [r.consistency_fwd, r.consistency_bwd])
        .flatten()
        .collect();
    if let Some(a) = aggregate(&pooled) {
        aggregates.insert("consistency".to_string(), a);
    }
    Ok(EvalReport {
        version: REPORT_VERSION.to_string(),
        method: method.to_string(),
        records,
        aggregates,
    })
}

/// Per-column paired t-tests between two reports over the same samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub version: String,
    pub method_a: String,
    pub method_b: String,
    pub n_samples: usize,
    /// `null` where fewer than two samples carry the column in both reports.
    pub tests: BTreeMap<String, Option<TTest>>,
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<CompareReport> {
    let index = |r: &EvalReport| -> Result<BTreeMap<String, PairRecord>> {
        let mut m = BTreeMap::new();
        for rec in &r.records {
            if m.insert(rec.sample_id.clone(), rec.clone()).is_some() {
                return Err(Error::Contract(format!("duplicate sample id {}", rec.sample_id)));
            }
        }
        Ok(m)
    };
    let (ia, ib) = (index(a)?, index(b)?);
    let ka: BTreeSet<_> = ia.keys().collect();
    let kb: BTreeSet<_> = ib.keys().collect();
    if ka != kb {
        let missing: Vec<_> = ka.symmetric_difference(&kb).take(5).collect();
        return Err(Error::Manifest(format!(
            "reports cover different samples (e.g. {missing:?})"
        )));
    }
    let mut tests = BTreeMap::new();
    for col in METRIC_COLUMNS {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (id, ra) in &ia {
            if let (Some(x), Some(y)) = (ra.column(col), ib[id].column(col)) {
                xs.push(x);
                ys.push(y);
            }
        }
        let test = if xs.len() >= 2 {
            Some(paired_t_test(&xs, &ys)?)
        } else {
            None
        };
        tests.insert(col.to_string(), test);
    }
    Ok(CompareReport {
        version: REPORT_VERSION.to_string(),
        method_a: a.method.clone(),
        method_b: b.method.clone(),
        n_samples: ia.len(),
        tests,
    })
}
