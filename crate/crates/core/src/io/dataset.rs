use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_field, read_json, read_mask, read_volume};
use crate::error::{Error, Result};
use crate::synth::{Direction, Interval, PairSample, PhantomConfig, SampleMeta, Scan, Split};

pub const SCHEMA_VERSION: &str = "1";

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPaths {
    pub tensor: String,
    pub fa: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub subject_id: String,
    pub split: Split,
    pub direction: Direction,
    pub interval: Interval,
    pub pair_seed: u64,
    pub source: ScanPaths,
    pub target: ScanPaths,
    /// Ground-truth `T_{t,s}`, known for forward samples only.
    pub gt_disp: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: PhantomConfig,
    pub samples: Vec<SampleEntry>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let m: Manifest = read_json(path)?;
    if m.version != SCHEMA_VERSION {
        return Err(Error::Manifest(format!(
            "{}: schema version {:?}, expected {SCHEMA_VERSION:?}",
            path.display(),
            m.version
        )));
    }
    Ok(m)
}

/// A missing file becomes a manifest error naming the sample; any other
/// failure keeps its own kind.
fn for_sample<T>(id: &str, path: &Path, r: Result<T>) -> Result<T> {
    match r {
        Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::Manifest(format!("sample {id}: missing {}", path.display())))
        }
        other => other,
    }
}

fn load_scan(base: &Path, id: &str, p: &ScanPaths) -> Result<Scan> {
    let full = |rel: &str| base.join(rel);
    let (t, f, l) = (full(&p.tensor), full(&p.fa), full(&p.label));
    let scan = Scan {
        tensor: for_sample(id, &t, read_volume(&t))?,
        fa: for_sample(id, &f, read_volume(&f))?,
        label: for_sample(id, &l, read_mask(&l))?,
    };
    let (ct, st) = scan.tensor.shape().volume()?;
    let (cf, sf) = scan.fa.shape().volume()?;
    if ct != 6 || cf != 1 || st != sf || sf != scan.label.dims() {
        return Err(Error::Manifest(format!(
            "sample {id}: inconsistent volumes (tensor {}, fa {}, label {:?})",
            scan.tensor.shape(),
            scan.fa.shape(),
            scan.label.dims()
        )));
    }
    Ok(scan)
}

pub fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads one manifest entry; paths resolve against `base`.
pub fn load_sample(base: &Path, e: &SampleEntry) -> Result<PairSample> {
    let source = load_scan(base, &e.id, &e.source)?;
    let target = load_scan(base, &e.id, &e.target)?;
    if source.label.dims() != target.label.dims() {
        return Err(Error::Manifest(format!(
            "sample {}: source and target grids differ",
            e.id
        )));
    }
    let gt_disp = match &e.gt_disp {
        Some(rel) => {
            let p = base.join(rel);
            let f = for_sample(&e.id, &p, read_field(&p))?;
            if f.spatial() != source.label.dims() {
                return Err(Error::Manifest(format!(
                    "sample {}: ground-truth field grid differs",
                    e.id
                )));
            }
            Some(f)
        }
        None => None,
    };
    Ok(PairSample {
        meta: SampleMeta {
            id: e.id.clone(),
            subject_id: e.subject_id.clone(),
            split: e.split,
            direction: e.direction,
            interval: e.interval,
        },
        source,
        target,
        gt_disp,
    })
}

/// Loads the manifest at `path` and the samples accepted by `keep`.
pub fn load_dataset(
    path: impl AsRef<Path>,
    keep: impl Fn(&SampleEntry) -> bool,
) -> Result<(Manifest, Vec<PairSample>)> {
    let path = path.as_ref();
    let manifest = load_manifest(path)?;
    let base = manifest_dir(path);
    let samples = manifest
        .samples
        .iter()
        .filter(|e| keep(e))
        .map(|e| load_sample(&base, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
