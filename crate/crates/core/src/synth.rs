//! Longitudinal phantom pairs with known labels and known deformations.
//!
//! A subject is a curved tube of high anisotropy in a weakly anisotropic,
//! textured background. The second time-point is the first warped by a
//! smooth random field, after which each scan receives its own noise and
//! intensity drift.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Manifest, SampleEntry, ScanPaths};
use crate::metrics::BinaryMask;
use crate::ops::{lin, warp_tensor, DisplacementField, Interp};
use crate::tensor::{Shape, Tensor};

/// Mean diffusivity of every synthetic tensor.
const MEAN_DIFFUSIVITY: f64 = 0.7;
const TEXTURE_RADIUS: usize = 2;
const DEFORM_PASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// `[D, H, W]`.
    pub size: [usize; 3],
    /// Largest displacement component, in voxels.
    pub deform_magnitude: f64,
    /// Box-filter radius of the deformation smoothing, in voxels.
    pub deform_smoothness: usize,
    pub noise_sd: f64,
    /// Per-scan multiplicative drift is drawn from `1 ± intensity_drift`.
    pub intensity_drift: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: [32, 32, 32],
            deform_magnitude: 3.0,
            deform_smoothness: 8,
            noise_sd: 0.02,
            intensity_drift: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Region-of-interest geometry of the clinical protocol (`96 x 64 x 64`).
    pub fn roi() -> Self {
        PhantomConfig {
            size: [64, 64, 96],
            ..Default::default()
        }
    }

    pub fn cube(size: usize, seed: u64) -> Self {
        PhantomConfig {
            size: [size; 3],
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s < 8) {
            return Err(Error::Contract(format!(
                "phantom extents must be >= 8, got {:?}",
                self.size
            )));
        }
        Shape::new([6, self.size[0], self.size[1], self.size[2]])?;
        if !(self.deform_magnitude >= 0.0 && self.deform_magnitude.is_finite()) {
            return Err(Error::Contract(format!(
                "deform magnitude must be >= 0, got {}",
                self.deform_magnitude
            )));
        }
        if self.deform_smoothness < 1 {
            return Err(Error::Contract("deform smoothness must be >= 1".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Contract(format!("noise sd must be >= 0, got {}", self.noise_sd)));
        }
        if !(0.0..1.0).contains(&self.intensity_drift) {
            return Err(Error::Contract(format!(
                "intensity drift must be in [0, 1), got {}",
                self.intensity_drift
            )));
        }
        Ok(())
    }

    /// Bound on the diffusion penalty of any generated field: every forward
    /// difference of a component lies in `[-2m, 2m]`.
    pub fn penalty_bound(&self) -> f64 {
        4.0 * self.deform_magnitude * self.deform_magnitude
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Vali,
    Test,
    Repro,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Vali, Split::Test, Split::Repro];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Vali => "vali",
            Split::Test => "test",
            Split::Repro => "repro",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Contract(format!("unknown split {s:?}")))
    }
}

/// Which time-point plays the source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

/// `Short` pairs are rescans with no deformation between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interval {
    Long,
    Short,
}

/// One scan: six tensor components, FA and the structure label.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub tensor: Tensor,
    pub fa: Tensor,
    pub label: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub id: String,
    pub subject_id: String,
    pub split: Split,
    pub direction: Direction,
    pub interval: Interval,
}

/// An ordered (source, target) unit of training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub meta: SampleMeta,
    pub source: Scan,
    pub target: Scan,
    /// `T_{t,s}`: maps target voxels into the source grid.
    pub gt_disp: Option<DisplacementField>,
}

impl PairSample {
    pub fn spatial(&self) -> [usize; 3] {
        self.source.label.dims()
    }
}

/// Components `[xx, xy, xz, yy, yz, zz]` of an axially symmetric tensor with
/// fractional anisotropy `fa`, principal direction `e` (x, y, z) and fixed
/// mean diffusivity.
pub fn tensor_components(fa: f64, e: [f64; 3]) -> [f64; 6] {
    let f2 = fa * fa;
    // Eigenvalue ratio r = l_par / l_perp solving FA^2 = (r-1)^2 / (r^2+2).
    let r = (1.0 + (1.0 - (1.0 - f2) * (1.0 - 2.0 * f2)).sqrt()) / (1.0 - f2);
    let perp = 3.0 * MEAN_DIFFUSIVITY / (r + 2.0);
    let k = (r - 1.0) * perp;
    let c = |i: usize, j: usize| if i == j { perp } else { 0.0 } + k * e[i] * e[j];
    [c(0, 0), c(0, 1), c(0, 2), c(1, 1), c(1, 2), c(2, 2)]
}

/// In-place separable moving average of radius `r` with clamped edges.
fn box_blur(data: &mut [f64], dims: [usize; 3], r: usize) {
    let [d, h, w] = dims;
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = [h * w, w, 1][axis];
        let starts: Vec<usize> = (0..d * h * w).filter(|&i| (i / stride) % n == 0).collect();
        for s in starts {
            line.clear();
            line.extend((0..n).map(|i| data[s + i * stride]));
            for i in 0..n {
                let mut acc = 0.0;
                for k in 0..=2 * r {
                    let j = (i + k).saturating_sub(r).min(n - 1);
                    acc += line[j];
                }
                data[s + i * stride] = acc / (2 * r + 1) as f64;
            }
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Smooth noise in `[-1, 1]`.
fn texture(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = dims.iter().product();
    let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    box_blur(&mut t, dims, TEXTURE_RADIUS);
    box_blur(&mut t, dims, TEXTURE_RADIUS);
    let m = t.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        t.iter_mut().for_each(|v| *v /= m);
    }
    t
}

struct Centerline {
    points: Vec<[f64; 3]>,
    tangents: Vec<[f64; 3]>,
    radius: f64,
}

impl Centerline {
    fn random(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let [d, h, w] = dims.map(|v| v as f64);
        let r_max = (d.min(h) / 2.0 - 2.0).floor().clamp(2.0, 4.0);
        let radius = rng.random_range(2.0..=r_max);
        let wave = |extent: f64, rng: &mut ChaCha8Rng| {
            let room = ((extent - 1.0) / 2.0 - radius - 1.0).max(0.0);
            let amp = room * rng.random_range(0.3..0.8);
            let freq = rng.random_range(0.5..1.25);
            let phase = rng.random_range(0.0..2.0 * PI);
            (amp, freq, phase)
        };
        let (ay, fy, py) = wave(h, rng);
        let (az, fz, pz) = wave(d, rng);
        let k = 8 * dims[2];
        let mut points = Vec::with_capacity(k + 1);
        let mut tangents = Vec::with_capacity(k + 1);
        for i in 0..=k {
            let t = i as f64 / k as f64;
            let (sy, cy) = (2.0 * PI * fy * t + py).sin_cos();
            let (sz, cz) = (2.0 * PI * fz * t + pz).sin_cos();
            points.push([t * (w - 1.0), (h - 1.0) / 2.0 + ay * sy, (d - 1.0) / 2.0 + az * sz]);
            let tan = [w - 1.0, ay * 2.0 * PI * fy * cy, az * 2.0 * PI * fz * cz];
            let norm = tan.iter().map(|v| v * v).sum::<f64>().sqrt();
            tangents.push(tan.map(|v| v / norm));
        }
        Centerline {
            points,
            tangents,
            radius,
        }
    }

    /// Distance to the curve and the tangent of the nearest sample.
    fn nearest(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        // Points are sorted by x; only samples within the search window of
        // the voxel's x can be nearer than the radius test needs.
        let reach = self.radius + 1.0;
        let lo = self.points.partition_point(|q| q[0] < p[0] - reach);
        let hi = self.points.partition_point(|q| q[0] <= p[0] + reach);
        let mut best = (f64::INFINITY, lo.min(self.points.len() - 1));
        for i in lo..hi {
            let q = self.points[i];
            let d2 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        (best.0.sqrt(), self.tangents[best.1])
    }
}

/// Curved tube (radius 2 to 4 voxels) along the x axis: FA 0.6 to 0.8 inside,
/// 0.05 to 0.3 outside, both textured; tensors aligned with the tube tangent.
pub fn make_phantom(cfg: &PhantomConfig, subject_seed: u64) -> Result<Scan> {
    cfg.validate()?;
    let dims = cfg.size;
    let [d, h, w] = dims;
    let mut rng = rng_for(subject_seed, 1);
    let line = Centerline::random(dims, &mut rng);
    let inside_base = rng.random_range(0.66..0.74);
    let tex_in = texture(dims, &mut rng);
    let tex_out = texture(dims, &mut rng);

    let n = d * h * w;
    let mut fa = vec![0.0; n];
    let mut label = vec![0u8; n];
    let mut tensor = vec![0.0; 6 * n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = lin(z, y, x, dims);
                let (dist, tan) = line.nearest([x as f64, y as f64, z as f64]);
                let inside = dist <= line.radius;
                let f = if inside {
                    inside_base + 0.06 * tex_in[i]
                } else {
                    0.175 + 0.125 * tex_out[i]
                };
                fa[i] = f;
                label[i] = u8::from(inside);
                for (c, v) in tensor_components(f, tan).into_iter().enumerate() {
                    tensor[c * n + i] = v;
                }
            }
        }
    }
    Ok(Scan {
        tensor: Tensor::from_vec([6, d, h, w], tensor)?,
        fa: Tensor::from_vec([1, d, h, w], fa)?,
        label: BinaryMask::new(dims, label)?,
    })
}

/// Gaussian noise smoothed by repeated box filters of radius
/// `deform_smoothness`, rescaled so the largest component magnitude equals
/// `deform_magnitude`.
pub fn make_deformation(cfg: &PhantomConfig, pair_seed: u64) -> Result<DisplacementField> {
    cfg.validate()?;
    let dims = cfg.size;
    if cfg.deform_magnitude == 0.0 {
        return DisplacementField::zeros(dims);
    }
    let mut rng = rng_for(pair_seed, 2);
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        let mut comp: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..DEFORM_PASSES {
            box_blur(&mut comp, dims, cfg.deform_smoothness);
        }
        data.extend(comp);
    }
    let m = data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        let k = cfg.deform_magnitude / m;
        data.iter_mut().for_each(|v| *v *= k);
    }
    DisplacementField::new(Tensor::from_vec([3, dims[0], dims[1], dims[2]], data)?)
}

fn add_noise(scan: &mut Scan, cfg: &PhantomConfig, rng: &mut ChaCha8Rng) {
    let drift = if cfg.intensity_drift > 0.0 {
        1.0 + rng.random_range(-cfg.intensity_drift..cfg.intensity_drift)
    } else {
        1.0
    };
    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated noise sd");
    for v in scan.tensor.data_mut() {
        *v = *v * drift + noise.sample(rng);
    }
    for v in scan.fa.data_mut() {
        *v = (*v * drift + noise.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Source phantom, a deformation (none for `Short`), the target as the
/// warped source, then independent noise and drift per scan.
pub fn make_pair(cfg: &PhantomConfig, pair_seed: u64, interval: Interval) -> Result<PairSample> {
    let mut source = make_phantom(cfg, pair_seed)?;
    let disp = match interval {
        Interval::Long => make_deformation(cfg, pair_seed)?,
        Interval::Short => DisplacementField::zeros(cfg.size)?,
    };
    let mut target = Scan {
        tensor: warp_tensor(&source.tensor, &disp, Interp::Trilinear)?,
        fa: warp_tensor(&source.fa, &disp, Interp::Trilinear)?,
        label: source.label.warp(&disp)?,
    };
    add_noise(&mut source, cfg, &mut rng_for(pair_seed, 3));
    add_noise(&mut target, cfg, &mut rng_for(pair_seed, 4));
    let subject_id = format!("subject-{pair_seed:016x}");
    Ok(PairSample {
        meta: SampleMeta {
            id: format!("{subject_id}-fwd"),
            subject_id,
            split: Split::Train,
            direction: Direction::Forward,
            interval,
        },
        source,
        target,
        gt_disp: Some(disp),
    })
}

impl PairSample {
    /// The opposite ordering; no ground-truth field is known for it.
    pub fn reversed(&self, id: String) -> PairSample {
        PairSample {
            meta: SampleMeta {
                id,
                direction: match self.meta.direction {
                    Direction::Forward => Direction::Backward,
                    Direction::Backward => Direction::Forward,
                },
                ..self.meta.clone()
            },
            source: self.target.clone(),
            target: self.source.clone(),
            gt_disp: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub split: Split,
    pub pairs: usize,
    pub interval: Interval,
}

impl SplitSpec {
    /// Repro pairs are rescans; every other split is long-interval.
    pub fn new(split: Split, pairs: usize) -> Self {
        let interval = if split == Split::Repro {
            Interval::Short
        } else {
            Interval::Long
        };
        SplitSpec { split, pairs, interval }
    }

    /// 64 train, 8 vali, 16 test and 8 repro pairs.
    pub fn desk() -> Vec<SplitSpec> {
        vec![
            SplitSpec::new(Split::Train, 64),
            SplitSpec::new(Split::Vali, 8),
            SplitSpec::new(Split::Test, 16),
            SplitSpec::new(Split::Repro, 8),
        ]
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Pair seeds of one split, drawn from a stream keyed by the split.
fn pair_seeds(seed: u64, split: Split, n: usize) -> Vec<u64> {
    let mut rng = rng_for(seed, 16 + split as u64);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Generates every split, writes volumes as HVOL files plus
/// `manifest.json` under `dir`, and returns the manifest. Each pair is listed
/// as two ordered samples; subject ids are unique per (split, index).
pub fn make_dataset(dir: &Path, cfg: &PhantomConfig, splits: &[SplitSpec]) -> Result<Manifest> {
    cfg.validate()?;
    if splits.iter().map(|s| s.pairs).sum::<usize>() == 0 {
        return Err(Error::Contract("dataset needs at least one pair".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(s) = splits.iter().find(|s| !seen.insert(s.split)) {
        return Err(Error::Contract(format!("split {} listed twice", s.split)));
    }
    for sub in ["volumes", "gt"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let jobs: Vec<(SplitSpec, usize, u64)> = splits
        .iter()
        .flat_map(|s| {
            pair_seeds(cfg.seed, s.split, s.pairs)
                .into_iter()
                .enumerate()
                .map(move |(i, seed)| (*s, i, seed))
        })
        .collect();
    let entries: Vec<[SampleEntry; 2]> = jobs
        .par_iter()
        .map(|&(spec, i, seed)| write_pair(dir, cfg, spec, i, seed))
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        version: io::SCHEMA_VERSION.to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        samples: entries.into_iter().flatten().collect(),
    };
    io::write_json(dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn write_pair(dir: &Path, cfg: &PhantomConfig, spec: SplitSpec, index: usize, seed: u64) -> Result<[SampleEntry; 2]> {
    let pair = make_pair(cfg, seed, spec.interval)?;
    let pair_id = format!("{}-{index:04}", spec.split);
    let vol_dir = dir.join("volumes").join(&pair_id);
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let write_scan = |tag: &str, scan: &Scan| -> Result<ScanPaths> {
        let rel = |kind: &str| format!("volumes/{pair_id}/{tag}_{kind}.hvol");
        let paths = ScanPaths {
            tensor: rel("tensor"),
            fa: rel("fa"),
            label: rel("label"),
        };
        io::write_volume(dir.join(&paths.tensor), &scan.tensor, io::Dtype::F64)?;
        io::write_volume(dir.join(&paths.fa), &scan.fa, io::Dtype::F64)?;
        io::write_mask(dir.join(&paths.label), &scan.label)?;
        Ok(paths)
    };
    let a = write_scan("a", &pair.source)?;
    let b = write_scan("b", &pair.target)?;
    let fwd_id = format!("{pair_id}-fwd");
    let gt = format!("gt/{fwd_id}.hvol");
    io::write_field(
        dir.join(&gt),
        pair.gt_disp.as_ref().expect("generated pairs carry a field"),
    )?;
    let entry = |id: String, direction, source: &ScanPaths, target: &ScanPaths, gt_disp| SampleEntry {
        id,
        subject_id: pair_id.clone(),
        split: spec.split,
        direction,
        interval: spec.interval,
        pair_seed: seed,
        source: source.clone(),
        target: target.clone(),
        gt_disp,
    };
    Ok([
        entry(fwd_id, Direction::Forward, &a, &b, Some(gt)),
        entry(format!("{pair_id}-bwd"), Direction::Backward, &b, &a, None),
    ])
}
