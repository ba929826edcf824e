use std::collections::{BTreeMap, BTreeSet, VecDeque};

use hybridwarp::io::{load_dataset, load_manifest};
use hybridwarp::metrics::{dice, BinaryMask};
use hybridwarp::ops::diffusion_penalty_value;
use hybridwarp::synth::{
    make_dataset, make_deformation, make_pair, make_phantom, Interval, PhantomConfig, Split, SplitSpec, MANIFEST_FILE,
};

/// Number of 6-connected components, by breadth-first flood fill.
fn components(m: &BinaryMask) -> usize {
    let [d, h, w] = m.dims();
    let mut seen = vec![false; d * h * w];
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut count = 0;
    for start in 0..seen.len() {
        if seen[start] || m.data()[start] == 0 {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([(start / (h * w), start / w % h, start % w)]);
        while let Some((z, y, x)) = queue.pop_front() {
            let mut visit = |z: usize, y: usize, x: usize| {
                let i = idx(z, y, x);
                if !seen[i] && m.data()[i] == 1 {
                    seen[i] = true;
                    queue.push_back((z, y, x));
                }
            };
            if z > 0 {
                visit(z - 1, y, x);
            }
            if z + 1 < d {
                visit(z + 1, y, x);
            }
            if y > 0 {
                visit(z, y - 1, x);
            }
            if y + 1 < h {
                visit(z, y + 1, x);
            }
            if x > 0 {
                visit(z, y, x - 1);
            }
            if x + 1 < w {
                visit(z, y, x + 1);
            }
        }
    }
    count
}

#[test]
fn phantoms_are_single_tubes_with_contrast() {
    let cfg = PhantomConfig::cube(16, 0);
    for seed in 0..100 {
        let scan = make_phantom(&cfg, seed).unwrap();
        assert!(!scan.label.is_empty(), "seed {seed}");
        assert_eq!(components(&scan.label), 1, "seed {seed}");
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for (&v, &m) in scan.fa.data().iter().zip(scan.label.data()) {
            assert!((0.0..=1.0).contains(&v));
            if m == 1 {
                inside.push(v)
            } else {
                outside.push(v)
            }
        }
        let lo_in = inside.iter().copied().fold(f64::INFINITY, f64::min);
        let hi_out = outside.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(
            lo_in >= 0.6 - 1e-12 && hi_out <= 0.3 + 1e-12,
            "seed {seed}: {lo_in} {hi_out}"
        );
        // The tube spans the x axis.
        let [d, h, w] = scan.label.dims();
        for x in [0, w - 1] {
            assert!((0..d).any(|z| (0..h).any(|y| scan.label.get(z, y, x))), "seed {seed}");
        }
    }
}

#[test]
fn pairs_satisfy_construction_identity_and_ranges() {
    let cfg = PhantomConfig::cube(16, 0);
    for seed in 0..100 {
        let pair = make_pair(&cfg, seed, Interval::Long).unwrap();
        let gt = pair.gt_disp.as_ref().unwrap();
        assert_eq!(pair.source.label.warp(gt).unwrap(), pair.target.label, "seed {seed}");
        assert!((gt.max_abs() - cfg.deform_magnitude).abs() < 1e-9);
        for scan in [&pair.source, &pair.target] {
            assert!(scan.fa.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(!scan.label.is_empty());
        }
        let short = make_pair(&cfg, seed, Interval::Short).unwrap();
        assert_eq!(short.source.label, short.target.label);
        assert_eq!(short.gt_disp.unwrap().max_abs(), 0.0);
    }
}

#[test]
fn smoother_fields_have_lower_penalty() {
    let rough = PhantomConfig {
        deform_smoothness: 1,
        ..PhantomConfig::cube(16, 0)
    };
    let smooth = PhantomConfig {
        deform_smoothness: 4,
        ..rough.clone()
    };
    for seed in 0..10 {
        let pr = diffusion_penalty_value(&make_deformation(&rough, seed).unwrap()).unwrap();
        let ps = diffusion_penalty_value(&make_deformation(&smooth, seed).unwrap()).unwrap();
        assert!(ps < pr, "seed {seed}: {ps} >= {pr}");
        assert!(pr <= rough.penalty_bound());
    }
}

#[test]
fn deformation_changes_labels_noticeably() {
    let cfg = PhantomConfig::cube(16, 0);
    let mean: f64 = (0..20)
        .map(|s| {
            let p = make_pair(&cfg, s, Interval::Long).unwrap();
            dice(&p.source.label, &p.target.label).unwrap()
        })
        .sum::<f64>()
        / 20.0;
    assert!(mean < 0.9, "unregistered overlap {mean}");
}

fn file_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn datasets_are_deterministic_and_subject_disjoint() {
    let cfg = PhantomConfig::cube(8, 42);
    let specs = [
        SplitSpec::new(Split::Train, 3),
        SplitSpec::new(Split::Test, 2),
        SplitSpec::new(Split::Repro, 1),
    ];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = make_dataset(a.path(), &cfg, &specs).unwrap();
    make_dataset(b.path(), &cfg, &specs).unwrap();
    assert_eq!(file_bytes(a.path()), file_bytes(b.path()));
    assert_eq!(m.samples.len(), 2 * 6);
    assert_eq!(load_manifest(a.path().join(MANIFEST_FILE)).unwrap(), m);

    let mut by_split: BTreeMap<String, BTreeSet<Split>> = BTreeMap::new();
    for s in &m.samples {
        by_split.entry(s.subject_id.clone()).or_default().insert(s.split);
    }
    assert!(by_split.values().all(|s| s.len() == 1));

    let (_, samples) = load_dataset(&a.path().join(MANIFEST_FILE), |e| e.split == Split::Repro).unwrap();
    assert_eq!(samples.len(), 2);
    assert!(samples.iter().all(|s| s.meta.interval == Interval::Short));
    let fwd = samples.iter().find(|s| s.gt_disp.is_some()).unwrap();
    assert_eq!(fwd.source.label, fwd.target.label);
}

#[test]
fn different_seeds_give_different_data() {
    let a = make_pair(&PhantomConfig::cube(8, 0), 1, Interval::Long).unwrap();
    let b = make_pair(&PhantomConfig::cube(8, 0), 2, Interval::Long).unwrap();
    assert_ne!(a.source.fa, b.source.fa);
}
