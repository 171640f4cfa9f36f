use std::fs;
use std::path::Path;

use selfseg::model::Phase;
use selfseg::phantom::{case_seed, generate_case, generate_dataset, DatasetRole, PhantomSpec};
use selfseg::volume::{seg, ta};

fn mean_where(values: &[f32], mask: impl Fn(usize) -> bool) -> f64 {
    let (mut s, mut n) = (0.0, 0);
    for (i, &v) in values.iter().enumerate() {
        if mask(i) {
            s += v as f64;
            n += 1;
        }
    }
    s / n as f64
}

#[test]
fn noiseless_contrast_is_largest_in_pancreatic_phase() {
    let spec = PhantomSpec {
        noise_sigma: 0.0,
        ..PhantomSpec::default()
    };
    for i in 0..6 {
        let case = generate_case(&spec, case_seed(3, DatasetRole::C, i)).unwrap();
        let labels = case.truth_seg.data();
        let contrast = |p: Phase| {
            let img = case.images[&p].data();
            (mean_where(img, |v| labels[v] == seg::TUMOR)
                - mean_where(img, |v| labels[v] == seg::PANCREAS))
            .abs()
        };
        let (nc, pa, pv) = (
            contrast(Phase::NonContrast),
            contrast(Phase::Pancreatic),
            contrast(Phase::Venous),
        );
        assert!(pa > pv && pv > nc, "case {i}: {nc} {pa} {pv}");
    }
    let table = &spec.enhancement;
    assert!(table.tumor_contrast(Phase::Pancreatic) > table.tumor_contrast(Phase::Venous));
    assert!(table.tumor_contrast(Phase::Venous) > table.tumor_contrast(Phase::NonContrast));
}

#[test]
fn truth_maps_agree() {
    let spec = PhantomSpec::default();
    for i in 0..8 {
        let case = generate_case(&spec, case_seed(5, DatasetRole::A, i)).unwrap();
        let s = case.truth_seg.data();
        let t = case.truth_ta.data();
        for v in 0..s.len() {
            let seg_fg = s[v] != 0;
            assert_eq!(seg_fg, t[v] == ta::PANCREAS, "case {i} voxel {v}");
            if s[v] == seg::TUMOR {
                assert!(!ta::VESSELS.contains(&t[v]));
            }
        }
        assert!(case.truth_seg.count(seg::TUMOR) > 0);
        assert!(ta::VESSELS.iter().all(|&c| case.truth_ta.count(c) > 0));
        assert_eq!(case.images.len(), 3);
        let grids: Vec<_> = case.images.values().collect();
        assert!(grids
            .iter()
            .all(|g| g.dims() == spec.dims && g.spacing() == spec.spacing_mm));
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_generation_is_deterministic() {
    let spec = PhantomSpec {
        dims: [24, 24, 16],
        spacing_mm: [3.0, 3.0, 6.0],
        ..PhantomSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ma = generate_dataset(&spec, DatasetRole::B, 3, 9, &a, false).unwrap();
    let mb = generate_dataset(&spec, DatasetRole::B, 3, 9, &b, false).unwrap();
    assert_eq!(ma.cases.len(), 3);
    assert_eq!(ma.to_json(), mb.to_json());
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    assert!(ma
        .cases
        .iter()
        .all(|c| c.phases.keys().eq([Phase::Venous].iter())));
    assert!(generate_dataset(&spec, DatasetRole::B, 3, 9, &a, false).is_err());
}
