use std::collections::VecDeque;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfseg::fusion::{
    fuse_probabilities, head_region_mask, make_pseudo_labels, FusionConfig, SliceDirection,
};
use selfseg::volume::{ClassTable, LabelMap, ProbMap, VoxelGrid, PROB_SUM_TOLERANCE};

const DIMS: [usize; 3] = [7, 5, 4];

fn random_rows(rng: &mut impl Rng, n: usize, k: usize) -> Vec<f32> {
    let mut rows = Vec::with_capacity(n * k);
    for _ in 0..n {
        // skew towards background so foreground blobs stay sparse
        let raw: Vec<f32> = (0..k)
            .map(|c| rng.random_range(0.0..1.0f32) * if c == 0 { 2.5 } else { 1.0 })
            .collect();
        let sum: f32 = raw.iter().sum();
        rows.extend(raw.iter().map(|x| x / sum));
    }
    rows
}

fn map(rows: &[f32]) -> ProbMap {
    ProbMap::from_rows(DIMS, [1.0; 3], ClassTable::seg3(), rows).unwrap()
}

fn argmax(row: &[f32]) -> u8 {
    let mut best = 0;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best as u8
}

fn blend(a: &[f32], b: &[f32], wa: f64, wb: f64) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (wa * x as f64 + wb * y as f64).clamp(0.0, 1.0) as f32)
        .collect()
}

/// Straight-line reimplementation: consensus extent, slice prefix, weights,
/// argmax and largest 6-connected foreground blob.
fn oracle(pa: &[f32], pb: &[f32], cfg: &FusionConfig) -> Vec<u8> {
    let k = 3;
    let [nx, ny, nz] = DIMS;
    let n = nx * ny * nz;
    let consensus = blend(pa, pb, 0.5, 0.5);
    let mut counts = vec![0usize; nx];
    for v in 0..n {
        if argmax(&consensus[v * k..(v + 1) * k]) != 0 {
            counts[v % nx] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let mut head = vec![false; nx];
    if total > 0 {
        let mut cum = 0;
        for s in 0..nx {
            head[s] = true;
            cum += counts[s];
            if cum as f64 >= cfg.head_fraction * total as f64 - 1e-9 {
                break;
            }
        }
    }
    let mut labels = vec![0u8; n];
    for v in 0..n {
        let (wa, wb) = if head[v % nx] {
            (cfg.w0, 1.0 - cfg.w0)
        } else {
            (1.0 - cfg.w1, cfg.w1)
        };
        let fused = blend(&pa[v * k..(v + 1) * k], &pb[v * k..(v + 1) * k], wa, wb);
        labels[v] = argmax(&fused);
    }
    let mut comp = vec![0usize; n];
    let mut sizes = vec![0usize];
    for s in 0..n {
        if labels[s] == 0 || comp[s] != 0 {
            continue;
        }
        let id = sizes.len();
        sizes.push(0);
        comp[s] = id;
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            sizes[id] += 1;
            let (x, y, z) = (v % nx, (v / nx) % ny, v / (nx * ny));
            let mut nbrs = Vec::new();
            if x > 0 {
                nbrs.push(v - 1)
            }
            if x + 1 < nx {
                nbrs.push(v + 1)
            }
            if y > 0 {
                nbrs.push(v - nx)
            }
            if y + 1 < ny {
                nbrs.push(v + nx)
            }
            if z > 0 {
                nbrs.push(v - nx * ny)
            }
            if z + 1 < nz {
                nbrs.push(v + nx * ny)
            }
            for u in nbrs {
                if labels[u] != 0 && comp[u] == 0 {
                    comp[u] = id;
                    q.push_back(u);
                }
            }
        }
    }
    let keep = (1..sizes.len()).fold(0, |best, id| {
        if best == 0 || sizes[id] > sizes[best] {
            id
        } else {
            best
        }
    });
    labels
        .iter()
        .zip(&comp)
        .map(|(&l, &c)| if c == keep && keep != 0 { l } else { 0 })
        .collect()
}

#[test]
fn pseudo_labels_match_scalar_oracle() {
    let n = DIMS.iter().product();
    let mut nonempty = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ra = random_rows(&mut rng, n, 3);
        let rb = random_rows(&mut rng, n, 3);
        let cfg = FusionConfig {
            w0: rng.random_range(0.0..1.0),
            w1: rng.random_range(0.0..1.0),
            head_fraction: rng.random_range(0.1..0.9),
            ..FusionConfig::default()
        };
        let (pseudo, diag) = make_pseudo_labels(&map(&ra), &map(&rb), &cfg).unwrap();
        assert_eq!(pseudo.data(), &oracle(&ra, &rb, &cfg)[..], "seed {seed}");
        assert_eq!(diag.class_voxels["tumor"], pseudo.count(2));
        nonempty += (pseudo.foreground_count() > 1) as usize;
    }
    assert!(nonempty >= 15);
}

#[test]
fn perfect_teachers_reproduce_truth() {
    let mut labels = vec![0u8; DIMS.iter().product()];
    for (i, l) in labels.iter_mut().enumerate() {
        let x = i % 7;
        if (1..6).contains(&x) && (i / 7) % 5 >= 1 {
            *l = if x == 3 { 2 } else { 1 };
        }
    }
    let truth = LabelMap::new(
        VoxelGrid::new(DIMS, [1.0; 3], labels).unwrap(),
        ClassTable::seg3(),
    )
    .unwrap();
    let p = ProbMap::one_hot(&truth);
    let (pseudo, _) = make_pseudo_labels(&p, &p, &FusionConfig::default()).unwrap();
    assert_eq!(pseudo, truth);
}

#[test]
fn all_background_teachers() {
    let bg = LabelMap::background(DIMS, [1.0; 3], ClassTable::seg3()).unwrap();
    let p = ProbMap::one_hot(&bg);
    let (pseudo, diag) = make_pseudo_labels(&p, &p, &FusionConfig::default()).unwrap();
    assert_eq!(pseudo.foreground_count(), 0);
    assert_eq!(diag.head_slab, None);
}

fn slab_labels(per_slice: &[usize]) -> LabelMap {
    let nx = per_slice.len();
    let ny = *per_slice.iter().max().unwrap();
    let grid =
        VoxelGrid::from_fn([nx, ny, 1], [1.0; 3], |x, y, _| (y < per_slice[x]) as u8).unwrap();
    LabelMap::new(grid, ClassTable::seg3()).unwrap()
}

fn head_slices(per_slice: &[usize], cfg: &FusionConfig) -> usize {
    let labels = slab_labels(per_slice);
    let head = head_region_mask(&labels, cfg).unwrap();
    (0..per_slice.len())
        .filter(|&x| head.mask.get(x, 0, 0) != 0)
        .count()
}

#[test]
fn head_mask_prefix_examples() {
    let cfg = FusionConfig::default();
    assert_eq!(head_slices(&[5, 1, 1, 1, 1, 1], &cfg), 2);
    assert_eq!(head_slices(&[1; 10], &cfg), 6);
    let bg = LabelMap::background([4, 2, 2], [1.0; 3], ClassTable::seg3()).unwrap();
    let head = head_region_mask(&bg, &cfg).unwrap();
    assert!(head.mask.data().iter().all(|&m| m == 0));
}

#[test]
fn head_mask_descending_scans_from_the_end() {
    let cfg = FusionConfig {
        direction: SliceDirection::Descending,
        ..FusionConfig::default()
    };
    let labels = slab_labels(&[1, 1, 1, 1, 1, 5]);
    let head = head_region_mask(&labels, &cfg).unwrap();
    let marked: Vec<usize> = (0..6).filter(|&x| head.mask.get(x, 0, 0) != 0).collect();
    assert_eq!(marked, vec![4, 5]);
}

fn rows_strategy() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.01f32..1.0, 3 * 140).prop_map(|raw| {
        raw.chunks_exact(3)
            .flat_map(|r| {
                let s: f32 = r.iter().sum();
                r.iter().map(move |x| x / s).collect::<Vec<_>>()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_maps_are_bounded_and_normalized(
        ra in rows_strategy(), rb in rows_strategy(),
        w0 in 0.0f64..=1.0, w1 in 0.0f64..=1.0, frac in 0.05f64..0.95,
    ) {
        let (pa, pb) = (map(&ra), map(&rb));
        let cfg = FusionConfig { w0, w1, head_fraction: frac, ..FusionConfig::default() };
        let head = head_region_mask(&selfseg::volume::argmax_labels(&pa), &cfg).unwrap();
        let fused = fuse_probabilities(&pa, &pb, &head, &cfg).unwrap();
        for v in 0..fused.len() {
            let mut sum = 0.0f64;
            for c in 0..3u8 {
                let (a, b, f) = (pa.prob(v, c), pb.prob(v, c), fused.prob(v, c));
                prop_assert!(f >= a.min(b) && f <= a.max(b), "voxel {} class {}: {} outside [{}, {}]", v, c, f, a, b);
                sum += f as f64;
            }
            prop_assert!((sum - 1.0).abs() <= PROB_SUM_TOLERANCE);
        }
    }

    #[test]
    fn degenerate_weights_select_one_teacher(ra in rows_strategy(), rb in rows_strategy()) {
        let (pa, pb) = (map(&ra), map(&rb));
        let only = |w0: f64, w1: f64| {
            let cfg = FusionConfig { w0, w1, ..FusionConfig::default() };
            let head = head_region_mask(&selfseg::volume::argmax_labels(&pa), &cfg).unwrap();
            fuse_probabilities(&pa, &pb, &head, &cfg).unwrap()
        };
        prop_assert_eq!(only(1.0, 0.0), pa.clone());
        prop_assert_eq!(only(0.0, 1.0), pb.clone());
    }

    #[test]
    fn swapping_teachers_and_weights_is_neutral(
        ra in rows_strategy(), rb in rows_strategy(), w0 in 0.0f64..=1.0, w1 in 0.0f64..=1.0,
    ) {
        let (pa, pb) = (map(&ra), map(&rb));
        let cfg = FusionConfig { w0, w1, ..FusionConfig::default() };
        let swapped = FusionConfig { w0: 1.0 - w0, w1: 1.0 - w1, ..cfg };
        let head = head_region_mask(&selfseg::volume::argmax_labels(&pa), &cfg).unwrap();
        let f = fuse_probabilities(&pa, &pb, &head, &cfg).unwrap();
        let g = fuse_probabilities(&pb, &pa, &head, &swapped).unwrap();
        for v in 0..f.len() {
            for c in 0..3u8 {
                prop_assert!((f.prob(v, c) - g.prob(v, c)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn head_mask_is_a_contiguous_prefix(counts in prop::collection::vec(0usize..6, 2..12), frac in 0.05f64..0.95) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let cfg = FusionConfig { head_fraction: frac, ..FusionConfig::default() };
        let labels = slab_labels(&counts);
        let head = head_region_mask(&labels, &cfg).unwrap();
        let marked: Vec<bool> = (0..counts.len()).map(|x| head.mask.get(x, 0, 0) != 0).collect();
        let len = marked.iter().take_while(|&&m| m).count();
        prop_assert!(marked[len..].iter().all(|&m| !m));
        let total: usize = counts.iter().sum();
        let covered: usize = counts[..len].iter().sum();
        prop_assert!(covered as f64 >= frac * total as f64 - 1e-9);
        prop_assert!(len == 0 || (counts[..len - 1].iter().sum::<usize>() as f64) < frac * total as f64 - 1e-9);
    }
}
