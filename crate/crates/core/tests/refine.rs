use proptest::prelude::*;
use selfseg::refine::{refine_pseudo, refine_pseudo_with, RefineOptions};
use selfseg::volume::{ta, ClassTable, LabelMap, VoxelGrid};

const DIMS: [usize; 3] = [6, 5, 4];
const N: usize = 6 * 5 * 4;

fn seg(data: Vec<u8>) -> LabelMap {
    LabelMap::new(
        VoxelGrid::new(DIMS, [1.0; 3], data).unwrap(),
        ClassTable::seg3(),
    )
    .unwrap()
}

fn ta6(data: Vec<u8>) -> LabelMap {
    LabelMap::new(
        VoxelGrid::new(DIMS, [1.0; 3], data).unwrap(),
        ClassTable::ta6(),
    )
    .unwrap()
}

#[test]
fn masking_rule_examples() {
    let mut p = vec![0u8; N];
    let mut t = vec![0u8; N];
    p[0] = 1;
    t[0] = ta::SMA;
    p[1] = 2;
    t[1] = ta::SMV;
    p[2] = 1;
    t[2] = ta::PANCREAS;
    let out = refine_pseudo(&seg(p.clone()), &ta6(t.clone())).unwrap();
    assert_eq!(&out.data()[..3], &[0, 2, 1]);
    let (masked, report) =
        refine_pseudo_with(&seg(p), &ta6(t), RefineOptions { mask_tumor: true }).unwrap();
    assert_eq!(&masked.data()[..3], &[0, 0, 1]);
    assert_eq!(report.tumor_on_vessel, 1);
}

#[test]
fn rejects_mismatched_inputs() {
    let small = LabelMap::background([2, 2, 2], [1.0; 3], ClassTable::ta6()).unwrap();
    assert!(refine_pseudo(&seg(vec![0; N]), &small).is_err());
    assert!(refine_pseudo(&seg(vec![0; N]), &seg(vec![0; N])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn refinement_matches_scalar_oracle(
        p in prop::collection::vec(0u8..3, N),
        t in prop::collection::vec(0u8..6, N),
    ) {
        let (out, report) = refine_pseudo_with(&seg(p.clone()), &ta6(t.clone()), RefineOptions::default()).unwrap();
        let mut changed = 0;
        for v in 0..N {
            let vessel = t[v] >= ta::PORTAL_SPLENIC_VEIN;
            let want = if p[v] == 1 && vessel { 0 } else { p[v] };
            prop_assert_eq!(out.data()[v], want);
            changed += (out.data()[v] != p[v]) as usize;
        }
        prop_assert_eq!(report.total_masked(), changed);
    }

    #[test]
    fn refinement_shrinks_and_is_idempotent(
        p in prop::collection::vec(0u8..3, N),
        t in prop::collection::vec(0u8..6, N),
    ) {
        let (pseudo, pred) = (seg(p), ta6(t));
        let once = refine_pseudo(&pseudo, &pred).unwrap();
        for (&o, &i) in once.data().iter().zip(pseudo.data()) {
            prop_assert!(o == i || (i == 1 && o == 0));
            prop_assert_eq!(o == 2, i == 2);
        }
        let twice = refine_pseudo(&once, &pred).unwrap();
        prop_assert_eq!(twice, once);
    }
}
