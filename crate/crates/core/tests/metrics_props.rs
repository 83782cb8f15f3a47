use proptest::prelude::*;

use splade_core::lattice::Rect;
use splade_core::metrics::{ari, hausdorff, jaccard_mask, Labeling};

const DIMS: [usize; 2] = [10, 9];

fn arb_rect() -> impl Strategy<Value = Rect> {
    (0..DIMS[0], 0..DIMS[1]).prop_flat_map(|(a, b)| {
        (a + 1..=DIMS[0], b + 1..=DIMS[1]).prop_map(move |(c, d)| Rect::new(vec![a, b], vec![c, d]))
    })
}

fn disjoint(rects: Vec<Rect>) -> Vec<Rect> {
    let mut out: Vec<Rect> = Vec::new();
    for r in rects {
        if out.iter().all(|o| !o.overlaps(&r)) {
            out.push(r);
        }
    }
    out
}

fn mask(r: &Rect) -> Vec<bool> {
    (0..DIMS[0] * DIMS[1]).map(|o| r.contains(&[o / DIMS[1], o % DIMS[1]])).collect()
}

/// Hausdorff distance with every member spelled out as a cell mask.
fn hausdorff_by_masks(a: &[Rect], b: &[Rect]) -> f64 {
    let members = |rs: &[Rect]| {
        let masks: Vec<Vec<bool>> = rs.iter().map(mask).collect();
        let bg: Vec<bool> = (0..DIMS[0] * DIMS[1]).map(|i| !masks.iter().any(|m| m[i])).collect();
        std::iter::once(bg).chain(masks).filter(|m| m.iter().any(|&x| x)).collect::<Vec<_>>()
    };
    let (ma, mb) = (members(a), members(b));
    let one_way = |x: &[Vec<bool>], y: &[Vec<bool>]| {
        x.iter()
            .map(|p| y.iter().map(|q| jaccard_mask(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one_way(&ma, &mb).max(one_way(&mb, &ma))
}

proptest! {
    #[test]
    fn hausdorff_agrees_with_mask_oracle(a in prop::collection::vec(arb_rect(), 0..4), b in prop::collection::vec(arb_rect(), 0..4)) {
        let (a, b) = (disjoint(a), disjoint(b));
        let fast = hausdorff(&a, &b, &DIMS).unwrap();
        prop_assert!((fast - hausdorff_by_masks(&a, &b)).abs() < 1e-12);
        prop_assert_eq!(fast, hausdorff(&b, &a, &DIMS).unwrap());
    }

    #[test]
    fn ari_is_symmetric_and_label_free(a in prop::collection::vec(0u32..4, 30), b in prop::collection::vec(0u32..4, 30), shift in 1u32..50) {
        let la = Labeling::new(vec![30], a.clone()).unwrap();
        let lb = Labeling::new(vec![30], b).unwrap();
        let x = ari(&la, &lb).unwrap();
        prop_assert!((x - ari(&lb, &la).unwrap()).abs() < 1e-12);
        // relabel with a permutation plus an offset
        let relabelled = Labeling::new(vec![30], a.iter().map(|&l| (3 - l) + shift).collect()).unwrap();
        prop_assert!((x - ari(&relabelled, &lb).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn jaccard_triangle_inequality(a in prop::collection::vec(any::<bool>(), 40), b in prop::collection::vec(any::<bool>(), 40), c in prop::collection::vec(any::<bool>(), 40)) {
        prop_assert!(jaccard_mask(&a, &c) <= jaccard_mask(&a, &b) + jaccard_mask(&b, &c) + 1e-12);
    }
}
