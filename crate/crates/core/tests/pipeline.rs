use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splade_core::lattice::{Grid, Patch, PatchSet, Rect};
use splade_core::simulate::{gen_field, inject_patches, FieldKind, FieldSpec};
use splade_core::splade::{block_means, components, flag_blocks, splade_detect, BlockPartition, Connectivity, SpladeConfig};

fn noisy(dims: &[usize], seed: u64, rho: f64, patches: &PatchSet) -> Grid {
    let kind = if rho == 0.0 { FieldKind::IidGaussian } else { FieldKind::Sar { rho } };
    inject_patches(&gen_field(&FieldSpec::new(kind, seed), dims).unwrap(), patches).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_is_disjoint_in_bounds_and_repeatable(
        seed in 0u64..100_000,
        rows in 48usize..90,
        cols in 48usize..90,
        lo in (5usize..20, 5usize..20),
        ext in (12usize..28, 12usize..28),
        jump in -3.0f64..3.0,
        rho in 0.0f64..0.5,
    ) {
        let rect = Rect::new(vec![lo.0, lo.1], vec![lo.0 + ext.0, lo.1 + ext.1]);
        let patches = if jump.abs() < 0.05 {
            PatchSet::empty(0.0)
        } else {
            PatchSet::new(vec![Patch { rect, jump }], 0.0)
        };
        let g = noisy(&[rows, cols], seed, rho, &patches);
        let cfg = SpladeConfig::default();
        let a = splade_detect(&g, &cfg).unwrap();
        let b = splade_detect(&g, &cfg).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        prop_assert_eq!(a.k_hat, a.patches.len());
        let rects = a.rects();
        for (i, r) in rects.iter().enumerate() {
            prop_assert!(!r.is_empty());
            prop_assert!(r.check_within(&[rows, cols]).is_ok());
            for s in &rects[i + 1..] {
                prop_assert!(!r.overlaps(s), "{} overlaps {}", r, s);
            }
        }
        let mut sorted = rects.clone();
        sorted.sort_by(|x, y| x.lo.cmp(&y.lo).then(x.hi.cmp(&y.hi)));
        prop_assert_eq!(sorted, rects);
    }

    #[test]
    fn raising_the_threshold_only_removes_flags(seed in 0u64..100_000, q1 in 0.0f64..1.0, dq in 0.0f64..1.0) {
        let g = noisy(&[60, 70], seed, 0.2, &PatchSet::empty(0.0));
        let part = BlockPartition::new(g.dims(), 0.5).unwrap();
        let means = block_means(&g, &part).unwrap();
        let low = flag_blocks(&means, q1, 0.0);
        let high = flag_blocks(&means, q1 + dq, 0.0);
        prop_assert!(low.iter().zip(&high).all(|(&l, &h)| l || !h));
        // fewer flags can split a component, so the component count is not
        // monotone; every surviving component sits inside one at the lower Q
        let coarse = components(&low, &part, 0, Connectivity::Faces);
        for c in components(&high, &part, 0, Connectivity::Faces) {
            prop_assert!(coarse.iter().any(|d| c.iter().all(|b| d.contains(b))));
        }
    }

    /// Patches at least four blocks wide on every axis and separated by
    /// (2 * margin + 2) blocks on some axis come back exactly without noise.
    #[test]
    fn separated_noiseless_patches_are_exact(seed in 0u64..100_000, n in 330usize..420, jump in 0.1f64..5.0) {
        let part = BlockPartition::new(&[n, n], 0.5).unwrap();
        let l = part.sides()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let margin = 2;
        let gap = (2 * margin + 2) * l;
        let edge = l + 2; // clear of the boundary layer
        let w1 = rng.random_range(4 * l..=5 * l);
        let w2 = rng.random_range(4 * l..=5 * l);
        let a0 = rng.random_range(edge..=edge + 3);
        let b0 = a0 + w1 + gap + rng.random_range(0..4);
        prop_assume!(b0 + w2 + edge <= n);
        let h1 = rng.random_range(4 * l..=(n - 2 * edge).min(7 * l));
        let h2 = rng.random_range(4 * l..=(n - 2 * edge).min(7 * l));
        let c1 = rng.random_range(edge..=n - edge - h1);
        let c2 = rng.random_range(edge..=n - edge - h2);
        let truth = PatchSet::new(
            vec![
                Patch { rect: Rect::new(vec![a0, c1], vec![a0 + w1, c1 + h1]), jump },
                Patch { rect: Rect::new(vec![b0, c2], vec![b0 + w2, c2 + h2]), jump: -jump },
            ],
            0.0,
        );
        let g = inject_patches(&Grid::zeros(vec![n, n]).unwrap(), &truth).unwrap();
        let cfg = SpladeConfig { envelope_margin_blocks: margin, ..SpladeConfig::default() };
        let det = splade_detect(&g, &cfg).unwrap();
        let mut want = truth.rects();
        want.sort();
        prop_assert_eq!(det.rects(), want);
    }
}

#[test]
fn given_levels_skip_calibration() {
    let truth = PatchSet::new(
        vec![Patch {
            rect: Rect::new(vec![30, 30], vec![70, 80]),
            jump: 1.0,
        }],
        5.0,
    );
    let g = noisy(&[128, 128], 4, 0.0, &truth);
    let cfg = SpladeConfig {
        mu0: "5".parse().unwrap(),
        sigma: "1".parse().unwrap(),
        ..SpladeConfig::default()
    };
    let det = splade_detect(&g, &cfg).unwrap();
    assert_eq!(det.diagnostics.mu0, 5.0);
    assert_eq!(det.diagnostics.sigma, 1.0);
    assert!(!det.diagnostics.calibration_fallback);
    assert_eq!(det.k_hat, 1);
    let est = &det.patches[0];
    assert!((est.jump_estimate - 1.0).abs() < 0.1);
    assert!(splade_core::lattice::sym_diff_volume(&est.rect, &truth.patches[0].rect) < 200);
}

#[test]
fn works_in_three_dimensions() {
    let truth = PatchSet::new(
        vec![Patch {
            rect: Rect::new(vec![10, 12, 9], vec![26, 30, 24]),
            jump: 1.5,
        }],
        0.0,
    );
    let g = noisy(&[40, 40, 36], 9, 0.0, &truth);
    let det = splade_detect(&g, &SpladeConfig::default()).unwrap();
    assert_eq!(det.k_hat, 1);
    assert!(splade_core::lattice::sym_diff_volume(&det.patches[0].rect, &truth.patches[0].rect) < 800);
}
