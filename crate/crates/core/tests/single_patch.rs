use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splade_core::lattice::{Grid, Rect};
use splade_core::simulate::{gen_field, FieldKind, FieldSpec};
use splade_core::single::{algorithm1_detailed, naive_ls, search_windows};
use splade_core::{PrefixSum, SearchBounds, Stage1Params};

/// Every non-empty rectangle of `dims`.
fn all_rects(dims: &[usize]) -> Vec<Rect> {
    let mut out = vec![Rect::new(vec![], vec![])];
    for &n in dims {
        out = out
            .into_iter()
            .flat_map(|r| {
                (0..n).flat_map(move |a| {
                    let r = r.clone();
                    (a + 1..=n).map(move |b| {
                        let mut lo = r.lo.clone();
                        let mut hi = r.hi.clone();
                        lo.push(a);
                        hi.push(b);
                        Rect::new(lo, hi)
                    })
                })
            })
            .collect();
    }
    out
}

fn direct_sum(g: &Grid, r: &Rect) -> f64 {
    let mut s = 0.0;
    for (off, &v) in g.data().iter().enumerate() {
        let mut rem = off;
        let inside = g.strides().iter().enumerate().all(|(k, &st)| {
            let i = rem / st;
            rem %= st;
            r.lo[k] <= i && i < r.hi[k]
        });
        if inside {
            s += v;
        }
    }
    s
}

/// Argmax of |contrast| by direct summation over the rectangles `keep` admits,
/// ties to smaller volume then lexicographic corners.
fn brute(g: &Grid, keep: impl Fn(&Rect) -> bool) -> Option<Rect> {
    let n = g.len() as f64;
    let t: f64 = g.data().iter().sum();
    let mut best: Option<(f64, Rect)> = None;
    for r in all_rects(g.dims()).into_iter().filter(|r| r.volume() < g.len() && keep(r)) {
        let k = r.volume() as f64;
        let c = ((direct_sum(g, &r) * n - t * k) / (n * (k * (n - k)).sqrt())).abs();
        let better = match &best {
            None => true,
            Some((v, b)) => {
                let tol = 1e-12 * v;
                c > v + tol || (c >= v - tol && (r.volume(), &r.lo, &r.hi) < (b.volume(), &b.lo, &b.hi))
            }
        };
        if better {
            best = Some((c, r));
        }
    }
    best.map(|b| b.1)
}

fn random_grid(dims: &[usize], seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
}

#[test]
fn naive_matches_brute_force_in_one_and_three_dimensions() {
    for seed in 0..10 {
        let g = random_grid(&[13], seed);
        assert_eq!(Some(naive_ls(&g, &SearchBounds::open()).unwrap()), brute(&g, |_| true));
        let g = random_grid(&[4, 3, 5], seed);
        assert_eq!(Some(naive_ls(&g, &SearchBounds::open()).unwrap()), brute(&g, |_| true));
    }
}

#[test]
fn naive_respects_volume_bounds_like_the_oracle() {
    let g = random_grid(&[6, 7], 3);
    let b = SearchBounds::new(0.3, 0.6).unwrap();
    let n = g.len();
    let want = brute(&g, |r| b.admits(r.volume(), n));
    assert_eq!(Some(naive_ls(&g, &b).unwrap()), want);
}

#[test]
fn refinement_is_the_argmax_over_its_windows() {
    for (seed, rho) in [(1u64, 0.0), (2, 0.3), (3, 0.6)] {
        let kind = if rho == 0.0 { FieldKind::IidGaussian } else { FieldKind::Sar { rho } };
        let mut g = gen_field(&FieldSpec::new(kind, seed), &[36, 30]).unwrap();
        for i in 9..25 {
            for j in 6..20 {
                let v = g.get(&[i, j]);
                g.set(&[i, j], v + 2.0);
            }
        }
        let r = algorithm1_detailed(&g, &Stage1Params::default(), &SearchBounds::open()).unwrap();
        assert!(r.windows.contains(&r.rect));
        let ps = PrefixSum::new(&g).unwrap();
        let best = |rect: &Rect| ps.contrast(rect).unwrap().abs();
        let top = best(&r.rect);
        for cand in all_rects(g.dims()) {
            if cand.volume() < g.len() && r.windows.contains(&cand) {
                assert!(best(&cand) <= top * (1.0 + 1e-12), "{cand} beats {}", r.rect);
            }
        }
        let (w, _) = search_windows(&ps, &r.windows, &SearchBounds::open()).unwrap();
        assert_eq!(w, r.rect);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn naive_is_invariant_under_positive_affine_maps(seed in 0u64..10_000, scale in 0.05f64..20.0, shift in -50.0f64..50.0) {
        let g = random_grid(&[7, 6], seed);
        let base = naive_ls(&g, &SearchBounds::open()).unwrap();
        let moved = naive_ls(&g.affine(scale, shift), &SearchBounds::open()).unwrap();
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn naive_equals_oracle_on_small_grids(seed in 0u64..10_000, rows in 2usize..7, cols in 2usize..7) {
        let g = random_grid(&[rows, cols], seed);
        prop_assert_eq!(Some(naive_ls(&g, &SearchBounds::open()).unwrap()), brute(&g, |_| true));
    }
}
