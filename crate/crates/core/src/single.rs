//! Single-patch estimators.
//!
//! [`naive_ls`] scores every admissible rectangle; [`algorithm1`] scores a
//! subsampled lattice first and then searches exhaustively only over corner
//! windows around the coarse estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Grid, PrefixSum, Rect, MAX_DIM};

/// Admissible candidates satisfy `n * lambda1 < |I| < n * lambda2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBounds {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl SearchBounds {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lambda1) || !(lambda2 > lambda1 && lambda2 <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "search bounds ({lambda1}, {lambda2}) must satisfy 0 <= l1 < l2 <= 1"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }

    /// Every non-empty, non-full rectangle.
    pub fn open() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 1.0,
        }
    }

    pub fn admits(&self, volume: usize, n: usize) -> bool {
        let k = volume as f64;
        let n = n as f64;
        k > n * self.lambda1 && k < n * self.lambda2
    }
}

impl Default for SearchBounds {
    fn default() -> Self {
        Self::open()
    }
}

/// Tuning for the two-stage search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Params {
    /// Subsampling stride exponent: `L_k = floor(n_k^alpha)`.
    pub alpha: f64,
    /// Window growth exponent.
    pub kappa: f64,
    /// Window constant `C`.
    pub window_const: f64,
}

impl Default for Stage1Params {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            kappa: 0.01,
            window_const: 1.0,
        }
    }
}

impl Stage1Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {} not in (0,1)", self.alpha)));
        }
        if !(self.kappa >= 0.0) || self.alpha + self.kappa >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "need kappa >= 0 and alpha + kappa < 1, got alpha {} kappa {}",
                self.alpha, self.kappa
            )));
        }
        if !(self.window_const > 0.0) || !self.window_const.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "window constant {} must be positive",
                self.window_const
            )));
        }
        Ok(())
    }
}

/// Inclusive range of admissible corner coordinates on one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CornerRange {
    pub start: usize,
    pub end: usize,
}

impl CornerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    fn contains(&self, x: usize) -> bool {
        self.start <= x && x <= self.end
    }
}

/// Per-axis windows for the lower and upper corner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CornerWindows {
    pub lo: Vec<CornerRange>,
    pub hi: Vec<CornerRange>,
}

impl CornerWindows {
    /// Windows admitting every rectangle of the grid.
    pub fn full(dims: &[usize]) -> Self {
        Self {
            lo: dims.iter().map(|&n| CornerRange::new(0, n - 1)).collect(),
            hi: dims.iter().map(|&n| CornerRange::new(1, n)).collect(),
        }
    }

    pub fn contains(&self, r: &Rect) -> bool {
        (0..r.ndim()).all(|k| self.lo[k].contains(r.lo[k]) && self.hi[k].contains(r.hi[k]))
    }
}

#[derive(Debug, Clone, Copy)]
struct Best {
    score: f64,
    volume: usize,
    lo: [usize; MAX_DIM],
    hi: [usize; MAX_DIM],
}

impl Best {
    const NONE: Best = Best {
        score: f64::NEG_INFINITY,
        volume: 0,
        lo: [0; MAX_DIM],
        hi: [0; MAX_DIM],
    };

    fn is_none(&self) -> bool {
        self.score == f64::NEG_INFINITY
    }

    /// Larger score wins; ties go to smaller volume, then lexicographically
    /// smaller `lo`, then smaller `hi`.
    fn beats(&self, other: &Best) -> bool {
        if self.score != other.score {
            return self.score > other.score;
        }
        (self.volume, self.lo, self.hi) < (other.volume, other.lo, other.hi)
    }

    fn pick(a: Best, b: Best) -> Best {
        if b.beats(&a) {
            b
        } else {
            a
        }
    }
}

/// Maximizes `|contrast|` over rectangles whose corners lie in `windows` and
/// whose volume is admitted by `bounds`. Returns the maximizer and its
/// contrast, or `None` when no candidate is admissible.
pub fn search_windows(ps: &PrefixSum, windows: &CornerWindows, bounds: &SearchBounds) -> Option<(Rect, f64)> {
    let d = ps.ndim();
    let dims = ps.dims();
    let last = d - 1;
    let n = ps.n();
    let nf = n as f64;
    let total = ps.total();
    let kmin = nf * bounds.lambda1;
    let kmax = nf * bounds.lambda2;

    let clip = |r: CornerRange, lo_side: bool, n_k: usize| {
        if lo_side {
            CornerRange::new(r.start, r.end.min(n_k - 1))
        } else {
            CornerRange::new(r.start.max(1), r.end.min(n_k))
        }
    };
    let lo_w: Vec<CornerRange> = (0..d).map(|k| clip(windows.lo[k], true, dims[k])).collect();
    let hi_w: Vec<CornerRange> = (0..d).map(|k| clip(windows.hi[k], false, dims[k])).collect();
    if (0..d).any(|k| lo_w[k].start > lo_w[k].end || hi_w[k].start > hi_w[k].end) {
        return None;
    }

    // (lo, hi) pairs for every axis but the last
    let mut pairs: Vec<Vec<(usize, usize)>> = Vec::with_capacity(last);
    for k in 0..last {
        let mut v = Vec::new();
        for a in lo_w[k].start..=lo_w[k].end {
            for b in hi_w[k].start.max(a + 1)..=hi_w[k].end {
                v.push((a, b));
            }
        }
        if v.is_empty() {
            return None;
        }
        pairs.push(v);
    }
    let combos: usize = pairs.iter().map(Vec::len).product();

    let table = ps.table();
    let pstrides = ps.pstrides();
    let j0 = lo_w[last].start;
    let j1 = hi_w[last].end;
    let (la, lb) = (lo_w[last].start, lo_w[last].end);
    let (ha, hb) = (hi_w[last].start, hi_w[last].end);

    let best = (0..combos)
        .into_par_iter()
        .fold(
            || (Best::NONE, Vec::<f64>::new(), Vec::<(usize, f64)>::new()),
            |(mut best, mut slab, mut corners), c| {
                let mut lo = [0usize; MAX_DIM];
                let mut hi = [0usize; MAX_DIM];
                let mut rem = c;
                let mut outer_vol = 1usize;
                for k in (0..last).rev() {
                    let len = pairs[k].len();
                    let (a, b) = pairs[k][rem % len];
                    rem /= len;
                    lo[k] = a;
                    hi[k] = b;
                    outer_vol *= b - a;
                }

                // signed table offsets of the outer-axis corners
                corners.clear();
                for mask in 0..(1usize << last) {
                    let mut off = 0;
                    let mut lows = 0;
                    for k in 0..last {
                        if mask & (1 << k) != 0 {
                            off += hi[k] * pstrides[k];
                        } else {
                            off += lo[k] * pstrides[k];
                            lows += 1;
                        }
                    }
                    corners.push((off, if lows % 2 == 0 { 1.0 } else { -1.0 }));
                }
                // slab[j - j0] = sum over the outer box and last-axis cells < j
                slab.clear();
                slab.extend((j0..=j1).map(|j| corners.iter().map(|&(off, s)| s * table[off + j]).sum::<f64>()));

                let wf = outer_vol as f64;
                for a in la..=lb {
                    let sa = slab[a - j0];
                    for b in ha.max(a + 1)..=hb {
                        let k = wf * (b - a) as f64;
                        if k <= kmin || k >= kmax {
                            continue;
                        }
                        let s = slab[b - j0] - sa;
                        let num = s * nf - total * k;
                        let score = num * num / (k * (nf - k));
                        if score >= best.score {
                            lo[last] = a;
                            hi[last] = b;
                            let cand = Best {
                                score,
                                volume: outer_vol * (b - a),
                                lo,
                                hi,
                            };
                            if cand.beats(&best) {
                                best = cand;
                            }
                        }
                    }
                }
                (best, slab, corners)
            },
        )
        .map(|(b, _, _)| b)
        .reduce(|| Best::NONE, Best::pick);

    if best.is_none() {
        return None;
    }
    let rect = Rect::new(best.lo[..d].to_vec(), best.hi[..d].to_vec());
    let v = ps.contrast(&rect).expect("admissible rectangle has a contrast");
    Some((rect, v))
}

/// Exhaustive least-squares estimate: the admissible rectangle maximizing
/// `|contrast|`, with ties broken by smaller volume then lexicographic corners.
pub fn naive_ls(grid: &Grid, bounds: &SearchBounds) -> Result<Rect> {
    if grid.is_constant() {
        return Err(Error::Degenerate("constant grid has no contrast".into()));
    }
    let ps = PrefixSum::new(grid)?;
    search_windows(&ps, &CornerWindows::full(grid.dims()), bounds)
        .map(|(r, _)| r)
        .ok_or_else(|| Error::NoCandidate(format!("no rectangle admitted by {bounds:?}")))
}

/// Subsampling strides `L_k = floor(n_k^alpha)` and counts `M_k = ceil(n_k / L_k)`.
pub fn strides_for(dims: &[usize], alpha: f64) -> (Vec<usize>, Vec<usize>) {
    let l: Vec<usize> = dims
        .iter()
        .map(|&n| ((n as f64).powf(alpha) + 1e-9).floor().max(1.0) as usize)
        .collect();
    let m = dims.iter().zip(&l).map(|(&n, &l)| n.div_ceil(l)).collect();
    (l, m)
}

/// Picks every `L_k`-th cell along each axis, starting at the first.
/// Returns the sampled grid and the stride vector.
pub fn subsample(grid: &Grid, alpha: f64) -> Result<(Grid, Vec<usize>)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} not in (0,1)")));
    }
    let (l, m) = strides_for(grid.dims(), alpha);
    if let Some(k) = m.iter().position(|&m| m < 4) {
        return Err(Error::InvalidParameter(format!(
            "alpha {alpha} leaves {} sampled points on axis {k} (need at least 4)",
            m[k]
        )));
    }
    let mut full_idx = vec![0usize; grid.ndim()];
    let sub = Grid::from_fn(m, |s| {
        for (k, (&s, &l)) in s.iter().zip(&l).enumerate() {
            full_idx[k] = s * l;
        }
        grid.get(&full_idx)
    })?;
    Ok((sub, l))
}

/// Everything computed by [`algorithm1_detailed`].
#[derive(Debug, Clone)]
pub struct Refinement {
    pub rect: Rect,
    pub contrast: f64,
    /// Stage-one estimate mapped to full-grid corners.
    pub coarse: Rect,
    pub windows: CornerWindows,
}

/// Search bounds for the subsampled stage: drop only near-degenerate sizes.
fn coarse_bounds(m: usize) -> SearchBounds {
    let l1 = 4.0 / m as f64;
    if l1 < 0.5 {
        SearchBounds {
            lambda1: l1,
            lambda2: 1.0 - l1,
        }
    } else {
        SearchBounds::open()
    }
}

/// Window half-widths `ceil(C * L_k * n_k^kappa * (ln n)^(1/d))`, clipped to `[1, n_k]`.
pub fn window_half_widths(dims: &[usize], strides: &[usize], p: &Stage1Params) -> Vec<usize> {
    let n: usize = dims.iter().product();
    let d = dims.len() as f64;
    let log_term = (n as f64).ln().max(0.0).powf(1.0 / d);
    dims.iter()
        .zip(strides)
        .map(|(&nk, &lk)| {
            let h = (p.window_const * lk as f64 * (nk as f64).powf(p.kappa) * log_term).ceil();
            (h.max(1.0) as usize).min(nk)
        })
        .collect()
}

/// Two-stage intelligent-sampling estimate of a single patch.
pub fn algorithm1(grid: &Grid, p: &Stage1Params, bounds: &SearchBounds) -> Result<Rect> {
    algorithm1_detailed(grid, p, bounds).map(|r| r.rect)
}

pub fn algorithm1_detailed(grid: &Grid, p: &Stage1Params, bounds: &SearchBounds) -> Result<Refinement> {
    p.validate()?;
    if grid.is_constant() {
        return Err(Error::Degenerate("constant grid has no contrast".into()));
    }
    let (sub, l) = subsample(grid, p.alpha)?;
    let coarse_sub = naive_ls(&sub, &coarse_bounds(sub.len()))?;

    let dims = grid.dims();
    let coarse = Rect::new(
        (0..grid.ndim()).map(|k| (l[k] * coarse_sub.lo[k]).min(dims[k] - 1)).collect(),
        (0..grid.ndim()).map(|k| (l[k] * coarse_sub.hi[k]).min(dims[k])).collect(),
    );
    let h = window_half_widths(dims, &l, p);
    let windows = CornerWindows {
        lo: (0..grid.ndim())
            .map(|k| CornerRange::new(coarse.lo[k].saturating_sub(h[k]), (coarse.lo[k] + h[k]).min(dims[k] - 1)))
            .collect(),
        hi: (0..grid.ndim())
            .map(|k| CornerRange::new(coarse.hi[k].saturating_sub(h[k]).max(1), (coarse.hi[k] + h[k]).min(dims[k])))
            .collect(),
    };

    let ps = PrefixSum::new(grid)?;
    let (rect, contrast) = search_windows(&ps, &windows, bounds)
        .ok_or_else(|| Error::NoCandidate(format!("refinement windows around {coarse} admit no rectangle")))?;
    Ok(Refinement {
        rect,
        contrast,
        coarse,
        windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn indicator(dims: Vec<usize>, r: &Rect, jump: f64) -> Grid {
        Grid::from_fn(dims, |i| if r.contains(i) { jump } else { 0.0 }).unwrap()
    }

    fn noisy(dims: Vec<usize>, r: &Rect, jump: f64, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(dims, |i| {
            let base = if r.contains(i) { jump } else { 0.0 };
            base + rng.random_range(-0.5..0.5)
        })
        .unwrap()
    }

    #[test]
    fn subsample_arithmetic() {
        assert_eq!(strides_for(&[100], 0.5), (vec![10], vec![10]));
        assert_eq!(strides_for(&[10], 0.5), (vec![3], vec![4]));
        let g = Grid::from_fn(vec![10, 100], |i| (i[0] * 1000 + i[1]) as f64).unwrap();
        let (s, l) = subsample(&g, 0.5).unwrap();
        assert_eq!(l, vec![3, 10]);
        assert_eq!(s.dims(), &[4, 10]);
        assert_eq!(s.get(&[2, 7]), g.get(&[6, 70]));
        assert_eq!(s.get(&[3, 9]), g.get(&[9, 90]));
    }

    #[test]
    fn subsample_rejects_too_few_points() {
        let g = Grid::zeros(vec![6, 8]).unwrap();
        assert!(subsample(&g, 0.5).is_err());
        assert!(subsample(&g, 1.0).is_err());
    }

    #[test]
    fn naive_ls_recovers_noiseless_patch() {
        let truth = Rect::new(vec![2, 3], vec![5, 7]);
        let g = indicator(vec![8, 10], &truth, 2.0);
        assert_eq!(naive_ls(&g, &SearchBounds::open()).unwrap(), truth);
        let neg = indicator(vec![8, 10], &truth, -0.3);
        assert_eq!(naive_ls(&neg, &SearchBounds::open()).unwrap(), truth);
    }

    #[test]
    fn naive_ls_errors() {
        let g = Grid::filled(vec![5, 5], 1.0).unwrap();
        assert!(matches!(naive_ls(&g, &SearchBounds::open()), Err(Error::Degenerate(_))));
        let g = indicator(vec![2, 2], &Rect::new(vec![0, 0], vec![1, 1]), 1.0);
        let tight = SearchBounds::new(0.9, 1.0).unwrap();
        assert!(matches!(naive_ls(&g, &tight), Err(Error::NoCandidate(_))));
    }

    #[test]
    fn naive_ls_respects_bounds() {
        let truth = Rect::new(vec![0, 0], vec![2, 2]);
        let g = noisy(vec![8, 8], &truth, 3.0, 4);
        let bounds = SearchBounds::new(0.25, 0.75).unwrap();
        let r = naive_ls(&g, &bounds).unwrap();
        assert!(bounds.admits(r.volume(), 64));
    }

    #[test]
    fn one_dimensional_search() {
        let truth = Rect::new(vec![20], vec![45]);
        let g = indicator(vec![100], &truth, 1.0);
        assert_eq!(naive_ls(&g, &SearchBounds::open()).unwrap(), truth);
        assert_eq!(algorithm1(&g, &Stage1Params::default(), &SearchBounds::open()).unwrap(), truth);
    }

    #[test]
    fn three_dimensional_search() {
        let truth = Rect::new(vec![1, 2, 0], vec![4, 5, 3]);
        let g = noisy(vec![6, 6, 5], &truth, 4.0, 2);
        assert_eq!(naive_ls(&g, &SearchBounds::open()).unwrap(), truth);
    }

    #[test]
    fn algorithm1_noiseless_exact() {
        let truth = Rect::new(vec![13, 30], vec![50, 71]);
        let g = indicator(vec![100, 90], &truth, 1.0);
        let out = algorithm1_detailed(&g, &Stage1Params::default(), &SearchBounds::open()).unwrap();
        assert_eq!(out.rect, truth);
        assert!(out.windows.contains(&truth));
    }

    #[test]
    fn algorithm1_with_covering_windows_equals_naive() {
        let truth = Rect::new(vec![4, 5], vec![12, 14]);
        let p = Stage1Params {
            window_const: 1e6,
            ..Stage1Params::default()
        };
        for seed in 0..5 {
            let g = noisy(vec![18, 20], &truth, 0.8, seed);
            let naive = naive_ls(&g, &SearchBounds::open()).unwrap();
            let out = algorithm1_detailed(&g, &p, &SearchBounds::open()).unwrap();
            assert_eq!(out.windows, CornerWindows::full(g.dims()));
            assert_eq!(out.rect, naive);
        }
    }

    #[test]
    fn params_validation() {
        assert!(Stage1Params { alpha: 0.6, kappa: 0.4, window_const: 1.0 }.validate().is_err());
        assert!(Stage1Params { alpha: 0.5, kappa: 0.01, window_const: 0.0 }.validate().is_err());
        assert!(SearchBounds::new(0.5, 0.5).is_err());
        assert!(SearchBounds::new(-0.1, 0.5).is_err());
    }

    #[test]
    fn tie_break_prefers_smaller_volume() {
        // two equally strong single-cell spikes: the lexicographically first wins
        let g = Grid::new(vec![6], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let r = naive_ls(&g, &SearchBounds::open()).unwrap();
        assert_eq!(r, Rect::new(vec![1], vec![2]));
    }
}
