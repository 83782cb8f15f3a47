//! Dense lattice fields, half-open rectangles and prefix sums.
//!
//! Indexing is row-major (the last axis varies fastest) and `d` is a runtime
//! value between 1 and [`MAX_DIM`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 4;

/// Grids with more cells than this accumulate prefix sums with compensated
/// (Neumaier) summation.
pub const COMPENSATED_THRESHOLD: usize = 1 << 24;

/// Row-major strides for the given shape.
pub(crate) fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    strides
}

pub(crate) fn checked_volume(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .filter(|&v| v <= isize::MAX as usize / std::mem::size_of::<f64>())
        .ok_or_else(|| Error::DimensionOverflow(dims.to_vec()))
}

fn validate_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_DIM {
        return Err(Error::InvalidDims(format!(
            "dimension count {} not in 1..={MAX_DIM}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidDims(format!("zero-length axis in {dims:?}")));
    }
    checked_volume(dims)
}

/// A dense real-valued field on `[n_1] x ... x [n_d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: Vec<usize>,
    strides: Vec<usize>,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = validate_dims(&dims)?;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        let strides = strides_of(&dims);
        Ok(Self {
            dims,
            strides,
            data,
        })
    }

    pub fn filled(dims: Vec<usize>, value: f64) -> Result<Self> {
        let len = validate_dims(&dims)?;
        Self::new(dims, vec![value; len])
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    /// Builds a grid by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len = validate_dims(&dims)?;
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..len {
            data.push(f(&idx));
            increment(&mut idx, &dims);
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// The rectangle covering the whole grid.
    pub fn full_rect(&self) -> Rect {
        Rect::new(vec![0; self.ndim()], self.dims.clone())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_constant(&self) -> bool {
        let first = self.data[0];
        self.data.iter().all(|&v| v == first)
    }

    /// Copies the cells of `r` into a new grid with dims `r.hi - r.lo`.
    pub fn subgrid(&self, r: &Rect) -> Result<Grid> {
        r.check_within(&self.dims)?;
        if r.is_empty() {
            return Err(Error::DegenerateRect("empty"));
        }
        let sub_dims = r.extent();
        let mut out = Vec::with_capacity(r.volume());
        let d = self.ndim();
        let last = d - 1;
        let row_len = sub_dims[last];
        let mut idx = r.lo.clone();
        loop {
            let off = self.offset(&idx);
            out.extend_from_slice(&self.data[off..off + row_len]);
            // advance over all axes except the last
            let mut k = last;
            loop {
                if k == 0 {
                    return Grid::new(sub_dims, out);
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < r.hi[k] {
                    break;
                }
                idx[k] = r.lo[k];
            }
        }
    }

    /// Applies `x -> scale * x + shift` to every cell.
    pub fn affine(&self, scale: f64, shift: f64) -> Grid {
        Grid {
            dims: self.dims.clone(),
            strides: self.strides.clone(),
            data: self.data.iter().map(|&v| scale * v + shift).collect(),
        }
    }
}

/// Advances a row-major multi-index; wraps to all zeros after the last cell.
pub(crate) fn increment(idx: &mut [usize], dims: &[usize]) {
    for k in (0..dims.len()).rev() {
        idx[k] += 1;
        if idx[k] < dims[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// A half-open axis-aligned rectangle.
///
/// `lo` is the exclusive lower corner and `hi` the inclusive upper corner in
/// 1-based lattice coordinates; equivalently the 0-based cells
/// `lo[k] <= i[k] < hi[k]`. A rectangle with `lo[k] >= hi[k]` on any axis is
/// empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl Rect {
    pub fn new(lo: Vec<usize>, hi: Vec<usize>) -> Self {
        assert_eq!(lo.len(), hi.len(), "corner dimension mismatch");
        Self { lo, hi }
    }

    pub fn empty(d: usize) -> Self {
        Self::new(vec![0; d], vec![0; d])
    }

    pub fn ndim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.iter().zip(&self.hi).any(|(l, h)| l >= h)
    }

    pub fn extent(&self) -> Vec<usize> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| h.saturating_sub(l))
            .collect()
    }

    /// Number of lattice cells, `|b - a|`.
    pub fn volume(&self) -> usize {
        if self.is_empty() {
            return 0;
        }
        self.extent().iter().product()
    }

    pub fn contains(&self, idx: &[usize]) -> bool {
        idx.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&i, (&l, &h))| l <= i && i < h)
    }

    /// Coordinatewise intersection; empty when the rectangles are disjoint.
    pub fn intersect(&self, other: &Rect) -> Rect {
        let lo: Vec<usize> = self.lo.iter().zip(&other.lo).map(|(a, b)| *a.max(b)).collect();
        let hi: Vec<usize> = self.hi.iter().zip(&other.hi).map(|(a, b)| *a.min(b)).collect();
        let r = Rect::new(lo, hi);
        if r.is_empty() {
            Rect::empty(self.ndim())
        } else {
            r
        }
    }

    pub fn intersection_volume(&self, other: &Rect) -> usize {
        if self.is_empty() || other.is_empty() {
            return 0;
        }
        let mut v = 1usize;
        for k in 0..self.ndim() {
            let lo = self.lo[k].max(other.lo[k]);
            let hi = self.hi[k].min(other.hi[k]);
            if hi <= lo {
                return 0;
            }
            v *= hi - lo;
        }
        v
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.intersection_volume(other) > 0
    }

    /// Shifts the rectangle by `offset` (used to map sub-grid results back).
    pub fn translate(&self, offset: &[usize]) -> Rect {
        Rect::new(
            self.lo.iter().zip(offset).map(|(a, o)| a + o).collect(),
            self.hi.iter().zip(offset).map(|(a, o)| a + o).collect(),
        )
    }

    pub fn check_within(&self, dims: &[usize]) -> Result<()> {
        let ok = self.ndim() == dims.len()
            && self
                .lo
                .iter()
                .zip(&self.hi)
                .zip(dims)
                .all(|((&l, &h), &n)| l <= h && h <= n);
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                rect: self.to_string(),
                dims: dims.to_vec(),
            })
        }
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in 0..self.ndim() {
            if k > 0 {
                write!(f, "x")?;
            }
            write!(f, "({},{}]", self.lo[k], self.hi[k])?;
        }
        Ok(())
    }
}

/// `|a Δ b| = |a| + |b| - 2|a ∩ b|`.
pub fn sym_diff_volume(a: &Rect, b: &Rect) -> usize {
    a.volume() + b.volume() - 2 * a.intersection_volume(b)
}

/// Summed-area table over a [`Grid`] with a zero border.
///
/// `table` has shape `n_k + 1` per axis and entry `c` holds the sum of all
/// cells `i < c` (coordinatewise), so any rectangle sum is a `2^d`-term
/// inclusion-exclusion.
#[derive(Debug, Clone)]
pub struct PrefixSum {
    dims: Vec<usize>,
    pstrides: Vec<usize>,
    table: Vec<f64>,
    total: f64,
    n: usize,
}

impl PrefixSum {
    pub fn new(grid: &Grid) -> Result<Self> {
        let dims = grid.dims().to_vec();
        let pdims: Vec<usize> = dims.iter().map(|n| n + 1).collect();
        let plen = checked_volume(&pdims)?;
        let pstrides = strides_of(&pdims);
        let mut table = vec![0.0; plen];

        // scatter the grid into the interior, offset by one on every axis
        let base: usize = pstrides.iter().sum();
        let mut idx = vec![0usize; dims.len()];
        let last = dims.len() - 1;
        let row = dims[last];
        for chunk in grid.data().chunks(row) {
            let off = base + idx.iter().zip(&pstrides).map(|(i, s)| i * s).sum::<usize>();
            table[off..off + row].copy_from_slice(chunk);
            // advance all but the last axis
            for k in (0..last).rev() {
                idx[k] += 1;
                if idx[k] < dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }

        let compensated = grid.len() > COMPENSATED_THRESHOLD;
        for axis in 0..dims.len() {
            cumsum_axis(&mut table, &pdims, &pstrides, axis, compensated);
        }
        let total = *table.last().expect("non-empty table");
        Ok(Self {
            n: grid.len(),
            dims,
            pstrides,
            table,
            total,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Number of grid cells.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub(crate) fn table(&self) -> &[f64] {
        &self.table
    }

    pub(crate) fn pstrides(&self) -> &[usize] {
        &self.pstrides
    }

    /// Sum over the cells of `r`.
    pub fn rect_sum(&self, r: &Rect) -> Result<f64> {
        r.check_within(&self.dims)?;
        if r.is_empty() {
            return Ok(0.0);
        }
        Ok(self.rect_sum_unchecked(&r.lo, &r.hi))
    }

    pub(crate) fn rect_sum_unchecked(&self, lo: &[usize], hi: &[usize]) -> f64 {
        let d = lo.len();
        let mut sum = 0.0;
        for mask in 0..(1usize << d) {
            let mut off = 0;
            let mut lows = 0;
            for k in 0..d {
                if mask & (1 << k) != 0 {
                    off += hi[k] * self.pstrides[k];
                } else {
                    off += lo[k] * self.pstrides[k];
                    lows += 1;
                }
            }
            if lows % 2 == 0 {
                sum += self.table[off];
            } else {
                sum -= self.table[off];
            }
        }
        sum
    }

    /// Mean over the cells of a non-empty rectangle.
    pub fn rect_mean(&self, r: &Rect) -> Result<f64> {
        let v = r.volume();
        if v == 0 {
            return Err(Error::DegenerateRect("empty"));
        }
        Ok(self.rect_sum(r)? / v as f64)
    }

    /// Signed contrast `b(|I|) (mean_I - mean_{I^c})` with
    /// `b(k) = sqrt(k (n - k)) / n`.
    pub fn contrast(&self, r: &Rect) -> Result<f64> {
        let k = r.volume();
        if k == 0 {
            return Err(Error::DegenerateRect("empty"));
        }
        if k >= self.n {
            return Err(Error::DegenerateRect("full"));
        }
        let s = self.rect_sum(r)?;
        Ok(contrast_from_sums(s, k as f64, self.total, self.n as f64))
    }
}

/// Contrast from the rectangle sum `s`, volume `k`, grand total and `n`.
#[inline]
pub(crate) fn contrast_from_sums(s: f64, k: f64, total: f64, n: f64) -> f64 {
    (s * n - total * k) / (n * (k * (n - k)).sqrt())
}

fn cumsum_axis(table: &mut [f64], pdims: &[usize], pstrides: &[usize], axis: usize, compensated: bool) {
    let stride = pstrides[axis];
    let len = pdims[axis];
    let outer: usize = pdims[..axis].iter().product();
    let inner = stride;
    let block = len * stride;
    for o in 0..outer {
        let base = o * block;
        if compensated {
            for i in 0..inner {
                let mut sum = 0.0f64;
                let mut comp = 0.0f64;
                for t in 0..len {
                    let off = base + t * stride + i;
                    let v = table[off];
                    let s = sum + v;
                    if sum.abs() >= v.abs() {
                        comp += (sum - s) + v;
                    } else {
                        comp += (v - s) + sum;
                    }
                    sum = s;
                    table[off] = sum + comp;
                }
            }
        } else {
            for t in 1..len {
                let (prev, cur) = table[base + (t - 1) * stride..base + (t + 1) * stride].split_at_mut(stride);
                for (c, p) in cur.iter_mut().zip(prev.iter()) {
                    *c += *p;
                }
            }
        }
    }
}

/// One anomalous patch: a rectangle and its mean shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub rect: Rect,
    pub jump: f64,
}

/// Disjoint patches over a common baseline level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub baseline: f64,
}

impl PatchSet {
    pub fn new(patches: Vec<Patch>, baseline: f64) -> Self {
        Self { patches, baseline }
    }

    pub fn empty(baseline: f64) -> Self {
        Self::new(Vec::new(), baseline)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn rects(&self) -> Vec<Rect> {
        self.patches.iter().map(|p| p.rect.clone()).collect()
    }

    /// Checks in-bounds, non-empty, non-zero jumps and pairwise disjointness.
    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        for p in &self.patches {
            p.rect.check_within(dims)?;
            if p.rect.is_empty() {
                return Err(Error::InvalidParameter(format!("empty patch {}", p.rect)));
            }
            if p.jump == 0.0 || !p.jump.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "patch {} has jump {}",
                    p.rect, p.jump
                )));
            }
        }
        for (i, a) in self.patches.iter().enumerate() {
            for b in &self.patches[i + 1..] {
                if a.rect.overlaps(&b.rect) {
                    return Err(Error::OverlappingPatches(a.rect.to_string(), b.rect.to_string()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct_sum(g: &Grid, r: &Rect) -> f64 {
        let mut s = 0.0;
        let mut idx = vec![0; g.ndim()];
        for _ in 0..g.len() {
            if r.contains(&idx) {
                s += g.get(&idx);
            }
            increment(&mut idx, g.dims());
        }
        s
    }

    fn random_grid(dims: Vec<usize>, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(dims, |_| rng.random_range(-5.0..5.0)).unwrap()
    }

    fn all_rects_2d(n0: usize, n1: usize) -> Vec<Rect> {
        let mut out = Vec::new();
        for a0 in 0..=n0 {
            for b0 in a0 + 1..=n0 {
                for a1 in 0..=n1 {
                    for b1 in a1 + 1..=n1 {
                        out.push(Rect::new(vec![a0, a1], vec![b0, b1]));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn two_by_two_full_sum() {
        let g = Grid::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ps = PrefixSum::new(&g).unwrap();
        assert_eq!(ps.rect_sum(&g.full_rect()).unwrap(), 10.0);
        assert_eq!(ps.rect_sum(&Rect::new(vec![1, 1], vec![2, 2])).unwrap(), 4.0);
        assert_eq!(ps.rect_sum(&Rect::empty(2)).unwrap(), 0.0);
        assert_eq!(ps.rect_sum(&Rect::new(vec![1, 0], vec![1, 2])).unwrap(), 0.0);
    }

    #[test]
    fn constant_grid_sum_is_c_times_volume() {
        let g = Grid::filled(vec![5, 7], 3.0).unwrap();
        let ps = PrefixSum::new(&g).unwrap();
        let r = Rect::new(vec![1, 2], vec![4, 6]);
        assert_eq!(ps.rect_sum(&r).unwrap(), 3.0 * 12.0);
    }

    #[test]
    fn exhaustive_6x6_matches_direct_sum() {
        let g = random_grid(vec![6, 6], 11);
        let ps = PrefixSum::new(&g).unwrap();
        let rects = all_rects_2d(6, 6);
        // 21 non-empty corner pairs per axis
        assert_eq!(rects.len(), 441);
        for r in &rects {
            let direct = direct_sum(&g, r);
            let fast = ps.rect_sum(r).unwrap();
            assert!((direct - fast).abs() <= 1e-9 * r.volume().max(1) as f64 * 5.0, "{r}");
        }
    }

    #[test]
    fn exhaustive_integer_grids_are_exact() {
        for (n0, n1) in [(1, 6), (6, 1), (3, 5), (6, 6)] {
            let mut rng = ChaCha8Rng::seed_from_u64((n0 * 10 + n1) as u64);
            let g = Grid::from_fn(vec![n0, n1], |_| rng.random_range(-20i32..20) as f64).unwrap();
            let ps = PrefixSum::new(&g).unwrap();
            for r in all_rects_2d(n0, n1) {
                assert_eq!(ps.rect_sum(&r).unwrap(), direct_sum(&g, &r));
            }
        }
    }

    #[test]
    fn random_3d_rects_match_direct_sum() {
        let g = random_grid(vec![4, 4, 4], 5);
        let ps = PrefixSum::new(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let mut lo = Vec::new();
            let mut hi = Vec::new();
            for _ in 0..3 {
                let a = rng.random_range(0..=4);
                let b = rng.random_range(0..=4);
                lo.push(a.min(b));
                hi.push(a.max(b));
            }
            let r = Rect::new(lo, hi);
            assert!((ps.rect_sum(&r).unwrap() - direct_sum(&g, &r)).abs() < 1e-9 * 64.0 * 5.0);
        }
    }

    #[test]
    fn compensated_path_matches_plain_on_small_grid() {
        let g = random_grid(vec![9, 8], 3);
        let pdims = [10, 9];
        let pstrides = strides_of(&pdims);
        let plain = PrefixSum::new(&g).unwrap();
        let mut table = vec![0.0; 90];
        for i in 0..9 {
            for j in 0..8 {
                table[(i + 1) * 9 + j + 1] = g.get(&[i, j]);
            }
        }
        for axis in 0..2 {
            cumsum_axis(&mut table, &pdims, &pstrides, axis, true);
        }
        for (a, b) in table.iter().zip(plain.table()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_and_four_dimensional_grids() {
        let g = Grid::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let ps = PrefixSum::new(&g).unwrap();
        assert_eq!(ps.rect_sum(&Rect::new(vec![1], vec![4])).unwrap(), 9.0);

        let g4 = random_grid(vec![2, 3, 2, 3], 8);
        let ps4 = PrefixSum::new(&g4).unwrap();
        let r = Rect::new(vec![0, 1, 1, 0], vec![2, 3, 2, 2]);
        assert!((ps4.rect_sum(&r).unwrap() - direct_sum(&g4, &r)).abs() < 1e-10);
    }

    #[test]
    fn out_of_bounds_rect_is_rejected() {
        let g = Grid::zeros(vec![3, 3]).unwrap();
        let ps = PrefixSum::new(&g).unwrap();
        assert!(matches!(
            ps.rect_sum(&Rect::new(vec![0, 0], vec![4, 1])),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn invalid_grids_are_rejected() {
        assert!(matches!(Grid::new(vec![2, 2], vec![0.0; 3]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(Grid::new(vec![], vec![]), Err(Error::InvalidDims(_))));
        assert!(matches!(Grid::zeros(vec![1, 1, 1, 1, 1]), Err(Error::InvalidDims(_))));
        assert!(matches!(Grid::zeros(vec![3, 0]), Err(Error::InvalidDims(_))));
        assert!(matches!(
            Grid::zeros(vec![usize::MAX, 2]),
            Err(Error::DimensionOverflow(_))
        ));
    }

    #[test]
    fn contrast_hand_example() {
        let g = Grid::new(vec![2, 2], vec![1.0, 1.0, 1.0, 5.0]).unwrap();
        let ps = PrefixSum::new(&g).unwrap();
        let v = ps.contrast(&Rect::new(vec![1, 1], vec![2, 2])).unwrap();
        assert!((v - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn contrast_of_constant_grid_is_zero() {
        let g = Grid::filled(vec![4, 3], 2.5).unwrap();
        let ps = PrefixSum::new(&g).unwrap();
        for r in all_rects_2d(4, 3) {
            if r.volume() == 12 {
                continue;
            }
            assert!(ps.contrast(&r).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn contrast_rejects_empty_and_full() {
        let g = Grid::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ps = PrefixSum::new(&g).unwrap();
        assert!(matches!(ps.contrast(&Rect::empty(2)), Err(Error::DegenerateRect("empty"))));
        assert!(matches!(ps.contrast(&g.full_rect()), Err(Error::DegenerateRect("full"))));
    }

    #[test]
    fn sym_diff_examples() {
        let a = Rect::new(vec![0, 0], vec![4, 4]);
        let b = Rect::new(vec![2, 0], vec![6, 4]);
        assert_eq!(sym_diff_volume(&a, &a), 0);
        assert_eq!(sym_diff_volume(&a, &b), 16);
        let c = Rect::new(vec![10, 10], vec![11, 12]);
        assert_eq!(sym_diff_volume(&a, &c), 18);
        assert_eq!(sym_diff_volume(&Rect::empty(2), &Rect::empty(2)), 0);
    }

    #[test]
    fn subgrid_copies_cells() {
        let g = Grid::from_fn(vec![4, 5], |i| (i[0] * 10 + i[1]) as f64).unwrap();
        let s = g.subgrid(&Rect::new(vec![1, 2], vec![3, 5])).unwrap();
        assert_eq!(s.dims(), &[2, 3]);
        assert_eq!(s.data(), &[12.0, 13.0, 14.0, 22.0, 23.0, 24.0]);
        let g3 = Grid::from_fn(vec![3, 3, 3], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64).unwrap();
        let s3 = g3.subgrid(&Rect::new(vec![1, 0, 2], vec![3, 2, 3])).unwrap();
        assert_eq!(s3.data(), &[102.0, 112.0, 202.0, 212.0]);
    }

    #[test]
    fn patchset_validation() {
        let ok = PatchSet::new(
            vec![
                Patch { rect: Rect::new(vec![0, 0], vec![2, 2]), jump: 1.0 },
                Patch { rect: Rect::new(vec![2, 0], vec![4, 2]), jump: -1.0 },
            ],
            0.0,
        );
        ok.validate(&[4, 4]).unwrap();
        let overlap = PatchSet::new(
            vec![
                Patch { rect: Rect::new(vec![0, 0], vec![3, 2]), jump: 1.0 },
                Patch { rect: Rect::new(vec![2, 0], vec![4, 2]), jump: 1.0 },
            ],
            0.0,
        );
        assert!(matches!(overlap.validate(&[4, 4]), Err(Error::OverlappingPatches(..))));
        let zero = PatchSet::new(vec![Patch { rect: Rect::new(vec![0, 0], vec![1, 1]), jump: 0.0 }], 0.0);
        assert!(zero.validate(&[4, 4]).is_err());
    }

    fn arb_rect(n: usize) -> impl Strategy<Value = Rect> {
        (0..=n, 0..=n, 0..=n, 0..=n).prop_map(|(a, b, c, d)| {
            Rect::new(vec![a.min(b), c.min(d)], vec![a.max(b), c.max(d)])
        })
    }

    proptest! {
        #[test]
        fn sym_diff_is_a_metric(a in arb_rect(8), b in arb_rect(8), c in arb_rect(8)) {
            prop_assert_eq!(sym_diff_volume(&a, &b), sym_diff_volume(&b, &a));
            prop_assert!(sym_diff_volume(&a, &c) <= sym_diff_volume(&a, &b) + sym_diff_volume(&b, &c));
            let same_cells = (a.is_empty() && b.is_empty()) || a == b;
            prop_assert_eq!(sym_diff_volume(&a, &b) == 0, same_cells);
        }

        #[test]
        fn contrast_shift_and_scale(seed in 0u64..1000, shift in -10.0f64..10.0, scale in 0.1f64..10.0) {
            let g = random_grid(vec![5, 4], seed);
            let ps = PrefixSum::new(&g).unwrap();
            let shifted = PrefixSum::new(&g.affine(1.0, shift)).unwrap();
            let scaled = PrefixSum::new(&g.affine(scale, 0.0)).unwrap();
            let r = Rect::new(vec![1, 1], vec![3, 4]);
            let v = ps.contrast(&r).unwrap();
            prop_assert!((shifted.contrast(&r).unwrap() - v).abs() < 1e-9);
            prop_assert!((scaled.contrast(&r).unwrap() - scale * v).abs() < 1e-9 * scale.max(1.0));
        }
    }
}
