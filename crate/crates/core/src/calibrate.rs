//! Baseline level, long-run variance and block-threshold calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{increment, Grid, Rect};

/// Default boundary-layer thickness exponent.
pub const DEFAULT_BETA: f64 = 0.5;

/// Cells with some coordinate within `n_k^beta` of either face (1-based:
/// `i_k <= n_k^beta` or `i_k >= n_k - n_k^beta + 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryLayer {
    pub beta: f64,
}

impl BoundaryLayer {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidParameter(format!("boundary exponent {beta} not in (0,1)")));
        }
        Ok(Self { beta })
    }

    fn thickness(&self, n: usize) -> f64 {
        (n as f64).powf(self.beta)
    }

    /// Membership of a 0-based multi-index.
    pub fn contains(&self, idx: &[usize], dims: &[usize]) -> bool {
        idx.iter().zip(dims).any(|(&i, &n)| {
            let t = self.thickness(n);
            let one_based = (i + 1) as f64;
            one_based <= t || one_based >= n as f64 - t + 1.0
        })
    }

    /// Row-major membership mask.
    pub fn mask(&self, dims: &[usize]) -> Vec<bool> {
        let len: usize = dims.iter().product();
        // per-axis membership, then any-of across axes
        let axis: Vec<Vec<bool>> = dims
            .iter()
            .map(|&n| {
                let t = self.thickness(n);
                (0..n)
                    .map(|i| {
                        let one_based = (i + 1) as f64;
                        one_based <= t || one_based >= n as f64 - t + 1.0
                    })
                    .collect()
            })
            .collect();
        let mut idx = vec![0usize; dims.len()];
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(idx.iter().enumerate().any(|(k, &i)| axis[k][i]));
            increment(&mut idx, dims);
        }
        out
    }

    /// Whether any cell of `r` lies in the layer. The layer is a union of
    /// slabs, so this holds iff some axis range reaches a slab.
    pub fn intersects(&self, r: &Rect, dims: &[usize]) -> bool {
        !r.is_empty()
            && (0..dims.len()).any(|k| {
                let t = self.thickness(dims[k]);
                (r.lo[k] + 1) as f64 <= t || r.hi[k] as f64 >= dims[k] as f64 - t + 1.0
            })
    }

    pub fn cell_count(&self, dims: &[usize]) -> usize {
        self.mask(dims).iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Bartlett,
    Parzen,
}

impl Kernel {
    pub fn eval(&self, x: f64) -> f64 {
        let a = x.abs();
        match self {
            Kernel::Bartlett => (1.0 - a).max(0.0),
            Kernel::Parzen => {
                if a <= 0.5 {
                    1.0 - 6.0 * a * a + 6.0 * a * a * a
                } else if a <= 1.0 {
                    2.0 * (1.0 - a).powi(3)
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bartlett" => Ok(Kernel::Bartlett),
            "parzen" => Ok(Kernel::Parzen),
            _ => Err(Error::InvalidParameter(format!("unknown kernel {s:?} (bartlett or parzen)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub kind: Kernel,
    pub bandwidths: Vec<f64>,
}

impl KernelSpec {
    /// Bandwidths `ceil(n_k^(1/(2d)))`.
    pub fn default_for(dims: &[usize], kind: Kernel) -> Self {
        let d = dims.len() as f64;
        Self {
            kind,
            bandwidths: dims.iter().map(|&n| (n as f64).powf(1.0 / (2.0 * d)).ceil()).collect(),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.bandwidths.len() != d {
            return Err(Error::DimMismatch(format!(
                "{} bandwidths for a {d}-dimensional grid",
                self.bandwidths.len()
            )));
        }
        if self.bandwidths.iter().any(|&b| !(b >= 1.0) || !b.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bandwidths {:?} must be >= 1",
                self.bandwidths
            )));
        }
        Ok(())
    }

    fn weight(&self, lag: &[isize]) -> f64 {
        lag.iter()
            .zip(&self.bandwidths)
            .map(|(&h, &b)| self.kind.eval(h as f64 / b))
            .product()
    }
}

/// Long-run variance estimate; `clamped` is set when the raw kernel sum was
/// negative and the plain variance was returned instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrvEstimate {
    pub value: f64,
    pub clamped: bool,
}

/// Mean over the cells selected by `mask`.
pub fn masked_mean(grid: &Grid, mask: &[bool]) -> Result<f64> {
    let (sum, count) = grid
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    if count == 0 {
        return Err(Error::Degenerate("empty cell set".into()));
    }
    Ok(sum / count as f64)
}

/// Median over the cells selected by `mask`.
pub fn masked_median(grid: &Grid, mask: &[bool]) -> Result<f64> {
    let v: Vec<f64> = grid.data().iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    if v.is_empty() {
        return Err(Error::Degenerate("empty cell set".into()));
    }
    Ok(median(v))
}

/// Noise scale implied by block means of equal volume `v`:
/// `1.4826 * MAD(means) * sqrt(v)`. Block means of a weakly dependent field
/// have spread close to `sigma / sqrt(v)`, and the median-based spread
/// ignores a minority of shifted blocks.
pub fn robust_block_scale(block_means: &[f64], block_volume: usize) -> Result<f64> {
    if block_means.is_empty() {
        return Err(Error::Degenerate("no blocks".into()));
    }
    let med = median(block_means.to_vec());
    let mad = median(block_means.iter().map(|m| (m - med).abs()).collect());
    Ok(1.4826 * mad * (block_volume as f64).sqrt())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Kernel long-run variance over the cells selected by `mask`:
/// `|S|^-1 sum_{i,j in S} K((i-j)/B) (X_i - m)(X_j - m)`, enumerated by lag.
pub fn masked_lrv(grid: &Grid, mask: &[bool], kernel: &KernelSpec) -> Result<LrvEstimate> {
    kernel.validate(grid.ndim())?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Degenerate("empty cell set".into()));
    }
    let mean = masked_mean(grid, mask)?;
    let centred: Vec<f64> = grid
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v - mean } else { 0.0 })
        .collect();
    let dims = grid.dims();
    let strides = grid.strides();
    let d = dims.len();

    let variance = centred.iter().map(|c| c * c).sum::<f64>() / count as f64;

    // lags with |h_k| < B_k; only the lexicographically positive half, doubled
    let reach: Vec<usize> = kernel.bandwidths.iter().map(|&b| (b.ceil() as usize).saturating_sub(1)).collect();
    let span: Vec<usize> = reach.iter().map(|r| 2 * r + 1).collect();
    let mut lag_idx = vec![0usize; d];
    let lag_count: usize = span.iter().product();
    let mut cross = 0.0;
    for _ in 0..lag_count {
        let lag: Vec<isize> = lag_idx.iter().zip(&reach).map(|(&i, &r)| i as isize - r as isize).collect();
        increment(&mut lag_idx, &span);
        let first_nonzero = lag.iter().find(|&&h| h != 0);
        if !matches!(first_nonzero, Some(&h) if h > 0) {
            continue;
        }
        let w = kernel.weight(&lag);
        if w == 0.0 {
            continue;
        }
        cross += 2.0 * w * lagged_product(&centred, mask, dims, strides, &lag);
    }
    let raw = variance + cross / count as f64;
    Ok(if raw < 0.0 {
        LrvEstimate {
            value: variance,
            clamped: true,
        }
    } else {
        LrvEstimate {
            value: raw,
            clamped: false,
        }
    })
}

/// `sum_i c_i c_{i+h}` over pairs where both cells are in the mask.
fn lagged_product(c: &[f64], mask: &[bool], dims: &[usize], strides: &[usize], lag: &[isize]) -> f64 {
    let d = dims.len();
    // source range per axis so that i + h stays in bounds
    let lo: Vec<usize> = lag.iter().map(|&h| if h < 0 { (-h) as usize } else { 0 }).collect();
    let hi: Vec<usize> = lag
        .iter()
        .zip(dims)
        .map(|(&h, &n)| if h > 0 { n.saturating_sub(h as usize) } else { n })
        .collect();
    if (0..d).any(|k| lo[k] >= hi[k]) {
        return 0.0;
    }
    let shift: isize = lag.iter().zip(strides).map(|(&h, &s)| h * s as isize).sum();
    let last = d - 1;
    let mut idx = lo.clone();
    let mut sum = 0.0;
    loop {
        let base: usize = idx.iter().zip(strides).map(|(a, b)| a * b).sum();
        for j in lo[last]..hi[last] {
            let i = base + j - idx[last] * strides[last];
            let t = (i as isize + shift) as usize;
            if mask[i] && mask[t] {
                sum += c[i] * c[t];
            }
        }
        let mut k = last;
        loop {
            if k == 0 {
                return sum;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < hi[k] {
                break;
            }
            idx[k] = lo[k];
        }
    }
}

/// Baseline level: mean over the boundary layer.
pub fn estimate_mu0(grid: &Grid, beta: f64) -> Result<f64> {
    let layer = BoundaryLayer::new(beta)?;
    masked_mean(grid, &layer.mask(grid.dims()))
}

/// Long-run variance over the boundary layer.
pub fn estimate_lrv(grid: &Grid, beta: f64, kernel: &KernelSpec) -> Result<LrvEstimate> {
    let layer = BoundaryLayer::new(beta)?;
    masked_lrv(grid, &layer.mask(grid.dims()), kernel)
}

/// `(1 - kappa)` quantile of `max_s |sigma W(B_s)| / v` over `num_blocks`
/// independent blocks of volume `v`:
/// `(sigma / sqrt(v)) * Phi^-1((1 + (1 - kappa)^(1/M)) / 2)`.
pub fn threshold_q(sigma: f64, block_volume: f64, num_blocks: usize, kappa_level: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma {sigma} must be positive")));
    }
    if !(block_volume >= 1.0) || !block_volume.is_finite() {
        return Err(Error::InvalidParameter(format!("block volume {block_volume} must be >= 1")));
    }
    if num_blocks == 0 {
        return Err(Error::InvalidParameter("need at least one block".into()));
    }
    if !(kappa_level > 0.0 && kappa_level < 1.0) {
        return Err(Error::InvalidParameter(format!("level {kappa_level} not in (0,1)")));
    }
    // two-sided tail mass per block, computed without cancellation
    let tail = -((-kappa_level).ln_1p() / num_blocks as f64).exp_m1() / 2.0;
    let z = std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * tail);
    Ok(sigma / block_volume.sqrt() * z)
}

/// Same quantile for blocks of unequal volume, given as `(volume, count)`
/// groups: the `q` solving `prod_s P(|Z| <= q sqrt(v_s) / sigma) = 1 - kappa`.
/// Equals [`threshold_q`] when all volumes agree.
pub fn threshold_q_mixed(sigma: f64, groups: &[(f64, usize)], kappa_level: f64) -> Result<f64> {
    let total: usize = groups.iter().map(|g| g.1).sum();
    let vmin = groups.iter().filter(|g| g.1 > 0).map(|g| g.0).fold(f64::INFINITY, f64::min);
    let vmax = groups.iter().filter(|g| g.1 > 0).map(|g| g.0).fold(0.0, f64::max);
    let hi = threshold_q(sigma, vmin, total, kappa_level)?;
    let lo = threshold_q(sigma, vmax, total, kappa_level)?;
    if vmin == vmax {
        return Ok(hi);
    }
    let target = (-kappa_level).ln_1p();
    let log_cover = |q: f64| -> f64 {
        groups
            .iter()
            .map(|&(v, c)| c as f64 * (-statrs::function::erf::erfc(q * (v / 2.0).sqrt() / sigma)).ln_1p())
            .sum()
    };
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if log_cover(mid) < target {
            a = mid;
        } else {
            b = mid;
        }
        if b - a <= 1e-15 * b {
            break;
        }
    }
    Ok(0.5 * (a + b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variogram {
    /// Sample variance, the sill proxy.
    pub gamma0: f64,
    /// `gamma[h - 1]` for lags `h = 1..=max_lag`.
    pub gamma: Vec<f64>,
}

/// Empirical semivariogram along one axis.
pub fn empirical_variogram(grid: &Grid, axis: usize, max_lag: usize) -> Result<Variogram> {
    let dims = grid.dims();
    if axis >= dims.len() {
        return Err(Error::InvalidParameter(format!(
            "axis {axis} out of range for {} dimensions",
            dims.len()
        )));
    }
    if max_lag >= dims[axis] {
        return Err(Error::InvalidParameter(format!(
            "max lag {max_lag} must be below axis length {}",
            dims[axis]
        )));
    }
    let data = grid.data();
    let mean = grid.mean();
    let gamma0 = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.len() as f64;
    let stride = grid.strides()[axis];
    let n_axis = dims[axis];
    let block = stride * n_axis;
    let gamma = (1..=max_lag)
        .map(|h| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for start in (0..data.len()).step_by(block) {
                for t in 0..n_axis - h {
                    for i in 0..stride {
                        let a = data[start + t * stride + i];
                        let b = data[start + (t + h) * stride + i];
                        sum += (b - a) * (b - a);
                        count += 1;
                    }
                }
            }
            0.5 * sum / count as f64
        })
        .collect();
    Ok(Variogram { gamma0, gamma })
}
