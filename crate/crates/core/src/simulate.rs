//! Synthetic noise fields and mean-shift patch injection.

use std::fmt;
use std::str::FromStr;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{increment, strides_of, Grid, Patch, PatchSet, Rect};

/// Convergence tolerance (max-norm update) for the SAR fixed point.
pub const SAR_TOL: f64 = 1e-10;

/// Stencil coefficients below this are dropped from the max-stable field.
pub const MAX_STABLE_CUTOFF: f64 = 1e-6;

/// Decay base used when a max-stable field is requested without one.
pub const DEFAULT_MAX_STABLE_BASE: f64 = 0.6;

/// One term `coeff * e_{i - offset}` of a linear field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StencilTap {
    pub offset: Vec<isize>,
    pub coeff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldKind {
    IidGaussian,
    /// `e = rho * W e + innovations`, `W` the row-normalized nearest-neighbour average.
    Sar { rho: f64 },
    /// Finite moving average of iid Gaussians.
    Linear { stencil: Vec<StencilTap> },
    /// Uniform moving average over `{0..=m}^d`, scaled to unit variance.
    MDependent { m: usize },
    /// `Y_t = max_s a_s e_{t-s}` with demeaned Frechet innovations and
    /// `a_s = base^(s_1 + ... + s_d)`.
    MaxStable { tail_index: f64, base: f64 },
}

impl FieldKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            FieldKind::IidGaussian => Ok(()),
            FieldKind::Sar { rho } => {
                if (0.0..1.0).contains(rho) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("SAR rho {rho} not in [0,1)")))
                }
            }
            FieldKind::Linear { stencil } => {
                if stencil.is_empty() || stencil.iter().any(|t| !t.coeff.is_finite()) {
                    Err(Error::InvalidParameter("linear stencil must be non-empty and finite".into()))
                } else {
                    Ok(())
                }
            }
            FieldKind::MDependent { .. } => Ok(()),
            FieldKind::MaxStable { tail_index, base } => {
                if !(*tail_index > 2.0) || !tail_index.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "max-stable tail index {tail_index} must exceed 2"
                    )));
                }
                if !(*base > 0.0 && *base < 1.0) {
                    return Err(Error::InvalidParameter(format!("max-stable base {base} not in (0,1)")));
                }
                Ok(())
            }
        }
    }
}

/// Short textual form used on the command line:
/// `iid`, `sar:RHO`, `mdep:M`, `maxstable:TAIL[:BASE]`.
impl FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let num = |i: usize| -> Result<f64> {
            args.get(i)
                .ok_or_else(|| Error::InvalidParameter(format!("noise '{s}' is missing a parameter")))?
                .parse::<f64>()
                .map_err(|e| Error::InvalidParameter(format!("noise '{s}': {e}")))
        };
        let kind = match (head, args.len()) {
            ("iid", 0) => FieldKind::IidGaussian,
            ("sar", 1) => FieldKind::Sar { rho: num(0)? },
            ("mdep", 1) => FieldKind::MDependent {
                m: args[0]
                    .parse()
                    .map_err(|e| Error::InvalidParameter(format!("noise '{s}': {e}")))?,
            },
            ("maxstable", 1) => FieldKind::MaxStable {
                tail_index: num(0)?,
                base: DEFAULT_MAX_STABLE_BASE,
            },
            ("maxstable", 2) => FieldKind::MaxStable {
                tail_index: num(0)?,
                base: num(1)?,
            },
            _ => return Err(Error::InvalidParameter(format!("unrecognized noise '{s}'"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::IidGaussian => write!(f, "iid"),
            FieldKind::Sar { rho } => write!(f, "sar:{rho}"),
            FieldKind::Linear { stencil } => write!(f, "linear[{}]", stencil.len()),
            FieldKind::MDependent { m } => write!(f, "mdep:{m}"),
            FieldKind::MaxStable { tail_index, base } => write!(f, "maxstable:{tail_index}:{base}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    #[serde(flatten)]
    pub kind: FieldKind,
    pub seed: u64,
}

impl FieldSpec {
    pub fn new(kind: FieldKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian_grid(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Grid> {
    Grid::from_fn(dims, |_| rng.sample(StandardNormal))
}

/// Generates a mean-zero noise field.
pub fn gen_field(spec: &FieldSpec, dims: &[usize]) -> Result<Grid> {
    spec.kind.validate()?;
    let mut rng = rng_for(spec.seed);
    match &spec.kind {
        FieldKind::IidGaussian => gaussian_grid(dims.to_vec(), &mut rng),
        FieldKind::Sar { rho } => {
            let e = gaussian_grid(dims.to_vec(), &mut rng)?;
            sar_solve(&e, *rho)
        }
        FieldKind::Linear { stencil } => {
            let taps: Vec<(Vec<isize>, f64)> = stencil.iter().map(|t| (t.offset.clone(), t.coeff)).collect();
            for (off, _) in &taps {
                if off.len() != dims.len() {
                    return Err(Error::DimMismatch(format!(
                        "stencil offset {off:?} for a {}-dimensional field",
                        dims.len()
                    )));
                }
            }
            moving_combine(dims, &taps, &mut rng, |rng| rng.sample(StandardNormal), Combine::Sum)
        }
        FieldKind::MDependent { m } => {
            let taps = m_dependent_stencil(*m, dims.len());
            moving_combine(dims, &taps, &mut rng, |rng| rng.sample(StandardNormal), Combine::Sum)
        }
        FieldKind::MaxStable { tail_index, base } => {
            let taps: Vec<(Vec<isize>, f64)> = max_stable_stencil(*base, dims.len())
                .into_iter()
                .map(|(s, a)| (s.into_iter().map(|v| v as isize).collect(), a))
                .collect();
            let shift = frechet_mean(*tail_index);
            let inv = -1.0 / tail_index;
            let mut g = moving_combine(
                dims,
                &taps,
                &mut rng,
                |rng| {
                    let u: f64 = rng.sample(Open01);
                    (-u.ln()).powf(inv) - shift
                },
                Combine::Max,
            )?;
            let mean = g.mean();
            g.data_mut().iter_mut().for_each(|v| *v -= mean);
            Ok(g)
        }
    }
}

/// Mean of a unit-scale Frechet variable, `Gamma(1 - 1/tail_index)`.
pub fn frechet_mean(tail_index: f64) -> f64 {
    statrs::function::gamma::gamma(1.0 - 1.0 / tail_index)
}

/// Non-negative offsets `s` with `base^(sum s) >= 1e-6`, paired with their weight.
pub fn max_stable_stencil(base: f64, d: usize) -> Vec<(Vec<usize>, f64)> {
    let max_order = (MAX_STABLE_CUTOFF.ln() / base.ln()).floor() as usize;
    let mut out = Vec::new();
    let mut s = vec![0usize; d];
    loop {
        let order: usize = s.iter().sum();
        if order <= max_order {
            let a = base.powi(order as i32);
            if a >= MAX_STABLE_CUTOFF {
                out.push((s.clone(), a));
            }
        }
        // odometer over {0..=max_order}^d
        let mut k = d;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            s[k] += 1;
            if s[k] <= max_order {
                break;
            }
            s[k] = 0;
        }
    }
}

fn m_dependent_stencil(m: usize, d: usize) -> Vec<(Vec<isize>, f64)> {
    let count = (m + 1).pow(d as u32);
    let w = 1.0 / (count as f64).sqrt();
    let dims = vec![m + 1; d];
    let mut s = vec![0usize; d];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push((s.iter().map(|&v| v as isize).collect(), w));
        increment(&mut s, &dims);
    }
    out
}

#[derive(Clone, Copy)]
enum Combine {
    Sum,
    Max,
}

/// `Y_i = combine_s coeff_s * e_{i - s}` over iid innovations drawn on a grid
/// padded so every referenced cell exists.
fn moving_combine(
    dims: &[usize],
    taps: &[(Vec<isize>, f64)],
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> f64,
    combine: Combine,
) -> Result<Grid> {
    let d = dims.len();
    let lo: Vec<isize> = (0..d).map(|k| taps.iter().map(|t| t.0[k]).min().unwrap_or(0)).collect();
    let hi: Vec<isize> = (0..d).map(|k| taps.iter().map(|t| t.0[k]).max().unwrap_or(0)).collect();
    let pdims: Vec<usize> = (0..d).map(|k| dims[k] + (hi[k] - lo[k]) as usize).collect();
    let noise = Grid::from_fn(pdims.clone(), |_| draw(rng))?;
    let pstrides = strides_of(&pdims);
    // cell i reads padded cell i + hi - s
    let rel: Vec<(usize, f64)> = taps
        .iter()
        .map(|(s, a)| {
            let off: usize = (0..d).map(|k| (hi[k] - s[k]) as usize * pstrides[k]).sum();
            (off, *a)
        })
        .collect();
    let src = noise.data();
    Grid::from_fn(dims.to_vec(), |i| {
        let base: usize = i.iter().zip(&pstrides).map(|(a, b)| a * b).sum();
        match combine {
            Combine::Sum => rel.iter().map(|&(off, a)| a * src[base + off]).sum(),
            Combine::Max => rel
                .iter()
                .map(|&(off, a)| a * src[base + off])
                .fold(f64::NEG_INFINITY, f64::max),
        }
    })
}

/// `(W x)_i`: average of the in-bounds nearest neighbours (one step along each axis).
pub fn neighbour_average(x: &Grid) -> Grid {
    let dims = x.dims().to_vec();
    let strides = x.strides().to_vec();
    let data = x.data();
    let mut idx = vec![0usize; dims.len()];
    let mut out = Vec::with_capacity(x.len());
    for off in 0..x.len() {
        out.push(neighbour_mean_at(data, off, &idx, &dims, &strides));
        increment(&mut idx, &dims);
    }
    Grid::new(dims, out).expect("same shape")
}

#[inline]
fn neighbour_mean_at(data: &[f64], off: usize, idx: &[usize], dims: &[usize], strides: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..dims.len() {
        if idx[k] > 0 {
            sum += data[off - strides[k]];
            count += 1;
        }
        if idx[k] + 1 < dims[k] {
            sum += data[off + strides[k]];
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn sar_max_sweeps(rho: f64) -> usize {
    let base = 10 * (1.0 / (1.0 - rho)).ceil() as usize;
    let needed = if rho > 0.0 {
        ((1e-13f64).ln() / rho.ln()).ceil() as usize
    } else {
        1
    };
    base.max(needed)
}

/// Solves `x = rho * W x + innovations` by in-place Gauss-Seidel sweeps.
pub fn sar_solve(innovations: &Grid, rho: f64) -> Result<Grid> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!("SAR rho {rho} not in [0,1)")));
    }
    if rho == 0.0 {
        return Ok(innovations.clone());
    }
    let dims = innovations.dims().to_vec();
    let strides = innovations.strides().to_vec();
    let e = innovations.data();
    let mut x = innovations.clone();
    let max_sweeps = sar_max_sweeps(rho);
    let mut idx = vec![0usize; dims.len()];
    let mut last_update = f64::INFINITY;
    for _ in 0..max_sweeps {
        let data = x.data_mut();
        idx.iter_mut().for_each(|v| *v = 0);
        let mut max_update = 0.0f64;
        for off in 0..data.len() {
            let new = rho * neighbour_mean_at(data, off, &idx, &dims, &strides) + e[off];
            max_update = max_update.max((new - data[off]).abs());
            data[off] = new;
            increment(&mut idx, &dims);
        }
        last_update = max_update;
        if max_update < SAR_TOL {
            return Ok(x);
        }
    }
    Err(Error::NoConvergence {
        sweeps: max_sweeps,
        last_update,
    })
}

/// SAR field together with the innovations it was built from.
pub fn sar_with_innovations(rho: f64, dims: &[usize], seed: u64) -> Result<(Grid, Grid)> {
    let mut rng = rng_for(seed);
    let e = gaussian_grid(dims.to_vec(), &mut rng)?;
    let x = sar_solve(&e, rho)?;
    Ok((x, e))
}

/// `X_i = mu_0 + delta_j + noise_i` inside patch `j`, `mu_0 + noise_i` elsewhere.
pub fn inject_patches(noise: &Grid, patches: &PatchSet) -> Result<Grid> {
    patches.validate(noise.dims())?;
    let mut out = noise.affine(1.0, patches.baseline);
    let d = noise.ndim();
    for p in &patches.patches {
        let r = &p.rect;
        let mut idx = r.lo.clone();
        'cells: loop {
            let off = out.offset(&idx);
            out.data_mut()[off] += p.jump;
            let mut k = d;
            loop {
                if k == 0 {
                    break 'cells;
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
    Ok(out)
}

/// Fixed multi-patch layouts on an `N x N` lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// A tall strip on the left and two squares stacked on the right, jumps `(+d, +d, -d)`.
    Config1,
    /// Four corner squares and a centre square, jumps `d, 2d, 3d, 4d, 5d`.
    Config2,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "config1" => Ok(Scenario::Config1),
            "config2" => Ok(Scenario::Config2),
            _ => Err(Error::InvalidParameter(format!("unknown scenario '{s}'"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Config1 => "config1",
            Scenario::Config2 => "config2",
        })
    }
}

/// Smallest supported side for the canonical layouts.
pub const MIN_SCENARIO_SIDE: usize = 64;

/// Fractional rectangles `((x_lo, x_hi), (y_lo, y_hi))` with jump multipliers.
fn scenario_layout(s: Scenario) -> Vec<((f64, f64), (f64, f64), f64)> {
    match s {
        Scenario::Config1 => vec![
            ((0.15, 0.35), (0.15, 0.85), 1.0),
            ((0.55, 0.85), (0.60, 0.85), 1.0),
            ((0.55, 0.85), (0.15, 0.40), -1.0),
        ],
        Scenario::Config2 => vec![
            ((0.12, 0.28), (0.12, 0.28), 1.0),
            ((0.12, 0.28), (0.72, 0.88), 2.0),
            ((0.72, 0.88), (0.72, 0.88), 3.0),
            ((0.72, 0.88), (0.12, 0.28), 4.0),
            ((0.42, 0.58), (0.42, 0.58), 5.0),
        ],
    }
}

/// Canonical patch layout scaled to side `n` (axis 0 is `x`), baseline 0.
pub fn canonical_scenario(s: Scenario, n: usize, jump: f64) -> Result<PatchSet> {
    if n < MIN_SCENARIO_SIDE {
        return Err(Error::InvalidParameter(format!(
            "scenario side {n} below minimum {MIN_SCENARIO_SIDE}"
        )));
    }
    if jump == 0.0 || !jump.is_finite() {
        return Err(Error::InvalidParameter(format!("scenario jump {jump} must be non-zero")));
    }
    let c = |f: f64| (f * n as f64).round() as usize;
    let patches = scenario_layout(s)
        .into_iter()
        .map(|((x0, x1), (y0, y1), m)| Patch {
            rect: Rect::new(vec![c(x0), c(y0)], vec![c(x1), c(y1)]),
            jump: m * jump,
        })
        .collect();
    let ps = PatchSet::new(patches, 0.0);
    ps.validate(&[n, n])?;
    Ok(ps)
}

/// Noise field plus injected scenario patches.
/// A complete simulation request: lattice shape, noise field and the patches
/// to inject.
///
/// ```json
/// {"dims": [128, 128], "field": {"kind": "sar", "rho": 0.4, "seed": 7},
///  "baseline": 0.0, "patches": [{"rect": {"lo": [20, 20], "hi": [60, 40]}, "jump": 1.0}]}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub dims: Vec<usize>,
    pub field: FieldSpec,
    #[serde(flatten)]
    pub truth: PatchSet,
}

impl SimulationSpec {
    pub fn run(&self) -> Result<Grid> {
        inject_patches(&gen_field(&self.field, &self.dims)?, &self.truth)
    }
}

pub fn scenario_field(s: Scenario, n: usize, jump: f64, noise: &FieldSpec) -> Result<(Grid, PatchSet)> {
    let truth = canonical_scenario(s, n, jump)?;
    let field = gen_field(noise, &[n, n])?;
    Ok((inject_patches(&field, &truth)?, truth))
}
