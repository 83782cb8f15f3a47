//! Multi-patch detection.
//!
//! Block means are thresholded against a calibrated level, flagged blocks
//! are grouped into connected components, small components are dropped, and
//! each survivor is refined by [`algorithm1`] inside a disjoint envelope.
//!
//! Envelopes are the component bounding box grown by a fixed number of
//! blocks on every side rather than by a multiple of `L_k log n` cells; the
//! refinement windows already provide the fine enlargement.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{self, BoundaryLayer, Kernel, KernelSpec};
use crate::error::{Error, Result};
use crate::lattice::{increment, strides_of, Grid, PrefixSum, Rect};
use crate::single::{algorithm1, strides_for, SearchBounds, Stage1Params};

/// Tiling of the lattice into blocks of side `L_k = floor(n_k^alpha)`; the
/// last block on each axis is truncated to the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    dims: Vec<usize>,
    strides: Vec<usize>,
    counts: Vec<usize>,
    count_strides: Vec<usize>,
}

impl BlockPartition {
    pub fn new(dims: &[usize], alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {alpha} not in (0,1)")));
        }
        let (strides, counts) = strides_for(dims, alpha);
        Ok(Self::from_strides(dims, strides, counts))
    }

    /// Partition with explicit block sides.
    pub fn with_block_sides(dims: &[usize], sides: &[usize]) -> Result<Self> {
        if sides.len() != dims.len() || sides.contains(&0) {
            return Err(Error::InvalidParameter(format!("block sides {sides:?} for dims {dims:?}")));
        }
        let counts = dims.iter().zip(sides).map(|(&n, &l)| n.div_ceil(l)).collect();
        Ok(Self::from_strides(dims, sides.to_vec(), counts))
    }

    fn from_strides(dims: &[usize], strides: Vec<usize>, counts: Vec<usize>) -> Self {
        let count_strides = strides_of(&counts);
        Self {
            dims: dims.to_vec(),
            strides,
            counts,
            count_strides,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Block side `L_k` per axis.
    pub fn sides(&self) -> &[usize] {
        &self.strides
    }

    /// Block count `M_k` per axis.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_blocks(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn block(&self, s: &[usize]) -> Rect {
        Rect::new(
            s.iter().zip(&self.strides).map(|(s, l)| s * l).collect(),
            (0..s.len()).map(|k| ((s[k] + 1) * self.strides[k]).min(self.dims[k])).collect(),
        )
    }

    pub fn block_index(&self, linear: usize) -> Vec<usize> {
        let mut rem = linear;
        self.count_strides
            .iter()
            .map(|&st| {
                let v = rem / st;
                rem %= st;
                v
            })
            .collect()
    }

    pub fn block_volume(&self, s: &[usize]) -> usize {
        self.block(s).volume()
    }

    /// Smallest block volume (a truncated corner block when any axis is ragged).
    pub fn min_block_volume(&self) -> usize {
        let s: Vec<usize> = (0..self.dims.len())
            .map(|k| {
                let last = self.dims[k] - (self.counts[k] - 1) * self.strides[k];
                if last < self.strides[k] {
                    self.counts[k] - 1
                } else {
                    0
                }
            })
            .collect();
        self.block_volume(&s)
    }

    /// Distinct block volumes with their multiplicities.
    pub fn volume_groups(&self) -> Vec<(usize, usize)> {
        // per axis: (side, how many blocks have it)
        let per_axis: Vec<Vec<(usize, usize)>> = (0..self.dims.len())
            .map(|k| {
                let last = self.dims[k] - (self.counts[k] - 1) * self.strides[k];
                if last == self.strides[k] {
                    vec![(self.strides[k], self.counts[k])]
                } else {
                    vec![(self.strides[k], self.counts[k] - 1), (last, 1)]
                }
            })
            .collect();
        let mut groups: Vec<(usize, usize)> = vec![(1, 1)];
        for axis in per_axis {
            groups = groups
                .iter()
                .flat_map(|&(v, c)| axis.iter().map(move |&(side, n)| (v * side, c * n)))
                .filter(|g| g.1 > 0)
                .collect();
        }
        let mut merged: Vec<(usize, usize)> = Vec::new();
        groups.sort_unstable();
        for (v, c) in groups {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => merged.push((v, c)),
            }
        }
        merged
    }

    /// Cells covered by the inclusive block-index box `lo..=hi`.
    pub fn cover(&self, lo: &[usize], hi: &[usize]) -> Rect {
        Rect::new(
            lo.iter().zip(&self.strides).map(|(s, l)| s * l).collect(),
            (0..lo.len()).map(|k| ((hi[k] + 1) * self.strides[k]).min(self.dims[k])).collect(),
        )
    }
}

/// Mean of each block, as a grid of shape `M`.
pub fn block_means(grid: &Grid, part: &BlockPartition) -> Result<Grid> {
    if grid.dims() != part.dims() {
        return Err(Error::DimMismatch(format!(
            "grid {:?} vs partition {:?}",
            grid.dims(),
            part.dims()
        )));
    }
    let ps = PrefixSum::new(grid)?;
    Grid::from_fn(part.counts().to_vec(), |s| {
        let b = part.block(s);
        ps.rect_sum_unchecked(&b.lo, &b.hi) / b.volume() as f64
    })
}

/// Blocks whose mean differs from `mu0` by more than `q`.
pub fn flag_blocks(means: &Grid, q: f64, mu0: f64) -> Vec<bool> {
    means.data().iter().map(|m| (m - mu0).abs() > q).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Blocks sharing a face.
    #[default]
    #[serde(rename = "faces")]
    Faces,
    /// Blocks sharing a face, edge or corner.
    #[serde(rename = "faces+corners")]
    FacesAndCorners,
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faces" => Ok(Connectivity::Faces),
            "faces+corners" => Ok(Connectivity::FacesAndCorners),
            _ => Err(Error::InvalidParameter(format!("unknown connectivity '{s}'"))),
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connectivity::Faces => "faces",
            Connectivity::FacesAndCorners => "faces+corners",
        })
    }
}

fn neighbour_offsets(d: usize, conn: Connectivity) -> Vec<Vec<isize>> {
    match conn {
        Connectivity::Faces => (0..d)
            .flat_map(|k| {
                [-1isize, 1].into_iter().map(move |s| {
                    let mut o = vec![0isize; d];
                    o[k] = s;
                    o
                })
            })
            .collect(),
        Connectivity::FacesAndCorners => {
            let span = vec![3usize; d];
            let mut idx = vec![0usize; d];
            let mut out = Vec::new();
            for _ in 0..3usize.pow(d as u32) {
                let o: Vec<isize> = idx.iter().map(|&v| v as isize - 1).collect();
                if o.iter().any(|&v| v != 0) {
                    out.push(o);
                }
                increment(&mut idx, &span);
            }
            out
        }
    }
}

/// Cells covered by a set of blocks.
pub fn component_cells(comp: &[usize], part: &BlockPartition) -> usize {
    comp.iter().map(|&b| part.block_volume(&part.block_index(b))).sum()
}

/// Connected components of flagged blocks covering more than `min_cells`
/// cells. Each component lists linear block indices in increasing order;
/// components are ordered by their first block.
pub fn components(mask: &[bool], part: &BlockPartition, min_cells: usize, conn: Connectivity) -> Vec<Vec<usize>> {
    let counts = part.counts();
    let d = counts.len();
    let offsets = neighbour_offsets(d, conn);
    let cstrides = strides_of(counts);
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(b) = queue.pop_front() {
            comp.push(b);
            let s = part.block_index(b);
            'nbr: for o in &offsets {
                let mut nb = 0usize;
                for k in 0..d {
                    let v = s[k] as isize + o[k];
                    if v < 0 || v >= counts[k] as isize {
                        continue 'nbr;
                    }
                    nb += v as usize * cstrides[k];
                }
                if mask[nb] && !seen[nb] {
                    seen[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
        comp.sort_unstable();
        if component_cells(&comp, part) > min_cells {
            out.push(comp);
        }
    }
    out
}

/// Cell bounding box of a component.
pub fn component_bbox(comp: &[usize], part: &BlockPartition) -> Rect {
    let d = part.counts().len();
    let mut lo = vec![usize::MAX; d];
    let mut hi = vec![0usize; d];
    for &b in comp {
        let s = part.block_index(b);
        for k in 0..d {
            lo[k] = lo[k].min(s[k]);
            hi[k] = hi[k].max(s[k]);
        }
    }
    part.cover(&lo, &hi)
}

/// Component bounding box grown by `margin_blocks * L_k` cells per side,
/// clipped to the domain.
pub fn envelope(comp: &[usize], part: &BlockPartition, margin_blocks: usize) -> Rect {
    grow(&component_bbox(comp, part), part, margin_blocks)
}

fn grow(bbox: &Rect, part: &BlockPartition, margin_blocks: usize) -> Rect {
    let dims = part.dims();
    Rect::new(
        (0..dims.len())
            .map(|k| bbox.lo[k].saturating_sub(margin_blocks * part.sides()[k]))
            .collect(),
        (0..dims.len())
            .map(|k| (bbox.hi[k] + margin_blocks * part.sides()[k]).min(dims[k]))
            .collect(),
    )
}

/// Makes envelopes pairwise disjoint. Overlapping pairs are cut along the
/// axis where their bounding boxes are farthest apart, at the middle of the
/// overlap clamped into the gap between the boxes. A pair whose boxes
/// overlap on every axis cannot be cut; the smaller one is dropped.
pub fn resolve_overlaps(envelopes: &mut [Option<Rect>], bboxes: &[Rect], sizes: &[usize]) -> usize {
    let mut dropped = 0;
    for i in 0..envelopes.len() {
        for j in i + 1..envelopes.len() {
            let (Some(a), Some(b)) = (&envelopes[i], &envelopes[j]) else {
                continue;
            };
            if !a.overlaps(b) {
                continue;
            }
            let (ba, bb) = (&bboxes[i], &bboxes[j]);
            let d = ba.ndim();
            let gap = |k: usize| -> isize {
                let g1 = bb.lo[k] as isize - ba.hi[k] as isize;
                let g2 = ba.lo[k] as isize - bb.hi[k] as isize;
                g1.max(g2)
            };
            let k = (0..d).max_by_key(|&k| (gap(k), std::cmp::Reverse(k))).expect("d >= 1");
            if gap(k) < 0 {
                let victim = if sizes[j] <= sizes[i] { j } else { i };
                debug!("dropping envelope {victim}: bounding boxes overlap on every axis");
                envelopes[victim] = None;
                dropped += 1;
                continue;
            }
            // order so that `first` lies below `second` on axis k
            let (first, second) = if ba.hi[k] <= bb.lo[k] { (i, j) } else { (j, i) };
            let (fb, sb) = (&bboxes[first], &bboxes[second]);
            let fe = envelopes[first].as_ref().expect("checked");
            let se = envelopes[second].as_ref().expect("checked");
            let mid = (se.lo[k] + fe.hi[k]) / 2;
            let cut = mid.clamp(fb.hi[k], sb.lo[k]);
            envelopes[first].as_mut().expect("checked").hi[k] = cut;
            envelopes[second].as_mut().expect("checked").lo[k] = cut;
        }
    }
    dropped
}

/// Where the baseline level or noise scale comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSource {
    Estimate,
    Given(f64),
}

impl FromStr for ParamSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" || s == "estimate" {
            return Ok(ParamSource::Estimate);
        }
        s.parse::<f64>()
            .map(ParamSource::Given)
            .map_err(|_| Error::InvalidParameter(format!("expected 'auto' or a number, got '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Boundary-layer thickness exponent.
    pub beta: f64,
    pub kernel: Kernel,
    /// Kernel bandwidths; `ceil(n_k^(1/(2d)))` when absent.
    pub bandwidths: Option<Vec<f64>>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            beta: calibrate::DEFAULT_BETA,
            kernel: Kernel::Bartlett,
            bandwidths: None,
        }
    }
}

impl CalibrationConfig {
    fn kernel_for(&self, dims: &[usize]) -> KernelSpec {
        match &self.bandwidths {
            Some(b) => KernelSpec {
                kind: self.kernel,
                bandwidths: b.clone(),
            },
            None => KernelSpec::default_for(dims, self.kernel),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpladeConfig {
    /// Block side exponent for the thresholding stage.
    pub alpha: f64,
    /// Level of the block-maximum quantile.
    pub kappa_level: f64,
    /// Parameters of the per-envelope refinement.
    pub stage2: Stage1Params,
    pub envelope_margin_blocks: usize,
    /// Components must cover more than `ceil(factor * n^alpha * ln n)` cells.
    pub min_size_factor: f64,
    pub mu0: ParamSource,
    pub sigma: ParamSource,
    pub connectivity: Connectivity,
    pub calibration: CalibrationConfig,
}

impl Default for SpladeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            kappa_level: 0.05,
            stage2: Stage1Params::default(),
            envelope_margin_blocks: 2,
            min_size_factor: 1.0,
            mu0: ParamSource::Estimate,
            sigma: ParamSource::Estimate,
            connectivity: Connectivity::Faces,
            calibration: CalibrationConfig::default(),
        }
    }
}

impl SpladeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {} not in (0,1)", self.alpha)));
        }
        if !(self.kappa_level > 0.0 && self.kappa_level < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "level {} not in (0,1)",
                self.kappa_level
            )));
        }
        self.stage2.validate()?;
        if !(self.min_size_factor > 0.0) || !self.min_size_factor.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "min size factor {} must be positive",
                self.min_size_factor
            )));
        }
        if let ParamSource::Given(s) = self.sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidParameter(format!("sigma {s} must be positive")));
            }
        }
        if let ParamSource::Given(m) = self.mu0 {
            if !m.is_finite() {
                return Err(Error::InvalidParameter(format!("mu0 {m} must be finite")));
            }
        }
        BoundaryLayer::new(self.calibration.beta)?;
        Ok(())
    }

    /// `ceil(min_size_factor * n^alpha * ln n)`.
    pub fn min_cells(&self, n: usize) -> usize {
        let n = n as f64;
        (self.min_size_factor * n.powf(self.alpha) * n.ln()).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedPatch {
    #[serde(flatten)]
    pub rect: Rect,
    /// Mean over the patch minus the baseline level.
    pub jump_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mu0: f64,
    pub sigma: f64,
    pub q: f64,
    pub flagged_blocks: usize,
    /// Cells covered by each surviving component.
    pub component_cells: Vec<usize>,
    pub min_cells: usize,
    /// Estimates were recomputed away from flagged components because a
    /// component reached the boundary layer.
    pub calibration_fallback: bool,
    pub lrv_clamped: bool,
    /// Indices into `patches` returned as component bounding boxes because
    /// refinement failed.
    pub unrefined: Vec<usize>,
    pub dropped_envelopes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub dims: Vec<usize>,
    pub k_hat: usize,
    pub patches: Vec<DetectedPatch>,
    pub diagnostics: Diagnostics,
}

impl Detection {
    pub fn rects(&self) -> Vec<Rect> {
        self.patches.iter().map(|p| p.rect.clone()).collect()
    }
}

struct Levels {
    mu0: f64,
    sigma: f64,
    clamped: bool,
}

fn sigma_floor(grid: &Grid, mu0: f64, sigma: f64) -> f64 {
    let spread = grid.data().iter().fold(0.0f64, |m, v| m.max((v - mu0).abs()));
    sigma.max(1e-9 * spread.max(1.0))
}

fn estimate_levels(grid: &Grid, cfg: &SpladeConfig, layer: &[bool]) -> Result<Levels> {
    let mu0 = match cfg.mu0 {
        ParamSource::Given(m) => m,
        ParamSource::Estimate => calibrate::masked_mean(grid, layer)?,
    };
    let (sigma, clamped) = match cfg.sigma {
        ParamSource::Given(s) => (s, false),
        ParamSource::Estimate => {
            let est = calibrate::masked_lrv(grid, layer, &cfg.calibration.kernel_for(grid.dims()))?;
            (est.value.max(0.0).sqrt(), est.clamped)
        }
    };
    Ok(Levels { mu0, sigma, clamped })
}

/// Whole-grid estimates that tolerate a minority of anomalous cells: the
/// median cell for the baseline and the scaled MAD of block means for the
/// noise level. Half-size blocks keep the share of blocks touched by a patch
/// small.
fn robust_levels(grid: &Grid, cfg: &SpladeConfig, part: &BlockPartition) -> Result<Levels> {
    let mu0 = match cfg.mu0 {
        ParamSource::Given(m) => m,
        ParamSource::Estimate => calibrate::masked_median(grid, &vec![true; grid.len()])?,
    };
    let sigma = match cfg.sigma {
        ParamSource::Given(s) => s,
        ParamSource::Estimate => {
            let sides: Vec<usize> = part.sides().iter().map(|&l| (l / 2).max(1)).collect();
            let fine = BlockPartition::with_block_sides(grid.dims(), &sides)?;
            let means = block_means(grid, &fine)?;
            let full: usize = sides.iter().product();
            let values: Vec<f64> = (0..fine.num_blocks())
                .filter(|&b| fine.block_volume(&fine.block_index(b)) == full)
                .map(|b| means.data()[b])
                .collect();
            calibrate::robust_block_scale(&values, full)?
        }
    };
    Ok(Levels {
        mu0,
        sigma,
        clamped: false,
    })
}

struct Stage1 {
    q: f64,
    flagged: usize,
    comps: Vec<Vec<usize>>,
}

fn threshold_stage(
    means: &Grid,
    part: &BlockPartition,
    cfg: &SpladeConfig,
    mu0: f64,
    sigma: f64,
    min_cells: usize,
) -> Result<Stage1> {
    let groups: Vec<(f64, usize)> = part.volume_groups().into_iter().map(|(v, c)| (v as f64, c)).collect();
    let q = calibrate::threshold_q_mixed(sigma, &groups, cfg.kappa_level)?;
    let mask = flag_blocks(means, q, mu0);
    let flagged = mask.iter().filter(|&&b| b).count();
    let comps = components(&mask, part, min_cells, cfg.connectivity);
    Ok(Stage1 { q, flagged, comps })
}

const TRIM_ROUNDS: usize = 4;
/// The trimmed layer must keep at least `1 / TRIM_MIN_SHARE` of its cells.
const TRIM_MIN_SHARE: usize = 4;

fn touches(comps: &[Vec<usize>], part: &BlockPartition, layer: &BoundaryLayer) -> bool {
    comps.iter().flatten().any(|&b| layer.intersects(&part.block(&part.block_index(b)), part.dims()))
}

fn reaches_mask(comps: &[Vec<usize>], part: &BlockPartition, mask: &[bool]) -> bool {
    let dims = part.dims();
    comps.iter().flatten().any(|&b| {
        let r = part.block(&part.block_index(b));
        let mut idx = r.lo.clone();
        loop {
            let off: usize = idx.iter().zip(dims).fold(0, |acc, (&i, &n)| acc * n + i);
            if mask[off] {
                return true;
            }
            if !step_in(&mut idx, &r) {
                return false;
            }
        }
    })
}

/// Advances `idx` row-major inside the non-empty `r`; false once past the end.
fn step_in(idx: &mut [usize], r: &Rect) -> bool {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < r.hi[k] {
            return true;
        }
        idx[k] = r.lo[k];
    }
    false
}

fn clear_rect(mask: &mut [bool], dims: &[usize], r: &Rect) {
    if r.is_empty() {
        return;
    }
    let mut idx = r.lo.clone();
    loop {
        let off: usize = idx.iter().zip(dims).fold(0, |acc, (&i, &n)| acc * n + i);
        mask[off] = false;
        if !step_in(&mut idx, r) {
            break;
        }
    }
}

/// Full detection pipeline.
pub fn splade_detect(grid: &Grid, cfg: &SpladeConfig) -> Result<Detection> {
    cfg.validate()?;
    let dims = grid.dims().to_vec();
    let part = BlockPartition::new(&dims, cfg.alpha)?;
    if let Some(k) = part.counts().iter().position(|&m| m < 4) {
        return Err(Error::InvalidParameter(format!(
            "only {} blocks on axis {k}; need at least 4",
            part.counts()[k]
        )));
    }
    let means = block_means(grid, &part)?;
    let min_cells = cfg.min_cells(grid.len());
    let layer = BoundaryLayer::new(cfg.calibration.beta)?;
    let layer_mask = layer.mask(&dims);

    let levels = estimate_levels(grid, cfg, &layer_mask)?;
    let mut mu0 = levels.mu0;
    let mut sigma = levels.sigma;
    let mut clamped = levels.clamped;
    let mut stage = threshold_stage(&means, &part, cfg, mu0, sigma_floor(grid, mu0, sigma), min_cells)?;

    let estimated = cfg.mu0 == ParamSource::Estimate || cfg.sigma == ParamSource::Estimate;
    let mut fallback = false;
    if estimated && touches(&stage.comps, &part, &layer) {
        // re-estimate on the layer with the flagged regions cut out, until the
        // flagged set stops reaching what is left of the layer
        fallback = true;
        let layer_cells = layer_mask.iter().filter(|&&m| m).count();
        let mut mask = layer_mask.clone();
        let mut settled = false;
        for _ in 0..TRIM_ROUNDS {
            for c in &stage.comps {
                let cut = grow(&component_bbox(c, &part), &part, cfg.envelope_margin_blocks);
                clear_rect(&mut mask, &dims, &cut);
            }
            if mask.iter().filter(|&&m| m).count() * TRIM_MIN_SHARE < layer_cells {
                break;
            }
            let levels = estimate_levels(grid, cfg, &mask)?;
            (mu0, sigma, clamped) = (levels.mu0, levels.sigma, levels.clamped);
            stage = threshold_stage(&means, &part, cfg, mu0, sigma_floor(grid, mu0, sigma), min_cells)?;
            if !reaches_mask(&stage.comps, &part, &mask) {
                settled = true;
                break;
            }
        }
        if !settled {
            warn!("flagged components keep reaching the boundary layer; falling back to global robust estimates");
            let levels = robust_levels(grid, cfg, &part)?;
            (mu0, sigma, clamped) = (levels.mu0, levels.sigma, levels.clamped);
            stage = threshold_stage(&means, &part, cfg, mu0, sigma_floor(grid, mu0, sigma), min_cells)?;
        } else {
            debug!("boundary layer trimmed around flagged components");
        }
    }

    let bboxes: Vec<Rect> = stage.comps.iter().map(|c| component_bbox(c, &part)).collect();
    let sizes: Vec<usize> = stage.comps.iter().map(|c| component_cells(c, &part)).collect();
    let mut envelopes: Vec<Option<Rect>> = bboxes
        .iter()
        .map(|b| Some(grow(b, &part, cfg.envelope_margin_blocks)))
        .collect();
    let dropped = resolve_overlaps(&mut envelopes, &bboxes, &sizes);

    let jobs: Vec<(usize, Rect)> = envelopes
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.clone().map(|e| (i, e)))
        .collect();
    let refined: Vec<(usize, Rect, bool)> = jobs
        .par_iter()
        .map(|(i, env)| {
            let attempt = grid
                .subgrid(env)
                .and_then(|sub| algorithm1(&sub, &cfg.stage2, &SearchBounds::open()));
            match attempt {
                Ok(r) => (*i, r.translate(&env.lo), false),
                Err(e) => {
                    debug!("refinement of envelope {env} failed ({e}); keeping its bounding box");
                    (*i, bboxes[*i].clone(), true)
                }
            }
        })
        .collect();

    let ps = PrefixSum::new(grid)?;
    let mut found: Vec<(Rect, bool, usize)> = refined.into_iter().map(|(i, r, u)| (r, u, sizes[i])).collect();
    found.sort_by(|a, b| a.0.lo.cmp(&b.0.lo).then_with(|| a.0.hi.cmp(&b.0.hi)));
    let mut patches = Vec::with_capacity(found.len());
    let mut unrefined = Vec::new();
    let mut component_cells_out = Vec::with_capacity(found.len());
    for (j, (rect, u, size)) in found.into_iter().enumerate() {
        let mean = ps.rect_mean(&rect)?;
        if u {
            unrefined.push(j);
        }
        component_cells_out.push(size);
        patches.push(DetectedPatch {
            rect,
            jump_estimate: mean - mu0,
        });
    }

    Ok(Detection {
        dims,
        k_hat: patches.len(),
        patches,
        diagnostics: Diagnostics {
            mu0,
            sigma,
            q: stage.q,
            flagged_blocks: stage.flagged,
            component_cells: component_cells_out,
            min_cells,
            calibration_fallback: fallback,
            lrv_clamped: clamped,
            unrefined,
            dropped_envelopes: dropped,
        },
    })
}
