//! Agreement measures between true and estimated patch collections.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{increment, Rect};

/// One label per cell: 0 for background, `j >= 1` for patch `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub dims: Vec<usize>,
    pub labels: Vec<u32>,
}

impl Labeling {
    pub fn new(dims: Vec<usize>, labels: Vec<u32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: labels.len(),
            });
        }
        Ok(Self { dims, labels })
    }

    /// Labels cells by membership in disjoint rectangles (patch `j` gets `j + 1`).
    pub fn from_rects(dims: &[usize], rects: &[Rect]) -> Result<Self> {
        for (i, a) in rects.iter().enumerate() {
            a.check_within(dims)?;
            for b in &rects[i + 1..] {
                if a.overlaps(b) {
                    return Err(Error::OverlappingPatches(a.to_string(), b.to_string()));
                }
            }
        }
        let n: usize = dims.iter().product();
        let mut labels = Vec::with_capacity(n);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..n {
            let l = rects.iter().position(|r| r.contains(&idx)).map_or(0, |j| j as u32 + 1);
            labels.push(l);
            increment(&mut idx, dims);
        }
        Self::new(dims.to_vec(), labels)
    }
}

fn choose2(x: u64) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table of two labelings.
/// Two labelings that are each a single cluster score 1.
pub fn ari(a: &Labeling, b: &Labeling) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    let n = a.labels.len() as u64;
    let mut table: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let pairs = choose2(n);
    if pairs == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_rows * sum_cols / pairs;
    let max = 0.5 * (sum_rows + sum_cols);
    if max - expected == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// `|A Δ B| / |A ∪ B|` from the two sizes and the intersection size; 0 when both are empty.
pub fn jaccard_from_sizes(a: usize, b: usize, inter: usize) -> f64 {
    let union = a + b - inter;
    if union == 0 {
        0.0
    } else {
        (union - inter) as f64 / union as f64
    }
}

/// Jaccard distance between the cell sets of two rectangles.
pub fn jaccard_rect(a: &Rect, b: &Rect) -> f64 {
    jaccard_from_sizes(a.volume(), b.volume(), a.intersection_volume(b))
}

/// Jaccard distance between two cell masks.
pub fn jaccard_mask(a: &[bool], b: &[bool]) -> f64 {
    let (mut sa, mut sb, mut inter) = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        sa += x as usize;
        sb += y as usize;
        inter += (x && y) as usize;
    }
    jaccard_from_sizes(sa, sb, inter)
}

/// Two-sided Hausdorff distance, under the Jaccard distance, between the
/// collections `{background, patches...}` of two disjoint rectangle sets.
/// Empty members (including an empty background) are left out.
pub fn hausdorff(truth: &[Rect], est: &[Rect], dims: &[usize]) -> Result<f64> {
    for r in truth.iter().chain(est) {
        r.check_within(dims)?;
    }
    let n: usize = dims.iter().product();
    let cross: Vec<Vec<usize>> = truth
        .iter()
        .map(|t| est.iter().map(|e| t.intersection_volume(e)).collect())
        .collect();
    let t_total: usize = truth.iter().map(Rect::volume).sum();
    let e_total: usize = est.iter().map(Rect::volume).sum();
    let cross_total: usize = cross.iter().flatten().sum();

    // member 0 is the background; `size` and pairwise intersection per member
    let t_sizes: Vec<usize> = std::iter::once(n - t_total).chain(truth.iter().map(Rect::volume)).collect();
    let e_sizes: Vec<usize> = std::iter::once(n - e_total).chain(est.iter().map(Rect::volume)).collect();
    let inter = |i: usize, j: usize| -> usize {
        match (i, j) {
            (0, 0) => n - (t_total + e_total - cross_total),
            (0, k) => e_sizes[k] - (0..truth.len()).map(|t| cross[t][k - 1]).sum::<usize>(),
            (t, 0) => t_sizes[t] - cross[t - 1].iter().sum::<usize>(),
            (t, k) => cross[t - 1][k - 1],
        }
    };
    let dist = |i: usize, j: usize| jaccard_from_sizes(t_sizes[i], e_sizes[j], inter(i, j));

    let ti: Vec<usize> = (0..t_sizes.len()).filter(|&i| t_sizes[i] > 0).collect();
    let ej: Vec<usize> = (0..e_sizes.len()).filter(|&j| e_sizes[j] > 0).collect();
    let forward = ti
        .iter()
        .map(|&i| ej.iter().map(|&j| dist(i, j)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    let backward = ej
        .iter()
        .map(|&j| ti.iter().map(|&i| dist(i, j)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    Ok(forward.max(backward))
}

/// One benchmark replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub scenario: String,
    pub seed: u64,
    pub k_hat: usize,
    pub k_true: usize,
    pub ari: f64,
    pub hausdorff: f64,
    pub time_s: f64,
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str = "scenario,seed,k_hat,k_true,ari,hausdorff,time_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.scenario, self.seed, self.k_hat, self.k_true, self.ari, self.hausdorff, self.time_s
        )
    }

    /// Scores an estimate against the truth on the same grid.
    pub fn evaluate(scenario: &str, seed: u64, truth: &[Rect], est: &[Rect], dims: &[usize], time_s: f64) -> Result<Self> {
        let lt = Labeling::from_rects(dims, truth)?;
        let le = Labeling::from_rects(dims, est)?;
        Ok(Self {
            scenario: scenario.to_string(),
            seed,
            k_hat: est.len(),
            k_true: truth.len(),
            ari: ari(&lt, &le)?,
            hausdorff: hausdorff(truth, est, dims)?,
            time_s,
        })
    }
}

/// Header plus one row per record, newline-terminated.
pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(BenchRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Aggregate over replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub reps: usize,
    pub mean_k_hat: f64,
    pub frac_k_correct: f64,
    pub mean_ari: f64,
    pub mean_hausdorff: f64,
    pub median_time_s: f64,
}

pub fn summarize(records: &[BenchRecord]) -> BenchSummary {
    let n = records.len().max(1) as f64;
    let mut times: Vec<f64> = records.iter().map(|r| r.time_s).collect();
    times.sort_by(f64::total_cmp);
    let median_time_s = match times.len() {
        0 => 0.0,
        m if m % 2 == 1 => times[m / 2],
        m => 0.5 * (times[m / 2 - 1] + times[m / 2]),
    };
    BenchSummary {
        reps: records.len(),
        mean_k_hat: records.iter().map(|r| r.k_hat as f64).sum::<f64>() / n,
        frac_k_correct: records.iter().filter(|r| r.k_hat == r.k_true).count() as f64 / n,
        mean_ari: records.iter().map(|r| r.ari).sum::<f64>() / n,
        mean_hausdorff: records.iter().map(|r| r.hausdorff).sum::<f64>() / n,
        median_time_s,
    }
}
