//! Seeded replicate loops over the canonical scenarios.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::Result;
use crate::metrics::BenchRecord;
use crate::simulate::{scenario_field, FieldKind, FieldSpec, Scenario};
use crate::splade::{splade_detect, SpladeConfig};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub scenario: Scenario,
    /// Side of the square lattice.
    pub grid: usize,
    pub noise: FieldKind,
    pub jump: f64,
    pub reps: usize,
    pub seed: u64,
    pub detect: SpladeConfig,
    /// Record wall time; when off every `time_s` is 0 so output is reproducible byte for byte.
    pub timing: bool,
}

/// Seed of replicate `r`.
pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    seed ^ r as u64
}

pub fn run_replicate(cfg: &BenchConfig, r: usize) -> Result<BenchRecord> {
    let seed = replicate_seed(cfg.seed, r);
    let noise = FieldSpec::new(cfg.noise.clone(), seed);
    let (grid, truth) = scenario_field(cfg.scenario, cfg.grid, cfg.jump, &noise)?;
    let start = Instant::now();
    let det = splade_detect(&grid, &cfg.detect)?;
    let elapsed = start.elapsed().as_secs_f64();
    BenchRecord::evaluate(
        &cfg.scenario.to_string(),
        seed,
        &truth.rects(),
        &det.rects(),
        grid.dims(),
        if cfg.timing { elapsed } else { 0.0 },
    )
}

/// All replicates, run in parallel and returned in replicate order.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    (0..cfg.reps).into_par_iter().map(|r| run_replicate(cfg, r)).collect()
}
