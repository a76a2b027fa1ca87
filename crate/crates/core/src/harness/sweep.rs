use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::run::{run_with_dataset, Dataset, RunOutcome};
use crate::error::{Error, Result};

/// Grid axes; an empty axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub variant: Vec<Variant>,
    pub k: Vec<usize>,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub root_seed: Vec<u64>,
    pub world_seed: Vec<u64>,
}

impl SweepSpec {
    /// Every combination of the axes, applied on top of `base`.
    pub fn cells(&self, base: &RunConfig) -> Vec<SweepCell> {
        fn axis<T: Clone>(values: &[T], default: T) -> Vec<T> {
            if values.is_empty() {
                vec![default]
            } else {
                values.to_vec()
            }
        }
        let mut out = Vec::new();
        for &world_seed in &axis(&self.world_seed, base.world.seed) {
            for &root_seed in &axis(&self.root_seed, base.root_seed) {
                for &variant in &axis(&self.variant, base.method.variant) {
                    for &k in &axis(&self.k, base.scoring.k) {
                        for &lambda in &axis(&self.lambda, base.scoring.lambda) {
                            for &rho in &axis(&self.rho, base.projection.rho) {
                                for &delta in &axis(&self.delta, base.projection.delta) {
                                    let mut config = base.clone();
                                    config.world.seed = world_seed;
                                    config.root_seed = root_seed;
                                    config.method.variant = variant;
                                    config.scoring.k = k;
                                    config.scoring.lambda = lambda;
                                    config.projection.rho = rho;
                                    config.projection.delta = delta;
                                    out.push(SweepCell {
                                        index: out.len(),
                                        config,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub index: usize,
    pub config: RunConfig,
}

impl SweepCell {
    /// Short directory-safe label, e.g. `003-herman-k5-l0.5`.
    pub fn label(&self) -> String {
        let c = &self.config;
        format!(
            "{:03}-{}-k{}-l{}-r{}-d{}-s{}-w{}",
            self.index, c.method.variant, c.scoring.k, c.scoring.lambda, c.projection.rho, c.projection.delta, c.root_seed, c.world.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub k: usize,
    pub lambda: f64,
    pub rho: f64,
    pub delta: f64,
    pub root_seed: u64,
    pub world_seed: u64,
    pub final_accuracy: f64,
    pub average_accuracy: f64,
    pub final_routing_similarity: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "variant,k,lambda,rho,delta,root_seed,world_seed,final_accuracy,average_accuracy,final_routing_similarity";

impl SweepRow {
    pub fn from_outcome(config: &RunConfig, outcome: &RunOutcome) -> Self {
        let r = &outcome.report;
        SweepRow {
            variant: config.method.variant,
            k: config.scoring.k,
            lambda: config.scoring.lambda,
            rho: config.projection.rho,
            delta: config.projection.delta,
            root_seed: config.root_seed,
            world_seed: config.world.seed,
            final_accuracy: r.final_accuracy,
            average_accuracy: r.average_accuracy,
            final_routing_similarity: r.tasks.last().map(|t| t.routing_similarity).unwrap_or(f64::NAN),
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.k,
            self.lambda,
            self.rho,
            self.delta,
            self.root_seed,
            self.world_seed,
            self.final_accuracy,
            self.average_accuracy,
            self.final_routing_similarity
        )
    }

    pub fn csv(rows: &[SweepRow]) -> String {
        let mut out = format!("{SWEEP_CSV_HEADER}\n");
        for r in rows {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }
}

/// Run every cell of the grid, up to `jobs` at a time; results keep cell order.
pub fn ablation_suite(base: &RunConfig, spec: &SweepSpec, jobs: usize) -> Result<Vec<(SweepCell, RunOutcome)>> {
    let cells = spec.cells(base);
    for cell in &cells {
        cell.config.validate().map_err(|e| Error::Config(format!("sweep cell {}: {e}", cell.label())))?;
    }
    // cells differing only in training settings share one dataset
    let mut datasets: HashMap<String, Dataset> = HashMap::new();
    for cell in &cells {
        let key = data_key(&cell.config);
        if let std::collections::hash_map::Entry::Vacant(slot) = datasets.entry(key) {
            slot.insert(Dataset::load(&cell.config)?);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} sweep workers: {e}")))?;
    let outcomes: Vec<RunOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| run_with_dataset(&cell.config, &datasets[&data_key(&cell.config)]))
            .collect::<Result<_>>()
    })?;
    Ok(cells.into_iter().zip(outcomes).collect())
}

fn data_key(config: &RunConfig) -> String {
    format!(
        "{}|{}|{}",
        toml::to_string(&config.data).unwrap_or_default(),
        toml::to_string(&config.world).unwrap_or_default(),
        toml::to_string(&config.descriptors).unwrap_or_default()
    )
}
