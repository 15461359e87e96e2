//! Search cost as the transformer stack deepens.

use std::time::Instant;

use serde::Serialize;

use crate::cost::ClusterSpec;
use crate::error::{Error, Result};
use crate::ir::{gen_transformer, trim_and_group, TransformerConfig};
use crate::prune::prune_graph;
use crate::search::{derive_plan, SearchOptions};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub layers: usize,
    pub raw_nodes: usize,
    pub nodes: usize,
    pub unique_subgraphs: usize,
    pub search_units: usize,
    pub candidates: u64,
    pub routing_steps: u64,
    pub prune_steps: u64,
    pub prune_wall_time_s: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub layers: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub min_duplicates: usize,
    pub jobs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            layers: vec![2, 4, 8, 16, 32, 48],
            d_model: 64,
            heads: 4,
            min_duplicates: 2,
            jobs: 0,
        }
    }
}

/// One row per layer count: graph size, folded search size and timings.
pub fn bench_scaling(cfg: &BenchConfig, mesh: &ClusterSpec) -> Result<Vec<BenchRow>> {
    if let Some(&l) = cfg.layers.iter().find(|&&l| l < 2) {
        return Err(Error::BadConfig(format!(
            "layer counts must be >= 2, got {l}"
        )));
    }
    let opts = SearchOptions {
        jobs: cfg.jobs,
        table_limit: 1,
        ..SearchOptions::default()
    };
    cfg.layers
        .iter()
        .map(|&layers| {
            let raw = gen_transformer(&TransformerConfig::new(layers, cfg.d_model, cfg.heads))?;
            let graph = trim_and_group(&raw)?;
            let start = Instant::now();
            prune_graph(&graph, cfg.min_duplicates)?;
            let prune_wall_time_s = start.elapsed().as_secs_f64();
            let start = Instant::now();
            let report = derive_plan(&graph, mesh, cfg.min_duplicates, &opts)?;
            let wall_time_s = start.elapsed().as_secs_f64();
            Ok(BenchRow {
                layers,
                raw_nodes: report.prune.raw_nodes,
                nodes: report.prune.graph_nodes,
                unique_subgraphs: report.prune.unique_subgraphs,
                search_units: report.prune.search_units,
                candidates: report.search.candidates_enumerated,
                routing_steps: report.search.routing_steps,
                prune_steps: report.prune.steps,
                prune_wall_time_s,
                wall_time_s,
            })
        })
        .collect()
}

pub fn to_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_count_gives_one_row() {
        let cfg = BenchConfig {
            layers: vec![2],
            d_model: 16,
            heads: 2,
            ..BenchConfig::default()
        };
        let rows = bench_scaling(&cfg, &ClusterSpec::new(1, 2)).unwrap();
        assert_eq!(rows.len(), 1);
        let csv = to_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("layers,raw_nodes,nodes,unique_subgraphs"));
    }

    #[test]
    fn one_layer_is_rejected() {
        let cfg = BenchConfig {
            layers: vec![1],
            ..BenchConfig::default()
        };
        assert!(matches!(
            bench_scaling(&cfg, &ClusterSpec::new(1, 2)),
            Err(Error::BadConfig(_))
        ));
    }
}
