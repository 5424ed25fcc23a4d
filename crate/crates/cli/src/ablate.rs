//! Sweep of the diversity weight on a group-wise problem.

use serde::Serialize;

use cfx_core::engine::{optimize, CfMode};
use cfx_core::eval::solution_report;

use crate::bundle::diversity_of;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{num, write_csv, write_json};
use crate::pipeline::{class_pairs, prepare};

pub const LAMBDA_GRID: [f64; 4] = [0.0, 0.1, 100.0, 1000.0];

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub lambda_diversity: f64,
    pub validity: f64,
    pub proximity: f64,
    pub prob_plausibility: f64,
    pub coverage: f64,
    pub active_groups: usize,
    pub min_pairwise_cosine: Option<f64>,
    pub mean_centroid_distance: f64,
}

/// Solves the configured group-wise problem once per weight and writes
/// `ablation.json` and `ablation.csv` to `cfg.out`.
pub fn ablate(cfg: &RunConfig, grid: &[f64]) -> Result<Vec<AblationRow>, CliError> {
    if !matches!(cfg.mode, CfMode::GroupWise { k_max, .. } if k_max > 1) {
        return Err(CliError::Usage(
            "the diversity sweep needs --mode group with --k-max above 1".into(),
        ));
    }
    if class_pairs(cfg)?.len() > 1 {
        return Err(CliError::Usage(
            "the diversity sweep needs --origin-class on multiclass data".into(),
        ));
    }
    let prep = prepare(cfg)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut problem = prep.problem(cfg)?;
        problem.hyper.lambda_diversity = lambda;
        let solution = optimize(&problem)?;
        let report = solution_report(&solution, &prep.classifier, &prep.flow, prep.density_offset)?;
        let diversity = diversity_of(&solution);
        rows.push(AblationRow {
            lambda_diversity: lambda,
            validity: report.validity_all,
            proximity: report.proximity.mean,
            prob_plausibility: report.prob_plausibility,
            coverage: report.coverage,
            active_groups: report.active_groups,
            min_pairwise_cosine: diversity.min_pairwise_cosine,
            mean_centroid_distance: diversity.mean_centroid_distance,
        });
    }
    std::fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join("ablation.json"), &rows)?;
    let header = [
        "lambda_diversity",
        "validity",
        "proximity",
        "prob_plausibility",
        "coverage",
        "active_groups",
        "min_pairwise_cosine",
        "mean_centroid_distance",
    ]
    .map(String::from);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                num(r.lambda_diversity),
                num(r.validity),
                num(r.proximity),
                num(r.prob_plausibility),
                num(r.coverage),
                r.active_groups.to_string(),
                r.min_pairwise_cosine.map_or_else(String::new, num),
                num(r.mean_centroid_distance),
            ]
        })
        .collect();
    write_csv(&cfg.out.join("ablation.csv"), &header, &cells)?;
    Ok(rows)
}
