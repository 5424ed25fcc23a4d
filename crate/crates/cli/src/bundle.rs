//! Report bundles: writing them after an explanation run and checking them
//! against a recomputation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use cfx_core::ad::Tensor;
use cfx_core::engine::{extract_groups, optimize, CfSolution, SkipReason};
use cfx_core::eval::{
    mean_centroid_distance, metric_report, min_pairwise_cosine, solution_report, EvalInput, MetricReport,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{num, to_json, write_csv, write_json};
use crate::pipeline::{class_pairs, load_models, model_paths, prepare, sha256, sha256_file, InputHashes, Prepared};

pub const METRICS_FILE: &str = "metrics.json";
pub const INSTANCES_FILE: &str = "instances.csv";
pub const GROUPS_FILE: &str = "groups.csv";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

/// Tolerance of the consistency gate, relative to `max(|a|, |b|, 1)`.
const GATE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub row: usize,
    pub reason: SkipReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub min_pairwise_cosine: Option<f64>,
    pub mean_centroid_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub mode: String,
    pub target_class: String,
    pub origin_class: Option<String>,
    pub target: usize,
    pub skipped: Vec<Skipped>,
    /// Plausibility threshold on the standardized-space log density.
    pub delta_log: f64,
    /// Added to standardized-space log densities to express them in original units.
    pub density_offset: f64,
    pub proximity_units: String,
    pub log_density_units: String,
    pub iterations: usize,
    pub soft_loss: f64,
    pub hard_loss: f64,
    pub hard_soft_gap: f64,
    pub diversity: Diversity,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    /// SHA-256 of the resolved configuration together with the input hashes.
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: InputHashes,
}

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub prepare_seconds: f64,
    pub optimize_seconds: f64,
    pub report_seconds: f64,
}

pub struct ExplainOutcome {
    /// Directory the bundle was written to.
    pub out: PathBuf,
    pub metrics: MetricsFile,
    pub timing: Timing,
}

pub fn diversity_of(solution: &CfSolution) -> Diversity {
    Diversity {
        min_pairwise_cosine: min_pairwise_cosine(&solution.shifts),
        mean_centroid_distance: mean_centroid_distance(&solution.shifts),
    }
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.into()
}

/// Writes one bundle per (origin → target) pair; see [`class_pairs`].
pub fn explain(cfg: &RunConfig) -> Result<Vec<ExplainOutcome>, CliError> {
    class_pairs(cfg)?.iter().map(explain_pair).collect()
}

/// Runs the optimizer for the configured mode and writes the bundle to `cfg.out`.
pub fn explain_pair(cfg: &RunConfig) -> Result<ExplainOutcome, CliError> {
    let t0 = Instant::now();
    let prep = prepare(cfg)?;
    let problem = prep.problem(cfg)?;
    let t1 = Instant::now();
    let solution = optimize(&problem)?;
    let t2 = Instant::now();
    let report = solution_report(&solution, &prep.classifier, &prep.flow, prep.density_offset)?;
    let metrics = MetricsFile {
        mode: cfg.mode.name().into(),
        target_class: prep.dataset.class_labels[prep.target].clone(),
        origin_class: prep.origin.map(|o| prep.dataset.class_labels[o].clone()),
        target: prep.target,
        skipped: prep
            .skipped
            .iter()
            .map(|&(row, reason)| Skipped { row, reason })
            .collect(),
        delta_log: prep.delta_log,
        density_offset: prep.density_offset,
        proximity_units: "standardized".into(),
        log_density_units: "original".into(),
        iterations: solution.iterations,
        soft_loss: solution.soft_loss,
        hard_loss: solution.hard_loss,
        hard_soft_gap: solution.hard_soft_gap(),
        diversity: diversity_of(&solution),
        metrics: report,
    };
    std::fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join(METRICS_FILE), &metrics)?;
    write_instances(&cfg.out.join(INSTANCES_FILE), &prep, &solution)?;
    write_groups(&cfg.out.join(GROUPS_FILE), &prep, &solution)?;
    write_trace(&cfg.out.join(TRACE_FILE), &solution)?;
    write_json(&cfg.out.join(MANIFEST_FILE), &manifest(cfg, &prep)?)?;
    let timing = Timing {
        prepare_seconds: (t1 - t0).as_secs_f64(),
        optimize_seconds: (t2 - t1).as_secs_f64(),
        report_seconds: t2.elapsed().as_secs_f64(),
    };
    write_json(&cfg.out.join(TIMING_FILE), &timing)?;
    Ok(ExplainOutcome {
        out: cfg.out.clone(),
        metrics,
        timing,
    })
}

pub fn manifest(cfg: &RunConfig, prep: &Prepared) -> Result<Manifest, CliError> {
    let config = serde_json::to_value(cfg)?;
    let hashed = to_json(&(&config, &prep.inputs))?;
    Ok(Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config_sha256: sha256(hashed.as_bytes()),
        config,
        inputs: prep.inputs.clone(),
    })
}

fn write_instances(path: &Path, prep: &Prepared, s: &CfSolution) -> Result<(), CliError> {
    let names = &prep.dataset.feature_names;
    let mut header: Vec<String> = ["row", "group", "magnitude", "valid", "plausible", "l2", "log_density"]
        .map(String::from)
        .to_vec();
    for prefix in ["x0", "cf", "shift"] {
        header.extend(names.iter().map(|n| format!("{prefix}_{n}")));
    }
    let scaler = &prep.split.scaler;
    let x0 = scaler.inverse_transform(&s.x0);
    let cf = scaler.inverse_transform(&s.counterfactuals);
    let rows: Vec<Vec<String>> = (0..s.num_instances())
        .map(|i| {
            let r = &s.records[i];
            let mut row = vec![
                prep.rows[i].to_string(),
                s.groups[i].to_string(),
                num(s.magnitudes[i]),
                flag(r.valid),
                flag(r.plausible),
                num(r.l2),
                num(r.log_density + prep.density_offset),
            ];
            row.extend(x0.row(i).iter().map(|&v| num(v)));
            row.extend(cf.row(i).iter().map(|&v| num(v)));
            row.extend(cf.row(i).iter().zip(x0.row(i)).map(|(a, b)| num(a - b)));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

fn write_groups(path: &Path, prep: &Prepared, s: &CfSolution) -> Result<(), CliError> {
    let names = &prep.dataset.feature_names;
    let mut header: Vec<String> = ["group", "members", "mean_magnitude"].map(String::from).to_vec();
    header.extend(names.iter().map(|n| format!("shift_{n}")));
    header.extend(names.iter().map(|n| format!("norm_{n}")));
    let std = &prep.split.scaler.std;
    let rows: Vec<Vec<String>> = extract_groups(s)
        .iter()
        .map(|g| {
            let mut row = vec![g.id.to_string(), g.members.len().to_string(), num(g.mean_magnitude)];
            row.extend(g.mean_shift.iter().zip(std).map(|(m, s)| num(m * s)));
            row.extend(g.normalized_shift.iter().map(|&v| num(v)));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

fn write_trace(path: &Path, s: &CfSolution) -> Result<(), CliError> {
    let header: Vec<String> = [
        "iteration",
        "total",
        "distance",
        "validity",
        "plausibility",
        "assignment_entropy",
        "group_entropy",
        "diversity",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = s
        .trace
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut row = vec![i.to_string()];
            row.extend(
                [
                    t.total,
                    t.distance,
                    t.validity,
                    t.plausibility,
                    t.assignment_entropy,
                    t.group_entropy,
                    t.diversity,
                ]
                .map(num),
            );
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// One per-instance row of a bundle.
struct InstanceRow {
    row: usize,
    group: usize,
    valid: bool,
    plausible: bool,
    l2: f64,
    log_density: f64,
    x0: Vec<f64>,
    cf: Vec<f64>,
}

fn read_instances(path: &Path, names: &[String]) -> Result<Vec<InstanceRow>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let col = |name: String| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column {name:?}", path.display())))
    };
    let fixed = ["row", "group", "valid", "plausible", "l2", "log_density"].map(|c| col(c.to_string()));
    let [row_c, group_c, valid_c, plaus_c, l2_c, ld_c] = fixed;
    let (row_c, group_c, valid_c, plaus_c, l2_c, ld_c) = (row_c?, group_c?, valid_c?, plaus_c?, l2_c?, ld_c?);
    let x0_c = names
        .iter()
        .map(|n| col(format!("x0_{n}")))
        .collect::<Result<Vec<_>, _>>()?;
    let cf_c = names
        .iter()
        .map(|n| col(format!("cf_{n}")))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let bad = |c: usize| {
            CliError::Data(format!(
                "{} line {}: bad value {:?}",
                path.display(),
                line + 2,
                &record[c]
            ))
        };
        let float = |c: usize| record[c].parse::<f64>().map_err(|_| bad(c));
        let int = |c: usize| record[c].parse::<usize>().map_err(|_| bad(c));
        out.push(InstanceRow {
            row: int(row_c)?,
            group: int(group_c)?,
            valid: int(valid_c)? == 1,
            plausible: int(plaus_c)? == 1,
            l2: float(l2_c)?,
            log_density: float(ld_c)?,
            x0: x0_c.iter().map(|&c| float(c)).collect::<Result<_, _>>()?,
            cf: cf_c.iter().map(|&c| float(c)).collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= GATE_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Recomputed metrics of a bundle and every disagreement with what it stores.
pub struct Verification {
    pub metrics: MetricReport,
    pub mismatches: Vec<String>,
}

/// The bundle at `path`, or the bundles one level below it (one per class pair).
pub fn find_bundles(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries =
        std::fs::read_dir(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut found = Vec::new();
    for entry in entries {
        let dir = entry?.path();
        if dir.join(MANIFEST_FILE).is_file() {
            found.push(dir);
        }
    }
    if found.is_empty() {
        return Err(CliError::Data(format!("{} holds no report bundle", path.display())));
    }
    found.sort();
    Ok(found)
}

/// Recomputes every metric from the per-instance file with the models named in
/// the manifest and compares against the stored values.
pub fn verify(bundle: &Path) -> Result<Verification, CliError> {
    let manifest: Manifest = read_json(&bundle.join(MANIFEST_FILE))?;
    let stored: MetricsFile = read_json(&bundle.join(METRICS_FILE))?;
    let model_dir = manifest
        .config
        .get("model_dir")
        .and_then(|v| v.as_str())
        .ok_or_else(|| CliError::Data("manifest lacks the model directory".into()))?;
    let model_dir = Path::new(model_dir);
    let mut mismatches = Vec::new();
    let (cp, fp) = model_paths(model_dir);
    if sha256_file(&cp)? != manifest.inputs.classifier || sha256_file(&fp)? != manifest.inputs.flow {
        mismatches.push(format!(
            "model files in {} changed since the bundle was written",
            model_dir.display()
        ));
    }
    let (clf_doc, flow_doc) = load_models(model_dir)?;
    let scaler = clf_doc
        .scaler
        .clone()
        .ok_or_else(|| CliError::Data("classifier file has no scaler".into()))?;
    let classifier = clf_doc.to_classifier()?;
    let flow = flow_doc.to_flow()?;

    let rows = read_instances(&bundle.join(INSTANCES_FILE), &clf_doc.feature_names)?;
    if rows.is_empty() {
        return Err(CliError::Data("bundle has no instances".into()));
    }
    let d = clf_doc.feature_names.len();
    let to_tensor = |pick: &dyn Fn(&InstanceRow) -> &Vec<f64>| -> Result<Tensor, CliError> {
        let data = rows.iter().flat_map(|r| pick(r).iter().copied()).collect();
        Ok(scaler.transform(&Tensor::matrix(rows.len(), d, data)?))
    };
    let x0 = to_tensor(&|r| &r.x0)?;
    let x = to_tensor(&|r| &r.cf)?;
    let groups: Vec<usize> = rows.iter().map(|r| r.group).collect();
    let metrics = metric_report(&EvalInput {
        classifier: &classifier,
        flow: &flow,
        x0: &x0,
        counterfactuals: &x,
        groups: &groups,
        target: stored.target,
        delta_log: stored.delta_log,
        density_offset: stored.density_offset,
    })?;

    let pred = classifier.predict(&x)?;
    let ld = flow.log_density(&x, &vec![stored.target; rows.len()])?;
    for (i, r) in rows.iter().enumerate() {
        let l2 = x
            .row(i)
            .iter()
            .zip(x0.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let checks = [
            ("valid", (pred[i] == stored.target) == r.valid),
            ("plausible", (ld[i] >= stored.delta_log) == r.plausible),
            ("l2", close(l2, r.l2)),
            ("log_density", close(ld[i] + stored.density_offset, r.log_density)),
        ];
        for (name, ok) in checks {
            if !ok {
                mismatches.push(format!(
                    "instance {i} (dataset row {}): {name} does not match its x0/cf values",
                    r.row
                ));
            }
        }
    }
    compare_reports(&stored.metrics, &metrics, &mut mismatches);
    Ok(Verification { metrics, mismatches })
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(map) => map.iter().for_each(|(k, v)| flatten(&format!("{prefix}.{k}"), v, out)),
        serde_json::Value::Array(items) => items
            .iter()
            .enumerate()
            .for_each(|(i, v)| flatten(&format!("{prefix}[{i}]"), v, out)),
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn compare_reports(stored: &MetricReport, fresh: &MetricReport, mismatches: &mut Vec<String>) {
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    let (sa, sb) = (
        MetricReport {
            seconds: None,
            ..stored.clone()
        },
        MetricReport {
            seconds: None,
            ..fresh.clone()
        },
    );
    flatten("metrics", &serde_json::to_value(sa).expect("plain data"), &mut a);
    flatten("metrics", &serde_json::to_value(sb).expect("plain data"), &mut b);
    for key in a.keys().chain(b.keys().filter(|k| !a.contains_key(*k))) {
        let (x, y) = (a.get(key), b.get(key));
        let same = match (x.and_then(|v| v.as_f64()), y.and_then(|v| v.as_f64())) {
            (Some(p), Some(q)) => close(p, q),
            _ => x == y,
        };
        if !same {
            let show = |v: Option<&serde_json::Value>| v.map_or("absent".to_string(), |v| v.to_string());
            mismatches.push(format!("{key}: stored {} recomputed {}", show(x), show(y)));
        }
    }
}
