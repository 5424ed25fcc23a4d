//! Dataset loading, model training and the setup shared by `explain` and
//! `ablate-diversity`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cfx_core::ad::Tensor;
use cfx_core::data::{load_csv, make_blobs, make_moons, split_folds, Dataset, FoldSplit};
use cfx_core::engine::{select_instances, CfProblem, Constraints, SkipReason};
use cfx_core::models::{density_threshold, train_classifier, train_flow, Classifier, ConditionalFlow, ModelDocument};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::write_json;

pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const FLOW_FILE: &str = "flow.json";
pub const TRAIN_METRICS_FILE: &str = "train_metrics.json";

/// Where the training rows came from; stored with the models so explanations
/// use the same split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub dataset: String,
    pub label_col: String,
    pub samples: usize,
    pub noise: f64,
    pub centers: usize,
    pub folds: usize,
    pub fold: usize,
    pub seed: u64,
}

impl DataSource {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            dataset: cfg.dataset.clone(),
            label_col: cfg.label_col.clone(),
            samples: cfg.samples,
            noise: cfg.noise,
            centers: cfg.centers,
            folds: cfg.folds,
            fold: cfg.fold,
            seed: cfg.seed,
        }
    }

    pub fn load(&self) -> Result<Dataset, CliError> {
        let ds = match self.dataset.as_str() {
            "moons" => make_moons(self.samples, self.noise, self.seed)?,
            "blobs" => make_blobs(self.samples, self.centers, self.noise, self.seed)?,
            path => load_csv(path, &self.label_col).map_err(|e| CliError::from(e).context(path))?,
        };
        Ok(ds)
    }

    pub fn split(&self, ds: &Dataset) -> Result<FoldSplit, CliError> {
        let folds = split_folds(ds, self.folds, self.seed)?;
        Ok(ds.prepare_fold(&folds, self.fold)?)
    }

    /// Hash of the dataset bytes, or of the generator parameters.
    pub fn fingerprint(&self) -> Result<String, CliError> {
        match self.dataset.as_str() {
            "moons" | "blobs" => Ok(sha256(serde_json::to_string(self)?.as_bytes())),
            path => sha256_file(Path::new(path)),
        }
    }
}

impl CliError {
    /// Prefixes the message with the file it concerns.
    pub fn context(self, path: &str) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{path}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{path}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{path}: {m}")),
        }
    }
}

pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256(&bytes))
}

/// Index of a class given by label text or by index.
pub fn resolve_class(labels: &[String], name: &str) -> Result<usize, CliError> {
    if let Some(c) = labels.iter().position(|l| l == name) {
        return Ok(c);
    }
    match name.parse::<usize>() {
        Ok(c) if c < labels.len() => Ok(c),
        _ => Err(CliError::Usage(format!("class {name:?} not among {labels:?}"))),
    }
}

/// One configuration per (origin → target) pair. Without an explicit origin,
/// a multiclass model yields one pair per other class, each written to
/// `<out>/<origin>-to-<target>`; otherwise the configuration is used as given.
pub fn class_pairs(cfg: &RunConfig) -> Result<Vec<RunConfig>, CliError> {
    if cfg.origin_class.is_some() {
        return Ok(vec![cfg.clone()]);
    }
    let (clf_doc, _) = load_models(&cfg.model_dir)?;
    let labels: Vec<String> = clf_doc
        .metadata
        .get("class_labels")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| CliError::Data("classifier file does not record its class labels".into()))?;
    if labels.len() <= 2 {
        return Ok(vec![cfg.clone()]);
    }
    let target = resolve_class(&labels, &cfg.target_class)?;
    let dir_name = |l: &str| {
        l.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect::<String>()
    };
    Ok((0..labels.len())
        .filter(|&c| c != target)
        .map(|c| RunConfig {
            origin_class: Some(labels[c].clone()),
            out: cfg
                .out
                .join(format!("{}-to-{}", dir_name(&labels[c]), dir_name(&labels[target]))),
            ..cfg.clone()
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub source: DataSource,
    pub train_rows: usize,
    pub test_rows: usize,
    pub classifier_train_accuracy: f64,
    pub classifier_test_accuracy: f64,
    pub classifier_epochs: usize,
    /// Held-out mean log density, original units.
    pub flow_test_log_density: f64,
    pub flow_train_log_density: f64,
    pub flow_epochs: usize,
    pub seconds: f64,
}

/// Trains both models on the training folds and writes them to `cfg.model_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let start = Instant::now();
    let source = DataSource::from_config(cfg);
    let ds = source.load()?;
    let split = source.split(&ds)?;
    let tc = cfg.train_config();
    let clf = train_classifier(&split.train, cfg.classifier, &tc)?;
    let flow = train_flow(&split.train, cfg.flow, &tc)?;

    let offset = split.scaler.log_density_offset();
    let ld = |x: &Tensor, y: &[usize]| -> Result<f64, CliError> { Ok(mean(&flow.model.log_density(x, y)?) + offset) };
    let summary = TrainSummary {
        train_rows: split.train.len(),
        test_rows: split.test.len(),
        classifier_train_accuracy: clf.model.accuracy(&split.train)?,
        classifier_test_accuracy: clf.model.accuracy(&split.test)?,
        classifier_epochs: clf.report.epochs_run,
        flow_test_log_density: ld(&split.test.x, &split.test.y)?,
        flow_train_log_density: ld(&split.train.x, &split.train.y)?,
        flow_epochs: flow.report.epochs_run,
        seconds: start.elapsed().as_secs_f64(),
        source,
    };

    std::fs::create_dir_all(&cfg.model_dir)?;
    let tag = serde_json::to_value(&summary.source)?;
    let mut clf_doc = ModelDocument::from_classifier(&clf.model, &ds.feature_names, Some(&split.scaler), cfg.seed);
    clf_doc.metadata.insert("source".into(), tag.clone());
    clf_doc
        .metadata
        .insert("class_labels".into(), serde_json::to_value(&ds.class_labels)?);
    let mut flow_doc = ModelDocument::from_flow(&flow.model, &ds.feature_names, Some(&split.scaler), cfg.seed);
    flow_doc.metadata.insert("source".into(), tag);
    clf_doc.save(&cfg.model_dir.join(CLASSIFIER_FILE))?;
    flow_doc.save(&cfg.model_dir.join(FLOW_FILE))?;
    // timings vary between runs, so they stay out of the model files
    write_json(&cfg.model_dir.join(TRAIN_METRICS_FILE), &summary)?;
    Ok(summary)
}

/// Everything an explanation run needs, loaded and checked against each other.
pub struct Prepared {
    pub source: DataSource,
    pub dataset: Dataset,
    pub split: FoldSplit,
    pub classifier: Classifier,
    pub flow: ConditionalFlow,
    pub constraints: Constraints,
    pub target: usize,
    pub origin: Option<usize>,
    /// Dataset row of every explained instance.
    pub rows: Vec<usize>,
    /// Dataset row and reason of every candidate left out.
    pub skipped: Vec<(usize, SkipReason)>,
    pub x0: Tensor,
    pub delta_log: f64,
    pub density_offset: f64,
    pub inputs: InputHashes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHashes {
    pub dataset: String,
    pub classifier: String,
    pub flow: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<String>,
}

pub fn model_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(CLASSIFIER_FILE), dir.join(FLOW_FILE))
}

pub fn load_models(dir: &Path) -> Result<(ModelDocument, ModelDocument), CliError> {
    let (c, f) = model_paths(dir);
    let load = |p: &Path| ModelDocument::load(p).map_err(|e| CliError::from(e).context(&p.display().to_string()));
    Ok((load(&c)?, load(&f)?))
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let (clf_doc, flow_doc) = load_models(&cfg.model_dir)?;
    let source: DataSource = clf_doc
        .metadata
        .get("source")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| CliError::Data("classifier file does not record its training data".into()))?;
    let asked = DataSource {
        seed: source.seed,
        ..DataSource::from_config(cfg)
    };
    if asked != source {
        return Err(CliError::Usage(format!(
            "models in {} were trained on {}, fold {} of {}; pass the same data settings",
            cfg.model_dir.display(),
            source.dataset,
            source.fold,
            source.folds
        )));
    }
    let dataset = source.load()?;
    for doc in [&clf_doc, &flow_doc] {
        if doc.feature_names != dataset.feature_names {
            return Err(CliError::Data(format!(
                "models expect features {:?}, dataset has {:?}",
                doc.feature_names, dataset.feature_names
            )));
        }
    }
    let split = source.split(&dataset)?;
    if clf_doc.scaler.as_ref() != Some(&split.scaler) || flow_doc.scaler.as_ref() != Some(&split.scaler) {
        return Err(CliError::Data(
            "models were fitted on a different standardization of this dataset".into(),
        ));
    }
    let classifier = clf_doc.to_classifier()?;
    let flow = flow_doc.to_flow()?;
    if classifier.num_classes != dataset.num_classes() || flow.num_classes != dataset.num_classes() {
        return Err(CliError::Data(format!(
            "models and dataset disagree on {} classes",
            dataset.num_classes()
        )));
    }

    let target = resolve_class(&dataset.class_labels, &cfg.target_class)?;
    let origin = cfg
        .origin_class
        .as_deref()
        .map(|o| resolve_class(&dataset.class_labels, o))
        .transpose()?;
    if origin == Some(target) {
        return Err(CliError::Usage("origin and target class coincide".into()));
    }
    let constraints = match &cfg.constraints {
        Some(path) => Constraints::load(path, &dataset.feature_names)?,
        None => Constraints::free(dataset.num_features()),
    };
    let (lower, upper) = constraints.standardized_bounds(&split.scaler)?;

    let candidates: Vec<usize> = (0..split.test.len())
        .filter(|&i| match origin {
            Some(o) => split.test.y[i] == o,
            None => split.test.y[i] != target,
        })
        .collect();
    let x_candidates = split.test.x.select_rows(&candidates);
    let selection = select_instances(&classifier, &x_candidates, target, &lower, &upper)?;
    if selection.kept.is_empty() {
        return Err(CliError::Data(format!(
            "no test rows to explain toward class {:?} ({} candidates skipped)",
            dataset.class_labels[target],
            selection.skipped.len()
        )));
    }
    let rows = selection.kept.iter().map(|&i| split.test_idx[candidates[i]]).collect();
    let skipped = selection
        .skipped
        .iter()
        .map(|&(i, r)| (split.test_idx[candidates[i]], r))
        .collect();
    let x0 = x_candidates.select_rows(&selection.kept);
    let delta_log = density_threshold(&flow, &split.train, target)?;

    let (cp, fp) = model_paths(&cfg.model_dir);
    let inputs = InputHashes {
        dataset: source.fingerprint()?,
        classifier: sha256_file(&cp)?,
        flow: sha256_file(&fp)?,
        constraints: cfg.constraints.as_deref().map(sha256_file).transpose()?,
    };
    Ok(Prepared {
        density_offset: split.scaler.log_density_offset(),
        source,
        dataset,
        split,
        classifier,
        flow,
        constraints,
        target,
        origin,
        rows,
        skipped,
        x0,
        delta_log,
        inputs,
    })
}

impl Prepared {
    pub fn problem(&self, cfg: &RunConfig) -> Result<CfProblem<'_>, CliError> {
        let mut problem = CfProblem::new(
            &self.classifier,
            &self.flow,
            self.x0.clone(),
            self.target,
            cfg.mode,
            self.delta_log,
        )
        .with_constraints(self.constraints.clone(), &self.split.scaler)?;
        problem.hyper = cfg.hyper.clone();
        problem.freeze_magnitudes = cfg.freeze_magnitudes;
        Ok(problem)
    }
}
