//! Run configuration: a flat TOML document whose keys are the long flag names.
//! Flags given on the command line override the file.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use cfx_core::engine::{CfMode, DistanceKind, Hyperparams};
use cfx_core::models::{ClassifierKind, FlowConfig, TrainConfig};

use crate::error::CliError;

/// Every setting shared by the subcommands. All fields are optional so that
/// a file and the flags can be layered.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    /// `moons`, `blobs` or the path of a CSV file.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Label column of a CSV dataset.
    #[arg(long)]
    pub label_col: Option<String>,
    /// Rows drawn by a synthetic generator.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Noise of the moons generator, or cluster spread of the blobs generator.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Number of blob centers.
    #[arg(long)]
    pub centers: Option<usize>,
    /// `mlp` or `lr`.
    #[arg(long)]
    pub classifier: Option<String>,
    #[arg(long)]
    pub flow_layers: Option<usize>,
    #[arg(long)]
    pub flow_hidden: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Held-out fold used for evaluation and explanation.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    /// `local`, `group` or `global`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Use a fixed number of groups instead of the automatic count.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fixed_group_count: Option<bool>,
    /// Global mode without per-instance magnitudes.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_magnitude: Option<bool>,
    /// Keep every magnitude at 1 in group mode.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub freeze_magnitudes: Option<bool>,
    /// Desired class, by label text or index.
    #[arg(long)]
    pub target_class: Option<String>,
    /// Explain only rows of this class; default is every row not in the target class.
    #[arg(long)]
    pub origin_class: Option<String>,
    #[arg(long)]
    pub lambda_validity: Option<f64>,
    #[arg(long)]
    pub lambda_plausibility: Option<f64>,
    #[arg(long)]
    pub lambda_assignment: Option<f64>,
    #[arg(long)]
    pub lambda_groups: Option<f64>,
    #[arg(long)]
    pub lambda_diversity: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// `l2` or `l1`.
    #[arg(long)]
    pub distance: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Constraint file with lines `name, action, lo, hi`.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! layer {
    ($flags:expr, $file:expr, $($field:ident),+ $(,)?) => {
        Settings { $($field: $flags.$field.or($file.$field),)+ }
    };
}

impl Settings {
    /// Reads a flat TOML file.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Values from `self` win over `file`.
    pub fn over(self, file: Settings) -> Settings {
        layer!(
            self,
            file,
            dataset,
            label_col,
            samples,
            noise,
            centers,
            classifier,
            flow_layers,
            flow_hidden,
            folds,
            fold,
            model_dir,
            mode,
            k_max,
            fixed_group_count,
            no_magnitude,
            freeze_magnitudes,
            target_class,
            origin_class,
            lambda_validity,
            lambda_plausibility,
            lambda_assignment,
            lambda_groups,
            lambda_diversity,
            margin,
            distance,
            learning_rate,
            max_iters,
            constraints,
            seed,
            out,
        )
    }

    pub fn resolve(self) -> Result<RunConfig, CliError> {
        let usage = |m: String| CliError::Usage(m);
        let dataset = self.dataset.ok_or_else(|| usage("--dataset is required".into()))?;
        let (samples, noise) = match dataset.as_str() {
            "moons" => (self.samples.unwrap_or(1024), self.noise.unwrap_or(0.01)),
            "blobs" => (self.samples.unwrap_or(1500), self.noise.unwrap_or(1.0)),
            _ => (self.samples.unwrap_or(0), self.noise.unwrap_or(0.0)),
        };
        let classifier: ClassifierKind = self.classifier.as_deref().unwrap_or("mlp").parse().map_err(usage)?;
        let mode = match self.mode.as_deref().unwrap_or("group") {
            "local" => CfMode::Local,
            "global" => CfMode::Global {
                use_magnitude: !self.no_magnitude.unwrap_or(false),
            },
            "group" => CfMode::GroupWise {
                k_max: self.k_max.unwrap_or(10),
                auto_group_count: !self.fixed_group_count.unwrap_or(false),
            },
            other => {
                return Err(usage(format!(
                    "unknown mode {other:?} (expected local, group or global)"
                )))
            }
        };
        let defaults = Hyperparams::default();
        let seed = self.seed.unwrap_or(0);
        let hyper = Hyperparams {
            lambda_validity: self.lambda_validity.unwrap_or(defaults.lambda_validity),
            lambda_plausibility: self.lambda_plausibility.unwrap_or(defaults.lambda_plausibility),
            lambda_assignment: self.lambda_assignment.unwrap_or(defaults.lambda_assignment),
            lambda_groups: self.lambda_groups.unwrap_or(defaults.lambda_groups),
            lambda_diversity: self.lambda_diversity.unwrap_or(defaults.lambda_diversity),
            margin: self.margin.unwrap_or(defaults.margin),
            distance: match self.distance.as_deref().unwrap_or("l2") {
                "l2" => DistanceKind::L2,
                "l1" => DistanceKind::L1,
                other => return Err(usage(format!("unknown distance {other:?} (expected l1 or l2)"))),
            },
            learning_rate: self.learning_rate.unwrap_or(defaults.learning_rate),
            max_iters: self.max_iters.unwrap_or(defaults.max_iters),
            seed,
            ..defaults
        };
        hyper.validate().map_err(|e| usage(e.to_string()))?;
        let flow = FlowConfig {
            layers: self.flow_layers.unwrap_or(FlowConfig::default().layers),
            hidden: self.flow_hidden.unwrap_or(FlowConfig::default().hidden),
            ..FlowConfig::default()
        };
        let folds = self.folds.unwrap_or(5);
        let fold = self.fold.unwrap_or(0);
        if folds < 2 || fold >= folds {
            return Err(usage(format!("fold {fold} of {folds} is not a valid held-out fold")));
        }
        Ok(RunConfig {
            dataset,
            label_col: self.label_col.unwrap_or_else(|| "label".into()),
            samples,
            noise,
            centers: self.centers.unwrap_or(3),
            classifier,
            flow,
            folds,
            fold,
            model_dir: self.model_dir.unwrap_or_else(|| PathBuf::from("models")),
            mode,
            freeze_magnitudes: self.freeze_magnitudes.unwrap_or(false),
            target_class: self.target_class.unwrap_or_else(|| "1".into()),
            origin_class: self.origin_class,
            hyper,
            constraints: self.constraints,
            seed,
            out: self.out.unwrap_or_else(|| PathBuf::from("out")),
        })
    }
}

/// Fully resolved settings; defaults applied.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset: String,
    pub label_col: String,
    pub samples: usize,
    pub noise: f64,
    pub centers: usize,
    pub classifier: ClassifierKind,
    pub flow: FlowConfig,
    pub folds: usize,
    pub fold: usize,
    pub model_dir: PathBuf,
    pub mode: CfMode,
    pub freeze_magnitudes: bool,
    pub target_class: String,
    pub origin_class: Option<String>,
    pub hyper: Hyperparams,
    pub constraints: Option<PathBuf>,
    pub seed: u64,
    #[serde(skip)]
    pub out: PathBuf,
}

impl RunConfig {
    /// Trainer settings for both models.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_the_file() {
        let file: Settings = toml::from_str("dataset = \"moons\"\nk-max = 4\nseed = 7\n").unwrap();
        let flags = Settings {
            k_max: Some(6),
            ..Settings::default()
        };
        let cfg = flags.over(file).resolve().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(
            cfg.mode,
            CfMode::GroupWise {
                k_max: 6,
                auto_group_count: true
            }
        );
    }

    #[test]
    fn defaults_follow_the_engine() {
        let cfg = Settings {
            dataset: Some("blobs".into()),
            ..Settings::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(cfg.hyper, Hyperparams::default());
        assert_eq!((cfg.samples, cfg.noise, cfg.centers), (1500, 1.0, 3));
        assert_eq!(cfg.classifier, ClassifierKind::Mlp);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        assert!(toml::from_str::<Settings>("datset = \"moons\"").is_err());
        let bad = |s: Settings| matches!(s.resolve(), Err(CliError::Usage(_)));
        let base = || Settings {
            dataset: Some("moons".into()),
            ..Settings::default()
        };
        assert!(bad(Settings::default()));
        assert!(bad(Settings {
            mode: Some("tree".into()),
            ..base()
        }));
        assert!(bad(Settings {
            margin: Some(2.0),
            ..base()
        }));
        assert!(bad(Settings {
            fold: Some(5),
            ..base()
        }));
    }
}
