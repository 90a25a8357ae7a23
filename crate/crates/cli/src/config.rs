//! Declarative experiment configuration: which datasets, which estimators,
//! which learners, which seeds, and where the outputs go. Parsed from TOML;
//! the run is the cross product of the dataset and estimator lists (and the
//! learner list, in treatment-effect mode).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use relkit::datagen::{Family, RelMode};
use relkit::dataio::{PrepOp, TaxonomyLevel};
use relkit::meta::LearnerKind;
use relkit::nw::{NwFitConfig, NwVariant};
use relkit::tabrel::{MaskScope, TabRelConfig, TabRelFitConfig};

use crate::HarnessError;

/// Environment variable naming the directory that relative dataset paths
/// are resolved against.
pub const DATA_ROOT_ENV: &str = "RELKIT_DATA";

fn default_split() -> [f64; 3] {
    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]
}

fn default_timeout() -> u64 {
    600
}

fn default_grid() -> usize {
    201
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mse,
    R2,
    Pehe,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Mse => "mse",
            MetricKind::R2 => "r2",
            MetricKind::Pehe => "pehe",
        }
    }
}

/// One dataset to run against.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Clustered synthetic regression data, regenerated per seed.
    Synthetic {
        family: String,
        n: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        cluster_scale: Option<f64>,
        /// "deterministic" or "random_half"; family default when absent.
        #[serde(skip_serializing_if = "Option::is_none")]
        relations: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    /// Synthetic treatment-effect data with a constant additive effect.
    SyntheticEffect {
        n: usize,
        effect: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    /// Delimited table plus an externally constructed relation source.
    Table {
        name: String,
        path: PathBuf,
        key_col: String,
        feature_cols: Vec<String>,
        target_col: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        year_col: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        year: Option<i64>,
        relations: RelationSpec,
        /// Ops applied to features in order, e.g. ["log", "standardize"].
        #[serde(default)]
        preprocess: Vec<String>,
        /// Log-transform the target as well.
        #[serde(default)]
        log_target: bool,
        /// Entity-level split sizes (trial keys, validation keys); row-level
        /// fractional split when absent.
        #[serde(skip_serializing_if = "Option::is_none")]
        key_split: Option<[usize; 2]>,
    },
    /// Directory of outcome realization files, each an independent
    /// experiment.
    Ihdp {
        dir: PathBuf,
        #[serde(skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RelationSpec {
    PairList {
        path: PathBuf,
    },
    Taxonomy {
        path: PathBuf,
        key_col: String,
        level_cols: [String; 3],
        #[serde(default)]
        level: Option<String>,
    },
}

/// One estimator to run against every dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    Nw {
        /// vanilla | rel_kernel | rel_features | learnable_norm | mlp_embed
        variant: String,
        /// Replace the relation matrix with zeros, for relation-capable
        /// variants run without relational information.
        #[serde(default)]
        zero_relations: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        epochs: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        lr: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        patience: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Tabrel {
        #[serde(skip_serializing_if = "Option::is_none")]
        embed_dim: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        num_heads: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        depth: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        feature_embed_dim: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        dropout: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        epochs: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        lr: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        patience: Option<usize>,
        /// "all_rows" (default) or "trial_rows".
        #[serde(skip_serializing_if = "Option::is_none")]
        mask_scope: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricKind>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Treatment-effect learners; empty means plain regression.
    #[serde(default)]
    pub learners: Vec<String>,
    #[serde(default = "default_timeout")]
    pub fit_timeout_secs: u64,
    /// Number of x grid points for plot data over [-1, 1].
    #[serde(default = "default_grid")]
    pub plot_grid: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub datasets: Vec<DatasetSpec>,
    pub estimators: Vec<EstimatorSpec>,
}

pub fn parse_nw_variant(s: &str) -> Result<NwVariant, HarnessError> {
    Ok(match s {
        "vanilla" | "nw_vanilla" => NwVariant::Vanilla,
        "rel_kernel" | "nw_rel" => NwVariant::RelKernel,
        "rel_features" | "nw_rel_features" => NwVariant::RelFeatures,
        "learnable_norm" | "nw_learnable_norm" => NwVariant::LearnableNorm,
        "mlp_embed" | "nw_mlp" => NwVariant::MlpEmbed,
        other => {
            return Err(HarnessError::Config(format!(
                "unknown kernel regression variant '{other}'"
            )))
        }
    })
}

pub fn parse_learner(s: &str) -> Result<LearnerKind, HarnessError> {
    LearnerKind::parse(s).map_err(|e| HarnessError::Config(e.to_string()))
}

fn parse_rel_mode(s: &str) -> Result<RelMode, HarnessError> {
    RelMode::parse(s).map_err(|e| HarnessError::Config(e.to_string()))
}

impl DatasetSpec {
    /// Row label for result tables.
    pub fn tag(&self) -> String {
        match self {
            DatasetSpec::Synthetic {
                family,
                name,
                relations,
                ..
            } => name.clone().unwrap_or_else(|| {
                let suffix = match relations.as_deref() {
                    Some("random_half") => "_rand",
                    _ => "",
                };
                format!("{family}{suffix}")
            }),
            DatasetSpec::SyntheticEffect { name, .. } => {
                name.clone().unwrap_or_else(|| "additive_effect".into())
            }
            DatasetSpec::Table { name, .. } => name.clone(),
            DatasetSpec::Ihdp { .. } => "ihdp".into(),
        }
    }

    pub fn is_treatment(&self) -> bool {
        matches!(
            self,
            DatasetSpec::SyntheticEffect { .. } | DatasetSpec::Ihdp { .. }
        )
    }

    pub fn parsed_family(&self) -> Result<Option<(Family, Option<RelMode>)>, HarnessError> {
        match self {
            DatasetSpec::Synthetic {
                family, relations, ..
            } => {
                let fam =
                    Family::parse(family).map_err(|e| HarnessError::Config(e.to_string()))?;
                let mode = relations.as_deref().map(parse_rel_mode).transpose()?;
                Ok(Some((fam, mode)))
            }
            _ => Ok(None),
        }
    }
}

impl EstimatorSpec {
    /// Row label for result tables.
    pub fn tag(&self) -> String {
        match self {
            EstimatorSpec::Nw {
                variant,
                zero_relations,
                name,
                ..
            } => name.clone().unwrap_or_else(|| {
                let base = parse_nw_variant(variant)
                    .map(|v| v.name().to_string())
                    .unwrap_or_else(|_| format!("nw_{variant}"));
                if *zero_relations {
                    format!("{base}_norel")
                } else {
                    base
                }
            }),
            EstimatorSpec::Tabrel { name, .. } => name.clone().unwrap_or_else(|| "tabrel".into()),
        }
    }

    pub fn nw_parts(&self) -> Result<Option<(NwVariant, NwFitConfig, bool)>, HarnessError> {
        match self {
            EstimatorSpec::Nw {
                variant,
                zero_relations,
                epochs,
                lr,
                patience,
                ..
            } => {
                let v = parse_nw_variant(variant)?;
                let mut fit = NwFitConfig::default();
                if let Some(e) = epochs {
                    fit.epochs = *e;
                }
                if let Some(l) = lr {
                    fit.lr = *l;
                }
                if let Some(p) = patience {
                    fit.patience = *p;
                }
                Ok(Some((v, fit, *zero_relations)))
            }
            EstimatorSpec::Tabrel { .. } => Ok(None),
        }
    }

    pub fn tabrel_parts(&self) -> Result<Option<(TabRelConfig, TabRelFitConfig)>, HarnessError> {
        match self {
            EstimatorSpec::Nw { .. } => Ok(None),
            EstimatorSpec::Tabrel {
                embed_dim,
                num_heads,
                depth,
                feature_embed_dim,
                dropout,
                epochs,
                lr,
                patience,
                mask_scope,
                ..
            } => {
                let mut cfg = TabRelConfig::default();
                if let Some(v) = embed_dim {
                    cfg.embed_dim = *v;
                }
                if let Some(v) = num_heads {
                    cfg.num_heads = *v;
                }
                if let Some(v) = depth {
                    cfg.depth = *v;
                }
                if let Some(v) = feature_embed_dim {
                    cfg.feature_embed_dim = *v;
                }
                if let Some(v) = dropout {
                    cfg.dropout_rate = *v;
                }
                if let Some(scope) = mask_scope {
                    cfg.mask_scope = match scope.as_str() {
                        "all_rows" => MaskScope::AllRows,
                        "trial_rows" => MaskScope::TrialRows,
                        other => {
                            return Err(HarnessError::Config(format!(
                                "unknown mask scope '{other}'"
                            )))
                        }
                    };
                }
                let mut fit = TabRelFitConfig::default();
                if let Some(e) = epochs {
                    fit.epochs = *e;
                }
                if let Some(l) = lr {
                    fit.lr = *l;
                }
                if let Some(p) = patience {
                    fit.patience = *p;
                }
                Ok(Some((cfg, fit)))
            }
        }
    }
}

impl RelationSpec {
    pub fn parsed_level(&self) -> Result<TaxonomyLevel, HarnessError> {
        match self {
            RelationSpec::PairList { .. } => Ok(TaxonomyLevel::Order),
            RelationSpec::Taxonomy { level, .. } => match level.as_deref() {
                None => Ok(TaxonomyLevel::Order),
                Some(s) => TaxonomyLevel::parse(s).map_err(|e| HarnessError::Config(e.to_string())),
            },
        }
    }
}

pub fn parse_prep_ops(ops: &[String]) -> Result<Vec<PrepOp>, HarnessError> {
    ops.iter()
        .map(|s| PrepOp::parse(s).map_err(|e| HarnessError::Config(e.to_string())))
        .collect()
}

/// Resolve a dataset path: absolute paths pass through; relative paths are
/// tried against the data root env var, then ./data, then as given.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        return path.to_path_buf();
    }
    if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
        let candidate = Path::new(&root).join(path);
        if candidate.exists() {
            return candidate;
        }
    }
    let local = Path::new("data").join(path);
    if local.exists() {
        return local;
    }
    path.to_path_buf()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig, HarnessError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<ExperimentConfig, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Toml(e.to_string()))
    }

    pub fn parsed_learners(&self) -> Result<Vec<LearnerKind>, HarnessError> {
        self.learners.iter().map(|s| parse_learner(s)).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds list is empty".into()));
        }
        if self.metrics.is_empty() {
            return Err(HarnessError::Config("metrics list is empty".into()));
        }
        if self.datasets.is_empty() {
            return Err(HarnessError::Config("no datasets configured".into()));
        }
        if self.estimators.is_empty() {
            return Err(HarnessError::Config("no estimators configured".into()));
        }
        for f in self.split {
            if !(0.0..=1.0).contains(&f) || !f.is_finite() {
                return Err(HarnessError::Config(format!(
                    "split fraction {f} outside [0, 1]"
                )));
            }
        }
        if self.split.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(HarnessError::Config("split fractions sum above 1".into()));
        }
        if self.plot_grid < 2 {
            return Err(HarnessError::Config("plot grid needs at least 2 points".into()));
        }

        let learners = self.parsed_learners()?;
        let wants_pehe = self.metrics.contains(&MetricKind::Pehe);
        if !learners.is_empty() || wants_pehe {
            if learners.is_empty() || !wants_pehe {
                return Err(HarnessError::Config(
                    "effect estimation needs both a learner list and the pehe metric".into(),
                ));
            }
            for d in &self.datasets {
                if !d.is_treatment() {
                    return Err(HarnessError::Config(format!(
                        "dataset '{}' has no ground-truth effects; pehe is undefined",
                        d.tag()
                    )));
                }
            }
            if self.metrics.iter().any(|m| *m != MetricKind::Pehe) {
                return Err(HarnessError::Config(
                    "regression metrics do not apply in effect-estimation mode".into(),
                ));
            }
        } else {
            for d in &self.datasets {
                if d.is_treatment() {
                    return Err(HarnessError::Config(format!(
                        "dataset '{}' needs a learner list and the pehe metric",
                        d.tag()
                    )));
                }
            }
        }

        // surface bad names early, not in the middle of a run
        for d in &self.datasets {
            d.parsed_family()?;
            if let DatasetSpec::Table {
                relations,
                preprocess,
                feature_cols,
                ..
            } = d
            {
                relations.parsed_level()?;
                parse_prep_ops(preprocess)?;
                if feature_cols.is_empty() {
                    return Err(HarnessError::Config(format!(
                        "dataset '{}' lists no feature columns",
                        d.tag()
                    )));
                }
            }
        }
        for e in &self.estimators {
            e.nw_parts()?;
            e.tabrel_parts()?;
        }
        Ok(())
    }
}
