//! Seeded experiment execution: instantiate datasets, fit estimators,
//! collect per-seed metrics, and aggregate them into result rows. Pure
//! with respect to the filesystem outputs; writing files is the caller's
//! job so a failed run never leaves partial results behind.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use relkit::datagen::{generate, split_dataset, SyntheticSpec};
use relkit::dataio::{
    build_pair_relations, build_taxonomy_relations, fit_preprocessor, ihdp_treatment_dataset,
    load_ihdp, load_pair_list, load_table, load_taxonomy, split_by_keys, TableSource,
};
use relkit::math::Matrix;
use relkit::meta::{estimate, BaseSpec, LearnerKind, TreatmentDataset};
use relkit::nw::{nw_fit, NwFitReport, RelDataset, SplitIndex};
use relkit::stats::mix_seed;
use relkit::tabrel::tabrel_fit;

use crate::config::{DatasetSpec, EstimatorSpec, ExperimentConfig, MetricKind, RelationSpec};
use crate::config::{parse_prep_ops, resolve_data_path};
use crate::{HarnessError, Result};

/// Seed streams are separated by purpose so that, e.g., changing the fit
/// seed never changes which rows land in which split.
pub const SALT_DATA: u64 = 0x6461_7461;
pub const SALT_SPLIT: u64 = 0x7370_6c74;
pub const SALT_FIT: u64 = 0x6669_7421;

/// One completed unit of work: a single (estimator, dataset, seed) fit
/// with every metric it produced. These become the audit log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedRecord {
    pub estimator: String,
    pub dataset: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub wall_ms: u64,
}

/// Aggregate of one metric across seeds. Wall time stays out of the
/// emitted tables (it would break byte-identical reruns) but is carried
/// here for budget reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub estimator: String,
    pub dataset: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    pub wall_ms_total: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub seed_records: Vec<SeedRecord>,
    /// Non-fatal notes (unresolved relation keys, dropped rows).
    pub warnings: Vec<String>,
}

/// A dataset after one-time work (file loads, relation construction) has
/// been done; per-seed instantiation stays cheap.
enum Prepared {
    Synthetic {
        template: SyntheticSpec,
    },
    EffectSynthetic {
        n: usize,
        effect: f64,
    },
    Table {
        keys: Vec<String>,
        x: Matrix,
        y: Vec<f64>,
        r: Matrix,
        prep: Vec<relkit::dataio::PrepOp>,
        key_split: Option<[usize; 2]>,
    },
    Ihdp {
        realizations: Vec<TreatmentDataset>,
    },
}

fn core_err(context: String) -> impl FnOnce(relkit::error::Error) -> HarnessError {
    move |e| HarnessError::core(context, e)
}

fn prepare(spec: &DatasetSpec, warnings: &mut Vec<String>) -> Result<Prepared> {
    let tag = spec.tag();
    match spec {
        DatasetSpec::Synthetic {
            n, cluster_scale, ..
        } => {
            let (family, mode) = spec.parsed_family()?.expect("synthetic spec");
            let mut template = SyntheticSpec::new(family, *n, 0);
            if let Some(s) = cluster_scale {
                template.cluster_scale = *s;
            }
            if let Some(m) = mode {
                template.r_mode = m;
            }
            Ok(Prepared::Synthetic { template })
        }
        DatasetSpec::SyntheticEffect { n, effect, .. } => Ok(Prepared::EffectSynthetic {
            n: *n,
            effect: *effect,
        }),
        DatasetSpec::Table {
            path,
            key_col,
            feature_cols,
            target_col,
            year_col,
            year,
            relations,
            preprocess,
            log_target,
            key_split,
            ..
        } => {
            let mut source = TableSource::new(
                resolve_data_path(path),
                key_col,
                &feature_cols.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
                target_col,
            );
            if let (Some(col), Some(y)) = (year_col, year) {
                source.year_filter = Some((col.clone(), *y));
            }
            let table = load_table(&source).map_err(core_err(format!("loading '{tag}'")))?;
            if table.rows_dropped > 0 {
                warnings.push(format!(
                    "{tag}: dropped {} of {} rows with missing values",
                    table.rows_dropped, table.rows_scanned
                ));
            }
            let built = match relations {
                RelationSpec::PairList { path } => {
                    let pairs = load_pair_list(&resolve_data_path(path))
                        .map_err(core_err(format!("pair list for '{tag}'")))?;
                    build_pair_relations(&table.keys, &pairs)
                }
                RelationSpec::Taxonomy {
                    path,
                    key_col,
                    level_cols,
                    ..
                } => {
                    let taxonomy = load_taxonomy(
                        &resolve_data_path(path),
                        b',',
                        key_col,
                        [
                            level_cols[0].as_str(),
                            level_cols[1].as_str(),
                            level_cols[2].as_str(),
                        ],
                    )
                    .map_err(core_err(format!("taxonomy for '{tag}'")))?;
                    build_taxonomy_relations(&table.keys, &taxonomy, relations.parsed_level()?)
                }
            };
            if !built.unresolved.is_empty() {
                warnings.push(format!(
                    "{tag}: {} relation keys did not resolve (first: {})",
                    built.unresolved.len(),
                    built.unresolved[0]
                ));
            }
            let y = if *log_target {
                let mut out = Vec::with_capacity(table.y.len());
                for &v in &table.y {
                    if v <= 0.0 {
                        return Err(HarnessError::Config(format!(
                            "{tag}: log target requested but target value {v} is not positive"
                        )));
                    }
                    out.push(v.ln());
                }
                out
            } else {
                table.y.clone()
            };
            Ok(Prepared::Table {
                keys: table.keys,
                x: table.x,
                y,
                r: built.r,
                prep: parse_prep_ops(preprocess)?,
                key_split: *key_split,
            })
        }
        DatasetSpec::Ihdp { dir, limit } => {
            let dir = resolve_data_path(dir);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().map_or(false, |x| x == "csv"))
                .collect();
            files.sort();
            if let Some(cap) = limit {
                files.truncate(*cap);
            }
            if files.is_empty() {
                return Err(HarnessError::Config(format!(
                    "no realization files (*.csv) under {}",
                    dir.display()
                )));
            }
            let mut realizations = Vec::with_capacity(files.len());
            for f in &files {
                let real = load_ihdp(f).map_err(core_err(format!("loading {}", f.display())))?;
                realizations.push(
                    ihdp_treatment_dataset(&real)
                        .map_err(core_err(format!("relations from {}", f.display())))?,
                );
            }
            Ok(Prepared::Ihdp { realizations })
        }
    }
}

fn fractions(cfg: &ExperimentConfig) -> (f64, f64, f64) {
    (cfg.split[0], cfg.split[1], cfg.split[2])
}

/// Regression instance for one seed: the dataset (synthetic data is
/// regenerated, tables re-split and re-preprocessed) plus its split.
fn regression_instance(
    prepared: &Prepared,
    cfg: &ExperimentConfig,
    seed: u64,
    context: &str,
) -> Result<(RelDataset, SplitIndex)> {
    match prepared {
        Prepared::Synthetic { template } => {
            let mut spec = template.clone();
            spec.seed = mix_seed(seed, SALT_DATA);
            let sd = generate(&spec).map_err(core_err(format!("generating {context}")))?;
            let split = split_dataset(spec.n, fractions(cfg), mix_seed(seed, SALT_SPLIT))
                .map_err(core_err(format!("splitting {context}")))?;
            Ok((sd.data, split))
        }
        Prepared::Table {
            keys,
            x,
            y,
            r,
            prep,
            key_split,
        } => {
            let split = match key_split {
                Some([nt, nv]) => split_by_keys(keys, *nt, *nv, mix_seed(seed, SALT_SPLIT)),
                None => split_dataset(keys.len(), fractions(cfg), mix_seed(seed, SALT_SPLIT)),
            }
            .map_err(core_err(format!("splitting {context}")))?;
            let prepped = if prep.is_empty() {
                x.clone()
            } else {
                let fitted = fit_preprocessor(x, split.background(), prep)
                    .map_err(core_err(format!("preprocessing {context}")))?;
                fitted
                    .apply(x)
                    .map_err(core_err(format!("preprocessing {context}")))?
            };
            let ds = RelDataset::new(prepped, y.clone(), r.clone())
                .map_err(core_err(format!("assembling {context}")))?;
            Ok((ds, split))
        }
        _ => Err(HarnessError::Config(format!(
            "{context} carries treatment-effect data; regression metrics do not apply"
        ))),
    }
}

fn zero_relations_view(ds: &RelDataset) -> Result<RelDataset> {
    RelDataset::new(
        ds.x().clone(),
        ds.y().to_vec(),
        Matrix::zeros(ds.n(), ds.n()),
    )
    .map_err(core_err("zeroing relations".to_string()))
}

struct FitSummary {
    trial_mse: f64,
    trial_r2: Option<f64>,
    validation_mse: Option<f64>,
    validation_r2: Option<f64>,
    epochs_run: usize,
}

impl From<NwFitReport> for FitSummary {
    fn from(r: NwFitReport) -> Self {
        FitSummary {
            trial_mse: r.trial_mse,
            trial_r2: r.trial_r2,
            validation_mse: r.validation_mse,
            validation_r2: r.validation_r2,
            epochs_run: r.epochs_run,
        }
    }
}

fn fit_estimator(
    est: &EstimatorSpec,
    ds: &RelDataset,
    split: &SplitIndex,
    seed: u64,
    context: &str,
) -> Result<FitSummary> {
    if let Some((variant, mut fit, zero_rel)) = est.nw_parts()? {
        fit.seed = mix_seed(seed, SALT_FIT);
        let report = if zero_rel {
            let blank = zero_relations_view(ds)?;
            nw_fit(&blank, split, variant, &fit)
        } else {
            nw_fit(ds, split, variant, &fit)
        }
        .map_err(core_err(context.to_string()))?;
        return Ok(report.into());
    }
    let (cfg, mut fit) = est.tabrel_parts()?.expect("estimator is nw or tabrel");
    fit.seed = mix_seed(seed, SALT_FIT);
    let report = tabrel_fit(ds, split, &cfg, &fit).map_err(core_err(context.to_string()))?;
    Ok(FitSummary {
        trial_mse: report.trial_mse,
        trial_r2: report.trial_r2,
        validation_mse: report.validation_mse,
        validation_r2: report.validation_r2,
        epochs_run: report.epochs_run,
    })
}

fn guard_timeout(started: Instant, cfg: &ExperimentConfig, context: &str) -> Result<()> {
    let secs = started.elapsed().as_secs_f64();
    if secs > cfg.fit_timeout_secs as f64 {
        return Err(HarnessError::Timeout {
            context: context.to_string(),
            secs,
            limit: cfg.fit_timeout_secs,
        });
    }
    Ok(())
}

fn regression_record(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    dtag: &str,
    est: &EstimatorSpec,
    seed: u64,
) -> Result<SeedRecord> {
    let context = format!("{} on {dtag}, seed {seed}", est.tag());
    let (ds, split) = regression_instance(prepared, cfg, seed, dtag)?;
    let started = Instant::now();
    let summary = fit_estimator(est, &ds, &split, seed, &context)?;
    let wall_ms = started.elapsed().as_millis() as u64;
    guard_timeout(started, cfg, &context)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("trial_mse".to_string(), summary.trial_mse);
    if let Some(v) = summary.trial_r2 {
        metrics.insert("trial_r2".to_string(), v);
    }
    metrics.insert("epochs_run".to_string(), summary.epochs_run as f64);
    for m in &cfg.metrics {
        let value = match m {
            MetricKind::Mse => summary.validation_mse,
            MetricKind::R2 => summary.validation_r2,
            MetricKind::Pehe => None,
        };
        let value = value.ok_or_else(|| {
            HarnessError::Config(format!(
                "{context}: validation {} unavailable (validation split too small?)",
                m.name()
            ))
        })?;
        metrics.insert(m.name().to_string(), value);
    }
    Ok(SeedRecord {
        estimator: est.tag(),
        dataset: dtag.to_string(),
        seed,
        metrics,
        wall_ms,
    })
}

fn base_spec(est: &EstimatorSpec) -> Result<BaseSpec> {
    if let Some((variant, fit, zero_rel)) = est.nw_parts()? {
        if zero_rel {
            return Err(HarnessError::Unsupported(
                "zero_relations is a regression-mode switch".into(),
            ));
        }
        return Ok(BaseSpec::Nw { variant, fit });
    }
    let (cfg, fit) = est.tabrel_parts()?.expect("estimator is nw or tabrel");
    Ok(BaseSpec::TabRel { cfg, fit })
}

/// PEHE on the trial (in-sample) and validation (out-of-sample) parts of
/// the evaluation rows.
fn effect_record(
    cfg: &ExperimentConfig,
    data: &TreatmentDataset,
    split: &SplitIndex,
    dtag: &str,
    est: &EstimatorSpec,
    learner: LearnerKind,
    seed: u64,
    record_seed: u64,
) -> Result<SeedRecord> {
    let tag = format!("{}+{}", est.tag(), learner.name());
    let context = format!("{tag} on {dtag}, seed {record_seed}");
    let base = base_spec(est)?;
    let truth = data.tau_true().ok_or_else(|| {
        HarnessError::Config(format!("{dtag}: no ground-truth effects for pehe"))
    })?;

    let started = Instant::now();
    let cate = estimate(learner, data, split, &base, mix_seed(seed, SALT_FIT))
        .map_err(core_err(context.clone()))?;
    let wall_ms = started.elapsed().as_millis() as u64;
    guard_timeout(started, cfg, &context)?;

    let n_trial = split.trial().len();
    let side = |rows: &[usize], hats: &[f64]| -> Result<f64> {
        let t: Vec<f64> = rows.iter().map(|&i| truth[i]).collect();
        relkit::meta::pehe(hats, &t).map_err(core_err(context.clone()))
    };
    let mut metrics = BTreeMap::new();
    metrics.insert(
        "pehe_trial".to_string(),
        side(&cate.rows[..n_trial], &cate.tau_hat[..n_trial])?,
    );
    if cate.rows.len() > n_trial {
        metrics.insert(
            "pehe_validation".to_string(),
            side(&cate.rows[n_trial..], &cate.tau_hat[n_trial..])?,
        );
    }
    Ok(SeedRecord {
        estimator: tag,
        dataset: dtag.to_string(),
        seed: record_seed,
        metrics,
        wall_ms,
    })
}

/// The metric names a configured metric expands to in the result table.
fn emitted_metrics(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    for m in &cfg.metrics {
        match m {
            MetricKind::Pehe => {
                out.push("pehe_trial".to_string());
                out.push("pehe_validation".to_string());
            }
            other => out.push(other.name().to_string()),
        }
    }
    out
}

fn aggregate_group(records: &[&SeedRecord], metric: &str) -> Option<(f64, f64, usize, u64)> {
    let values: Vec<f64> = records
        .iter()
        .filter_map(|r| r.metrics.get(metric).copied())
        .collect();
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    let wall: u64 = records.iter().map(|r| r.wall_ms).sum();
    Some((mean, std, n, wall))
}

/// Kolmogorov-Smirnov check of whether related pairs have more similar
/// targets than unrelated pairs, per configured dataset.
#[derive(Clone, Debug, Serialize)]
pub struct RelDiagnostic {
    pub dataset: String,
    pub statistic: f64,
    pub p_value: f64,
    pub n_related: usize,
    pub n_unrelated: usize,
}

pub fn relation_diagnostics(cfg: &ExperimentConfig) -> Result<Vec<RelDiagnostic>> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let mut warnings = Vec::new();
    let mut out = Vec::new();
    for dspec in &cfg.datasets {
        let dtag = dspec.tag();
        let (y, r) = match prepare(dspec, &mut warnings)? {
            Prepared::Synthetic { template } => {
                let mut spec = template;
                spec.seed = mix_seed(seed, SALT_DATA);
                let sd = generate(&spec).map_err(core_err(format!("generating {dtag}")))?;
                (sd.data.y().to_vec(), sd.data.r().clone())
            }
            Prepared::Table { y, r, .. } => (y, r),
            _ => {
                return Err(HarnessError::Unsupported(format!(
                    "relation diagnostics need a regression dataset, got '{dtag}'"
                )))
            }
        };
        let ks = relkit::dataio::ks_informativeness(&y, &r)
            .map_err(core_err(format!("relation check on {dtag}")))?;
        out.push(RelDiagnostic {
            dataset: dtag,
            statistic: ks.statistic,
            p_value: ks.p_value,
            n_related: ks.n_related,
            n_unrelated: ks.n_unrelated,
        });
    }
    Ok(out)
}

/// Run the full cross product and aggregate. Deterministic given the
/// config; does not write any files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let learners = cfg.parsed_learners()?;
    let mut out = RunOutput::default();

    // estimator tags in emission order (learner-expanded in effect mode)
    let mut estimator_tags: Vec<String> = Vec::new();
    for est in &cfg.estimators {
        if learners.is_empty() {
            estimator_tags.push(est.tag());
        } else {
            for l in &learners {
                estimator_tags.push(format!("{}+{}", est.tag(), l.name()));
            }
        }
    }

    for dspec in &cfg.datasets {
        let dtag = dspec.tag();
        let prepared = prepare(dspec, &mut out.warnings)?;
        for est in &cfg.estimators {
            if learners.is_empty() {
                for &seed in &cfg.seeds {
                    out.seed_records
                        .push(regression_record(cfg, &prepared, &dtag, est, seed)?);
                }
                continue;
            }
            for &learner in &learners {
                match &prepared {
                    Prepared::EffectSynthetic { n, effect } => {
                        for &seed in &cfg.seeds {
                            let data = relkit::meta::synth_additive(
                                *n,
                                *effect,
                                mix_seed(seed, SALT_DATA),
                            )
                            .map_err(core_err(format!("generating {dtag}")))?;
                            let split =
                                split_dataset(*n, fractions(cfg), mix_seed(seed, SALT_SPLIT))
                                    .map_err(core_err(format!("splitting {dtag}")))?;
                            out.seed_records.push(effect_record(
                                cfg, &data, &split, &dtag, est, learner, seed, seed,
                            )?);
                        }
                    }
                    Prepared::Ihdp { realizations } => {
                        // one experiment per realization file; the first
                        // configured seed anchors the derived streams
                        for (k, data) in realizations.iter().enumerate() {
                            let seed = mix_seed(cfg.seeds[0], k as u64);
                            let split = split_dataset(
                                data.n(),
                                fractions(cfg),
                                mix_seed(seed, SALT_SPLIT),
                            )
                            .map_err(core_err(format!("splitting {dtag}")))?;
                            out.seed_records.push(effect_record(
                                cfg, data, &split, &dtag, est, learner, seed, k as u64,
                            )?);
                        }
                    }
                    _ => {
                        return Err(HarnessError::Config(format!(
                            "dataset '{dtag}' is not a treatment-effect dataset"
                        )))
                    }
                }
            }
        }
    }

    // aggregate in declared order: dataset, then estimator, then metric
    for dspec in &cfg.datasets {
        let dtag = dspec.tag();
        for etag in &estimator_tags {
            let group: Vec<&SeedRecord> = out
                .seed_records
                .iter()
                .filter(|r| r.dataset == dtag && &r.estimator == etag)
                .collect();
            if group.is_empty() {
                continue;
            }
            for metric in emitted_metrics(cfg) {
                if let Some((mean, std, n, wall)) = aggregate_group(&group, &metric) {
                    out.rows.push(ResultRow {
                        estimator: etag.clone(),
                        dataset: dtag.clone(),
                        metric,
                        mean,
                        std,
                        seeds: n,
                        wall_ms_total: wall,
                    });
                }
            }
        }
    }
    Ok(out)
}
