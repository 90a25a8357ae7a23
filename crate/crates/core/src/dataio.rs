//! Ingestion of delimited tables, construction of relation matrices from
//! external sources (border pair lists, taxonomy columns, category
//! columns), table preprocessing, and a diagnostic that tests whether a
//! relation matrix actually carries signal about the target.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::meta::{build_ihdp_rel, TreatmentDataset};
use crate::nw::SplitIndex;
use crate::stats::Scaler;

/// Description of one delimited text table: where it lives and which
/// columns to pull.
#[derive(Clone, Debug)]
pub struct TableSource {
    pub path: PathBuf,
    pub delimiter: u8,
    /// Column holding the entity id each row belongs to.
    pub key_col: String,
    pub feature_cols: Vec<String>,
    pub target_col: String,
    /// Keep only rows whose value in the named column equals the given
    /// year.
    pub year_filter: Option<(String, i64)>,
}

impl TableSource {
    pub fn new(
        path: impl Into<PathBuf>,
        key_col: &str,
        feature_cols: &[&str],
        target_col: &str,
    ) -> TableSource {
        TableSource {
            path: path.into(),
            delimiter: b',',
            key_col: key_col.to_string(),
            feature_cols: feature_cols.iter().map(|s| s.to_string()).collect(),
            target_col: target_col.to_string(),
            year_filter: None,
        }
    }
}

/// Numeric table with one string key per row.
#[derive(Clone, Debug)]
pub struct KeyedTable {
    pub keys: Vec<String>,
    pub x: Matrix,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    /// Data rows that passed the year filter (kept + dropped).
    pub rows_scanned: usize,
    /// Rows discarded because a selected value was missing.
    pub rows_dropped: usize,
}

impl KeyedTable {
    pub fn n(&self) -> usize {
        self.keys.len()
    }
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || matches!(t, "NA" | "N/A" | "na" | "NaN" | "nan" | "null" | "?")
}

fn parse_cell(cell: &str, line: usize, col: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| {
        Error::Table(format!("unparsable value '{cell}' at line {line}, column '{col}'"))
    })
}

/// Read a delimited table, keeping the key, feature, and target columns.
/// Rows with missing selected values are dropped and counted; malformed
/// non-missing cells fail loudly with their coordinates.
pub fn load_table(source: &TableSource) -> Result<KeyedTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(source.delimiter)
        .flexible(false)
        .from_path(&source.path)?;

    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::Table(format!(
            "{}: empty table (no header)",
            source.path.display()
        )));
    }
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                Error::Table(format!(
                    "{}: column '{name}' not found in header",
                    source.path.display()
                ))
            })
    };
    let key_idx = col_index(&source.key_col)?;
    let target_idx = col_index(&source.target_col)?;
    let feature_idx: Vec<usize> = source
        .feature_cols
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;
    let year_idx = source
        .year_filter
        .as_ref()
        .map(|(col, _)| col_index(col))
        .transpose()?;

    let mut keys = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    let mut rows_scanned = 0usize;
    let mut rows_dropped = 0usize;

    for (rec_no, record) in reader.records().enumerate() {
        let record = record?;
        let line = rec_no + 2; // header occupies line 1

        if let (Some(yi), Some((col, want))) = (year_idx, &source.year_filter) {
            let cell = record.get(yi).unwrap_or("");
            if is_missing(cell) {
                continue;
            }
            if parse_cell(cell, line, col)? != *want as f64 {
                continue;
            }
        }
        rows_scanned += 1;

        let mut selected = Vec::with_capacity(feature_idx.len() + 2);
        selected.push((key_idx, &source.key_col));
        selected.push((target_idx, &source.target_col));
        for (k, &idx) in feature_idx.iter().enumerate() {
            selected.push((idx, &source.feature_cols[k]));
        }
        if selected
            .iter()
            .any(|&(idx, _)| is_missing(record.get(idx).unwrap_or("")))
        {
            rows_dropped += 1;
            continue;
        }

        keys.push(record.get(key_idx).unwrap_or("").trim().to_string());
        y.push(parse_cell(
            record.get(target_idx).unwrap_or(""),
            line,
            &source.target_col,
        )?);
        let mut feat = Vec::with_capacity(feature_idx.len());
        for (k, &idx) in feature_idx.iter().enumerate() {
            feat.push(parse_cell(
                record.get(idx).unwrap_or(""),
                line,
                &source.feature_cols[k],
            )?);
        }
        rows.push(feat);
    }

    if keys.is_empty() {
        return Err(Error::Table(format!(
            "{}: no usable data rows",
            source.path.display()
        )));
    }
    let x = Matrix::from_rows(&rows)?;
    Ok(KeyedTable {
        keys,
        x,
        y,
        feature_names: source.feature_cols.clone(),
        rows_scanned,
        rows_dropped,
    })
}

/// A relation matrix together with whatever failed to resolve while
/// building it.
#[derive(Clone, Debug)]
pub struct RelationBuild {
    pub r: Matrix,
    /// Keys (or pair endpoints) that had no counterpart in the table.
    pub unresolved: Vec<String>,
}

/// Read a pair-per-line file: two keys separated by '|'. Blank lines and
/// lines starting with '#' are skipped.
pub fn load_pair_list(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(2, '|');
        let a = parts.next().unwrap_or("").trim();
        let b = parts.next().unwrap_or("").trim();
        if a.is_empty() || b.is_empty() {
            return Err(Error::Table(format!(
                "{}: line {} is not 'A|B'",
                path.display(),
                no + 1
            )));
        }
        pairs.push((a.to_string(), b.to_string()));
    }
    Ok(pairs)
}

fn key_positions(keys: &[String]) -> BTreeMap<&str, Vec<usize>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        map.entry(k.as_str()).or_default().push(i);
    }
    map
}

/// Adjacency relations: r_ij = 1 when the keys of rows i and j appear as
/// a pair. Symmetric, zero diagonal; pairs naming unknown keys are
/// skipped and reported.
pub fn build_pair_relations(keys: &[String], pairs: &[(String, String)]) -> RelationBuild {
    let index = key_positions(keys);
    let n = keys.len();
    let mut r = Matrix::zeros(n, n);
    let mut unresolved = Vec::new();
    for (a, b) in pairs {
        match (index.get(a.as_str()), index.get(b.as_str())) {
            (Some(ia), Some(ib)) => {
                for &i in ia {
                    for &j in ib {
                        if i != j {
                            r.set(i, j, 1.0);
                            r.set(j, i, 1.0);
                        }
                    }
                }
            }
            (left, right) => {
                if left.is_none() {
                    unresolved.push(a.clone());
                }
                if right.is_none() {
                    unresolved.push(b.clone());
                }
            }
        }
    }
    RelationBuild { r, unresolved }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaxonomyLevel {
    Order,
    Family,
    Genus,
}

impl TaxonomyLevel {
    pub fn name(&self) -> &'static str {
        match self {
            TaxonomyLevel::Order => "order",
            TaxonomyLevel::Family => "family",
            TaxonomyLevel::Genus => "genus",
        }
    }

    pub fn parse(s: &str) -> Result<TaxonomyLevel> {
        Ok(match s {
            "order" => TaxonomyLevel::Order,
            "family" => TaxonomyLevel::Family,
            "genus" => TaxonomyLevel::Genus,
            other => return Err(Error::Config(format!("unknown taxonomy level '{other}'"))),
        })
    }
}

/// Order/family/genus assignment per entity key.
#[derive(Clone, Debug, Default)]
pub struct TaxonomyTable {
    map: BTreeMap<String, [String; 3]>,
}

impl TaxonomyTable {
    pub fn insert(&mut self, key: &str, order: &str, family: &str, genus: &str) {
        self.map.insert(
            key.to_string(),
            [order.to_string(), family.to_string(), genus.to_string()],
        );
    }

    pub fn taxon(&self, key: &str, level: TaxonomyLevel) -> Option<&str> {
        self.map.get(key).map(|t| {
            t[match level {
                TaxonomyLevel::Order => 0,
                TaxonomyLevel::Family => 1,
                TaxonomyLevel::Genus => 2,
            }]
            .as_str()
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Load a taxonomy table keyed on `key_col` with columns for order,
/// family, and genus. Later duplicates of a key overwrite earlier ones.
pub fn load_taxonomy(
    path: &Path,
    delimiter: u8,
    key_col: &str,
    level_cols: [&str; 3],
) -> Result<TaxonomyTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Table(format!("{}: column '{name}' not found", path.display())))
    };
    let ki = find(key_col)?;
    let oi = find(level_cols[0])?;
    let fi = find(level_cols[1])?;
    let gi = find(level_cols[2])?;
    let mut table = TaxonomyTable::default();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or("").trim();
        if is_missing(get(ki)) {
            continue;
        }
        table.insert(get(ki), get(oi), get(fi), get(gi));
    }
    Ok(table)
}

/// Same-taxon relations at the chosen level: r_ij = 1 when rows i and j
/// share the taxon, zero diagonal. Keys absent from the taxonomy get
/// all-zero rows and are reported.
pub fn build_taxonomy_relations(
    keys: &[String],
    taxonomy: &TaxonomyTable,
    level: TaxonomyLevel,
) -> RelationBuild {
    let n = keys.len();
    let taxa: Vec<Option<&str>> = keys.iter().map(|k| taxonomy.taxon(k, level)).collect();
    let mut unresolved: Vec<String> = Vec::new();
    for (k, t) in keys.iter().zip(&taxa) {
        if t.is_none() && !unresolved.contains(k) {
            unresolved.push(k.clone());
        }
    }
    let r = Matrix::from_fn(n, n, |i, j| match (taxa[i], taxa[j]) {
        (Some(a), Some(b)) if i != j && a == b => 1.0,
        _ => 0.0,
    });
    RelationBuild { r, unresolved }
}

/// Two-sample Kolmogorov-Smirnov comparison of |y_i - y_j| over related
/// versus unrelated pairs.
#[derive(Clone, Copy, Debug)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
    pub n_related: usize,
    pub n_unrelated: usize,
}

fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    // both inputs sorted ascending
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let diff = (i as f64 / n1 - j as f64 / n2).abs();
        if diff > d {
            d = diff;
        }
    }
    d
}

fn ks_p_value(d: f64, n1: usize, n2: usize) -> f64 {
    let ne = (n1 as f64 * n2 as f64) / (n1 + n2) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100u32 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Test whether the relation matrix is informative about the target:
/// compare the distribution of absolute target differences across related
/// pairs against unrelated pairs (upper triangle only). Small p-values
/// mean related pairs look different from unrelated ones.
pub fn ks_informativeness(y: &[f64], r: &Matrix) -> Result<KsTest> {
    let n = y.len();
    if r.shape() != (n, n) {
        return Err(Error::Shape {
            op: "ks_informativeness",
            left_rows: n,
            left_cols: 1,
            right_rows: r.rows(),
            right_cols: r.cols(),
        });
    }
    let mut related = Vec::new();
    let mut unrelated = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (y[i] - y[j]).abs();
            if r.at(i, j) > 0.0 {
                related.push(d);
            } else {
                unrelated.push(d);
            }
        }
    }
    if related.is_empty() || unrelated.is_empty() {
        return Err(Error::Degenerate(format!(
            "need both pair populations: {} related, {} unrelated",
            related.len(),
            unrelated.len()
        )));
    }
    related.sort_by(|a, b| a.total_cmp(b));
    unrelated.sort_by(|a, b| a.total_cmp(b));
    let statistic = ks_statistic(&related, &unrelated);
    let p_value = ks_p_value(statistic, related.len(), unrelated.len());
    Ok(KsTest {
        statistic,
        p_value,
        n_related: related.len(),
        n_unrelated: unrelated.len(),
    })
}

/// Column transformations applied in declared order. Standardization
/// statistics come from the background rows only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrepOp {
    Standardize,
    Log,
}

impl PrepOp {
    pub fn parse(s: &str) -> Result<PrepOp> {
        Ok(match s {
            "standardize" => PrepOp::Standardize,
            "log" => PrepOp::Log,
            other => return Err(Error::Config(format!("unknown preprocess op '{other}'"))),
        })
    }
}

#[derive(Clone, Debug)]
enum PrepStep {
    Standardize(Scaler),
    Log,
}

/// A fitted preprocessing pipeline, reusable on any matrix of the same
/// width.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    steps: Vec<PrepStep>,
}

fn apply_log(m: &Matrix) -> Result<Matrix> {
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if m.at(i, j) <= 0.0 {
                return Err(Error::Preprocess(format!(
                    "log of non-positive value {} at row {i}, column {j}",
                    m.at(i, j)
                )));
            }
        }
    }
    Ok(m.map(f64::ln))
}

/// Fit the op sequence: log steps are parameter-free, standardize steps
/// capture mean and spread of the (transformed-so-far) background rows.
pub fn fit_preprocessor(x: &Matrix, background: &[usize], ops: &[PrepOp]) -> Result<Preprocessor> {
    let mut work = x.clone();
    let mut steps = Vec::with_capacity(ops.len());
    for op in ops {
        match op {
            PrepOp::Log => {
                work = apply_log(&work)?;
                steps.push(PrepStep::Log);
            }
            PrepOp::Standardize => {
                let scaler = Scaler::fit(&work, background)?;
                work = scaler.transform(&work)?;
                steps.push(PrepStep::Standardize(scaler));
            }
        }
    }
    Ok(Preprocessor { steps })
}

impl Preprocessor {
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut work = x.clone();
        for step in &self.steps {
            work = match step {
                PrepStep::Log => apply_log(&work)?,
                PrepStep::Standardize(s) => s.transform(&work)?,
            };
        }
        Ok(work)
    }
}

/// One outcome realization of the infant-development benchmark, read
/// from its headerless columnar layout: treatment, factual outcome,
/// counterfactual outcome, both noiseless means, then 25 covariates.
#[derive(Clone, Debug)]
pub struct IhdpRealization {
    pub x: Matrix,
    pub w: Vec<u8>,
    pub y_factual: Vec<f64>,
    pub y_cfactual: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
}

pub const IHDP_COVARIATES: usize = 25;
/// Position of the categorical covariate that becomes the relation
/// matrix (the fourth covariate).
pub const IHDP_CATEGORY_COL: usize = 3;

impl IhdpRealization {
    pub fn n(&self) -> usize {
        self.w.len()
    }

    /// Noiseless per-row effect.
    pub fn tau_true(&self) -> Vec<f64> {
        self.mu1.iter().zip(&self.mu0).map(|(a, b)| a - b).collect()
    }
}

pub fn load_ihdp(path: &Path) -> Result<IhdpRealization> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut w = Vec::new();
    let mut y_factual = Vec::new();
    let mut y_cfactual = Vec::new();
    let mut mu0 = Vec::new();
    let mut mu1 = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (rec_no, record) in reader.records().enumerate() {
        let record = record?;
        let line = rec_no + 1;
        if record.len() != 5 + IHDP_COVARIATES {
            return Err(Error::Table(format!(
                "{}: line {line} has {} columns, expected {}",
                path.display(),
                record.len(),
                5 + IHDP_COVARIATES
            )));
        }
        let cell = |i: usize| parse_cell(record.get(i).unwrap_or(""), line, "ihdp");
        let t = cell(0)?;
        if t != 0.0 && t != 1.0 {
            return Err(Error::Table(format!(
                "{}: line {line} treatment {t} is not 0/1",
                path.display()
            )));
        }
        w.push(t as u8);
        y_factual.push(cell(1)?);
        y_cfactual.push(cell(2)?);
        mu0.push(cell(3)?);
        mu1.push(cell(4)?);
        rows.push((5..5 + IHDP_COVARIATES).map(cell).collect::<Result<_>>()?);
    }
    if w.is_empty() {
        return Err(Error::Table(format!(
            "{}: no usable data rows",
            path.display()
        )));
    }
    Ok(IhdpRealization {
        x: Matrix::from_rows(&rows)?,
        w,
        y_factual,
        y_cfactual,
        mu0,
        mu1,
    })
}

/// Turn a realization into a treatment dataset: the categorical fourth
/// covariate leaves the feature matrix and becomes the relation matrix.
pub fn ihdp_treatment_dataset(real: &IhdpRealization) -> Result<TreatmentDataset> {
    build_ihdp_rel(
        &real.x,
        real.w.clone(),
        real.y_factual.clone(),
        Some(real.tau_true()),
        IHDP_CATEGORY_COL,
    )
}

/// Split rows into background / trial / validation at the entity level:
/// every row of a chosen key lands in the same part. Key order is
/// shuffled deterministically; unchosen keys form the background.
pub fn split_by_keys(
    keys: &[String],
    n_trial_keys: usize,
    n_validation_keys: usize,
    seed: u64,
) -> Result<SplitIndex> {
    let mut unique: Vec<&str> = Vec::new();
    for k in keys {
        if !unique.contains(&k.as_str()) {
            unique.push(k.as_str());
        }
    }
    if n_trial_keys + n_validation_keys >= unique.len() {
        return Err(Error::Config(format!(
            "cannot hold out {} of {} keys and keep a background",
            n_trial_keys + n_validation_keys,
            unique.len()
        )));
    }
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let trial_keys: Vec<&str> = unique[..n_trial_keys].to_vec();
    let val_keys: Vec<&str> = unique[n_trial_keys..n_trial_keys + n_validation_keys].to_vec();
    let mut background = Vec::new();
    let mut trial = Vec::new();
    let mut validation = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        if trial_keys.contains(&k.as_str()) {
            trial.push(i);
        } else if val_keys.contains(&k.as_str()) {
            validation.push(i);
        } else {
            background.push(i);
        }
    }
    SplitIndex::new(background, trial, validation, keys.len())
}
