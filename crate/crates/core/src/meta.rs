//! S-, T-, and X-learner treatment-effect estimation over the regressors in
//! this crate, plus the squared-error CATE metric.
//!
//! Every learner follows one protocol: models are fit with background and
//! trial rows drawn from a split of the observational dataset, and effects
//! are estimated at the held-out trial and validation rows. Relation
//! handling is uniform too: a fitted model keeps the full-dataset row ids
//! of its background, so any query row's relation columns can be looked up
//! against exactly the support the model was trained on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{gen_rel_matrix, RelMode};
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::nw::{nw_fit, nw_predict_masked, NwFitConfig, NwVariant, RelDataset, SplitIndex};
use crate::stats::mix_seed;
use crate::tabrel::{predict_with_background, tabrel_fit, TabRelConfig, TabRelFitConfig};

/// Observational data with a binary treatment, outcomes, pairwise
/// relations, and optionally the ground-truth effect per row.
#[derive(Clone, Debug)]
pub struct TreatmentDataset {
    x: Matrix,
    w: Vec<u8>,
    y: Vec<f64>,
    r: Matrix,
    tau_true: Option<Vec<f64>>,
}

impl TreatmentDataset {
    pub fn new(
        x: Matrix,
        w: Vec<u8>,
        y: Vec<f64>,
        r: Matrix,
        tau_true: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = x.rows();
        if w.len() != n {
            return Err(Error::Length {
                context: "treatment indicator".into(),
                got: w.len(),
                expected: n,
            });
        }
        if let Some(t) = &tau_true {
            if t.len() != n {
                return Err(Error::Length {
                    context: "true effects".into(),
                    got: t.len(),
                    expected: n,
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "true effects".into(),
                });
            }
        }
        if w.iter().any(|&v| v > 1) {
            return Err(Error::Config("treatment indicator must be 0 or 1".into()));
        }
        let treated = w.iter().filter(|&&v| v == 1).count();
        if treated == 0 || treated == n {
            return Err(Error::Config(
                "both treatment groups must be nonempty".into(),
            ));
        }
        // reuse the dataset validation for x/y/r finiteness and symmetry
        let checked = RelDataset::new(x, y, r)?;
        let (x, y, r) = checked.into_parts();
        Ok(TreatmentDataset {
            x,
            w,
            y,
            r,
            tau_true,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn w(&self) -> &[u8] {
        &self.w
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn tau_true(&self) -> Option<&[f64]> {
        self.tau_true.as_deref()
    }

    pub fn treated_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.w[i] == 1).collect()
    }

    pub fn control_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.w[i] == 0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LearnerKind {
    S,
    T,
    X,
}

impl LearnerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::S => "s_learner",
            LearnerKind::T => "t_learner",
            LearnerKind::X => "x_learner",
        }
    }

    pub fn parse(s: &str) -> Result<LearnerKind> {
        Ok(match s {
            "s" | "s_learner" => LearnerKind::S,
            "t" | "t_learner" => LearnerKind::T,
            "x" | "x_learner" => LearnerKind::X,
            other => return Err(Error::Config(format!("unknown learner '{other}'"))),
        })
    }
}

/// Base regressor choice shared by all learner stages.
#[derive(Clone, Debug)]
pub enum BaseSpec {
    Nw {
        variant: NwVariant,
        fit: NwFitConfig,
    },
    TabRel {
        cfg: TabRelConfig,
        fit: TabRelFitConfig,
    },
}

impl BaseSpec {
    pub fn tag(&self) -> String {
        match self {
            BaseSpec::Nw { variant, .. } => variant.name().to_string(),
            BaseSpec::TabRel { .. } => "tabrel".to_string(),
        }
    }
}

/// Estimated effects at the evaluation rows of a split.
#[derive(Clone, Debug)]
pub struct CateEstimate {
    pub tau_hat: Vec<f64>,
    /// Full-dataset row ids, trial rows first then validation rows.
    pub rows: Vec<usize>,
    pub learner: LearnerKind,
    pub base_tag: String,
}

impl CateEstimate {
    fn new(
        tau_hat: Vec<f64>,
        rows: Vec<usize>,
        learner: LearnerKind,
        base_tag: String,
    ) -> Result<Self> {
        if tau_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "estimated effects".into(),
            });
        }
        Ok(CateEstimate {
            tau_hat,
            rows,
            learner,
            base_tag,
        })
    }

    /// Effects at the subset of `self.rows` contained in `rows`.
    pub fn subset(&self, rows: &[usize]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.tau_hat)
            .filter(|(r, _)| rows.contains(r))
            .map(|(_, &t)| t)
            .collect()
    }
}

/// Mean squared difference between estimated and true effects (no square
/// root).
pub fn pehe(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    crate::metrics::mse(tau_true, tau_hat)
}

/// Principal submatrix of a relation matrix.
pub fn restrict_relations(r: &Matrix, rows: &[usize]) -> Result<Matrix> {
    for &i in rows {
        if i >= r.rows() {
            return Err(Error::Config(format!(
                "relation row {i} out of range for {}x{} matrix",
                r.rows(),
                r.cols()
            )));
        }
    }
    Ok(r.select(rows, rows))
}

/// Drop a categorical column from the feature matrix and turn it into a
/// same-category relation matrix with a zero diagonal.
pub fn build_ihdp_rel(
    x: &Matrix,
    w: Vec<u8>,
    y: Vec<f64>,
    tau_true: Option<Vec<f64>>,
    category_col: usize,
) -> Result<TreatmentDataset> {
    if category_col >= x.cols() {
        return Err(Error::Config(format!(
            "categorical column {category_col} out of range for {} columns",
            x.cols()
        )));
    }
    let cats: Vec<f64> = x.col(category_col);
    let kept: Vec<usize> = (0..x.cols()).filter(|&c| c != category_col).collect();
    let features = x.select((0..x.rows()).collect::<Vec<_>>().as_slice(), &kept);
    let r = Matrix::from_fn(x.rows(), x.rows(), |i, j| {
        if i != j && cats[i] == cats[j] {
            1.0
        } else {
            0.0
        }
    });
    TreatmentDataset::new(features, w, y, r, tau_true)
}

/// Constant-effect benchmark: shifted parabola clusters, a fair-coin
/// treatment, and Y(1) = Y(0) + effect.
pub fn synth_additive(n: usize, effect: f64, seed: u64) -> Result<TreatmentDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, 1);
    let mut clusters = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let xi: f64 = rng.gen_range(-1.0..1.0);
        let c = rng.gen_range(0..3usize);
        let wi = u8::from(rng.gen_bool(0.5));
        x.set(i, 0, xi);
        y.push(xi * xi + 0.5 * c as f64 + effect * wi as f64);
        clusters.push(c);
        w.push(wi);
    }
    let r = gen_rel_matrix(&clusters, RelMode::Deterministic, mix_seed(seed, 0x52));
    TreatmentDataset::new(x, w, y, r, Some(vec![effect; n]))
}

// The learner cores are written against this pair of traits so the meta
// logic can be exercised with exactly solvable stand-in regressors.
pub(crate) trait Fitted {
    /// Predict at query feature rows; `query_rows` are full-dataset ids
    /// used to look up relation columns.
    fn predict(&self, query_x: &Matrix, query_rows: &[usize]) -> Result<Vec<f64>>;
}

pub(crate) trait Base {
    /// Fit on the given background and trial rows of (x, y, r). Entries of
    /// `y` outside those rows are not meaningful.
    fn fit(
        &self,
        x: &Matrix,
        y: &[f64],
        r: &Matrix,
        bg: &[usize],
        trial: &[usize],
        seed: u64,
    ) -> Result<Box<dyn Fitted>>;
}

struct FittedNw {
    model: crate::nw::NwModel,
    bg_view: RelDataset,
    bg_rows: Vec<usize>,
    r_full: Matrix,
    uses_relations: bool,
}

impl Fitted for FittedNw {
    fn predict(&self, query_x: &Matrix, query_rows: &[usize]) -> Result<Vec<f64>> {
        let rq = self
            .uses_relations
            .then(|| self.r_full.select(query_rows, &self.bg_rows));
        let mut excluded = Vec::new();
        for (qi, &qr) in query_rows.iter().enumerate() {
            for (bi, &br) in self.bg_rows.iter().enumerate() {
                if qr == br {
                    excluded.push((qi, bi));
                }
            }
        }
        nw_predict_masked(&self.model, &self.bg_view, query_x, rq.as_ref(), &excluded)
    }
}

struct NwBase<'a> {
    variant: NwVariant,
    fit: &'a NwFitConfig,
}

impl Base for NwBase<'_> {
    fn fit(
        &self,
        x: &Matrix,
        y: &[f64],
        r: &Matrix,
        bg: &[usize],
        trial: &[usize],
        seed: u64,
    ) -> Result<Box<dyn Fitted>> {
        let rows: Vec<usize> = bg.iter().chain(trial).copied().collect();
        let sub_x = x.select_rows(&rows);
        let sub_y: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let sub_r = restrict_relations(r, &rows)?;
        let ds = RelDataset::new(sub_x, sub_y, sub_r)?;
        let split = SplitIndex::new(
            (0..bg.len()).collect(),
            (bg.len()..rows.len()).collect(),
            vec![],
            rows.len(),
        )?;
        let mut cfg = self.fit.clone();
        cfg.seed = seed;
        let report = nw_fit(&ds, &split, self.variant, &cfg)?;
        let bg_view = ds.restrict(&(0..bg.len()).collect::<Vec<_>>())?;
        Ok(Box::new(FittedNw {
            model: report.model,
            bg_view,
            bg_rows: bg.to_vec(),
            r_full: r.clone(),
            uses_relations: self.variant.uses_relations(),
        }))
    }
}

struct FittedTabRel {
    model: crate::tabrel::TabRelModel,
    bg_x: Matrix,
    bg_y: Vec<f64>,
    bg_rows: Vec<usize>,
    r_full: Matrix,
}

impl Fitted for FittedTabRel {
    fn predict(&self, query_x: &Matrix, query_rows: &[usize]) -> Result<Vec<f64>> {
        let batch_rows: Vec<usize> = self
            .bg_rows
            .iter()
            .chain(query_rows)
            .copied()
            .collect();
        let r = self.r_full.select(&batch_rows, &batch_rows);
        predict_with_background(&self.model, &self.bg_x, &self.bg_y, query_x, &r)
    }
}

struct TabRelBase<'a> {
    cfg: &'a TabRelConfig,
    fit: &'a TabRelFitConfig,
}

impl Base for TabRelBase<'_> {
    fn fit(
        &self,
        x: &Matrix,
        y: &[f64],
        r: &Matrix,
        bg: &[usize],
        trial: &[usize],
        seed: u64,
    ) -> Result<Box<dyn Fitted>> {
        let rows: Vec<usize> = bg.iter().chain(trial).copied().collect();
        let sub_x = x.select_rows(&rows);
        let sub_y: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let sub_r = restrict_relations(r, &rows)?;
        let ds = RelDataset::new(sub_x, sub_y, sub_r)?;
        let split = SplitIndex::new(
            (0..bg.len()).collect(),
            (bg.len()..rows.len()).collect(),
            vec![],
            rows.len(),
        )?;
        let mut fit_cfg = self.fit.clone();
        fit_cfg.seed = seed;
        let report = tabrel_fit(&ds, &split, self.cfg, &fit_cfg)?;
        Ok(Box::new(FittedTabRel {
            model: report.model,
            bg_x: x.select_rows(bg),
            bg_y: bg.iter().map(|&i| y[i]).collect(),
            bg_rows: bg.to_vec(),
            r_full: r.clone(),
        }))
    }
}

fn spec_base<'a>(spec: &'a BaseSpec) -> Box<dyn Base + 'a> {
    match spec {
        BaseSpec::Nw { variant, fit } => Box::new(NwBase {
            variant: *variant,
            fit,
        }),
        BaseSpec::TabRel { cfg, fit } => Box::new(TabRelBase { cfg, fit }),
    }
}

fn eval_rows(split: &SplitIndex) -> Vec<usize> {
    split
        .trial()
        .iter()
        .chain(split.validation())
        .copied()
        .collect()
}

fn intersect(part: &[usize], keep: &[bool]) -> Vec<usize> {
    part.iter().copied().filter(|&i| keep[i]).collect()
}

fn group_flags(data: &TreatmentDataset, group: u8) -> Vec<bool> {
    data.w.iter().map(|&w| w == group).collect()
}

fn group_split(
    data: &TreatmentDataset,
    split: &SplitIndex,
    group: u8,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let flags = group_flags(data, group);
    let bg = intersect(split.background(), &flags);
    let trial = intersect(split.trial(), &flags);
    if bg.is_empty() || trial.is_empty() {
        return Err(Error::SubgroupTooSmall(format!(
            "treatment group {group} has {} background and {} trial rows",
            bg.len(),
            trial.len()
        )));
    }
    Ok((bg, trial))
}

fn check_split(data: &TreatmentDataset, split: &SplitIndex) -> Result<()> {
    let all = split
        .background()
        .iter()
        .chain(split.trial())
        .chain(split.validation());
    for &i in all {
        if i >= data.n() {
            return Err(Error::Config(format!(
                "split index {i} out of range for dataset of {}",
                data.n()
            )));
        }
    }
    if split.trial().is_empty() {
        return Err(Error::Config("effect estimation needs trial rows".into()));
    }
    Ok(())
}

fn with_treatment_column(data: &TreatmentDataset) -> Matrix {
    Matrix::from_fn(data.n(), data.dim() + 1, |i, j| {
        if j < data.dim() {
            data.x.at(i, j)
        } else {
            data.w[i] as f64
        }
    })
}

fn s_core(
    base: &dyn Base,
    data: &TreatmentDataset,
    split: &SplitIndex,
    seed: u64,
) -> Result<Vec<f64>> {
    check_split(data, split)?;
    let xw = with_treatment_column(data);
    let fitted = base.fit(
        &xw,
        &data.y,
        &data.r,
        split.background(),
        split.trial(),
        mix_seed(seed, 1),
    )?;
    let rows = eval_rows(split);
    let arm = |w: f64| -> Matrix {
        Matrix::from_fn(rows.len(), data.dim() + 1, |qi, j| {
            if j < data.dim() {
                data.x.at(rows[qi], j)
            } else {
                w
            }
        })
    };
    let treated = fitted.predict(&arm(1.0), &rows)?;
    let control = fitted.predict(&arm(0.0), &rows)?;
    Ok(treated
        .iter()
        .zip(&control)
        .map(|(t, c)| t - c)
        .collect())
}

fn t_stage_fits(
    base: &dyn Base,
    data: &TreatmentDataset,
    split: &SplitIndex,
    seed: u64,
) -> Result<(Box<dyn Fitted>, Box<dyn Fitted>)> {
    let (bg0, trial0) = group_split(data, split, 0)?;
    let (bg1, trial1) = group_split(data, split, 1)?;
    let m0 = base.fit(&data.x, &data.y, &data.r, &bg0, &trial0, mix_seed(seed, 2))?;
    let m1 = base.fit(&data.x, &data.y, &data.r, &bg1, &trial1, mix_seed(seed, 3))?;
    Ok((m0, m1))
}

fn t_core(
    base: &dyn Base,
    data: &TreatmentDataset,
    split: &SplitIndex,
    seed: u64,
) -> Result<Vec<f64>> {
    check_split(data, split)?;
    let (m0, m1) = t_stage_fits(base, data, split, seed)?;
    let rows = eval_rows(split);
    let queries = data.x.select_rows(&rows);
    let mu1 = m1.predict(&queries, &rows)?;
    let mu0 = m0.predict(&queries, &rows)?;
    Ok(mu1.iter().zip(&mu0).map(|(a, b)| a - b).collect())
}

fn x_core(
    base: &dyn Base,
    data: &TreatmentDataset,
    split: &SplitIndex,
    seed: u64,
) -> Result<Vec<f64>> {
    check_split(data, split)?;
    let (m0, m1) = t_stage_fits(base, data, split, seed)?;

    // impute per-row effects on the fitting rows of each group
    let (bg1, trial1) = group_split(data, split, 1)?;
    let treated_fit: Vec<usize> = bg1.iter().chain(&trial1).copied().collect();
    let mu0_at_treated = m0.predict(&data.x.select_rows(&treated_fit), &treated_fit)?;
    let mut d1 = vec![0.0; data.n()];
    for (k, &i) in treated_fit.iter().enumerate() {
        d1[i] = data.y[i] - mu0_at_treated[k];
    }

    let (bg0, trial0) = group_split(data, split, 0)?;
    let control_fit: Vec<usize> = bg0.iter().chain(&trial0).copied().collect();
    let mu1_at_control = m1.predict(&data.x.select_rows(&control_fit), &control_fit)?;
    let mut d0 = vec![0.0; data.n()];
    for (k, &i) in control_fit.iter().enumerate() {
        d0[i] = mu1_at_control[k] - data.y[i];
    }

    let tau1 = base.fit(&data.x, &d1, &data.r, &bg1, &trial1, mix_seed(seed, 4))?;
    let tau0 = base.fit(&data.x, &d0, &data.r, &bg0, &trial0, mix_seed(seed, 5))?;

    let rows = eval_rows(split);
    let queries = data.x.select_rows(&rows);
    let t1 = tau1.predict(&queries, &rows)?;
    let t0 = tau0.predict(&queries, &rows)?;
    // fixed equal-weight blend of the two effect models
    Ok(t1.iter().zip(&t0).map(|(a, b)| 0.5 * (a + b)).collect())
}

fn run_core(
    kind: LearnerKind,
    base: &dyn Base,
    data: &TreatmentDataset,
    split: &SplitIndex,
    seed: u64,
) -> Result<Vec<f64>> {
    match kind {
        LearnerKind::S => s_core(base, data, split, seed),
        LearnerKind::T => t_core(base, data, split, seed),
        LearnerKind::X => x_core(base, data, split, seed),
    }
}

/// Run one meta-learner with the given base regressor; effects are
/// estimated at the split's trial and validation rows.
pub fn estimate(
    kind: LearnerKind,
    data: &TreatmentDataset,
    split: &SplitIndex,
    base: &BaseSpec,
    seed: u64,
) -> Result<CateEstimate> {
    let b = spec_base(base);
    let tau = run_core(kind, b.as_ref(), data, split, seed)?;
    CateEstimate::new(tau, eval_rows(split), kind, base.tag())
}

pub fn s_learner(
    data: &TreatmentDataset,
    split: &SplitIndex,
    base: &BaseSpec,
    seed: u64,
) -> Result<CateEstimate> {
    estimate(LearnerKind::S, data, split, base, seed)
}

pub fn t_learner(
    data: &TreatmentDataset,
    split: &SplitIndex,
    base: &BaseSpec,
    seed: u64,
) -> Result<CateEstimate> {
    estimate(LearnerKind::T, data, split, base, seed)
}

pub fn x_learner(
    data: &TreatmentDataset,
    split: &SplitIndex,
    base: &BaseSpec,
    seed: u64,
) -> Result<CateEstimate> {
    estimate(LearnerKind::X, data, split, base, seed)
}
