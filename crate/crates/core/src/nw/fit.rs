//! Gradient fitting of the kernel parameters on a trial split.

use rand::rngs::SmallRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::predict::{nw_predict, rel_feature_penalty};
use super::{MlpParams, NwModel, NwVariant, RelDataset, SplitIndex};
use crate::error::{Error, Result};
use crate::math::{dropout_apply, grad, AdamConfig, Bindings, Matrix, ParamStore, Tape, Value};
use crate::metrics::{mse, r2};
use crate::stats::{mix_seed, Scaler};

#[derive(Clone, Debug)]
pub struct NwFitConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Early stop after this many epochs without a loss improvement.
    pub patience: usize,
    /// Smallest loss decrease that counts as an improvement.
    pub min_delta: f64,
    pub seed: u64,
    /// Standardize features on background statistics before fitting.
    pub standardize: bool,
    pub mlp_hidden: (usize, usize, usize),
    pub mlp_dropout: f64,
}

impl Default for NwFitConfig {
    fn default() -> Self {
        NwFitConfig {
            epochs: 2000,
            lr: 1e-2,
            patience: 50,
            min_delta: 1e-6,
            seed: 0,
            standardize: true,
            mlp_hidden: (32, 32, 16),
            mlp_dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NwFitReport {
    pub model: NwModel,
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trial_mse: f64,
    pub trial_r2: Option<f64>,
    pub validation_mse: Option<f64>,
    pub validation_r2: Option<f64>,
}

struct FitProblem {
    variant: NwVariant,
    bg_x: Matrix,
    trial_x: Matrix,
    y_bg: Matrix,
    y_trial: Matrix,
    r_tb: Option<Matrix>,
    /// Distance-plus-penalty constant for variants whose distance term does
    /// not depend on any parameter.
    static_dist: Option<Matrix>,
    dropout: f64,
}

impl FitProblem {
    fn loss(
        &self,
        tape: &Tape,
        bind: &Bindings,
        drop_rng: &mut SmallRng,
        training: bool,
    ) -> Result<Value> {
        let scores = match self.variant {
            NwVariant::Vanilla | NwVariant::RelFeatures => {
                let d = tape.constant(self.static_dist.clone().unwrap());
                let sigma = tape.exp(bind.get("log_sigma"));
                tape.neg(tape.div(d, sigma))
            }
            NwVariant::RelKernel => {
                let d = tape.constant(self.static_dist.clone().unwrap());
                let sigma = tape.exp(bind.get("log_sigma"));
                let base = tape.neg(tape.div(d, sigma));
                let r = tape.constant(self.r_tb.clone().unwrap());
                tape.add(base, tape.mul(bind.get("gamma"), r))
            }
            NwVariant::LearnableNorm => {
                let qx = tape.constant(self.trial_x.clone());
                let bx = tape.constant(self.bg_x.clone());
                let w2 = tape.square(bind.get("w"));
                let d = tape.pairwise_sqdist_weighted(qx, bx, w2);
                let r = tape.constant(self.r_tb.clone().unwrap());
                tape.add(tape.neg(d), tape.mul(bind.get("gamma"), r))
            }
            NwVariant::MlpEmbed => {
                let qx = tape.constant(self.trial_x.clone());
                let bx = tape.constant(self.bg_x.clone());
                let e_q = self.mlp_tape(tape, bind, qx, drop_rng, training)?;
                let e_b = self.mlp_tape(tape, bind, bx, drop_rng, training)?;
                let d = tape.pairwise_sqdist(e_q, e_b);
                let sigma = tape.exp(bind.get("log_sigma"));
                let base = tape.neg(tape.div(d, sigma));
                let r = tape.constant(self.r_tb.clone().unwrap());
                tape.add(base, tape.mul(bind.get("gamma"), r))
            }
        };
        let weights = tape.softmax_rows(scores, None)?;
        let pred = tape.matmul(weights, tape.constant(self.y_bg.clone()));
        let diff = tape.sub(pred, tape.constant(self.y_trial.clone()));
        Ok(tape.mean_all(tape.square(diff)))
    }

    fn mlp_tape(
        &self,
        tape: &Tape,
        bind: &Bindings,
        x: Value,
        drop_rng: &mut SmallRng,
        training: bool,
    ) -> Result<Value> {
        let mut h = tape.relu(tape.add(tape.matmul(x, bind.get("mlp_w1")), bind.get("mlp_b1")));
        h = self.drop_layer(tape, h, drop_rng, training)?;
        h = tape.relu(tape.add(tape.matmul(h, bind.get("mlp_w2")), bind.get("mlp_b2")));
        h = self.drop_layer(tape, h, drop_rng, training)?;
        Ok(tape.add(tape.matmul(h, bind.get("mlp_w3")), bind.get("mlp_b3")))
    }

    fn drop_layer(
        &self,
        tape: &Tape,
        h: Value,
        drop_rng: &mut SmallRng,
        training: bool,
    ) -> Result<Value> {
        if !training || self.dropout == 0.0 {
            return Ok(h);
        }
        let ones = Matrix::filled(h.rows(), h.cols(), 1.0);
        let mask = dropout_apply(&ones, self.dropout, drop_rng, true)?;
        Ok(tape.mul(h, tape.constant(mask)))
    }
}

fn init_store(
    variant: NwVariant,
    dim: usize,
    cfg: &NwFitConfig,
) -> (ParamStore, Option<MlpParams>) {
    let mut store = ParamStore::new();
    let mut mlp = None;
    match variant {
        NwVariant::Vanilla | NwVariant::RelFeatures => {
            store.insert("log_sigma", Matrix::scalar(0.0));
        }
        NwVariant::RelKernel => {
            store.insert("log_sigma", Matrix::scalar(0.0));
            store.insert("gamma", Matrix::scalar(0.0));
        }
        NwVariant::LearnableNorm => {
            store.insert("gamma", Matrix::scalar(0.0));
            store.insert("w", Matrix::filled(1, dim, 1.0));
        }
        NwVariant::MlpEmbed => {
            store.insert("log_sigma", Matrix::scalar(0.0));
            store.insert("gamma", Matrix::scalar(0.0));
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let params = MlpParams::init(dim, cfg.mlp_hidden, &mut rng);
            store.insert("mlp_w1", params.w1.clone());
            store.insert("mlp_b1", params.b1.clone());
            store.insert("mlp_w2", params.w2.clone());
            store.insert("mlp_b2", params.b2.clone());
            store.insert("mlp_w3", params.w3.clone());
            store.insert("mlp_b3", params.b3.clone());
            mlp = Some(params);
        }
    }
    (store, mlp)
}

fn model_from_store(
    variant: NwVariant,
    dim: usize,
    store: &ParamStore,
    scaler: Option<Scaler>,
) -> NwModel {
    let mut model = NwModel::initial(variant, dim);
    model.scaler = scaler;
    if store.names().any(|n| n == "log_sigma") {
        model.log_sigma = store.scalar("log_sigma");
    }
    if store.names().any(|n| n == "gamma") {
        model.gamma = store.scalar("gamma");
    }
    if store.names().any(|n| n == "w") {
        model.w = store.get("w").row(0).to_vec();
    }
    if store.names().any(|n| n == "mlp_w1") {
        model.mlp = Some(MlpParams {
            w1: store.get("mlp_w1").clone(),
            b1: store.get("mlp_b1").clone(),
            w2: store.get("mlp_w2").clone(),
            b2: store.get("mlp_b2").clone(),
            w3: store.get("mlp_w3").clone(),
            b3: store.get("mlp_b3").clone(),
        });
    }
    model
}

/// Fit the chosen kernel variant by minimizing trial-set MSE with Adam.
/// Returns the best-loss parameters seen, never the last iterate.
pub fn nw_fit(
    ds: &RelDataset,
    split: &SplitIndex,
    variant: NwVariant,
    cfg: &NwFitConfig,
) -> Result<NwFitReport> {
    if split.trial().is_empty() {
        return Err(Error::Config("fit requires a nonempty trial split".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("fit requires at least one epoch".into()));
    }
    for &i in split.background().iter().chain(split.trial()).chain(split.validation()) {
        if i >= ds.n() {
            return Err(Error::Config(format!(
                "split index {i} out of range for dataset of {}",
                ds.n()
            )));
        }
    }

    let scaler = if cfg.standardize {
        Some(Scaler::fit(ds.x(), split.background())?)
    } else {
        None
    };
    let std_x = match &scaler {
        Some(s) => s.transform(ds.x())?,
        None => ds.x().clone(),
    };

    let bg = split.background();
    let trial = split.trial();
    let bg_x = std_x.select_rows(bg);
    let trial_x = std_x.select_rows(trial);
    let y_bg = Matrix::from_fn(bg.len(), 1, |i, _| ds.y()[bg[i]]);
    let y_trial = Matrix::from_fn(trial.len(), 1, |i, _| ds.y()[trial[i]]);
    let r_tb = variant
        .uses_relations()
        .then(|| ds.r().select(trial, bg));

    let static_dist = match variant {
        NwVariant::Vanilla | NwVariant::RelKernel => Some(trial_x.pairwise_sqdist(&bg_x)?),
        NwVariant::RelFeatures => {
            let d = trial_x.pairwise_sqdist(&bg_x)?;
            let omega = rel_feature_penalty(r_tb.as_ref().unwrap(), &ds.r().select(bg, bg))?;
            Some(d.add(&omega)?)
        }
        _ => None,
    };

    let problem = FitProblem {
        variant,
        bg_x,
        trial_x,
        y_bg,
        y_trial,
        r_tb,
        static_dist,
        dropout: cfg.mlp_dropout,
    };

    let (mut store, _) = init_store(variant, ds.dim(), cfg);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut drop_rng = SmallRng::seed_from_u64(mix_seed(cfg.seed, 0x6e77));

    let mut best = f64::INFINITY;
    let mut best_snap = store.snapshot();
    let mut initial_loss = f64::NAN;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let tape = Tape::new();
        let bind = store.bind(&tape);
        let loss = problem.loss(&tape, &bind, &mut drop_rng, true)?;
        let loss_val = tape.value(loss).at(0, 0);
        if !loss_val.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        if epoch == 0 {
            initial_loss = loss_val;
        }
        if loss_val < best - cfg.min_delta {
            best = loss_val;
            best_snap = store.snapshot();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
        grad(&tape, loss, &bind, &mut store).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { epoch },
            other => other,
        })?;
        store.adam_step(&adam)?;
        store.zero_grads();
    }
    store.restore(&best_snap);

    let model = model_from_store(variant, ds.dim(), &store, scaler);

    let bg_view = ds.restrict(bg)?;
    let eval = |rows: &[usize]| -> Result<(f64, Option<f64>)> {
        let q = ds.x().select_rows(rows);
        let rq = variant.uses_relations().then(|| ds.r().select(rows, bg));
        let preds = nw_predict(&model, &bg_view, &q, rq.as_ref())?;
        let truth = ds.y_rows(rows);
        Ok((mse(&truth, &preds)?, r2(&truth, &preds).ok()))
    };
    let (trial_mse, trial_r2) = eval(trial)?;
    let (validation_mse, validation_r2) = if split.validation().is_empty() {
        (None, None)
    } else {
        let (m, r) = eval(split.validation())?;
        (Some(m), r)
    };

    Ok(NwFitReport {
        model,
        epochs_run,
        initial_loss,
        final_loss: best,
        trial_mse,
        trial_r2,
        validation_mse,
        validation_r2,
    })
}
