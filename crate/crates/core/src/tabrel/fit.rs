//! Transductive training: one batch, trial-row MSE, Adam.

use rand::rngs::SmallRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::{forward_on_tape, init_params, tabrel_forward, TabRelModel};
use super::{build_input_matrix, build_trial_mask, BatchRole, TabRelConfig};
use crate::error::{Error, Result};
use crate::math::{grad, AdamConfig, Tape};
use crate::metrics::{mse, r2};
use crate::nw::{RelDataset, SplitIndex};
use crate::stats::{mix_seed, Scaler};

#[derive(Clone, Debug)]
pub struct TabRelFitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for TabRelFitConfig {
    fn default() -> Self {
        TabRelFitConfig {
            epochs: 2000,
            lr: 1e-3,
            patience: 200,
            min_delta: 1e-6,
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TabRelFitReport {
    pub model: TabRelModel,
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trial_mse: f64,
    pub trial_r2: Option<f64>,
    pub validation_mse: Option<f64>,
    pub validation_r2: Option<f64>,
}

/// Fit on the trial rows of a transductive batch; validation rows ride
/// along masked and are scored only for the report.
pub fn tabrel_fit(
    ds: &RelDataset,
    split: &SplitIndex,
    cfg: &TabRelConfig,
    fit: &TabRelFitConfig,
) -> Result<TabRelFitReport> {
    cfg.validate()?;
    if split.trial().is_empty() {
        return Err(Error::Config("fit requires a nonempty trial split".into()));
    }
    if fit.epochs == 0 {
        return Err(Error::Config("fit requires at least one epoch".into()));
    }

    let scaler = if fit.standardize {
        Some(Scaler::fit(ds.x(), split.background())?)
    } else {
        None
    };
    let batch = build_input_matrix(ds, split, BatchRole::Trial, scaler.as_ref())?;
    let mask = build_trial_mask(batch.len(), batch.n_masked(), cfg.mask_scope)?;
    let trial_rows: Vec<usize> = batch.trial_rows().collect();
    let y_trial = crate::math::Matrix::from_fn(trial_rows.len(), 1, |i, _| {
        batch.y_true[trial_rows[i]]
    });

    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(fit.seed, 0x7462));
    let mut store = init_params(cfg, batch.x_in.cols(), &mut init_rng);
    let mut drop_rng = SmallRng::seed_from_u64(mix_seed(fit.seed, 0x6472));
    let adam = AdamConfig::with_lr(fit.lr);

    let mut best = f64::INFINITY;
    let mut best_snap = store.snapshot();
    let mut initial_loss = f64::NAN;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..fit.epochs {
        epochs_run = epoch + 1;
        let tape = Tape::new();
        let bind = store.bind(&tape);
        let mut get = |name: &str| bind.get(name);
        let pred = forward_on_tape(
            &tape,
            &mut get,
            cfg,
            &batch.x_in,
            &batch.r,
            &mask,
            true,
            &mut drop_rng,
            None,
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { epoch },
            other => other,
        })?;
        let picked = tape.gather_rows(pred, trial_rows.clone());
        let diff = tape.sub(picked, tape.constant(y_trial.clone()));
        let loss = tape.mean_all(tape.square(diff));
        let loss_val = tape.value(loss).at(0, 0);
        if !loss_val.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        if epoch == 0 {
            initial_loss = loss_val;
        }
        if loss_val < best - fit.min_delta {
            best = loss_val;
            best_snap = store.snapshot();
            stale = 0;
        } else {
            stale += 1;
            if stale >= fit.patience {
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

    let model = TabRelModel {
        cfg: cfg.clone(),
        params: store.snapshot(),
        scaler,
        input_width: batch.x_in.cols(),
    };

    let preds = tabrel_forward(&model, &batch, false, 0)?;
    let trial_preds: Vec<f64> = batch.trial_rows().map(|i| preds[i]).collect();
    let trial_truth: Vec<f64> = batch.trial_rows().map(|i| batch.y_true[i]).collect();
    let trial_mse = mse(&trial_truth, &trial_preds)?;
    let trial_r2 = r2(&trial_truth, &trial_preds).ok();
    let (validation_mse, validation_r2) = if batch.n_validation == 0 {
        (None, None)
    } else {
        let vp: Vec<f64> = batch.validation_rows().map(|i| preds[i]).collect();
        let vt: Vec<f64> = batch.validation_rows().map(|i| batch.y_true[i]).collect();
        (Some(mse(&vt, &vp)?), r2(&vt, &vp).ok())
    };

    Ok(TabRelFitReport {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_clusters_1d, split_dataset, Family, SyntheticSpec};
    use crate::math::{fd_grad, max_rel_err, Matrix, ParamStore};

    fn small_cfg() -> TabRelConfig {
        TabRelConfig {
            embed_dim: 8,
            num_heads: 2,
            depth: 1,
            dropout_rate: 0.0,
            feature_embed_dim: 4,
            ..TabRelConfig::default()
        }
    }

    #[test]
    fn constant_targets_converge_to_the_constant() {
        let n = 45;
        let x = Matrix::from_fn(n, 1, |i, _| (i as f64 / n as f64) * 2.0 - 1.0);
        let ds = RelDataset::new(x, vec![0.5; n], Matrix::zeros(n, n)).unwrap();
        let split = split_dataset(n, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), 3).unwrap();
        let fit = TabRelFitConfig {
            epochs: 700,
            lr: 1e-2,
            patience: 700,
            ..TabRelFitConfig::default()
        };
        let rep = tabrel_fit(&ds, &split, &small_cfg(), &fit).unwrap();
        assert!(rep.trial_mse < 1e-3, "trial mse {}", rep.trial_mse);
        assert!(rep.final_loss <= rep.initial_loss);
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let spec = SyntheticSpec::new(Family::Parabolas, 36, 5);
        let ds = gen_clusters_1d(&spec).unwrap().data;
        let split = split_dataset(36, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), 8).unwrap();
        let fit = TabRelFitConfig {
            epochs: 40,
            ..TabRelFitConfig::default()
        };
        let a = tabrel_fit(&ds, &split, &small_cfg(), &fit).unwrap();
        let b = tabrel_fit(&ds, &split, &small_cfg(), &fit).unwrap();
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
        assert_eq!(a.trial_mse.to_bits(), b.trial_mse.to_bits());
        assert_eq!(
            a.validation_mse.unwrap().to_bits(),
            b.validation_mse.unwrap().to_bits()
        );
    }

    #[test]
    fn zero_depth_config_is_rejected() {
        let spec = SyntheticSpec::new(Family::Parabolas, 30, 1);
        let ds = gen_clusters_1d(&spec).unwrap().data;
        let split = split_dataset(30, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), 1).unwrap();
        let cfg = TabRelConfig {
            depth: 0,
            ..small_cfg()
        };
        assert!(tabrel_fit(&ds, &split, &cfg, &TabRelFitConfig::default()).is_err());
    }

    #[test]
    fn all_parameter_gradients_match_finite_differences() {
        // ns=6, ed=4, nh=2, depth=1 with dropout off so the loss is a
        // deterministic function of the parameters
        let cfg = TabRelConfig {
            embed_dim: 4,
            num_heads: 2,
            depth: 1,
            dropout_rate: 0.0,
            feature_embed_dim: 2,
            ..TabRelConfig::default()
        };
        let n = 6;
        let x = Matrix::from_fn(n, 1, |i, _| (i as f64 * 0.7).sin());
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).cos()).collect();
        let r = Matrix::from_fn(n, n, |i, j| if i != j && (i + j) % 2 == 0 { 1.0 } else { 0.0 });
        let ds = RelDataset::new(x, y, r).unwrap();
        let split = SplitIndex::new(vec![0, 1, 2, 3], vec![4, 5], vec![], n).unwrap();
        let batch = build_input_matrix(&ds, &split, BatchRole::Trial, None).unwrap();
        let mask = build_trial_mask(6, 2, cfg.mask_scope).unwrap();
        let y_trial = Matrix::from_fn(2, 1, |i, _| batch.y_true[4 + i]);

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut store = init_params(&cfg, 2, &mut rng);
        // move relation scales and head off their zero init so their
        // gradients are informative
        store.set("l0_s", Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap());
        store.set("head_w", Matrix::from_fn(4, 1, |i, _| 0.1 * (i as f64 + 1.0)));
        store.set("head_b", Matrix::scalar(0.05));

        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        let values: Vec<Matrix> = names.iter().map(|n| store.get(n).clone()).collect();
        let loss_of = |s: &ParamStore| -> f64 {
            let tape = Tape::new();
            let bind = s.bind(&tape);
            let mut get = |name: &str| bind.get(name);
            let mut drop_rng = SmallRng::seed_from_u64(0);
            let pred = forward_on_tape(
                &tape,
                &mut get,
                &cfg,
                &batch.x_in,
                &batch.r,
                &mask,
                false,
                &mut drop_rng,
                None,
            )
            .unwrap();
            let picked = tape.gather_rows(pred, vec![4, 5]);
            let diff = tape.sub(picked, tape.constant(y_trial.clone()));
            let loss = tape.mean_all(tape.square(diff));
            tape.value(loss).at(0, 0)
        };
        let mut fd_fn = |params: &[Matrix]| -> f64 {
            let mut s = ParamStore::new();
            for (n, v) in names.iter().zip(params) {
                s.insert(n, v.clone());
            }
            loss_of(&s)
        };
        let fd = fd_grad(&mut fd_fn, &values, 1e-5);

        let tape = Tape::new();
        let bind = store.bind(&tape);
        let mut get = |name: &str| bind.get(name);
        let mut drop_rng = SmallRng::seed_from_u64(0);
        let pred = forward_on_tape(
            &tape,
            &mut get,
            &cfg,
            &batch.x_in,
            &batch.r,
            &mask,
            false,
            &mut drop_rng,
            None,
        )
        .unwrap();
        let picked = tape.gather_rows(pred, vec![4, 5]);
        let diff = tape.sub(picked, tape.constant(y_trial.clone()));
        let loss = tape.mean_all(tape.square(diff));
        grad(&tape, loss, &bind, &mut store).unwrap();
        for (k, name) in names.iter().enumerate() {
            let err = max_rel_err(store.grad_of(name), &fd[k], 1e-8);
            assert!(err < 1e-3, "{name}: rel err {err}");
        }
    }

    #[test]
    fn learns_the_cluster_shift_on_small_parabolas() {
        let spec = SyntheticSpec::new(Family::Parabolas, 90, 12);
        let ds = gen_clusters_1d(&spec).unwrap().data;
        let split = split_dataset(90, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), 12).unwrap();
        let cfg = TabRelConfig {
            embed_dim: 16,
            num_heads: 2,
            depth: 2,
            dropout_rate: 0.1,
            feature_embed_dim: 4,
            ..TabRelConfig::default()
        };
        let fit = TabRelFitConfig {
            epochs: 1200,
            patience: 300,
            ..TabRelFitConfig::default()
        };
        let rep = tabrel_fit(&ds, &split, &cfg, &fit).unwrap();
        let r2v = rep.validation_r2.unwrap();
        assert!(r2v > 0.7, "validation r2 {r2v}");
    }
}
