//! Tabular transformer with relation-biased multi-head attention.
//!
//! The model is transductive: background, trial, and validation rows enter
//! one attention batch together, with the response zeroed outside the
//! background and the non-background key columns masked so that held-out
//! rows never leak information to each other. Per-head scores receive an
//! additive `s_h * R` term, so with `s = 0` (the initialization) every
//! layer is plain multi-head self-attention.

mod fit;
mod forward;

pub use fit::{tabrel_fit, TabRelFitConfig, TabRelFitReport};
pub use forward::{
    attention_maps, forward_on_tape, init_params, num_embed, predict_with_background,
    tabrel_forward, TabRelModel,
};

use crate::error::{Error, Result};
use crate::math::{Mask, Matrix};
use crate::nw::{RelDataset, SplitIndex};
use crate::stats::Scaler;

/// Which query rows have the held-out key columns masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskScope {
    /// Every query row ignores held-out key columns.
    AllRows,
    /// Only held-out query rows ignore them; background queries may attend
    /// held-out keys.
    TrialRows,
}

#[derive(Clone, Debug)]
pub struct TabRelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    /// Width of each per-feature numeric embedding.
    pub feature_embed_dim: usize,
    pub mask_scope: MaskScope,
    pub layer_norm: bool,
    pub feed_forward: bool,
}

impl Default for TabRelConfig {
    fn default() -> Self {
        TabRelConfig {
            embed_dim: 32,
            num_heads: 4,
            depth: 2,
            dropout_rate: 0.1,
            feature_embed_dim: 8,
            mask_scope: MaskScope::AllRows,
            layer_norm: false,
            feed_forward: false,
        }
    }
}

impl TabRelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("attention depth must be at least 1".into()));
        }
        if self.num_heads == 0 || self.embed_dim == 0 {
            return Err(Error::Config("embed_dim and num_heads must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.feature_embed_dim == 0 {
            return Err(Error::Config("feature_embed_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Which held-out rows the caller intends to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchRole {
    Trial,
    Validation,
}

/// One transductive batch: background rows first (carrying their true
/// response), then trial rows, then validation rows, both with the response
/// column zeroed.
#[derive(Clone, Debug)]
pub struct AttentionBatch {
    /// ns x (d+1): features followed by the response column.
    pub x_in: Matrix,
    pub r: Matrix,
    pub n_background: usize,
    pub n_trial: usize,
    pub n_validation: usize,
    /// Original dataset row ids in batch order.
    pub source_rows: Vec<usize>,
    /// True responses in batch order (never fed to the model beyond the
    /// background prefix).
    pub y_true: Vec<f64>,
    pub role: BatchRole,
}

impl AttentionBatch {
    pub fn len(&self) -> usize {
        self.n_background + self.n_trial + self.n_validation
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows whose key columns are masked and whose response is zeroed.
    pub fn n_masked(&self) -> usize {
        self.n_trial + self.n_validation
    }

    pub fn trial_rows(&self) -> std::ops::Range<usize> {
        self.n_background..self.n_background + self.n_trial
    }

    pub fn validation_rows(&self) -> std::ops::Range<usize> {
        self.n_background + self.n_trial..self.len()
    }

    pub fn eval_rows(&self) -> std::ops::Range<usize> {
        match self.role {
            BatchRole::Trial => self.trial_rows(),
            BatchRole::Validation => self.validation_rows(),
        }
    }

    pub fn eval_targets(&self) -> &[f64] {
        &self.y_true[self.eval_rows()]
    }
}

/// Assemble the transductive batch for a dataset split. Features may be
/// standardized via `scaler`; the response column is never rescaled.
pub fn build_input_matrix(
    ds: &RelDataset,
    split: &SplitIndex,
    role: BatchRole,
    scaler: Option<&Scaler>,
) -> Result<AttentionBatch> {
    let order: Vec<usize> = split
        .background()
        .iter()
        .chain(split.trial())
        .chain(split.validation())
        .copied()
        .collect();
    for &i in &order {
        if i >= ds.n() {
            return Err(Error::Config(format!(
                "split index {i} out of range for dataset of {}",
                ds.n()
            )));
        }
    }
    let n_background = split.background().len();
    let features = match scaler {
        Some(s) => s.transform(&ds.x().select_rows(&order))?,
        None => ds.x().select_rows(&order),
    };
    let y_true: Vec<f64> = order.iter().map(|&i| ds.y()[i]).collect();
    let y_col = Matrix::from_fn(order.len(), 1, |i, _| {
        if i < n_background {
            y_true[i]
        } else {
            0.0
        }
    });
    let x_in = Matrix::hstack(&[&features, &y_col])?;
    let r = ds.r().select(&order, &order);
    Ok(AttentionBatch {
        x_in,
        r,
        n_background,
        n_trial: split.trial().len(),
        n_validation: split.validation().len(),
        source_rows: order,
        y_true,
        role,
    })
}

/// Key-column mask: the trailing `n_masked` columns are disabled, for all
/// query rows or only for the held-out query rows depending on scope.
pub fn build_trial_mask(ns: usize, n_masked: usize, scope: MaskScope) -> Result<Mask> {
    if n_masked >= ns {
        return Err(Error::Config(format!(
            "masking {n_masked} of {ns} key columns would leave no keys"
        )));
    }
    let first_masked = ns - n_masked;
    Ok(Mask::from_fn(ns, ns, |i, j| {
        if j < first_masked {
            true
        } else {
            match scope {
                MaskScope::AllRows => false,
                MaskScope::TrialRows => i < first_masked,
            }
        }
    }))
}
