//! Kernel weight construction and prediction for every variant.

use super::{NwModel, NwVariant, RelDataset};
use crate::error::{Error, Result};
use crate::math::{softmax_rows, Mask, Matrix};

/// omega[s, i] = sum over background positions p != i of
/// (r_query[s, p] - r_bg[i, p])^2. Skipping p = i keeps background point i's
/// self-relation (the diagonal of the background block) out of the penalty.
pub fn rel_feature_penalty(r_query: &Matrix, r_bg: &Matrix) -> Result<Matrix> {
    let nb = r_bg.rows();
    if r_bg.cols() != nb {
        return Err(Error::Shape {
            op: "rel_feature_penalty background block",
            left_rows: nb,
            left_cols: r_bg.cols(),
            right_rows: nb,
            right_cols: nb,
        });
    }
    if r_query.cols() != nb {
        return Err(Error::Shape {
            op: "rel_feature_penalty query rows",
            left_rows: r_query.rows(),
            left_cols: r_query.cols(),
            right_rows: nb,
            right_cols: nb,
        });
    }
    let mut out = Matrix::zeros(r_query.rows(), nb);
    for s in 0..r_query.rows() {
        let rq = r_query.row(s);
        for i in 0..nb {
            let ri = r_bg.row(i);
            let mut acc = 0.0;
            for p in 0..nb {
                if p == i {
                    continue;
                }
                let d = rq[p] - ri[p];
                acc += d * d;
            }
            out.set(s, i, acc);
        }
    }
    Ok(out)
}

fn require_relations<'a>(
    variant: NwVariant,
    r_query: Option<&'a Matrix>,
    n_q: usize,
    n_b: usize,
) -> Result<Option<&'a Matrix>> {
    if !variant.uses_relations() {
        return Ok(None);
    }
    let r = r_query.ok_or_else(|| {
        Error::Config(format!(
            "variant {} needs query-to-background relations",
            variant.name()
        ))
    })?;
    if r.shape() != (n_q, n_b) {
        return Err(Error::Shape {
            op: "query relations",
            left_rows: r.rows(),
            left_cols: r.cols(),
            right_rows: n_q,
            right_cols: n_b,
        });
    }
    Ok(Some(r))
}

/// Normalized kernel weights (one row per query, summing to one). Pairs in
/// `excluded` are removed from the kernel support before normalization; a
/// query whose entire support is excluded is an error.
pub fn kernel_weights(
    model: &NwModel,
    background: &RelDataset,
    queries: &Matrix,
    r_query: Option<&Matrix>,
    excluded: &[(usize, usize)],
) -> Result<Matrix> {
    let n_b = background.n();
    let n_q = queries.rows();
    if queries.cols() != background.dim() {
        return Err(Error::Shape {
            op: "query features",
            left_rows: n_q,
            left_cols: queries.cols(),
            right_rows: n_b,
            right_cols: background.dim(),
        });
    }
    let rq = require_relations(model.variant, r_query, n_q, n_b)?;

    let (bg_x, q_x) = match &model.scaler {
        Some(s) => (s.transform(background.x())?, s.transform(queries)?),
        None => (background.x().clone(), queries.clone()),
    };

    let sigma = model.sigma();
    if sigma == 0.0 || !sigma.is_finite() {
        return Err(Error::NonFinite {
            context: format!("kernel bandwidth sigma = {sigma}"),
        });
    }

    let scores = match model.variant {
        NwVariant::Vanilla => q_x.pairwise_sqdist(&bg_x)?.scale(-1.0 / sigma),
        NwVariant::RelKernel => {
            let d = q_x.pairwise_sqdist(&bg_x)?;
            let rq = rq.unwrap();
            Matrix::from_fn(n_q, n_b, |s, i| {
                -d.at(s, i) / sigma + model.gamma * rq.at(s, i)
            })
        }
        NwVariant::RelFeatures => {
            let d = q_x.pairwise_sqdist(&bg_x)?;
            let omega = rel_feature_penalty(rq.unwrap(), background.r())?;
            Matrix::from_fn(n_q, n_b, |s, i| -(d.at(s, i) + omega.at(s, i)) / sigma)
        }
        NwVariant::LearnableNorm => {
            if model.w.len() != q_x.cols() {
                return Err(Error::Length {
                    context: "norm weights",
                    got: model.w.len(),
                    expected: q_x.cols(),
                });
            }
            let rq = rq.unwrap();
            Matrix::from_fn(n_q, n_b, |s, i| {
                let mut dist = 0.0;
                for k in 0..q_x.cols() {
                    let d = q_x.at(s, k) - bg_x.at(i, k);
                    dist += model.w[k] * model.w[k] * d * d;
                }
                -dist + model.gamma * rq.at(s, i)
            })
        }
        NwVariant::MlpEmbed => {
            let mlp = model
                .mlp
                .as_ref()
                .ok_or_else(|| Error::Config("mlp variant without embedding network".into()))?;
            let e_q = mlp.embed(&q_x)?;
            let e_b = mlp.embed(&bg_x)?;
            let d = e_q.pairwise_sqdist(&e_b)?;
            let rq = rq.unwrap();
            Matrix::from_fn(n_q, n_b, |s, i| {
                -d.at(s, i) / sigma + model.gamma * rq.at(s, i)
            })
        }
    };

    if excluded.is_empty() {
        softmax_rows(&scores, None)
    } else {
        let mut mask = Mask::all(n_q, n_b);
        for &(s, i) in excluded {
            if s >= n_q || i >= n_b {
                return Err(Error::Config(format!(
                    "excluded pair ({s}, {i}) out of range for {n_q}x{n_b} weights"
                )));
            }
            mask.block(s, i);
        }
        softmax_rows(&scores, Some(&mask))
    }
}

fn apply_weights(weights: &Matrix, y: &[f64]) -> Vec<f64> {
    (0..weights.rows())
        .map(|s| {
            weights
                .row(s)
                .iter()
                .zip(y)
                .map(|(&w, &yi)| w * yi)
                .sum()
        })
        .collect()
}

/// Prediction with arbitrary kernel-support exclusions; the workhorse the
/// meta-learners use to keep a query out of its own background support.
pub fn nw_predict_masked(
    model: &NwModel,
    background: &RelDataset,
    queries: &Matrix,
    r_query: Option<&Matrix>,
    excluded: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let w = kernel_weights(model, background, queries, r_query, excluded)?;
    Ok(apply_weights(&w, background.y()))
}

/// Variant-dispatched prediction.
pub fn nw_predict(
    model: &NwModel,
    background: &RelDataset,
    queries: &Matrix,
    r_query: Option<&Matrix>,
) -> Result<Vec<f64>> {
    nw_predict_masked(model, background, queries, r_query, &[])
}

pub fn nw_predict_vanilla(
    model: &NwModel,
    background: &RelDataset,
    queries: &Matrix,
) -> Result<Vec<f64>> {
    expect_variant(model, NwVariant::Vanilla)?;
    nw_predict(model, background, queries, None)
}

pub fn nw_predict_rel(
    model: &NwModel,
    background: &RelDataset,
    queries: &Matrix,
    r_query: &Matrix,
) -> Result<Vec<f64>> {
    expect_variant(model, NwVariant::RelKernel)?;
    nw_predict(model, background, queries, Some(r_query))
}

pub fn nw_predict_rel_features(
    model: &NwModel,
    background: &RelDataset,
    queries: &Matrix,
    r_query: &Matrix,
) -> Result<Vec<f64>> {
    expect_variant(model, NwVariant::RelFeatures)?;
    nw_predict(model, background, queries, Some(r_query))
}

pub fn nw_predict_learnable_norm(
    model: &NwModel,
    background: &RelDataset,
    queries: &Matrix,
    r_query: &Matrix,
) -> Result<Vec<f64>> {
    expect_variant(model, NwVariant::LearnableNorm)?;
    nw_predict(model, background, queries, Some(r_query))
}

pub fn nw_predict_mlp(
    model: &NwModel,
    background: &RelDataset,
    queries: &Matrix,
    r_query: &Matrix,
) -> Result<Vec<f64>> {
    expect_variant(model, NwVariant::MlpEmbed)?;
    nw_predict(model, background, queries, Some(r_query))
}

fn expect_variant(model: &NwModel, variant: NwVariant) -> Result<()> {
    if model.variant != variant {
        return Err(Error::Config(format!(
            "model variant is {}, expected {}",
            model.variant.name(),
            variant.name()
        )));
    }
    Ok(())
}
