//! Parameter layout and the attention forward pass.

use std::collections::BTreeMap;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use super::{build_trial_mask, AttentionBatch, BatchRole, TabRelConfig};
use crate::error::{Error, Result};
use crate::math::{dropout_apply, Mask, Matrix, ParamStore, Tape, Value};
use crate::stats::Scaler;

/// Fitted parameters plus everything needed to rebuild a batch at predict
/// time.
#[derive(Clone, Debug)]
pub struct TabRelModel {
    pub cfg: TabRelConfig,
    pub params: BTreeMap<String, Matrix>,
    pub scaler: Option<Scaler>,
    /// Feature count plus one response column.
    pub input_width: usize,
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let lim = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-lim..lim))
}

/// Fresh parameter store for the given input width. Relation scales and the
/// output head start at zero: an untrained model is plain attention feeding
/// a zero predictor.
pub fn init_params<R: Rng>(cfg: &TabRelConfig, input_width: usize, rng: &mut R) -> ParamStore {
    let ed = cfg.embed_dim;
    let m = cfg.feature_embed_dim;
    let mut store = ParamStore::new();
    let lim = 1.0 / (m as f64).sqrt();
    store.insert(
        "feat_w",
        Matrix::from_fn(input_width, m, |_, _| rng.gen_range(-lim..lim)),
    );
    store.insert(
        "feat_b",
        Matrix::from_fn(input_width, m, |_, _| rng.gen_range(-lim..lim)),
    );
    store.insert("proj_w", glorot(input_width * m, ed, rng));
    store.insert("proj_b", Matrix::zeros(1, ed));
    for l in 0..cfg.depth {
        store.insert(&format!("l{l}_wq"), glorot(ed, ed, rng));
        store.insert(&format!("l{l}_wk"), glorot(ed, ed, rng));
        store.insert(&format!("l{l}_wv"), glorot(ed, ed, rng));
        store.insert(&format!("l{l}_wo"), glorot(ed, ed, rng));
        store.insert(&format!("l{l}_s"), Matrix::zeros(1, cfg.num_heads));
        if cfg.layer_norm {
            store.insert(&format!("l{l}_ln1_g"), Matrix::filled(1, ed, 1.0));
            store.insert(&format!("l{l}_ln1_b"), Matrix::zeros(1, ed));
        }
        if cfg.feed_forward {
            store.insert(&format!("l{l}_ff_w1"), glorot(ed, 4 * ed, rng));
            store.insert(&format!("l{l}_ff_b1"), Matrix::zeros(1, 4 * ed));
            store.insert(&format!("l{l}_ff_w2"), glorot(4 * ed, ed, rng));
            store.insert(&format!("l{l}_ff_b2"), Matrix::zeros(1, ed));
            if cfg.layer_norm {
                store.insert(&format!("l{l}_ln2_g"), Matrix::filled(1, ed, 1.0));
                store.insert(&format!("l{l}_ln2_b"), Matrix::zeros(1, ed));
            }
        }
    }
    store.insert("head_w", Matrix::zeros(ed, 1));
    store.insert("head_b", Matrix::zeros(1, 1));
    store
}

fn drop_value(
    tape: &Tape,
    v: Value,
    rate: f64,
    training: bool,
    rng: &mut SmallRng,
) -> Result<Value> {
    if !training || rate == 0.0 {
        return Ok(v);
    }
    let ones = Matrix::filled(v.rows(), v.cols(), 1.0);
    let mask = dropout_apply(&ones, rate, rng, true)?;
    Ok(tape.mul(v, tape.constant(mask)))
}

fn embed_on_tape(
    tape: &Tape,
    x: Value,
    feat_w: Value,
    feat_b: Value,
    proj_w: Value,
    proj_b: Value,
) -> Result<Value> {
    let width = x.cols();
    if feat_w.rows() != width || feat_b.rows() != width {
        return Err(Error::Config(format!(
            "input width {width} does not match embedding table of {} features",
            feat_w.rows()
        )));
    }
    if proj_w.rows() != width * feat_w.cols() {
        return Err(Error::Config(format!(
            "projection expects {} embedded columns, got {}",
            proj_w.rows(),
            width * feat_w.cols()
        )));
    }
    let mut parts = Vec::with_capacity(width);
    for j in 0..width {
        let col = tape.slice_cols(x, j, 1);
        let wj = tape.gather_rows(feat_w, vec![j]);
        let bj = tape.gather_rows(feat_b, vec![j]);
        parts.push(tape.relu(tape.add(tape.matmul(col, wj), bj)));
    }
    let e = tape.concat_cols(&parts);
    Ok(tape.add(tape.matmul(e, proj_w), proj_b))
}

fn layer_norm_on_tape(tape: &Tape, h: Value, g: Value, b: Value) -> Value {
    let mean = tape.mean_rows(h);
    let centered = tape.sub(h, mean);
    let var = tape.mean_rows(tape.square(centered));
    let denom = tape.sqrt(tape.add_const(var, 1e-5));
    tape.add(tape.mul(tape.div(centered, denom), g), b)
}

/// If every row keeps exactly columns 0..kw (and at least one column is
/// blocked), attention can skip keys/values for the blocked suffix
/// entirely instead of masking their scores. Returns that shared width.
fn prefix_mask_width(mask: &Mask) -> Option<usize> {
    let cols = mask.cols();
    let mut kw = 0;
    while kw < cols && mask.keep(0, kw) {
        kw += 1;
    }
    if kw == cols {
        return None;
    }
    for i in 0..mask.rows() {
        for j in 0..cols {
            if mask.keep(i, j) != (j < kw) {
                return None;
            }
        }
    }
    Some(kw)
}

/// The whole batch forward on a tape: embeddings, a stack of relation-biased
/// attention layers, then the linear head. `trace` collects post-softmax
/// attention maps in layer-major, head-minor order. Exposed so callers can
/// build custom differentiable objectives on top of the model output.
pub fn forward_on_tape(
    tape: &Tape,
    get: &mut dyn FnMut(&str) -> Value,
    cfg: &TabRelConfig,
    x_in: &Matrix,
    r: &Matrix,
    mask: &Mask,
    training: bool,
    drop_rng: &mut SmallRng,
    mut trace: Option<&mut Vec<Matrix>>,
) -> Result<Value> {
    let ns = x_in.rows();
    if r.rows() != ns || r.cols() != ns {
        return Err(Error::Config(format!(
            "relation matrix {}x{} does not match batch of {ns} rows",
            r.rows(),
            r.cols()
        )));
    }
    let hd = cfg.head_dim();
    let x = tape.constant(x_in.clone());
    let mut h = embed_on_tape(
        tape,
        x,
        get("feat_w"),
        get("feat_b"),
        get("proj_w"),
        get("proj_b"),
    )?;
    // uniform prefix masks shrink the key set instead of masking scores
    let key_width = prefix_mask_width(mask);
    let r_const = tape.constant(match key_width {
        Some(kw) => Matrix::from_fn(ns, kw, |i, j| r.at(i, j)),
        None => r.clone(),
    });
    for l in 0..cfg.depth {
        let h_in = drop_value(tape, h, cfg.dropout_rate, training, drop_rng)?;
        let h_keys = match key_width {
            Some(kw) => tape.gather_rows(h_in, (0..kw).collect()),
            None => h_in,
        };
        let q = tape.matmul(h_in, get(&format!("l{l}_wq")));
        let k = tape.matmul(h_keys, get(&format!("l{l}_wk")));
        let v = tape.matmul(h_keys, get(&format!("l{l}_wv")));
        let s = get(&format!("l{l}_s"));
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let qh = tape.slice_cols(q, head * hd, hd);
            let kh = tape.slice_cols(k, head * hd, hd);
            let vh = tape.slice_cols(v, head * hd, hd);
            let scaled = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / (hd as f64).sqrt());
            let sh = tape.slice_cols(s, head, 1);
            let scores = tape.add(scaled, tape.mul(sh, r_const));
            let alpha = tape.softmax_rows(scores, if key_width.is_some() { None } else { Some(mask) })?;
            if let Some(sink) = trace.as_deref_mut() {
                let a = tape.value(alpha);
                sink.push(match key_width {
                    Some(kw) => Matrix::from_fn(ns, ns, |i, j| {
                        if j < kw {
                            a.at(i, j)
                        } else {
                            0.0
                        }
                    }),
                    None => a,
                });
            }
            let alpha = drop_value(tape, alpha, cfg.dropout_rate, training, drop_rng)?;
            heads.push(tape.matmul(alpha, vh));
        }
        let o = tape.matmul(tape.concat_cols(&heads), get(&format!("l{l}_wo")));
        h = tape.add(h, o);
        if cfg.layer_norm {
            h = layer_norm_on_tape(tape, h, get(&format!("l{l}_ln1_g")), get(&format!("l{l}_ln1_b")));
        }
        if cfg.feed_forward {
            let f1 = tape.relu(tape.add(
                tape.matmul(h, get(&format!("l{l}_ff_w1"))),
                get(&format!("l{l}_ff_b1")),
            ));
            let f2 = tape.add(
                tape.matmul(f1, get(&format!("l{l}_ff_w2"))),
                get(&format!("l{l}_ff_b2")),
            );
            h = tape.add(h, f2);
            if cfg.layer_norm {
                h = layer_norm_on_tape(
                    tape,
                    h,
                    get(&format!("l{l}_ln2_g")),
                    get(&format!("l{l}_ln2_b")),
                );
            }
        }
    }
    Ok(tape.add(tape.matmul(h, get("head_w")), get("head_b")))
}

impl TabRelModel {
    fn getter<'a>(&'a self, tape: &'a Tape) -> impl FnMut(&str) -> Value + 'a {
        move |name: &str| {
            let m = self
                .params
                .get(name)
                .unwrap_or_else(|| panic!("model is missing parameter '{name}'"));
            tape.constant(m.clone())
        }
    }
}

/// Forward pass over a batch; in training mode dropout masks are drawn from
/// `dropout_seed`, in eval mode the output is a pure function of the inputs.
pub fn tabrel_forward(
    model: &TabRelModel,
    batch: &AttentionBatch,
    training: bool,
    dropout_seed: u64,
) -> Result<Vec<f64>> {
    if batch.x_in.cols() != model.input_width {
        return Err(Error::Config(format!(
            "batch width {} does not match model input width {}",
            batch.x_in.cols(),
            model.input_width
        )));
    }
    let mask = build_trial_mask(batch.len(), batch.n_masked(), model.cfg.mask_scope)?;
    let tape = Tape::new();
    let mut drop_rng = SmallRng::seed_from_u64(dropout_seed);
    let mut get = model.getter(&tape);
    let pred = forward_on_tape(
        &tape,
        &mut get,
        &model.cfg,
        &batch.x_in,
        &batch.r,
        &mask,
        training,
        &mut drop_rng,
        None,
    )?;
    let out = tape.value(pred);
    Ok((0..out.rows()).map(|i| out.at(i, 0)).collect())
}

/// Post-softmax attention maps in eval mode, layer-major then head order.
pub fn attention_maps(model: &TabRelModel, batch: &AttentionBatch) -> Result<Vec<Matrix>> {
    let mask = build_trial_mask(batch.len(), batch.n_masked(), model.cfg.mask_scope)?;
    let tape = Tape::new();
    let mut drop_rng = SmallRng::seed_from_u64(0);
    let mut get = model.getter(&tape);
    let mut trace = Vec::new();
    forward_on_tape(
        &tape,
        &mut get,
        &model.cfg,
        &batch.x_in,
        &batch.r,
        &mask,
        false,
        &mut drop_rng,
        Some(&mut trace),
    )?;
    Ok(trace)
}

/// Per-feature affine+ReLU embeddings concatenated and linearly projected.
pub fn num_embed(
    feat_w: &Matrix,
    feat_b: &Matrix,
    proj_w: &Matrix,
    proj_b: &Matrix,
    x: &Matrix,
) -> Result<Matrix> {
    let tape = Tape::new();
    let out = embed_on_tape(
        &tape,
        tape.constant(x.clone()),
        tape.constant(feat_w.clone()),
        tape.constant(feat_b.clone()),
        tape.constant(proj_w.clone()),
        tape.constant(proj_b.clone()),
    )?;
    Ok(tape.value(out))
}

/// Score query rows against a fitted background. `r` covers the batch in
/// background-then-query order. Returns one prediction per query row.
pub fn predict_with_background(
    model: &TabRelModel,
    bg_x: &Matrix,
    bg_y: &[f64],
    query_x: &Matrix,
    r: &Matrix,
) -> Result<Vec<f64>> {
    let d = model.input_width - 1;
    if bg_x.cols() != d || query_x.cols() != d {
        return Err(Error::Config(format!(
            "expected {d} feature columns, got background {} and query {}",
            bg_x.cols(),
            query_x.cols()
        )));
    }
    if bg_y.len() != bg_x.rows() {
        return Err(Error::Length {
            context: "background responses".into(),
            got: bg_y.len(),
            expected: bg_x.rows(),
        });
    }
    let nb = bg_x.rows();
    let nq = query_x.rows();
    if nb == 0 || nq == 0 {
        return Err(Error::Config("background and query sets must be nonempty".into()));
    }
    if r.rows() != nb + nq || r.cols() != nb + nq {
        return Err(Error::Config(format!(
            "relation matrix {}x{} does not match {} batch rows",
            r.rows(),
            r.cols(),
            nb + nq
        )));
    }
    let features = Matrix::from_fn(nb + nq, d, |i, j| {
        if i < nb {
            bg_x.at(i, j)
        } else {
            query_x.at(i - nb, j)
        }
    });
    let features = match &model.scaler {
        Some(s) => s.transform(&features)?,
        None => features,
    };
    let y_col = Matrix::from_fn(nb + nq, 1, |i, _| if i < nb { bg_y[i] } else { 0.0 });
    let batch = AttentionBatch {
        x_in: Matrix::hstack(&[&features, &y_col])?,
        r: r.clone(),
        n_background: nb,
        n_trial: nq,
        n_validation: 0,
        source_rows: (0..nb + nq).collect(),
        y_true: y_col.col(0),
        role: BatchRole::Trial,
    };
    let preds = tabrel_forward(model, &batch, false, 0)?;
    Ok(preds[nb..].to_vec())
}
