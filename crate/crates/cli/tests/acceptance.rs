//! End-to-end acceptance gate for the workspace. Runs as a plain binary
//! (no libtest harness) so every criterion prints exactly one pass/fail
//! line as it completes; the process exits nonzero if any criterion fails.
//!
//! Numeric gates are pinned here, next to the check that enforces them.
//! Budgeted criteria measure their own wall time.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relkit::dataio::ks_informativeness;
use relkit::math::{fd_grad, grad, max_rel_err, Matrix, ParamStore, Tape};
use relkit::meta::pehe;
use relkit::metrics::mse;
use relkit::nw::{kernel_weights, nw_predict, MlpParams, NwModel, NwVariant, RelDataset, SplitIndex};
use relkit::tabrel::{
    attention_maps, build_input_matrix, build_trial_mask, forward_on_tape, init_params,
    tabrel_forward, AttentionBatch, BatchRole, TabRelConfig, TabRelModel,
};

use relkit_cli::config::{ExperimentConfig, DATA_ROOT_ENV};
use relkit_cli::emit::write_all;
use relkit_cli::presets::preset;
use relkit_cli::runner::{relation_diagnostics, run_experiment, RunOutput};

type CheckResult = Result<(bool, String), String>;

fn main() {
    // Integration tests run from the crate directory; point the data root
    // at the workspace data/ dir unless the caller already chose one.
    if std::env::var(DATA_ROOT_ENV).is_err() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
        std::env::set_var(DATA_ROOT_ENV, &root);
    }

    let checks: Vec<(&str, fn() -> CheckResult)> = vec![
        ("toy separation (fig1)", c1_toy_separation),
        ("deterministic relations (table1)", c2_deterministic_relations),
        ("random relations failure mode", c3_random_relations),
        ("noisy features, learnable norm", c4_learnable_norm),
        ("two-feature families at n=1000", c5_two_feature_families),
        ("property suite", c6_properties),
        ("treatment-effect sanity", c7_treatment_effect),
        ("relation informativeness diagnostic", c8_relation_diagnostic),
        ("byte-identical reruns", c9_determinism),
    ];

    let mut passed = 0usize;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(Ok((ok, detail))) => (ok, detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "opaque panic".into());
                (false, format!("panicked: {msg}"))
            }
        };
        if ok {
            passed += 1;
        }
        println!(
            "[{}] {}. {}: {} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            name,
            detail,
            secs
        );
    }

    println!("acceptance: {passed}/{} criteria passed", checks.len());
    if passed != checks.len() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn run_toml(toml: &str) -> Result<RunOutput, String> {
    let cfg = ExperimentConfig::from_toml_str(toml).map_err(|e| e.to_string())?;
    run_experiment(&cfg).map_err(|e| e.to_string())
}

fn mean_of(out: &RunOutput, estimator: &str, dataset: &str, metric: &str) -> Result<f64, String> {
    out.rows
        .iter()
        .find(|r| r.estimator == estimator && r.dataset == dataset && r.metric == metric)
        .map(|r| r.mean)
        .ok_or_else(|| format!("no result row for {estimator}/{dataset}/{metric}"))
}

fn seeds_toml(n: u64) -> String {
    let list: Vec<String> = (0..n).map(|s| s.to_string()).collect();
    format!("seeds = [{}]", list.join(", "))
}

fn sym_relations(n: usize, rng: &mut impl Rng, density: f64) -> Matrix {
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(density) {
                r.set(i, j, 1.0);
                r.set(j, i, 1.0);
            }
        }
    }
    r
}

// ------------------------------------------------------------ criterion 1

/// Clustered parabolas, 10 seeds: the relation-aware kernel must separate
/// the clusters while the plain kernel is stuck between them.
fn c1_toy_separation() -> CheckResult {
    let start = Instant::now();
    let cfg = preset("fig1").map_err(|e| e.to_string())?;
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let rel = mean_of(&out, "nw_rel", "parabolas", "r2")?;
    let vanilla = mean_of(&out, "nw_vanilla", "parabolas", "r2")?;
    let secs = start.elapsed().as_secs_f64();
    let ok = rel >= 0.95 && (0.10..=0.50).contains(&vanilla) && secs < 60.0;
    Ok((
        ok,
        format!("nw_rel r2 {rel:.4} (need >= 0.95), nw_vanilla {vanilla:.4} (need 0.10..0.50), {secs:.1}s (budget 60s)"),
    ))
}

// ------------------------------------------------------------ criterion 2

/// Full table1 preset: 30 seeds, deterministic relations, parabolas and
/// step functions, kernel and attention estimators.
fn c2_deterministic_relations() -> CheckResult {
    let start = Instant::now();
    let cfg = preset("table1").map_err(|e| e.to_string())?;
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let rel_par = mean_of(&out, "nw_rel", "parabolas", "r2")?;
    let tab_par = mean_of(&out, "tabrel", "parabolas", "r2")?;
    let tab_step = mean_of(&out, "tabrel", "step", "r2")?;
    let secs = start.elapsed().as_secs_f64();
    let ok = rel_par >= 0.95 && tab_par >= 0.90 && tab_step >= 0.90 && secs < 1800.0;
    Ok((
        ok,
        format!("nw_rel parabolas {rel_par:.4} (>= 0.95), tabrel parabolas {tab_par:.4} (>= 0.90), tabrel step {tab_step:.4} (>= 0.90), {secs:.0}s (budget 1800s)"),
    ))
}

// ------------------------------------------------------------ criterion 3

/// Random relations: half the within-cluster edges dropped at random. The
/// in-kernel relation term must stay robust while relation-rows-as-features
/// degrades sharply.
fn c3_random_relations() -> CheckResult {
    let toml = format!(
        r#"
{seeds}
metrics = ["r2"]

[[datasets]]
kind = "synthetic"
family = "parabolas"
n = 300
relations = "random_half"

[[estimators]]
kind = "nw"
variant = "rel_kernel"

[[estimators]]
kind = "nw"
variant = "rel_features"
"#,
        seeds = seeds_toml(30)
    );
    let out = run_toml(&toml)?;
    let rel = mean_of(&out, "nw_rel", "parabolas_rand", "r2")?;
    let feats = mean_of(&out, "nw_rel_features", "parabolas_rand", "r2")?;
    let ok = rel >= 0.85 && feats < 0.20;
    Ok((
        ok,
        format!("nw_rel {rel:.4} (need >= 0.85), nw_rel_features {feats:.4} (need < 0.20)"),
    ))
}

// ------------------------------------------------------------ criterion 4

/// 7-dimensional target with noisy coordinates: per-feature learnable
/// weights must beat the fixed L2 norm by a clear margin.
fn c4_learnable_norm() -> CheckResult {
    let start = Instant::now();
    let toml = format!(
        r#"
{seeds}
metrics = ["r2"]

[[datasets]]
kind = "synthetic"
family = "noisy7d"
n = 300

[[estimators]]
kind = "nw"
variant = "rel_kernel"

[[estimators]]
kind = "nw"
variant = "learnable_norm"
"#,
        seeds = seeds_toml(30)
    );
    let out = run_toml(&toml)?;
    let learnable = mean_of(&out, "nw_learnable_norm", "noisy7d", "r2")?;
    let fixed = mean_of(&out, "nw_rel", "noisy7d", "r2")?;
    let secs = start.elapsed().as_secs_f64();
    let ok = learnable >= 0.90 && learnable - fixed >= 0.05 && secs < 600.0;
    Ok((
        ok,
        format!("learnable_norm {learnable:.4} (>= 0.90), margin over fixed L2 {:+.4} (>= 0.05), {secs:.0}s (budget 600s)", learnable - fixed),
    ))
}

// ------------------------------------------------------------ criterion 5

/// Three 2-feature families at n=1000: the relation-aware kernel clears
/// 0.96 on each family and beats the plain kernel by 0.2 on average.
/// The 500-epoch budget is conservative: longer budgets only widen the
/// margins here.
fn c5_two_feature_families() -> CheckResult {
    let toml = format!(
        r#"
{seeds}
metrics = ["r2"]

[[datasets]]
kind = "synthetic"
family = "linear2d"
n = 1000

[[datasets]]
kind = "synthetic"
family = "square2d"
n = 1000

[[datasets]]
kind = "synthetic"
family = "sin2d"
n = 1000

[[estimators]]
kind = "nw"
variant = "vanilla"
epochs = 500

[[estimators]]
kind = "nw"
variant = "rel_kernel"
epochs = 500
"#,
        seeds = seeds_toml(8)
    );
    let out = run_toml(&toml)?;
    let families = ["linear2d", "square2d", "sin2d"];
    let mut rel_sum = 0.0;
    let mut vanilla_sum = 0.0;
    let mut min_rel = f64::INFINITY;
    for fam in families {
        let rel = mean_of(&out, "nw_rel", fam, "r2")?;
        vanilla_sum += mean_of(&out, "nw_vanilla", fam, "r2")?;
        rel_sum += rel;
        min_rel = min_rel.min(rel);
    }
    let gap = (rel_sum - vanilla_sum) / families.len() as f64;
    let ok = min_rel >= 0.96 && gap >= 0.20;
    Ok((
        ok,
        format!("worst nw_rel family r2 {min_rel:.4} (need >= 0.96), mean margin over vanilla {gap:.4} (need >= 0.20)"),
    ))
}

// ------------------------------------------------------------ criterion 6

fn c6_properties() -> CheckResult {
    let subchecks: [(&str, fn() -> Result<(), String>); 6] = [
        ("weight rows sum to one", prop_weight_rows),
        ("vanilla reductions", prop_reductions),
        ("plain attention at zero relation scale", prop_plain_attention),
        ("held-out mutation locality", prop_mutation_locality),
        ("gradients match finite differences", prop_finite_differences),
        ("pehe identities", prop_pehe_identities),
    ];
    let mut failures = Vec::new();
    for (name, run) in subchecks {
        if let Err(e) = run() {
            failures.push(format!("{name}: {e}"));
        }
    }
    if failures.is_empty() {
        Ok((
            true,
            "row sums x1000, reductions, plain-attention match, mutation locality, finite differences, pehe identities".into(),
        ))
    } else {
        Ok((false, failures.join("; ")))
    }
}

/// 900 random kernel-weight matrices plus 100 attention maps: every row is
/// a convex combination, so it sums to 1 within 1e-9.
fn prop_weight_rows() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_1);
    let variants = [
        NwVariant::Vanilla,
        NwVariant::RelKernel,
        NwVariant::RelFeatures,
        NwVariant::LearnableNorm,
        NwVariant::MlpEmbed,
    ];
    for case in 0..900 {
        let n_b = rng.gen_range(2..=12);
        let n_q = rng.gen_range(1..=6);
        let d = rng.gen_range(1..=4);
        let variant = variants[case % variants.len()];
        let x = Matrix::from_fn(n_b, d, |_, _| rng.gen_range(-2.0..2.0));
        let y: Vec<f64> = (0..n_b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = sym_relations(n_b, &mut rng, 0.4);
        let ds = RelDataset::new(x, y, r).map_err(|e| e.to_string())?;
        let queries = Matrix::from_fn(n_q, d, |_, _| rng.gen_range(-2.0..2.0));
        let rq = Matrix::from_fn(n_q, n_b, |_, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let mut model = NwModel::initial(variant, d);
        model.log_sigma = rng.gen_range(-1.0..1.0);
        model.gamma = rng.gen_range(-1.0..1.0);
        if variant == NwVariant::LearnableNorm {
            model.w = (0..d).map(|_| rng.gen_range(0.2..1.5)).collect();
        }
        if variant == NwVariant::MlpEmbed {
            model.mlp = Some(MlpParams::init(d, (5, 4, 3), &mut rng));
        }
        let excluded: Vec<(usize, usize)> = if n_b >= 3 && rng.gen_bool(0.3) {
            vec![(0, rng.gen_range(0..n_b))]
        } else {
            Vec::new()
        };
        let r_arg = variant.uses_relations().then_some(&rq);
        let w = kernel_weights(&model, &ds, &queries, r_arg, &excluded)
            .map_err(|e| format!("case {case}: {e}"))?;
        for i in 0..w.rows() {
            let sum: f64 = (0..w.cols()).map(|j| w.at(i, j)).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(format!("case {case} ({variant:?}): row {i} sums to {sum}"));
            }
        }
    }
    for case in 0..100u64 {
        let mut crng = ChaCha8Rng::seed_from_u64(0xACCE_2 + case);
        let d = crng.gen_range(1..=2usize);
        let n = crng.gen_range(6..=9usize);
        let (ds, split) = tiny_tabrel_dataset(n, d, &mut crng);
        let model = tiny_tabrel_model(d, 100 + case);
        let batch = build_input_matrix(&ds, &split, BatchRole::Trial, None).map_err(|e| e.to_string())?;
        let maps = attention_maps(&model, &batch).map_err(|e| e.to_string())?;
        for (m, map) in maps.iter().enumerate() {
            for i in 0..map.rows() {
                let sum: f64 = (0..map.cols()).map(|j| map.at(i, j)).sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(format!("attention case {case} map {m}: row {i} sums to {sum}"));
                }
            }
        }
    }
    Ok(())
}

/// With the relation term switched off (gamma = 0, R = 0, or identical
/// relation rows) every variant collapses onto the plain kernel.
fn prop_reductions() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_3);
    for case in 0..50 {
        let n_b = rng.gen_range(3..=10);
        let n_q = rng.gen_range(1..=5);
        let d = rng.gen_range(1..=3);
        let x = Matrix::from_fn(n_b, d, |_, _| rng.gen_range(-2.0..2.0));
        let y: Vec<f64> = (0..n_b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zeros = Matrix::zeros(n_b, n_b);
        let ds = RelDataset::new(x, y, zeros).map_err(|e| e.to_string())?;
        let queries = Matrix::from_fn(n_q, d, |_, _| rng.gen_range(-2.0..2.0));
        let rq_random = Matrix::from_fn(n_q, n_b, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let rq_zero = Matrix::zeros(n_q, n_b);
        let log_sigma = rng.gen_range(-1.0..1.0);

        let mut vanilla = NwModel::initial(NwVariant::Vanilla, d);
        vanilla.log_sigma = log_sigma;
        let base = nw_predict(&vanilla, &ds, &queries, None).map_err(|e| e.to_string())?;

        // gamma = 0 with arbitrary relations
        let mut rel = NwModel::initial(NwVariant::RelKernel, d);
        rel.log_sigma = log_sigma;
        let p = nw_predict(&rel, &ds, &queries, Some(&rq_random)).map_err(|e| e.to_string())?;
        check_close(&base, &p, 1e-12, &format!("case {case}: gamma=0"))?;

        // relations identically zero with arbitrary gamma
        let mut rel = NwModel::initial(NwVariant::RelKernel, d);
        rel.log_sigma = log_sigma;
        rel.gamma = rng.gen_range(-2.0..2.0);
        let p = nw_predict(&rel, &ds, &queries, Some(&rq_zero)).map_err(|e| e.to_string())?;
        check_close(&base, &p, 1e-12, &format!("case {case}: R=0"))?;

        // relation rows identical everywhere: the row-distance term vanishes
        let mut feats = NwModel::initial(NwVariant::RelFeatures, d);
        feats.log_sigma = log_sigma;
        let p = nw_predict(&feats, &ds, &queries, Some(&rq_zero)).map_err(|e| e.to_string())?;
        check_close(&base, &p, 1e-12, &format!("case {case}: identical relation rows"))?;

        // unit weights with gamma reproduce the fixed L2 kernel at sigma=1
        let gamma = rng.gen_range(-1.0..1.0);
        let mut norm = NwModel::initial(NwVariant::LearnableNorm, d);
        norm.gamma = gamma;
        let mut rel = NwModel::initial(NwVariant::RelKernel, d);
        rel.gamma = gamma;
        let a = nw_predict(&norm, &ds, &queries, Some(&rq_random)).map_err(|e| e.to_string())?;
        let b = nw_predict(&rel, &ds, &queries, Some(&rq_random)).map_err(|e| e.to_string())?;
        check_close(&a, &b, 1e-12, &format!("case {case}: unit weights"))?;
    }
    Ok(())
}

fn check_close(a: &[f64], b: &[f64], tol: f64, what: &str) -> Result<(), String> {
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if (x - y).abs() > tol {
            return Err(format!("{what}: entry {i} differs, {x} vs {y}"));
        }
    }
    Ok(())
}

fn tiny_tabrel_config() -> TabRelConfig {
    TabRelConfig {
        embed_dim: 4,
        num_heads: 2,
        depth: 1,
        dropout_rate: 0.0,
        feature_embed_dim: 2,
        ..TabRelConfig::default()
    }
}

fn tiny_tabrel_dataset(n: usize, d: usize, rng: &mut impl Rng) -> (RelDataset, SplitIndex) {
    let x = Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.5..1.5));
    let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = sym_relations(n, rng, 0.4);
    let ds = RelDataset::new(x, y, r).expect("valid dataset");
    let n_bg = n - 4;
    let split = SplitIndex::new(
        (0..n_bg).collect(),
        (n_bg..n_bg + 2).collect(),
        (n_bg + 2..n).collect(),
        n,
    )
    .expect("valid split");
    (ds, split)
}

fn tiny_tabrel_model(d: usize, seed: u64) -> TabRelModel {
    let cfg = tiny_tabrel_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = init_params(&cfg, d + 1, &mut rng);
    let mut params = store.snapshot();
    // the head starts at zero; give it mass so attention reaches the output
    params.insert(
        "head_w".into(),
        Matrix::from_fn(cfg.embed_dim, 1, |_, _| rng.gen_range(-1.0..1.0)),
    );
    params.insert("head_b".into(), Matrix::scalar(rng.gen_range(-0.5..0.5)));
    TabRelModel {
        cfg,
        params,
        scaler: None,
        input_width: d + 1,
    }
}

/// With every relation scale at its zero initialization the model is plain
/// multi-head attention; an independent loop-arithmetic oracle must agree.
fn prop_plain_attention() -> Result<(), String> {
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_4 + case);
        let d = rng.gen_range(1..=2usize);
        let n = rng.gen_range(6..=9usize);
        let (ds, split) = tiny_tabrel_dataset(n, d, &mut rng);
        let model = tiny_tabrel_model(d, 200 + case);
        let batch = build_input_matrix(&ds, &split, BatchRole::Trial, None).map_err(|e| e.to_string())?;
        let got = tabrel_forward(&model, &batch, false, 0).map_err(|e| e.to_string())?;
        let want = plain_attention_oracle(&model, &batch);
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            if (g - w).abs() > 1e-10 {
                return Err(format!("case {case}: row {i} {g} vs oracle {w}"));
            }
        }
    }
    Ok(())
}

/// Loop-arithmetic multi-head attention with keys restricted to the
/// background prefix and no relation bias.
fn plain_attention_oracle(model: &TabRelModel, batch: &AttentionBatch) -> Vec<f64> {
    let cfg = &model.cfg;
    let p = |name: &str| model.params.get(name).expect("param");
    let x = &batch.x_in;
    let ns = x.rows();
    let width = x.cols();
    let m = cfg.feature_embed_dim;
    let ed = cfg.embed_dim;
    let hd = ed / cfg.num_heads;
    let kept = batch.n_background;

    // per-column affine + relu, concatenated, then the linear projection
    let (feat_w, feat_b) = (p("feat_w"), p("feat_b"));
    let (proj_w, proj_b) = (p("proj_w"), p("proj_b"));
    let mut h = vec![vec![0.0; ed]; ns];
    for i in 0..ns {
        let mut e = vec![0.0; width * m];
        for j in 0..width {
            for c in 0..m {
                e[j * m + c] = (x.at(i, j) * feat_w.at(j, c) + feat_b.at(j, c)).max(0.0);
            }
        }
        for c in 0..ed {
            let mut acc = proj_b.at(0, c);
            for (k, ek) in e.iter().enumerate() {
                acc += ek * proj_w.at(k, c);
            }
            h[i][c] = acc;
        }
    }

    for l in 0..cfg.depth {
        let wq = p(&format!("l{l}_wq"));
        let wk = p(&format!("l{l}_wk"));
        let wv = p(&format!("l{l}_wv"));
        let wo = p(&format!("l{l}_wo"));
        let project = |h: &Vec<Vec<f64>>, w: &Matrix, i: usize, c: usize| -> f64 {
            (0..ed).map(|k| h[i][k] * w.at(k, c)).sum()
        };
        let mut concat = vec![vec![0.0; ed]; ns];
        for head in 0..cfg.num_heads {
            let off = head * hd;
            for i in 0..ns {
                let mut scores = vec![0.0; kept];
                for (j, s) in scores.iter_mut().enumerate() {
                    let dot: f64 = (0..hd)
                        .map(|c| project(&h, wq, i, off + c) * project(&h, wk, j, off + c))
                        .sum();
                    *s = dot / (hd as f64).sqrt();
                }
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let total: f64 = exps.iter().sum();
                for c in 0..hd {
                    let mut acc = 0.0;
                    for (j, ex) in exps.iter().enumerate() {
                        acc += ex / total * project(&h, wv, j, off + c);
                    }
                    concat[i][off + c] = acc;
                }
            }
        }
        for i in 0..ns {
            for c in 0..ed {
                h[i][c] += (0..ed).map(|k| concat[i][k] * wo.at(k, c)).sum::<f64>();
            }
        }
    }

    let (head_w, head_b) = (p("head_w"), p("head_b"));
    (0..ns)
        .map(|i| (0..ed).map(|c| h[i][c] * head_w.at(c, 0)).sum::<f64>() + head_b.at(0, 0))
        .collect()
}

/// Held-out rows are masked out of the key set, so mutating one held-out
/// row can never move another row's prediction, and mutating a held-out
/// response (which is zeroed on input) moves nothing at all.
fn prop_mutation_locality() -> Result<(), String> {
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_5 + case);
        let n = 12;
        let d = 2;
        let x = Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.5..1.5));
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = sym_relations(n, &mut rng, 0.4);
        let split = SplitIndex::new((0..6).collect(), (6..9).collect(), (9..12).collect(), n)
            .map_err(|e| e.to_string())?;
        let model = tiny_tabrel_model(d, 300 + case);

        let ds = RelDataset::new(x.clone(), y.clone(), r.clone()).map_err(|e| e.to_string())?;
        let batch = build_input_matrix(&ds, &split, BatchRole::Trial, None).map_err(|e| e.to_string())?;
        let base = tabrel_forward(&model, &batch, false, 0).map_err(|e| e.to_string())?;

        // response mutation on a held-out row: nothing may move
        let mut y2 = y.clone();
        y2[7] += 5.0;
        y2[10] -= 3.0;
        let ds2 = RelDataset::new(x.clone(), y2, r.clone()).map_err(|e| e.to_string())?;
        let batch2 = build_input_matrix(&ds2, &split, BatchRole::Trial, None).map_err(|e| e.to_string())?;
        let moved = tabrel_forward(&model, &batch2, false, 0).map_err(|e| e.to_string())?;
        check_close(&base, &moved, 1e-12, &format!("case {case}: held-out response mutation"))?;

        // feature mutation on one trial row: only that row may move
        let mut x2 = x.clone();
        x2.set(7, 0, x2.at(7, 0) + 2.0);
        let ds3 = RelDataset::new(x2, y.clone(), r.clone()).map_err(|e| e.to_string())?;
        let batch3 = build_input_matrix(&ds3, &split, BatchRole::Trial, None).map_err(|e| e.to_string())?;
        let moved = tabrel_forward(&model, &batch3, false, 0).map_err(|e| e.to_string())?;
        let mutated_pos = batch3
            .source_rows
            .iter()
            .position(|&s| s == 7)
            .ok_or("row 7 missing from batch")?;
        for (i, (a, b)) in base.iter().zip(&moved).enumerate() {
            if i == mutated_pos {
                continue;
            }
            if (a - b).abs() > 1e-12 {
                return Err(format!("case {case}: feature mutation leaked to row {i}: {a} vs {b}"));
            }
        }
    }
    Ok(())
}

/// Reverse-mode gradients against central finite differences, for each
/// kernel parameterization (bandwidth/relation weight, per-feature weights,
/// embedding network) and for the full attention model. The kernel
/// objectives are additionally pinned to the prediction path: the taped
/// loss must equal the trial MSE computed through the public predictor.
fn prop_finite_differences() -> Result<(), String> {
    nw_fd_rel_kernel()?;
    nw_fd_learnable_norm()?;
    nw_fd_mlp_embed()?;
    tabrel_fd()
}

struct FdData {
    bg_x: Matrix,
    bg_y: Vec<f64>,
    trial_x: Matrix,
    trial_y: Matrix,
    r_tb: Matrix,
}

fn fd_data(seed: u64, n_b: usize, n_t: usize, d: usize) -> FdData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FdData {
        bg_x: Matrix::from_fn(n_b, d, |_, _| rng.gen_range(-1.5..1.5)),
        bg_y: (0..n_b).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        trial_x: Matrix::from_fn(n_t, d, |_, _| rng.gen_range(-1.5..1.5)),
        trial_y: Matrix::from_fn(n_t, 1, |_, _| rng.gen_range(-1.0..1.0)),
        r_tb: Matrix::from_fn(n_t, n_b, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }),
    }
}

fn bg_y_col(data: &FdData) -> Matrix {
    Matrix::from_fn(data.bg_y.len(), 1, |i, _| data.bg_y[i])
}

/// Trial MSE through the public predictor, for pinning taped objectives.
fn predictor_mse(model: &NwModel, data: &FdData) -> Result<f64, String> {
    let zeros = Matrix::zeros(data.bg_y.len(), data.bg_y.len());
    let ds = RelDataset::new(data.bg_x.clone(), data.bg_y.clone(), zeros).map_err(|e| e.to_string())?;
    let rq = model.variant.uses_relations().then_some(&data.r_tb);
    let preds = nw_predict(model, &ds, &data.trial_x, rq).map_err(|e| e.to_string())?;
    let truth: Vec<f64> = (0..data.trial_y.rows()).map(|i| data.trial_y.at(i, 0)).collect();
    mse(&truth, &preds).map_err(|e| e.to_string())
}

fn fd_check(
    store: &mut ParamStore,
    names: &[&str],
    build_loss: &dyn Fn(&ParamStore) -> f64,
    tape_loss: impl FnOnce(&Tape, &relkit::math::Bindings) -> relkit::math::Value,
    tol: f64,
    what: &str,
) -> Result<f64, String> {
    let values: Vec<Matrix> = names.iter().map(|n| store.get(n).clone()).collect();
    let mut fd_fn = |params: &[Matrix]| -> f64 {
        let mut s = ParamStore::new();
        for (n, v) in names.iter().zip(params) {
            s.insert(n, v.clone());
        }
        build_loss(&s)
    };
    let fd = fd_grad(&mut fd_fn, &values, 1e-5);

    let tape = Tape::new();
    let bind = store.bind(&tape);
    let loss = tape_loss(&tape, &bind);
    let loss_value = tape.value(loss).at(0, 0);
    grad(&tape, loss, &bind, store).map_err(|e| e.to_string())?;
    for (k, name) in names.iter().enumerate() {
        let err = max_rel_err(store.grad_of(name), &fd[k], 1e-8);
        if err > tol {
            return Err(format!("{what}: {name} gradient rel err {err:.2e} (tol {tol:.0e})"));
        }
    }
    Ok(loss_value)
}

fn nw_fd_rel_kernel() -> Result<(), String> {
    let data = fd_data(41, 5, 3, 2);
    let mut store = ParamStore::new();
    store.insert("log_sigma", Matrix::scalar(0.3));
    store.insert("gamma", Matrix::scalar(0.7));

    let loss_at = |s: &ParamStore| -> f64 {
        let tape = Tape::new();
        let bind = s.bind(&tape);
        let v = rel_kernel_loss(&tape, &bind, &data);
        tape.value(v).at(0, 0)
    };
    let loss_value = fd_check(
        &mut store,
        &["log_sigma", "gamma"],
        &loss_at,
        |tape, bind| rel_kernel_loss(tape, bind, &data),
        1e-4,
        "rel kernel",
    )?;

    let mut model = NwModel::initial(NwVariant::RelKernel, 2);
    model.log_sigma = 0.3;
    model.gamma = 0.7;
    let external = predictor_mse(&model, &data)?;
    if (external - loss_value).abs() > 1e-12 {
        return Err(format!(
            "rel kernel: taped loss {loss_value} differs from predictor mse {external}"
        ));
    }
    Ok(())
}

fn rel_kernel_loss(tape: &Tape, bind: &relkit::math::Bindings, data: &FdData) -> relkit::math::Value {
    let dist = tape.pairwise_sqdist(tape.constant(data.trial_x.clone()), tape.constant(data.bg_x.clone()));
    let sigma = tape.exp(bind.get("log_sigma"));
    let scores = tape.add(
        tape.neg(tape.div(dist, sigma)),
        tape.mul(bind.get("gamma"), tape.constant(data.r_tb.clone())),
    );
    let weights = tape.softmax_rows(scores, None).expect("finite scores");
    let pred = tape.matmul(weights, tape.constant(bg_y_col(data)));
    tape.mean_all(tape.square(tape.sub(pred, tape.constant(data.trial_y.clone()))))
}

fn nw_fd_learnable_norm() -> Result<(), String> {
    let data = fd_data(42, 5, 3, 2);
    let mut store = ParamStore::new();
    store.insert("w", Matrix::from_rows(&[vec![0.8, 1.3]]).expect("row"));
    store.insert("gamma", Matrix::scalar(0.4));

    let loss_at = |s: &ParamStore| -> f64 {
        let tape = Tape::new();
        let bind = s.bind(&tape);
        let v = learnable_norm_loss(&tape, &bind, &data);
        tape.value(v).at(0, 0)
    };
    let loss_value = fd_check(
        &mut store,
        &["w", "gamma"],
        &loss_at,
        |tape, bind| learnable_norm_loss(tape, bind, &data),
        1e-4,
        "learnable norm",
    )?;

    let mut model = NwModel::initial(NwVariant::LearnableNorm, 2);
    model.w = vec![0.8, 1.3];
    model.gamma = 0.4;
    let external = predictor_mse(&model, &data)?;
    if (external - loss_value).abs() > 1e-12 {
        return Err(format!(
            "learnable norm: taped loss {loss_value} differs from predictor mse {external}"
        ));
    }
    Ok(())
}

fn learnable_norm_loss(
    tape: &Tape,
    bind: &relkit::math::Bindings,
    data: &FdData,
) -> relkit::math::Value {
    let dist = tape.pairwise_sqdist_weighted(
        tape.constant(data.trial_x.clone()),
        tape.constant(data.bg_x.clone()),
        tape.square(bind.get("w")),
    );
    let scores = tape.add(
        tape.neg(dist),
        tape.mul(bind.get("gamma"), tape.constant(data.r_tb.clone())),
    );
    let weights = tape.softmax_rows(scores, None).expect("finite scores");
    let pred = tape.matmul(weights, tape.constant(bg_y_col(data)));
    tape.mean_all(tape.square(tape.sub(pred, tape.constant(data.trial_y.clone()))))
}

fn nw_fd_mlp_embed() -> Result<(), String> {
    let data = fd_data(43, 5, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mlp = MlpParams::init(2, (4, 4, 2), &mut rng);
    let mut store = ParamStore::new();
    store.insert("log_sigma", Matrix::scalar(0.2));
    store.insert("gamma", Matrix::scalar(0.5));
    store.insert("mlp_w1", mlp.w1.clone());
    store.insert("mlp_b1", mlp.b1.clone());
    store.insert("mlp_w2", mlp.w2.clone());
    store.insert("mlp_b2", mlp.b2.clone());
    store.insert("mlp_w3", mlp.w3.clone());
    store.insert("mlp_b3", mlp.b3.clone());
    let names = [
        "log_sigma", "gamma", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "mlp_w3", "mlp_b3",
    ];

    let loss_at = |s: &ParamStore| -> f64 {
        let tape = Tape::new();
        let bind = s.bind(&tape);
        let v = mlp_embed_loss(&tape, &bind, &data);
        tape.value(v).at(0, 0)
    };
    let loss_value = fd_check(
        &mut store,
        &names,
        &loss_at,
        |tape, bind| mlp_embed_loss(tape, bind, &data),
        1e-4,
        "mlp embed",
    )?;

    let mut model = NwModel::initial(NwVariant::MlpEmbed, 2);
    model.log_sigma = 0.2;
    model.gamma = 0.5;
    model.mlp = Some(mlp);
    let external = predictor_mse(&model, &data)?;
    if (external - loss_value).abs() > 1e-12 {
        return Err(format!(
            "mlp embed: taped loss {loss_value} differs from predictor mse {external}"
        ));
    }
    Ok(())
}

fn mlp_embed_loss(tape: &Tape, bind: &relkit::math::Bindings, data: &FdData) -> relkit::math::Value {
    let embed = |x: Matrix| -> relkit::math::Value {
        let mut h = tape.relu(tape.add(
            tape.matmul(tape.constant(x), bind.get("mlp_w1")),
            bind.get("mlp_b1"),
        ));
        h = tape.relu(tape.add(tape.matmul(h, bind.get("mlp_w2")), bind.get("mlp_b2")));
        tape.add(tape.matmul(h, bind.get("mlp_w3")), bind.get("mlp_b3"))
    };
    let dist = tape.pairwise_sqdist(embed(data.trial_x.clone()), embed(data.bg_x.clone()));
    let sigma = tape.exp(bind.get("log_sigma"));
    let scores = tape.add(
        tape.neg(tape.div(dist, sigma)),
        tape.mul(bind.get("gamma"), tape.constant(data.r_tb.clone())),
    );
    let weights = tape.softmax_rows(scores, None).expect("finite scores");
    let pred = tape.matmul(weights, tape.constant(bg_y_col(data)));
    tape.mean_all(tape.square(tape.sub(pred, tape.constant(data.trial_y.clone()))))
}

fn tabrel_fd() -> Result<(), String> {
    let cfg = tiny_tabrel_config();
    let n = 6;
    let x = Matrix::from_fn(n, 1, |i, _| (i as f64 * 0.7).sin());
    let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).cos()).collect();
    let r = Matrix::from_fn(n, n, |i, j| if i != j && (i + j) % 2 == 0 { 1.0 } else { 0.0 });
    let ds = RelDataset::new(x, y, r).map_err(|e| e.to_string())?;
    let split = SplitIndex::new(vec![0, 1, 2, 3], vec![4, 5], vec![], n).map_err(|e| e.to_string())?;
    let batch = build_input_matrix(&ds, &split, BatchRole::Trial, None).map_err(|e| e.to_string())?;
    let mask = build_trial_mask(n, 2, cfg.mask_scope).map_err(|e| e.to_string())?;
    let y_trial = Matrix::from_fn(2, 1, |i, _| batch.y_true[4 + i]);

    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut store = init_params(&cfg, 2, &mut rng);
    // zero-initialized pieces get informative values so their gradients
    // are exercised
    store.set("l0_s", Matrix::from_rows(&[vec![0.3, -0.2]]).expect("row"));
    store.set("head_w", Matrix::from_fn(4, 1, |i, _| 0.1 * (i as f64 + 1.0)));
    store.set("head_b", Matrix::scalar(0.05));

    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let values: Vec<Matrix> = names.iter().map(|n| store.get(n).clone()).collect();
    let loss_at = |s: &ParamStore| -> f64 {
        let tape = Tape::new();
        let bind = s.bind(&tape);
        let mut get = |name: &str| bind.get(name);
        let mut drop_rng = SmallRng::seed_from_u64(0);
        let pred = forward_on_tape(&tape, &mut get, &cfg, &batch.x_in, &batch.r, &mask, false, &mut drop_rng, None)
            .expect("forward");
        let picked = tape.gather_rows(pred, vec![4, 5]);
        let loss = tape.mean_all(tape.square(tape.sub(picked, tape.constant(y_trial.clone()))));
        tape.value(loss).at(0, 0)
    };
    let mut fd_fn = |params: &[Matrix]| -> f64 {
        let mut s = ParamStore::new();
        for (n, v) in names.iter().zip(params) {
            s.insert(n, v.clone());
        }
        loss_at(&s)
    };
    let fd = fd_grad(&mut fd_fn, &values, 1e-5);

    let tape = Tape::new();
    let bind = store.bind(&tape);
    let mut get = |name: &str| bind.get(name);
    let mut drop_rng = SmallRng::seed_from_u64(0);
    let pred = forward_on_tape(&tape, &mut get, &cfg, &batch.x_in, &batch.r, &mask, false, &mut drop_rng, None)
        .map_err(|e| e.to_string())?;
    let picked = tape.gather_rows(pred, vec![4, 5]);
    let loss = tape.mean_all(tape.square(tape.sub(picked, tape.constant(y_trial))));
    grad(&tape, loss, &bind, &mut store).map_err(|e| e.to_string())?;
    for (k, name) in names.iter().enumerate() {
        let err = max_rel_err(store.grad_of(name), &fd[k], 1e-8);
        if err > 1e-3 {
            return Err(format!("attention model: {name} gradient rel err {err:.2e} (tol 1e-3)"));
        }
    }
    Ok(())
}

fn prop_pehe_identities() -> Result<(), String> {
    let tau: Vec<f64> = vec![0.4, -1.2, 2.0, 0.0, 3.3];
    let zero = pehe(&tau, &tau).map_err(|e| e.to_string())?;
    if zero.abs() > 1e-12 {
        return Err(format!("identical effects give pehe {zero}, want 0"));
    }
    let shifted: Vec<f64> = tau.iter().map(|t| t + 1.0).collect();
    let unit = pehe(&shifted, &tau).map_err(|e| e.to_string())?;
    if (unit - 1.0).abs() > 1e-12 {
        return Err(format!("unit shift gives pehe {unit}, want 1"));
    }
    let hand = pehe(&[3.0, 4.0], &[2.0, 2.0]).map_err(|e| e.to_string())?;
    if (hand - 2.5).abs() > 1e-12 {
        return Err(format!("hand case gives pehe {hand}, want 2.5"));
    }
    Ok(())
}

// ------------------------------------------------------------ criterion 7

/// Constant additive effect: every meta-learner over the relation-aware
/// kernel recovers it almost exactly. Observational-study files are only
/// checked when present.
fn c7_treatment_effect() -> CheckResult {
    let start = Instant::now();
    let toml = r#"
seeds = [0, 1, 2]
metrics = ["pehe"]
learners = ["s", "t", "x"]

[[datasets]]
kind = "synthetic_effect"
n = 150
effect = 2.0

[[estimators]]
kind = "nw"
variant = "rel_kernel"
"#;
    let out = run_toml(toml)?;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for learner in ["s_learner", "t_learner", "x_learner"] {
        let v = mean_of(&out, &format!("nw_rel+{learner}"), "additive_effect", "pehe_validation")?;
        worst = worst.max(v);
        parts.push(format!("{learner} {v:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let mut ok = worst < 0.25 && secs < 120.0;
    let mut detail = format!(
        "validation pehe {} (all < 0.25), {secs:.1}s (budget 120s)",
        parts.join(", ")
    );

    let ihdp_dir = relkit_cli::config::resolve_data_path(Path::new("ihdp"));
    if ihdp_dir.is_dir() {
        match ihdp_check() {
            Ok((cell_ok, cell_detail)) => {
                ok = ok && cell_ok;
                detail.push_str(&format!("; {cell_detail}"));
            }
            Err(e) => {
                ok = false;
                detail.push_str(&format!("; observational check errored: {e}"));
            }
        }
    } else {
        detail.push_str("; observational cells skipped (no ihdp data directory)");
    }
    Ok((ok, detail))
}

/// Observational benchmark cells, gated loosely: the S-cell value for the
/// embedding-kernel estimator within +-50% of 3.9, and the embedding
/// kernel ahead of the fixed L2 kernel in the S column.
fn ihdp_check() -> Result<(bool, String), String> {
    let cfg = preset("table5").map_err(|e| e.to_string())?;
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let mlp_s = mean_of(&out, "nw_mlp+s_learner", "ihdp", "pehe_validation")?;
    let rel_s = mean_of(&out, "nw_rel+s_learner", "ihdp", "pehe_validation")?;
    let anchor = 3.9;
    let in_band = (mlp_s - anchor).abs() <= 0.5 * anchor;
    let ranked = mlp_s < rel_s;
    Ok((
        in_band && ranked,
        format!("ihdp S-column: nw_mlp {mlp_s:.3} (within 50% of {anchor}), nw_rel {rel_s:.3} (must exceed nw_mlp)"),
    ))
}

// ------------------------------------------------------------ criterion 8

/// Relation informativeness. With the real tables on disk both must be
/// flagged hard (p < 1e-6); without them, the diagnostic must stay quiet
/// on data whose relations carry no signal.
fn c8_relation_diagnostic() -> CheckResult {
    let life = relkit_cli::config::resolve_data_path(Path::new("life_expectancy.csv"));
    let birds = relkit_cli::config::resolve_data_path(Path::new("birds.csv"));
    if life.exists() && birds.exists() {
        let mut parts = Vec::new();
        let mut ok = true;
        for name in ["lifeexp", "birds"] {
            let cfg = preset(name).map_err(|e| e.to_string())?;
            let diags = relation_diagnostics(&cfg).map_err(|e| e.to_string())?;
            for d in diags {
                ok = ok && d.p_value < 1e-6;
                parts.push(format!("{} p={:.2e}", d.dataset, d.p_value));
            }
        }
        Ok((ok, format!("{} (all p < 1e-6)", parts.join(", "))))
    } else {
        // null calibration: iid targets and random relations should almost
        // never be flagged at the 5% level
        let mut calm = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = sym_relations(n, &mut rng, 0.3);
            let ks = ks_informativeness(&y, &r).map_err(|e| e.to_string())?;
            if ks.p_value > 0.05 {
                calm += 1;
            }
        }
        Ok((
            calm >= 90,
            format!("real tables absent; null calibration {calm}/100 quiet at p > 0.05 (need >= 90)"),
        ))
    }
}

// ------------------------------------------------------------ criterion 9

/// The same configuration run twice must produce byte-identical result
/// files, including the per-seed log.
fn c9_determinism() -> CheckResult {
    let mut cfg = preset("fig1").map_err(|e| e.to_string())?;
    cfg.seeds = vec![0, 1, 2];
    let out_a = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let out_b = run_experiment(&cfg).map_err(|e| e.to_string())?;

    let dir_a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir_b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files_a = write_all(dir_a.path(), &out_a).map_err(|e| e.to_string())?;
    let files_b = write_all(dir_b.path(), &out_b).map_err(|e| e.to_string())?;
    if files_a.len() != files_b.len() {
        return Ok((false, format!("wrote {} vs {} files", files_a.len(), files_b.len())));
    }

    let mut contents = BTreeMap::new();
    for path in &files_a {
        let name = path.file_name().expect("file name").to_string_lossy().to_string();
        contents.insert(name, std::fs::read(path).map_err(|e| e.to_string())?);
    }
    let mut mismatched = Vec::new();
    for path in &files_b {
        let name = path.file_name().expect("file name").to_string_lossy().to_string();
        let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
        match contents.get(&name) {
            Some(first) if *first == bytes => {}
            _ => mismatched.push(name),
        }
    }
    if mismatched.is_empty() {
        Ok((
            true,
            format!("{} result files byte-identical across independent reruns", files_a.len()),
        ))
    } else {
        Ok((false, format!("files differ: {}", mismatched.join(", "))))
    }
}
