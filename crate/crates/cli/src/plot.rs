//! Dense prediction curves for the one-dimensional cluster families:
//! for each cluster, the fitted model is evaluated on an x grid with
//! query relations pointing at that cluster's background rows, giving
//! the per-cluster bands that make the relational gain visible.

use relkit::datagen::{generate, split_dataset, SyntheticSpec, N_CLUSTERS};
use relkit::math::Matrix;
use relkit::nw::{nw_fit, nw_predict, RelDataset};
use relkit::stats::mix_seed;

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::runner::{SALT_DATA, SALT_FIT, SALT_SPLIT};
use crate::{HarnessError, Result};

#[derive(Clone, Debug)]
pub struct PlotPoint {
    pub estimator: String,
    pub seed: u64,
    pub cluster: usize,
    pub x: f64,
    pub y_true: f64,
    pub y_pred: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn grid(points: usize) -> Vec<f64> {
    let step = 2.0 / (points - 1) as f64;
    (0..points).map(|k| -1.0 + step * k as f64).collect()
}

fn one_d_template(spec: &DatasetSpec) -> Result<SyntheticSpec> {
    let (family, mode) = spec.parsed_family()?.ok_or_else(|| {
        HarnessError::Unsupported(format!(
            "plot data needs a synthetic dataset, got '{}'",
            spec.tag()
        ))
    })?;
    if family.dim() != 1 {
        return Err(HarnessError::Unsupported(format!(
            "plot grids are one-dimensional; '{}' has {} features",
            family.name(),
            family.dim()
        )));
    }
    let (n, cluster_scale) = match spec {
        DatasetSpec::Synthetic {
            n, cluster_scale, ..
        } => (*n, *cluster_scale),
        _ => unreachable!("parsed_family returned Some"),
    };
    let mut template = SyntheticSpec::new(family, n, 0);
    if let Some(s) = cluster_scale {
        template.cluster_scale = s;
    }
    if let Some(m) = mode {
        template.r_mode = m;
    }
    Ok(template)
}

/// Fit every configured estimator on every configured 1-d synthetic
/// dataset and evaluate it on the x grid, once per cluster and seed.
pub fn plot_points(cfg: &ExperimentConfig) -> Result<Vec<PlotPoint>> {
    cfg.validate()?;
    let xs = grid(cfg.plot_grid);
    let mut out = Vec::new();
    for dspec in &cfg.datasets {
        let template = one_d_template(dspec)?;
        for est in &cfg.estimators {
            let (variant, mut fit, zero_rel) = est.nw_parts()?.ok_or_else(|| {
                HarnessError::Unsupported(
                    "plot data supports kernel estimators only".into(),
                )
            })?;
            for &seed in &cfg.seeds {
                let mut spec = template.clone();
                spec.seed = mix_seed(seed, SALT_DATA);
                let sd = generate(&spec)
                    .map_err(|e| HarnessError::core(format!("generating {}", dspec.tag()), e))?;
                let split = split_dataset(
                    spec.n,
                    (cfg.split[0], cfg.split[1], cfg.split[2]),
                    mix_seed(seed, SALT_SPLIT),
                )
                .map_err(|e| HarnessError::core(format!("splitting {}", dspec.tag()), e))?;

                let ds = if zero_rel {
                    RelDataset::new(
                        sd.data.x().clone(),
                        sd.data.y().to_vec(),
                        Matrix::zeros(spec.n, spec.n),
                    )
                    .map_err(|e| HarnessError::core("zeroing relations", e))?
                } else {
                    sd.data.clone()
                };
                fit.seed = mix_seed(seed, SALT_FIT);
                let context = format!("{} on {}, seed {seed}", est.tag(), dspec.tag());
                let report = nw_fit(&ds, &split, variant, &fit)
                    .map_err(|e| HarnessError::core(context.clone(), e))?;

                let bg = split.background();
                let bg_ds = RelDataset::new(
                    ds.x().select_rows(bg),
                    bg.iter().map(|&i| ds.y()[i]).collect(),
                    ds.r().select(bg, bg),
                )
                .map_err(|e| HarnessError::core(context.clone(), e))?;
                let queries = Matrix::from_fn(xs.len(), 1, |i, _| xs[i]);

                for cluster in 0..N_CLUSTERS {
                    let rq = Matrix::from_fn(xs.len(), bg.len(), |_, j| {
                        if !zero_rel && sd.clusters[bg[j]] == cluster {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    let rq_opt = variant.uses_relations().then_some(&rq);
                    let preds = nw_predict(&report.model, &bg_ds, &queries, rq_opt)
                        .map_err(|e| HarnessError::core(context.clone(), e))?;
                    for (&x, &y_pred) in xs.iter().zip(&preds) {
                        let base = match template.family {
                            relkit::datagen::Family::Parabolas => x * x,
                            _ => sign(x),
                        };
                        out.push(PlotPoint {
                            estimator: est.tag(),
                            seed,
                            cluster,
                            x,
                            y_true: base + template.cluster_scale * cluster as f64,
                            y_pred,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn plot_csv(points: &[PlotPoint]) -> String {
    let mut out = String::from("estimator,seed,cluster,x,y_true,y_pred\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.estimator, p.seed, p.cluster, p.x, p.y_true, p.y_pred
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig_config(estimators: &str) -> ExperimentConfig {
        let toml = format!(
            r#"
                seeds = [0]
                metrics = ["r2"]
                plot_grid = 9

                [[datasets]]
                kind = "synthetic"
                family = "parabolas"
                n = 120

                {estimators}
            "#
        );
        ExperimentConfig::from_toml_str(&toml).unwrap()
    }

    #[test]
    fn grid_is_inclusive_and_sized() {
        let xs = grid(5);
        assert_eq!(xs, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn vanilla_predictions_ignore_the_query_cluster() {
        let cfg = fig_config(
            r#"
                [[estimators]]
                kind = "nw"
                variant = "vanilla"
                epochs = 60
            "#,
        );
        let points = plot_points(&cfg).unwrap();
        assert_eq!(points.len(), 9 * N_CLUSTERS);
        for k in 0..9 {
            let at = |c: usize| points[c * 9 + k].y_pred;
            assert_eq!(at(0).to_bits(), at(1).to_bits());
            assert_eq!(at(0).to_bits(), at(2).to_bits());
        }
    }

    #[test]
    fn relational_kernel_separates_cluster_bands() {
        let cfg = fig_config(
            r#"
                [[estimators]]
                kind = "nw"
                variant = "rel_kernel"
                epochs = 200
            "#,
        );
        let points = plot_points(&cfg).unwrap();
        let band = |c: usize| -> f64 {
            let vals: Vec<f64> = points
                .iter()
                .filter(|p| p.cluster == c)
                .map(|p| p.y_pred)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        assert!(band(1) - band(0) > 0.15, "{} vs {}", band(1), band(0));
        assert!(band(2) - band(1) > 0.15, "{} vs {}", band(2), band(1));
    }

    #[test]
    fn truth_curve_matches_the_generator_family() {
        let cfg = fig_config(
            r#"
                [[estimators]]
                kind = "nw"
                variant = "vanilla"
                epochs = 5
            "#,
        );
        for p in plot_points(&cfg).unwrap() {
            assert_eq!(p.y_true, p.x * p.x + 0.5 * p.cluster as f64);
        }
        let endpoints: Vec<f64> = plot_points(&cfg)
            .unwrap()
            .iter()
            .filter(|p| p.cluster == 0)
            .map(|p| p.x)
            .collect();
        assert_eq!(endpoints.first(), Some(&-1.0));
        assert_eq!(endpoints.last(), Some(&1.0));
    }

    #[test]
    fn non_kernel_estimators_are_rejected() {
        let cfg = fig_config(
            r#"
                [[estimators]]
                kind = "tabrel"
                epochs = 5
            "#,
        );
        match plot_points(&cfg) {
            Err(HarnessError::Unsupported(_)) => {}
            other => panic!("expected unsupported, got {other:?}"),
        }
    }

    #[test]
    fn two_dimensional_families_are_rejected() {
        let toml = r#"
            seeds = [0]
            metrics = ["r2"]

            [[datasets]]
            kind = "synthetic"
            family = "linear2d"
            n = 60

            [[estimators]]
            kind = "nw"
            variant = "vanilla"
        "#;
        let cfg = ExperimentConfig::from_toml_str(toml).unwrap();
        assert!(matches!(
            plot_points(&cfg),
            Err(HarnessError::Unsupported(_))
        ));
    }

    #[test]
    fn csv_has_header_and_full_point_count() {
        let cfg = fig_config(
            r#"
                [[estimators]]
                kind = "nw"
                variant = "vanilla"
                epochs = 5
            "#,
        );
        let points = plot_points(&cfg).unwrap();
        let text = plot_csv(&points);
        assert_eq!(text.lines().count(), 1 + points.len());
        assert!(text.starts_with("estimator,seed,cluster,x,y_true,y_pred\n"));
    }
}
