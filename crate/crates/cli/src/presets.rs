//! Canned experiment configurations for the benchmark grids reported in
//! the project README. Each preset is authored as TOML and parsed through
//! the normal config path, so presets can never drift from the schema.

use crate::config::ExperimentConfig;
use crate::{HarnessError, Result};

const PRESET_NAMES: &[&str] = &[
    "fig1",
    "table1",
    "table2",
    "table3_n300",
    "table3_n1000",
    "table4",
    "table5",
    "lifeexp",
    "birds",
];

pub fn preset_names() -> &'static [&'static str] {
    PRESET_NAMES
}

fn seed_list(count: usize) -> String {
    let seeds: Vec<String> = (0..count as u64).map(|s| s.to_string()).collect();
    format!("[{}]", seeds.join(", "))
}

/// Shifted-parabola and shifted-step grids; `relations` switches between
/// exact cluster membership and the thinned random variant.
fn cluster_1d_toml(relations: Option<&str>) -> String {
    let rel_line = match relations {
        Some(mode) => format!("relations = \"{mode}\"\n"),
        None => String::new(),
    };
    let mut out = format!(
        r#"
seeds = {seeds}
metrics = ["r2"]
"#,
        seeds = seed_list(30)
    );
    for family in ["parabolas", "step"] {
        out.push_str(&format!(
            r#"
[[datasets]]
kind = "synthetic"
family = "{family}"
n = 300
{rel_line}"#
        ));
    }
    out.push_str(
        r#"
[[estimators]]
kind = "nw"
variant = "vanilla"

[[estimators]]
kind = "nw"
variant = "rel_features"

[[estimators]]
kind = "nw"
variant = "rel_kernel"

[[estimators]]
kind = "tabrel"
epochs = 600
patience = 120
"#,
    );
    out
}

fn two_d_toml(n: usize) -> String {
    let mut out = format!(
        r#"
seeds = {seeds}
metrics = ["r2"]
"#,
        seeds = seed_list(30)
    );
    for family in ["linear2d", "square2d", "sin2d"] {
        out.push_str(&format!(
            r#"
[[datasets]]
kind = "synthetic"
family = "{family}"
n = {n}
"#
        ));
    }
    out.push_str(
        r#"
[[estimators]]
kind = "nw"
variant = "vanilla"

[[estimators]]
kind = "nw"
variant = "learnable_norm"
zero_relations = true

[[estimators]]
kind = "nw"
variant = "rel_features"

[[estimators]]
kind = "nw"
variant = "rel_kernel"

[[estimators]]
kind = "nw"
variant = "learnable_norm"

[[estimators]]
kind = "nw"
variant = "mlp_embed"

[[estimators]]
kind = "tabrel"
epochs = 600
patience = 120
"#,
    );
    out
}

fn noisy_7d_toml() -> String {
    format!(
        r#"
seeds = {seeds}
metrics = ["r2"]

[[datasets]]
kind = "synthetic"
family = "noisy7d"
n = 300

[[estimators]]
kind = "nw"
variant = "vanilla"

[[estimators]]
kind = "nw"
variant = "rel_features"

[[estimators]]
kind = "nw"
variant = "rel_kernel"

[[estimators]]
kind = "nw"
variant = "learnable_norm"

[[estimators]]
kind = "nw"
variant = "mlp_embed"

[[estimators]]
kind = "tabrel"
epochs = 600
patience = 120
"#,
        seeds = seed_list(30)
    )
}

fn ihdp_toml() -> String {
    r#"
seeds = [0]
metrics = ["pehe"]
learners = ["s", "t", "x"]

[[datasets]]
kind = "ihdp"
dir = "ihdp"

[[estimators]]
kind = "nw"
variant = "vanilla"

[[estimators]]
kind = "nw"
variant = "rel_kernel"

[[estimators]]
kind = "nw"
variant = "learnable_norm"

[[estimators]]
kind = "nw"
variant = "mlp_embed"

[[estimators]]
kind = "tabrel"
epochs = 400
patience = 80
"#
    .to_string()
}

fn fig1_toml() -> String {
    format!(
        r#"
seeds = {seeds}
metrics = ["r2"]
plot_grid = 201

[[datasets]]
kind = "synthetic"
family = "parabolas"
n = 300

[[estimators]]
kind = "nw"
variant = "vanilla"

[[estimators]]
kind = "nw"
variant = "rel_kernel"
"#,
        seeds = seed_list(10)
    )
}

/// Country-level panel: five immunization and health covariates, life
/// expectancy target, land borders as the relation graph, and a
/// country-level holdout so no country leaks across splits.
fn lifeexp_toml() -> String {
    format!(
        r#"
seeds = {seeds}
metrics = ["r2", "mse"]

[[datasets]]
kind = "table"
name = "lifeexp"
path = "life_expectancy.csv"
key_col = "Country"
feature_cols = ["Hepatitis B", "Polio", "Diphtheria", "HIV/AIDS", "BMI"]
target_col = "Life expectancy"
key_split = [30, 30]

[datasets.relations]
kind = "pair_list"
path = "country_borders.txt"

[[estimators]]
kind = "nw"
variant = "vanilla"

[[estimators]]
kind = "nw"
variant = "rel_features"

[[estimators]]
kind = "nw"
variant = "rel_kernel"
"#,
        seeds = seed_list(30)
    )
}

/// Species table: log-scale body mass and breeding range predicting
/// log-scale genetic diversity, with shared taxonomic order as relations.
fn birds_toml() -> String {
    format!(
        r#"
seeds = {seeds}
metrics = ["r2", "mse"]

[[datasets]]
kind = "table"
name = "birds"
path = "birds.csv"
key_col = "Species"
feature_cols = ["Body_mass", "Breeding_range_size"]
target_col = "Genetic_diversity"
preprocess = ["log"]
log_target = true

[datasets.relations]
kind = "taxonomy"
path = "birds_taxonomy.csv"
key_col = "Species"
level_cols = ["Order", "Family", "Genus"]
level = "order"

[[estimators]]
kind = "nw"
variant = "vanilla"

[[estimators]]
kind = "nw"
variant = "rel_features"

[[estimators]]
kind = "nw"
variant = "rel_kernel"
"#,
        seeds = seed_list(30)
    )
}

pub fn preset_toml(name: &str) -> Result<String> {
    let text = match name {
        "fig1" => fig1_toml(),
        "table1" => cluster_1d_toml(None),
        "table2" => cluster_1d_toml(Some("random_half")),
        "table3_n300" => two_d_toml(300),
        "table3_n1000" => two_d_toml(1000),
        "table4" => noisy_7d_toml(),
        "table5" => ihdp_toml(),
        "lifeexp" => lifeexp_toml(),
        "birds" => birds_toml(),
        other => return Err(HarnessError::UnknownPreset(other.to_string())),
    };
    Ok(text.trim_start().to_string())
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml_str(&preset_toml(name)?)
}
