//! Seeded synthetic benchmark generators.
//!
//! Every generator is a pure function of its spec: the same seed yields a
//! bitwise-identical dataset. Cluster labels drive both a vertical shift in
//! the target and the relationship matrix, so relation-aware models can
//! separate curves that plain feature-space models must blur together.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::nw::{RelDataset, SplitIndex};
use crate::stats::mix_seed;

pub const N_CLUSTERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Parabolas,
    Step,
    Linear2d,
    Square2d,
    Sin2d,
    Noisy7d,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Parabolas => "parabolas",
            Family::Step => "step",
            Family::Linear2d => "linear2d",
            Family::Square2d => "square2d",
            Family::Sin2d => "sin2d",
            Family::Noisy7d => "noisy7d",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        Ok(match s {
            "parabolas" => Family::Parabolas,
            "step" => Family::Step,
            "linear2d" => Family::Linear2d,
            "square2d" => Family::Square2d,
            "sin2d" => Family::Sin2d,
            "noisy7d" => Family::Noisy7d,
            other => return Err(Error::Config(format!("unknown family '{other}'"))),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Family::Parabolas | Family::Step => 1,
            Family::Linear2d | Family::Square2d | Family::Sin2d => 2,
            Family::Noisy7d => 7,
        }
    }

    /// Cluster shift applied per family unless the spec overrides it.
    pub fn default_cluster_scale(&self) -> f64 {
        match self {
            Family::Noisy7d => 1.0,
            _ => 0.5,
        }
    }

    pub fn default_rel_mode(&self) -> RelMode {
        match self {
            Family::Noisy7d => RelMode::RandomHalf,
            _ => RelMode::Deterministic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelMode {
    /// r_ij = 1 exactly when i and j share a cluster.
    Deterministic,
    /// Same-cluster entries are symmetric Bernoulli(1/2) draws.
    RandomHalf,
}

impl RelMode {
    pub fn name(&self) -> &'static str {
        match self {
            RelMode::Deterministic => "deterministic",
            RelMode::RandomHalf => "random_half",
        }
    }

    pub fn parse(s: &str) -> Result<RelMode> {
        Ok(match s {
            "deterministic" => RelMode::Deterministic,
            "random_half" => RelMode::RandomHalf,
            other => return Err(Error::Config(format!("unknown relation mode '{other}'"))),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub family: Family,
    pub n: usize,
    pub cluster_scale: f64,
    pub r_mode: RelMode,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(family: Family, n: usize, seed: u64) -> Self {
        SyntheticSpec {
            family,
            n,
            cluster_scale: family.default_cluster_scale(),
            r_mode: family.default_rel_mode(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Config(format!(
                "synthetic dataset needs n >= 3, got {}",
                self.n
            )));
        }
        if !self.cluster_scale.is_finite() {
            return Err(Error::Config("cluster_scale must be finite".into()));
        }
        Ok(())
    }
}

/// A generated dataset together with the cluster labels that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub data: RelDataset,
    pub clusters: Vec<usize>,
}

fn draw_points(spec: &SyntheticSpec, dim: usize) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = Matrix::zeros(spec.n, dim);
    let mut clusters = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        for j in 0..dim {
            x.set(i, j, rng.gen_range(-1.0..1.0));
        }
        clusters.push(rng.gen_range(0..N_CLUSTERS));
    }
    (x, clusters)
}

fn assemble(spec: &SyntheticSpec, x: Matrix, y: Vec<f64>, clusters: Vec<usize>) -> Result<SyntheticDataset> {
    let r = gen_rel_matrix(&clusters, spec.r_mode, mix_seed(spec.seed, 0x52));
    let data = RelDataset::new(x, y, r)?;
    Ok(SyntheticDataset { data, clusters })
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

/// One-dimensional cluster families: shifted parabolas and shifted steps.
pub fn gen_clusters_1d(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    if !matches!(spec.family, Family::Parabolas | Family::Step) {
        return Err(Error::Config(format!(
            "gen_clusters_1d expects parabolas or step, got {}",
            spec.family.name()
        )));
    }
    let (x, clusters) = draw_points(spec, 1);
    let y = (0..spec.n)
        .map(|i| {
            let xi = x.at(i, 0);
            let base = match spec.family {
                Family::Parabolas => xi * xi,
                _ => sign(xi),
            };
            base + spec.cluster_scale * clusters[i] as f64
        })
        .collect();
    assemble(spec, x, y, clusters)
}

/// Two-dimensional families: plane, half-square, and sine surfaces, each
/// with the cluster shift added.
pub fn gen_2d(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    if !matches!(spec.family, Family::Linear2d | Family::Square2d | Family::Sin2d) {
        return Err(Error::Config(format!(
            "gen_2d expects a 2-d family, got {}",
            spec.family.name()
        )));
    }
    let (x, clusters) = draw_points(spec, 2);
    let y = (0..spec.n)
        .map(|i| {
            let (x1, x2) = (x.at(i, 0), x.at(i, 1));
            let base = match spec.family {
                Family::Linear2d => x1 + 2.0 * x2,
                Family::Square2d => x1 + 0.5 * x2 * x2,
                _ => x1 + x2.sin(),
            };
            base + spec.cluster_scale * clusters[i] as f64
        })
        .collect();
    assemble(spec, x, y, clusters)
}

/// Seven features of which only 0, 1, and 3 enter the target; the rest are
/// pure noise columns.
pub fn gen_7d_noisy(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    if spec.family != Family::Noisy7d {
        return Err(Error::Config(format!(
            "gen_7d_noisy expects noisy7d, got {}",
            spec.family.name()
        )));
    }
    let (x, clusters) = draw_points(spec, 7);
    let y = (0..spec.n)
        .map(|i| {
            x.at(i, 0).cos() + x.at(i, 1).cos() + x.at(i, 3)
                + spec.cluster_scale * clusters[i] as f64
        })
        .collect();
    assemble(spec, x, y, clusters)
}

/// Family-dispatched generation.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    match spec.family {
        Family::Parabolas | Family::Step => gen_clusters_1d(spec),
        Family::Linear2d | Family::Square2d | Family::Sin2d => gen_2d(spec),
        Family::Noisy7d => gen_7d_noisy(spec),
    }
}

/// Cluster-membership relation matrix. Cross-cluster entries are always 0,
/// the diagonal is always 0, and the result is symmetric in both modes.
pub fn gen_rel_matrix(clusters: &[usize], r_mode: RelMode, seed: u64) -> Matrix {
    let n = clusters.len();
    let mut r = Matrix::zeros(n, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        for j in (i + 1)..n {
            if clusters[i] != clusters[j] {
                continue;
            }
            let v = match r_mode {
                RelMode::Deterministic => 1.0,
                RelMode::RandomHalf => {
                    if rng.gen_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            r.set(i, j, v);
            r.set(j, i, v);
        }
    }
    r
}

/// Disjoint uniformly random background/trial/validation index sets with
/// floor(n * fraction) sizes; rows left over stay unassigned. Each part is
/// returned sorted ascending.
pub fn split_dataset(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<SplitIndex> {
    let (fb, ft, fv) = fractions;
    for f in [fb, ft, fv] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("split fraction {f} outside [0, 1]")));
        }
    }
    if fb + ft + fv > 1.0 + 1e-9 {
        return Err(Error::Config(format!(
            "split fractions sum to {} > 1",
            fb + ft + fv
        )));
    }
    let sizes = [
        (n as f64 * fb).floor() as usize,
        (n as f64 * ft).floor() as usize,
        (n as f64 * fv).floor() as usize,
    ];
    if sizes[0] == 0 {
        return Err(Error::Config(format!(
            "background fraction {fb} yields no rows for n={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let take = |count: usize, from: &mut usize| {
        let mut part: Vec<usize> = order[*from..*from + count].to_vec();
        *from += count;
        part.sort_unstable();
        part
    };
    let mut cursor = 0usize;
    let background = take(sizes[0], &mut cursor);
    let trial = take(sizes[1], &mut cursor);
    let validation = take(sizes[2], &mut cursor);
    SplitIndex::new(background, trial, validation, n)
}
