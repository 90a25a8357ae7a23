//! Nadaraya-Watson regression with relationship-aware kernels.
//!
//! Five kernel variants share one prediction pipeline. With squared
//! euclidean distance d2 and query-to-background relation r:
//!
//! * vanilla:        exp(-d2 / sigma)
//! * rel kernel:     exp(-d2 / sigma + gamma * r)
//! * rel features:   exp(-(d2 + omega) / sigma), omega comparing relation rows
//! * learnable norm: exp(-sum_k w_k^2 dx_k^2 + gamma * r)
//! * mlp embed:      exp(-d2(g(x_s), g(x_i)) / sigma + gamma * r), g a small MLP
//!
//! Weights are the row softmax of the scores, so each prediction is a convex
//! combination of background responses. sigma is carried as log(sigma), and
//! the initial parameter values (log sigma = 0, gamma = 0, w = 1) make every
//! variant start at the same place the vanilla kernel does.

mod fit;
mod predict;

pub use fit::{nw_fit, NwFitConfig, NwFitReport};
pub use predict::{
    kernel_weights, nw_predict, nw_predict_learnable_norm, nw_predict_masked, nw_predict_mlp,
    nw_predict_rel, nw_predict_rel_features, nw_predict_vanilla, rel_feature_penalty,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::stats::Scaler;

const SYMMETRY_TOL: f64 = 1e-12;

/// A tabular dataset with a symmetric pairwise relation matrix.
#[derive(Clone, Debug)]
pub struct RelDataset {
    x: Matrix,
    y: Vec<f64>,
    r: Matrix,
}

impl RelDataset {
    pub fn new(x: Matrix, y: Vec<f64>, r: Matrix) -> Result<Self> {
        let n = x.rows();
        if y.len() != n {
            return Err(Error::Length {
                context: "response vector",
                got: y.len(),
                expected: n,
            });
        }
        if r.shape() != (n, n) {
            return Err(Error::Dataset(format!(
                "relation matrix is {}x{}, expected {n}x{n}",
                r.rows(),
                r.cols()
            )));
        }
        if n == 0 {
            return Err(Error::Dataset("dataset has no rows".into()));
        }
        if !x.is_finite() || !r.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("dataset contains non-finite values".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (r.at(i, j) - r.at(j, i)).abs() > SYMMETRY_TOL {
                    return Err(Error::Dataset(format!(
                        "relation matrix asymmetric at ({i}, {j}): {} vs {}",
                        r.at(i, j),
                        r.at(j, i)
                    )));
                }
            }
        }
        Ok(RelDataset { x, y, r })
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

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    /// Sub-dataset over `rows` (features, responses, and the corresponding
    /// principal block of the relation matrix).
    pub fn restrict(&self, rows: &[usize]) -> Result<RelDataset> {
        for &i in rows {
            if i >= self.n() {
                return Err(Error::Dataset(format!(
                    "row index {i} out of range for dataset of {}",
                    self.n()
                )));
            }
        }
        RelDataset::new(
            self.x.select_rows(rows),
            rows.iter().map(|&i| self.y[i]).collect(),
            self.r.select(rows, rows),
        )
    }

    pub fn y_rows(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&i| self.y[i]).collect()
    }

    pub fn into_parts(self) -> (Matrix, Vec<f64>, Matrix) {
        (self.x, self.y, self.r)
    }
}

/// Disjoint background / trial / validation row indices. Order within each
/// part is meaningful (it fixes batch layouts downstream) and preserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndex {
    background: Vec<usize>,
    trial: Vec<usize>,
    validation: Vec<usize>,
}

impl SplitIndex {
    pub fn new(
        background: Vec<usize>,
        trial: Vec<usize>,
        validation: Vec<usize>,
        n: usize,
    ) -> Result<Self> {
        if background.is_empty() {
            return Err(Error::Config("background split is empty".into()));
        }
        let mut seen = vec![false; n];
        for (part, idx) in [
            ("background", &background),
            ("trial", &trial),
            ("validation", &validation),
        ] {
            for &i in idx.iter() {
                if i >= n {
                    return Err(Error::Config(format!(
                        "{part} index {i} out of range for {n} rows"
                    )));
                }
                if seen[i] {
                    return Err(Error::Config(format!(
                        "row {i} assigned to more than one split part"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(SplitIndex {
            background,
            trial,
            validation,
        })
    }

    pub fn background(&self) -> &[usize] {
        &self.background
    }

    pub fn trial(&self) -> &[usize] {
        &self.trial
    }

    pub fn validation(&self) -> &[usize] {
        &self.validation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NwVariant {
    Vanilla,
    RelKernel,
    RelFeatures,
    LearnableNorm,
    MlpEmbed,
}

impl NwVariant {
    pub fn name(&self) -> &'static str {
        match self {
            NwVariant::Vanilla => "nw_vanilla",
            NwVariant::RelKernel => "nw_rel",
            NwVariant::RelFeatures => "nw_rel_features",
            NwVariant::LearnableNorm => "nw_learnable_norm",
            NwVariant::MlpEmbed => "nw_mlp",
        }
    }

    pub fn uses_relations(&self) -> bool {
        !matches!(self, NwVariant::Vanilla)
    }
}

/// Three affine layers with ReLU after the first two; maps raw features to
/// the embedding space the kernel distance is computed in.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
}

impl MlpParams {
    pub fn init<R: Rng>(d_in: usize, dims: (usize, usize, usize), rng: &mut R) -> Self {
        let (h1, h2, out) = dims;
        let glorot = |rng: &mut R, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-a..a))
        };
        MlpParams {
            w1: glorot(rng, d_in, h1),
            b1: Matrix::zeros(1, h1),
            w2: glorot(rng, h1, h2),
            b2: Matrix::zeros(1, h2),
            w3: glorot(rng, h2, out),
            b3: Matrix::zeros(1, out),
        }
    }

    /// Deterministic (eval-mode) forward pass.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        let affine = |h: &Matrix, w: &Matrix, b: &Matrix| -> Result<Matrix> {
            let mut out = h.matmul(w)?;
            for i in 0..out.rows() {
                for j in 0..out.cols() {
                    out.set(i, j, out.at(i, j) + b.at(0, j));
                }
            }
            Ok(out)
        };
        let h1 = affine(x, &self.w1, &self.b1)?.map(|v| v.max(0.0));
        let h2 = affine(&h1, &self.w2, &self.b2)?.map(|v| v.max(0.0));
        affine(&h2, &self.w3, &self.b3)
    }
}

/// A fitted (or explicitly constructed) kernel regression model. The scaler,
/// when present, is applied to background and query features before any
/// distance is computed; fits store the background-split statistics here.
#[derive(Clone, Debug)]
pub struct NwModel {
    pub variant: NwVariant,
    pub log_sigma: f64,
    pub gamma: f64,
    pub w: Vec<f64>,
    pub mlp: Option<MlpParams>,
    pub scaler: Option<Scaler>,
}

impl NwModel {
    /// Model at the shared initial point: sigma = 1, gamma = 0, w = 1.
    pub fn initial(variant: NwVariant, dim: usize) -> Self {
        NwModel {
            variant,
            log_sigma: 0.0,
            gamma: 0.0,
            w: vec![1.0; dim],
            mlp: None,
            scaler: None,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_r(n: usize) -> Matrix {
        Matrix::zeros(n, n)
    }

    #[test]
    fn dataset_validates_lengths() {
        let x = Matrix::zeros(3, 2);
        let r = tiny_r(3);
        assert!(RelDataset::new(x.clone(), vec![0.0; 2], r.clone()).is_err());
        assert!(RelDataset::new(x, vec![0.0; 3], r).is_ok());
    }

    #[test]
    fn dataset_rejects_asymmetric_relations() {
        let x = Matrix::zeros(2, 1);
        let mut r = tiny_r(2);
        r.set(0, 1, 1.0);
        assert!(matches!(
            RelDataset::new(x, vec![0.0; 2], r),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn dataset_rejects_non_finite() {
        let x = Matrix::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(RelDataset::new(x, vec![0.0], tiny_r(1)).is_err());
    }

    #[test]
    fn split_rejects_overlap_and_range() {
        assert!(SplitIndex::new(vec![0], vec![0], vec![], 3).is_err());
        assert!(SplitIndex::new(vec![0], vec![5], vec![], 3).is_err());
        assert!(SplitIndex::new(vec![], vec![0], vec![], 3).is_err());
        let s = SplitIndex::new(vec![0, 1], vec![2], vec![], 3).unwrap();
        assert_eq!(s.background(), &[0, 1]);
    }

    #[test]
    fn restrict_takes_the_principal_block() {
        let x = Matrix::from_fn(4, 1, |i, _| i as f64);
        let r = Matrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { (i + j) as f64 });
        let ds = RelDataset::new(x, vec![0.0, 1.0, 2.0, 3.0], r).unwrap();
        let sub = ds.restrict(&[1, 3]).unwrap();
        assert_eq!(sub.n(), 2);
        assert_eq!(sub.y(), &[1.0, 3.0]);
        assert_eq!(sub.r().at(0, 1), 4.0);
    }

    #[test]
    fn initial_model_is_the_vanilla_starting_point() {
        let m = NwModel::initial(NwVariant::RelKernel, 3);
        assert_eq!(m.sigma(), 1.0);
        assert_eq!(m.gamma, 0.0);
        assert_eq!(m.w, vec![1.0; 3]);
    }
}
