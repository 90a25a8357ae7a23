//! Feature standardization and small shared statistics helpers.

use crate::error::{Error, Result};
use crate::math::Matrix;

/// Per-column affine rescaling fitted on a designated subset of rows
/// (the background split), then applied to any matrix with the same width.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Scaler {
    /// Column means and standard deviations over `rows` of `m`. A column
    /// with (near) zero spread gets unit scale so it maps to zero instead
    /// of blowing up.
    pub fn fit(m: &Matrix, rows: &[usize]) -> Result<Scaler> {
        if rows.is_empty() {
            return Err(Error::Config("scaler needs at least one fit row".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; m.cols()];
        for &i in rows {
            for (j, v) in m.row(i).iter().enumerate() {
                mean[j] += v;
            }
        }
        for v in mean.iter_mut() {
            *v /= n;
        }
        let mut var = vec![0.0; m.cols()];
        for &i in rows {
            for (j, v) in m.row(i).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.mean.len() {
            return Err(Error::Length {
                context: "scaler width",
                got: m.cols(),
                expected: self.mean.len(),
            });
        }
        Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            (m.at(i, j) - self.mean[j]) / self.std[j]
        }))
    }

    /// Standardize only the listed columns of `m` in place.
    pub fn transform_cols(&self, m: &mut Matrix, cols: &[usize]) {
        for i in 0..m.rows() {
            for &j in cols {
                let v = (m.at(i, j) - self.mean[j]) / self.std[j];
                m.set(i, j, v);
            }
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n-1 denominator); zero for a single value.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Derive an independent RNG seed from a base seed and a purpose tag
/// (splitmix64 finalizer), so subsystems never share a stream.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaler_uses_only_fit_rows() {
        let m = Matrix::from_rows(&[vec![0.0], vec![2.0], vec![100.0]]).unwrap();
        let s = Scaler::fit(&m, &[0, 1]).unwrap();
        assert!((s.mean()[0] - 1.0).abs() < 1e-12);
        assert!((s.std()[0] - 1.0).abs() < 1e-12);
        let t = s.transform(&m).unwrap();
        assert!((t.at(0, 0) + 1.0).abs() < 1e-12);
        assert!((t.at(2, 0) - 99.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let m = Matrix::from_rows(&[vec![5.0], vec![5.0]]).unwrap();
        let s = Scaler::fit(&m, &[0, 1]).unwrap();
        let t = s.transform(&m).unwrap();
        assert_eq!(t.at(0, 0), 0.0);
        assert_eq!(t.at(1, 0), 0.0);
    }

    #[test]
    fn sample_std_single_value_is_zero() {
        assert_eq!(sample_std(&[3.7]), 0.0);
    }

    #[test]
    fn sample_std_matches_hand_computation() {
        // values 1, 2, 3: mean 2, sample variance 1
        assert!((sample_std(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
    }
}
