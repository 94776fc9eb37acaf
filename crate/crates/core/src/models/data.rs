use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{svd, Matrix, RngStream};

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Isotropic Gaussian classes around fixed centers.
///
/// With `input_dim >= num_classes` the centers are the vertices of a unit
/// simplex (`e_c`) under a random rotation drawn from the seed; otherwise they
/// sit evenly on a unit circle in a random plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
}

impl GaussianMixture {
    pub fn new(num_classes: usize, input_dim: usize, spread: f64, rng: &mut RngStream) -> Result<Self> {
        if num_classes == 0 || input_dim == 0 {
            return Err(Error::input("mixture needs at least one class and one dimension"));
        }
        if !(spread >= 0.0 && spread.is_finite()) {
            return Err(Error::input(format!("spread must be nonnegative, got {spread}")));
        }
        let gaussian = Matrix::from_fn(input_dim, input_dim, |_, _| rng.normal());
        let basis = svd(&gaussian)?.u;
        let centers = if input_dim >= num_classes {
            (0..num_classes).map(|c| basis.column(c)).collect()
        } else if input_dim == 1 {
            (0..num_classes)
                .map(|c| vec![-1.0 + 2.0 * c as f64 / (num_classes - 1).max(1) as f64])
                .collect()
        } else {
            let phase = rng.uniform() * std::f64::consts::TAU;
            (0..num_classes)
                .map(|c| {
                    let angle = phase + std::f64::consts::TAU * c as f64 / num_classes as f64;
                    (0..input_dim)
                        .map(|k| angle.cos() * basis[(k, 0)] + angle.sin() * basis[(k, 1)])
                        .collect()
                })
                .collect()
        };
        Ok(GaussianMixture { centers, spread })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    /// `points_per_class` rows per class, classes interleaved row by row.
    pub fn sample(&self, points_per_class: usize, rng: &mut RngStream) -> Result<Dataset> {
        if points_per_class == 0 {
            return Err(Error::input("points_per_class must be at least 1"));
        }
        let c = self.num_classes();
        let d = self.input_dim();
        let mut features = Matrix::zeros(points_per_class * c, d);
        let mut labels = Vec::with_capacity(points_per_class * c);
        for p in 0..points_per_class {
            for (class, center) in self.centers.iter().enumerate() {
                let row = features.row_mut(p * c + class);
                for (x, mu) in row.iter_mut().zip(center) {
                    *x = mu + self.spread * rng.normal();
                }
                labels.push(class);
            }
        }
        Dataset::new(features, labels, c)
    }
}

/// Samples a balanced Gaussian-mixture dataset; centers and points both come
/// from `rng`.
pub fn make_gaussian_mixture(
    num_classes: usize,
    points_per_class: usize,
    input_dim: usize,
    spread: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    GaussianMixture::new(num_classes, input_dim, spread, rng)?.sample(points_per_class, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_mixture() {
        let d = make_gaussian_mixture(2, 1, 3, 0.5, &mut RngStream::new(1)).unwrap();
        assert_eq!(d.len(), 2);
        let mut labels = d.labels.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 1]);
    }

    #[test]
    fn zero_spread_collapses_to_centers() {
        let mut rng = RngStream::new(2);
        let mix = GaussianMixture::new(3, 4, 0.0, &mut rng).unwrap();
        let d = mix.sample(5, &mut rng).unwrap();
        for (row, &y) in d.features.iter_rows().zip(&d.labels) {
            assert_eq!(row, &mix.centers[y][..]);
        }
    }

    #[test]
    fn circle_centers_in_low_dimension() {
        let mix = GaussianMixture::new(5, 2, 0.1, &mut RngStream::new(3)).unwrap();
        for c in &mix.centers {
            let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn labels_are_balanced_and_validated() {
        let d = make_gaussian_mixture(4, 10, 6, 0.3, &mut RngStream::new(4)).unwrap();
        for c in 0..4 {
            assert_eq!(d.labels.iter().filter(|&&y| y == c).count(), 10);
        }
        assert!(Dataset::new(Matrix::zeros(2, 1), vec![0, 3], 2).is_err());
        assert!(Dataset::new(Matrix::zeros(2, 1), vec![0], 2).is_err());
    }
}
