//! Dense Gaussian algebra in moment and natural-parameter form.
//!
//! A belief `N(mean, cov)` has natural parameters `lambda2 = cov^-1` and
//! `lambda1 = cov^-1 mean`. Natural parameters add under multiplication of
//! densities, which is what the EP site bookkeeping relies on. All inversions
//! go through a Cholesky factorisation and every result is symmetrised.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Returns `(a + a^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest absolute entry of `a - a^T`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax()
}

/// Positive definiteness via factorisation success.
pub fn is_positive_definite(a: &DMatrix<f64>) -> bool {
    a.is_square() && a.clone().cholesky().is_some()
}

fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    Some(symmetrize(&chol.inverse()))
}

/// Matrix square root `L` with `L L^T = a` for a symmetric positive semi-definite `a`.
///
/// Cholesky when it succeeds, otherwise an eigen-decomposition with negative
/// eigenvalues clamped to zero (needed for singular process noise).
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = a.clone().cholesky() {
        return chol.l();
    }
    let eig = symmetrize(a).symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (j, &value) in eig.eigenvalues.iter().enumerate() {
        let s = value.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    scaled
}

/// Gaussian belief in moment form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Builds a belief, symmetrising `cov` and checking positive definiteness.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: cov.nrows(),
            });
        }
        let cov = symmetrize(&cov);
        if !is_positive_definite(&cov) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self { mean, cov })
    }

    pub fn from_slices(mean: &[f64], cov_diag: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(cov_diag)),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Canonical (natural) parameters of a Gaussian.
///
/// Intermediates such as cavities and sites may carry an indefinite `lambda2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    pub lambda1: DVector<f64>,
    pub lambda2: DMatrix<f64>,
}

impl NaturalParams {
    pub fn new(lambda1: DVector<f64>, lambda2: DMatrix<f64>) -> Result<Self> {
        if lambda2.nrows() != lambda1.len() || lambda2.ncols() != lambda1.len() {
            return Err(Error::DimensionMismatch {
                expected: lambda1.len(),
                actual: lambda2.nrows(),
            });
        }
        Ok(Self {
            lambda1,
            lambda2: symmetrize(&lambda2),
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            lambda1: DVector::zeros(dim),
            lambda2: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda1.len()
    }

    pub fn is_valid(&self) -> bool {
        is_positive_definite(&self.lambda2)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            lambda1: &self.lambda1 * factor,
            lambda2: &self.lambda2 * factor,
        }
    }

    /// Max-abs entry over both parameters.
    pub fn max_abs(&self) -> f64 {
        self.lambda1.amax().max(self.lambda2.amax())
    }

    /// Frobenius norm of the concatenated parameters.
    pub fn norm(&self) -> f64 {
        (self.lambda1.norm_squared() + self.lambda2.norm_squared()).sqrt()
    }
}

pub fn to_natural(b: &GaussianBelief) -> Result<NaturalParams> {
    let lambda2 = spd_inverse(&b.cov).ok_or(Error::NotPositiveDefinite)?;
    let lambda1 = &lambda2 * &b.mean;
    Ok(NaturalParams { lambda1, lambda2 })
}

/// Fails with [`Error::InvalidCavity`] when `lambda2` is not positive definite.
pub fn to_moment(n: &NaturalParams) -> Result<GaussianBelief> {
    let cov = spd_inverse(&n.lambda2).ok_or(Error::InvalidCavity)?;
    let mean = &cov * &n.lambda1;
    Ok(GaussianBelief { mean, cov })
}

fn check_dims(a: &NaturalParams, b: &NaturalParams) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

pub fn natural_add(a: &NaturalParams, b: &NaturalParams) -> Result<NaturalParams> {
    check_dims(a, b)?;
    Ok(NaturalParams {
        lambda1: &a.lambda1 + &b.lambda1,
        lambda2: symmetrize(&(&a.lambda2 + &b.lambda2)),
    })
}

pub fn natural_sub(a: &NaturalParams, b: &NaturalParams) -> Result<NaturalParams> {
    check_dims(a, b)?;
    Ok(NaturalParams {
        lambda1: &a.lambda1 - &b.lambda1,
        lambda2: symmetrize(&(&a.lambda2 - &b.lambda2)),
    })
}

/// Equally weighted Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianBelief>,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianBelief>) -> Result<Self> {
        let first = components.first().ok_or(Error::EmptyMixture)?;
        let dim = first.dim();
        if let Some(bad) = components.iter().find(|c| c.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.dim(),
            });
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GaussianBelief] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }
}

/// First two moments of an equally weighted mixture (law of total variance).
pub fn mixture_moments(m: &GaussianMixture) -> Result<GaussianBelief> {
    moments_of(m.components().iter())
}

/// Same as [`mixture_moments`] over borrowed components.
pub fn moments_of<'a, I>(components: I) -> Result<GaussianBelief>
where
    I: Iterator<Item = &'a GaussianBelief> + Clone,
{
    let mut iter = components.clone();
    let first = iter.next().ok_or(Error::EmptyMixture)?;
    let dim = first.dim();
    let mut n = 0usize;
    let mut mean = DVector::zeros(dim);
    for c in components.clone() {
        if c.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: c.dim(),
            });
        }
        mean += &c.mean;
        n += 1;
    }
    let inv_n = 1.0 / n as f64;
    mean *= inv_n;

    let mut cov = DMatrix::zeros(dim, dim);
    for c in components {
        let dev = &c.mean - &mean;
        cov += &c.cov;
        cov.ger(1.0, &dev, &dev, 1.0);
    }
    cov *= inv_n;
    Ok(GaussianBelief {
        mean,
        cov: symmetrize(&cov),
    })
}

/// Draws `mean + L z` with `L L^T = cov` and `z` standard normal.
pub fn sample_gaussian<R: Rng + ?Sized>(b: &GaussianBelief, rng: &mut R) -> Result<DVector<f64>> {
    let chol = b.cov.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let z = DVector::from_iterator(b.dim(), (0..b.dim()).map(|_| rng.sample(StandardNormal)));
    Ok(&b.mean + chol.l() * z)
}
