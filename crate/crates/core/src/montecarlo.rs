//! Sampling-based estimators used to cross-check closed-form objectives.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{gaussian, seeded};
use crate::tensor::{cholesky, Matrix};

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: u64,
}

impl McEstimate {
    /// `|mean - reference| / std_err`; infinite when the error is zero but
    /// the means differ.
    pub fn z_score(&self, reference: f64) -> f64 {
        let diff = (self.mean - reference).abs();
        if diff == 0.0 {
            0.0
        } else if self.std_err == 0.0 {
            f64::INFINITY
        } else {
            diff / self.std_err
        }
    }
}

/// Welford accumulator.
#[derive(Debug, Clone, Default)]
pub struct RunningMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn estimate(&self) -> McEstimate {
        let var = if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        };
        McEstimate {
            mean: self.mean,
            std_err: (var / self.n.max(1) as f64).sqrt(),
            samples: self.n,
        }
    }
}

/// Row vectors `x = z L^T` with `L L^T = cov`, so `E{x^T x} = cov`.
#[derive(Debug, Clone)]
pub struct CorrelatedGaussian {
    lower: Matrix,
}

impl CorrelatedGaussian {
    pub fn new(cov: &Matrix) -> Result<Self> {
        Ok(Self {
            lower: cholesky(cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// Fills `out`, using `z` as scratch; both of length `dim`.
    pub fn sample_into(&self, rng: &mut impl Rng, z: &mut [f64], out: &mut [f64]) {
        for v in z.iter_mut() {
            *v = gaussian(rng);
        }
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.lower.row(i);
            *o = row[..=i].iter().zip(&z[..=i]).map(|(a, b)| a * b).sum();
        }
    }
}

pub(crate) fn check_samples(samples: u64) -> Result<()> {
    if samples == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    Ok(())
}

/// `E{||x delta||^2}` for `x ~ N(0, cov)`, by direct sampling.
pub fn linear_output_error_mc(delta: &Matrix, cov: &Matrix, samples: u64, seed: u64) -> Result<McEstimate> {
    check_samples(samples)?;
    if cov.rows() != delta.rows() {
        return Err(Error::ShapeMismatch {
            op: "linear_output_error_mc",
            left: cov.shape(),
            right: delta.shape(),
        });
    }
    let src = CorrelatedGaussian::new(cov)?;
    let mut rng = seeded(seed);
    let (d, n) = delta.shape();
    let (mut z, mut x, mut y) = (vec![0.0; d], vec![0.0; d], vec![0.0; n]);
    let mut acc = RunningMoments::default();
    for _ in 0..samples {
        src.sample_into(&mut rng, &mut z, &mut x);
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            for (yj, w) in y.iter_mut().zip(delta.row(i)) {
                *yj += xi * w;
            }
        }
        acc.push(y.iter().map(|v| v * v).sum());
    }
    Ok(acc.estimate())
}
