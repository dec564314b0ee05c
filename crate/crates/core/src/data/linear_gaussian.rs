use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Sequence;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `z_0 ~ N(init_mean, init_cov)`, `z_t = A z_{t-1} + N(0, diag q)`,
/// `x_t = C z_t + N(0, diag r)`. Matrices are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianSpec {
    pub n_z: usize,
    pub n_x: usize,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub init_mean: Vec<f64>,
    pub init_cov: Vec<f64>,
}

impl LinearGaussianSpec {
    pub fn validate(&self) -> Result<()> {
        let (nz, nx) = (self.n_z, self.n_x);
        if nz == 0 || nx == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        let sizes = [
            ("A", self.a.len(), nz * nz),
            ("C", self.c.len(), nx * nz),
            ("Q", self.q.len(), nz),
            ("R", self.r.len(), nx),
            ("initial mean", self.init_mean.len(), nz),
            ("initial covariance", self.init_cov.len(), nz * nz),
        ];
        for (what, got, want) in sizes {
            if got != want {
                return Err(Error::shape("linear_gaussian", format!("{what} has {got} entries, expected {want}")));
            }
        }
        if self.q.iter().chain(&self.r).any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument("noise variances must be positive".into()));
        }
        if self.init_cov().cholesky().is_none() {
            return Err(Error::InvalidArgument("initial covariance must be positive definite".into()));
        }
        Ok(())
    }

    pub fn a(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_z, self.n_z, &self.a)
    }

    pub fn c(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_x, self.n_z, &self.c)
    }

    pub fn init_cov(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_z, self.n_z, &self.init_cov)
    }

    /// Random stable instance with a standard-normal initial state: `A` has
    /// spectral norm below 0.95, `C` entries are uniform in `[-1, 1]`, and
    /// the noise variances are uniform in `[0.05, 0.5]`.
    pub fn random(rng: &mut Rng, n_z: usize, n_x: usize) -> Self {
        let mut a = DMatrix::from_fn(n_z, n_z, |_, _| rng.uniform_range(-1.0, 1.0));
        let norm = a.clone().svd(false, false).singular_values.max();
        if norm > 0.0 {
            a *= rng.uniform_range(0.3, 0.95) / norm;
        }
        let c: Vec<f64> = (0..n_x * n_z).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let q = (0..n_z).map(|_| rng.uniform_range(0.05, 0.5)).collect();
        let r = (0..n_x).map(|_| rng.uniform_range(0.05, 0.5)).collect();
        let a: Vec<f64> = (0..n_z).flat_map(|i| (0..n_z).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect();
        Self {
            n_z,
            n_x,
            a,
            c,
            q,
            r,
            init_mean: vec![0.0; n_z],
            init_cov: DMatrix::<f64>::identity(n_z, n_z).as_slice().to_vec(),
        }
    }
}

/// Draws `T` steps. Returns the latent path and the observation sequence.
pub fn gen_linear_gaussian_with_states(spec: &LinearGaussianSpec, steps: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Sequence)> {
    spec.validate()?;
    if steps == 0 {
        return Err(Error::InvalidArgument("need at least one step".into()));
    }
    let mut rng = Rng::stream(seed, 0x4C47);
    let (a, c) = (spec.a(), spec.c());
    let l0 = spec.init_cov().cholesky().expect("validated").l();
    let mut z = DVector::from_column_slice(&spec.init_mean) + &l0 * DVector::from_vec(rng.normals(spec.n_z));
    let mut zs = Vec::with_capacity(steps);
    let mut xs = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            let w = DVector::from_iterator(spec.n_z, spec.q.iter().map(|q| q.sqrt() * rng.normal()));
            z = &a * &z + w;
        }
        let v = DVector::from_iterator(spec.n_x, spec.r.iter().map(|r| r.sqrt() * rng.normal()));
        let x = &c * &z + v;
        zs.push(z.as_slice().to_vec());
        xs.push(x.as_slice().to_vec());
    }
    Ok((zs, Sequence::observations(xs)?))
}

pub fn gen_linear_gaussian(spec: &LinearGaussianSpec, steps: usize, seed: u64) -> Result<Sequence> {
    Ok(gen_linear_gaussian_with_states(spec, steps, seed)?.1)
}

/// Exact `log p(x_{1:T})` by the Kalman prediction-error decomposition.
pub fn kalman_loglik(spec: &LinearGaussianSpec, seq: &Sequence) -> Result<f64> {
    spec.validate()?;
    if seq.x_dim() != spec.n_x {
        return Err(Error::SpecMismatch(format!("observations have {} channels, model {}", seq.x_dim(), spec.n_x)));
    }
    let (a, c) = (spec.a(), spec.c());
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&spec.q));
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(&spec.r));
    let eye = DMatrix::<f64>::identity(spec.n_z, spec.n_z);
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    let mut m = DVector::from_column_slice(&spec.init_mean);
    let mut p = spec.init_cov();
    let mut ll = 0.0;
    for (t, x) in seq.x.iter().enumerate() {
        if t > 0 {
            m = &a * &m;
            p = &a * &p * a.transpose() + &q;
        }
        let s = &c * &p * c.transpose() + &r;
        let chol = s.clone().cholesky().ok_or(Error::NotPositiveDefinite(t))?;
        let innov = DVector::from_column_slice(x) - &c * &m;
        let solved = chol.solve(&innov);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        ll += -0.5 * (spec.n_x as f64 * ln_2pi + log_det + innov.dot(&solved));
        let gain = &p * c.transpose() * chol.inverse();
        m += &gain * innov;
        let ikc = &eye - &gain * &c;
        p = &ikc * &p * ikc.transpose() + &gain * &r * gain.transpose();
    }
    Ok(ll)
}
