use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::latent_means;
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Scalar health index: projection of latent means on their first
/// principal direction, oriented to grow towards failure, plus the
/// training curves used for retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct HealthIndexModel {
    pub center: Vec<f64>,
    pub direction: Vec<f64>,
    /// `(unit id, per-cycle index)` of every run-to-failure unit.
    pub curves: Vec<(u32, Vec<f64>)>,
    pub cap: f64,
}

impl HealthIndexModel {
    pub fn fit(params: &ModelParams, train: &[(u32, Sequence)], cap: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("health index needs training units".into()));
        }
        let means: Vec<(u32, Vec<Vec<f64>>)> =
            train.iter().map(|(id, seq)| Ok((*id, latent_means(params, seq)?))).collect::<Result<_>>()?;
        let n_z = params.spec().n_z;
        let rows: Vec<&Vec<f64>> = means.iter().flat_map(|(_, m)| m).collect();
        let n = rows.len() as f64;
        let mut center = DVector::<f64>::zeros(n_z);
        for r in &rows {
            center += DVector::from_column_slice(r);
        }
        center /= n;
        let mut cov = DMatrix::<f64>::zeros(n_z, n_z);
        for r in &rows {
            let d = DVector::from_column_slice(r) - &center;
            cov += &d * d.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.imax();
        let mut direction: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();

        let project = |dir: &[f64], z: &[f64]| -> f64 { z.iter().zip(center.iter()).zip(dir).map(|((z, c), d)| (z - c) * d).sum() };
        let drift: f64 =
            means.iter().map(|(_, m)| project(&direction, &m[m.len() - 1]) - project(&direction, &m[0])).sum();
        if drift < 0.0 {
            direction.iter_mut().for_each(|d| *d = -*d);
        }
        let curves = means
            .iter()
            .map(|(id, m)| (*id, m.iter().map(|z| project(&direction, z)).collect()))
            .collect();
        Ok(Self { center: center.as_slice().to_vec(), direction, curves, cap })
    }

    pub fn project(&self, z: &[f64]) -> f64 {
        z.iter().zip(&self.center).zip(&self.direction).map(|((z, c), d)| (z - c) * d).sum()
    }

    /// Per-cycle index of one trajectory.
    pub fn curve(&self, params: &ModelParams, seq: &Sequence) -> Result<Vec<f64>> {
        Ok(latent_means(params, seq)?.iter().map(|z| self.project(z)).collect())
    }

    /// Aligns the end of `observed` with every admissible position of every
    /// training curve, keeps the alignment with the smallest mean squared
    /// difference over the longest possible overlap, and reads off the
    /// matched unit's remaining life, clamped to `[0, cap]`.
    pub fn match_rul(&self, observed: &[f64]) -> f64 {
        let n = observed.len();
        let mut best = (f64::INFINITY, 0.0);
        for (_, curve) in &self.curves {
            let len = curve.len();
            let overlap = n.min(len);
            if overlap == 0 {
                continue;
            }
            let tail = &observed[n - overlap..];
            for end in overlap - 1..len {
                let window = &curve[end + 1 - overlap..=end];
                let d = window.iter().zip(tail).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / overlap as f64;
                if d < best.0 {
                    best = (d, (len - 1 - end) as f64);
                }
            }
        }
        best.1.clamp(0.0, self.cap)
    }
}
