//! Elastic normal + tangential contact model.
//!
//! `f = K_e (p - p_s)` with `K_e = k_top N_top + k_perp N_perp`, where `N_top`
//! projects onto the outward normal and `N_perp` onto the tangent plane. `f` is
//! the force the end-effector exerts on the environment; under compression it
//! points along `-n`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactParams {
    /// Unit outward normal of the interface.
    pub n: Vector2<f64>,
    /// Contact point at rest (m).
    pub p_s: Vector2<f64>,
    /// Normal elastic modulus (N/m).
    pub ke_top: f64,
    /// Tangential elastic modulus (N/m).
    pub ke_perp: f64,
}

impl ContactParams {
    pub fn new(n: Vector2<f64>, p_s: Vector2<f64>, ke_top: f64, ke_perp: f64) -> Result<Self> {
        let n = unit_normal(n)?;
        check_modulus("ke_top", ke_top)?;
        check_modulus("ke_perp", ke_perp)?;
        Ok(Self {
            n,
            p_s,
            ke_top,
            ke_perp,
        })
    }

    pub fn stiffness(&self) -> StiffnessMatrix {
        StiffnessMatrix::from_unit_normal(self.n, self.ke_top, self.ke_perp)
    }

    /// Signed normal gap `n^T (p - p_s)`; non-positive means penetration.
    pub fn gap(&self, p: &Vector2<f64>) -> f64 {
        self.n.dot(&(p - self.p_s))
    }

    pub fn is_penetrating(&self, p: &Vector2<f64>) -> bool {
        self.gap(p) <= 0.0
    }
}

fn check_modulus(field: &str, k: f64) -> Result<()> {
    if k > 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            field: field.into(),
            reason: format!("elastic modulus must be positive, got {k}"),
        })
    }
}

fn unit_normal(n: Vector2<f64>) -> Result<Vector2<f64>> {
    let norm = n.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroNormal);
    }
    if (norm - 1.0).abs() <= UNIT_TOL {
        Ok(n)
    } else {
        Ok(n / norm)
    }
}

/// `(N_top, N_perp)` for a (possibly non-unit) normal.
pub fn projectors(n: Vector2<f64>) -> Result<(Matrix2<f64>, Matrix2<f64>)> {
    let n = unit_normal(n)?;
    Ok(unit_projectors(n))
}

pub(crate) fn unit_projectors(n: Vector2<f64>) -> (Matrix2<f64>, Matrix2<f64>) {
    let top = n * n.transpose();
    (top, Matrix2::identity() - top)
}

/// `K_e = k_top N_top + k_perp N_perp`. Serves both the true interface and the
/// controller's estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiffnessMatrix {
    pub ke: Matrix2<f64>,
    pub k_top: f64,
    pub k_perp: f64,
}

impl StiffnessMatrix {
    pub fn new(n: Vector2<f64>, k_top: f64, k_perp: f64) -> Result<Self> {
        check_modulus("k_top", k_top)?;
        check_modulus("k_perp", k_perp)?;
        Ok(Self::from_unit_normal(unit_normal(n)?, k_top, k_perp))
    }

    pub(crate) fn from_unit_normal(n: Vector2<f64>, k_top: f64, k_perp: f64) -> Self {
        let (top, perp) = unit_projectors(n);
        Self {
            ke: k_top * top + k_perp * perp,
            k_top,
            k_perp,
        }
    }

    pub fn det(&self) -> f64 {
        self.ke.determinant()
    }

    /// `k_perp^(SP-1) * k_top`, the closed form of the determinant.
    pub fn det_closed_form(&self) -> f64 {
        self.k_perp * self.k_top
    }
}

/// Elastic force when `active`, zero otherwise.
pub fn contact_force(cp: &ContactParams, p: &Vector2<f64>, active: bool) -> Vector2<f64> {
    if active {
        cp.stiffness().ke * (p - cp.p_s)
    } else {
        Vector2::zeros()
    }
}

/// `K_e Jp_gamma gamma_dot`, the force rate with deflection effects neglected.
pub fn force_rate(
    ke: &Matrix2<f64>,
    jp_gamma: &DMatrix<f64>,
    gamma_dot: &DVector<f64>,
) -> Vector2<f64> {
    let v = jp_gamma * gamma_dot;
    ke * Vector2::new(v[0], v[1])
}
