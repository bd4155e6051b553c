//! Unified integral inverse-kinematics motion/force law.
//!
//! ```text
//! ξ̇   = -K_ξ ξ + K_I Ĵ_T K_γ (Ĵ_Tᵀ K_P e + Jp_γᵀ K̂_e η)
//! γ̇   = K_γ Ĵ_Tᵀ (K_P e + K_I ξ) + K_η Jp_γᵀ K̂_e η
//! q̇_r = Ĵ_T K_γη Jp_γᵀ K̂_e η - σ(‖η‖) K_P e
//! ```
//!
//! η is deadbanded before it enters any of the three rates, so out of contact
//! (and once the force has settled) the reference stays put and the law is a
//! plain position regulator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal gains, stored as their diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub k_p: DVector<f64>,
    pub k_i: DVector<f64>,
    pub k_xi: DVector<f64>,
    pub k_gamma: DVector<f64>,
    pub k_eta: DVector<f64>,
    pub k_gamma_eta: DVector<f64>,
    pub sigma_p: f64,
    /// Force-error deadband (N).
    pub eta_t: f64,
}

pub const DEFAULT_ETA_T: f64 = 0.03;

impl Gains {
    pub fn benchmark() -> Self {
        let k_gamma = DVector::from_vec(vec![209.9, 220.5, 241.4, 283.4]);
        let k_eta = DVector::from_element(4, 20.0);
        Self {
            k_p: DVector::from_vec(vec![0.5949, 0.5949, 0.0214]),
            k_i: DVector::from_vec(vec![0.1610, 0.1610, 0.0024]),
            k_xi: DVector::from_element(3, 0.12),
            // the cross-term cancellation in the stability argument needs the sum
            k_gamma_eta: &k_gamma + &k_eta,
            k_gamma,
            k_eta,
            sigma_p: 0.3,
            eta_t: DEFAULT_ETA_T,
        }
    }

    pub fn s(&self) -> usize {
        self.k_p.len()
    }

    pub fn n(&self) -> usize {
        self.k_gamma.len()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let s = self.s();
        let n = self.n();
        let diag = [
            ("k_p", &self.k_p, s),
            ("k_i", &self.k_i, s),
            ("k_xi", &self.k_xi, s),
            ("k_gamma", &self.k_gamma, n),
            ("k_eta", &self.k_eta, n),
            ("k_gamma_eta", &self.k_gamma_eta, n),
        ];
        for (name, d, len) in diag {
            if d.len() != len {
                out.push(format!("gains.{name}: expected {len} entries, got {}", d.len()));
            }
            if let Some((i, v)) = d.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
                out.push(format!("gains.{name}[{i}]: must be positive, got {v}"));
            }
        }
        if !(self.sigma_p > 0.0 && self.sigma_p.is_finite()) {
            out.push(format!("gains.sigma_p: must be positive, got {}", self.sigma_p));
        }
        if !(self.eta_t >= 0.0 && self.eta_t.is_finite()) {
            out.push(format!("gains.eta_t: must be non-negative, got {}", self.eta_t));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub xi: DVector<f64>,
    pub q_r: DVector<f64>,
    pub f_r: DVector<f64>,
}

impl ControllerState {
    pub fn new(q_r: DVector<f64>, f_r: DVector<f64>) -> Self {
        Self {
            xi: DVector::zeros(q_r.len()),
            q_r,
            f_r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub gamma_dot: DVector<f64>,
    pub xi_dot: DVector<f64>,
    pub q_r_dot: DVector<f64>,
    /// The deadbanded force error actually used.
    pub eta: DVector<f64>,
}

/// `σ_p ‖η‖`.
pub fn sigma(sigma_p: f64, eta: &DVector<f64>) -> f64 {
    sigma_p * eta.norm()
}

/// Zeroes η when its norm is below `eta_t`.
pub fn deadband(eta: &DVector<f64>, eta_t: f64) -> DVector<f64> {
    if eta.norm() < eta_t {
        DVector::zeros(eta.len())
    } else {
        eta.clone()
    }
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}

fn all_finite<'a>(it: impl IntoIterator<Item = &'a f64>) -> bool {
    it.into_iter().all(|v| v.is_finite())
}

/// One evaluation of the three rates. `eta_meas` is the raw `f_r - f_meas`.
pub fn control_step(
    state: &ControllerState,
    e: &DVector<f64>,
    eta_meas: &DVector<f64>,
    j_t_hat: &DMatrix<f64>,
    jp_gamma: &DMatrix<f64>,
    ke_hat: &DMatrix<f64>,
    gains: &Gains,
) -> Result<ControlOutput> {
    let s = gains.s();
    let n = gains.n();
    let sp = eta_meas.len();
    check_dim("task error", s, e.len())?;
    check_dim("integral state", s, state.xi.len())?;
    check_dim("J_T rows", s, j_t_hat.nrows())?;
    check_dim("J_T columns", n, j_t_hat.ncols())?;
    check_dim("Jp_gamma rows", sp, jp_gamma.nrows())?;
    check_dim("Jp_gamma columns", n, jp_gamma.ncols())?;
    check_dim("K_e estimate", sp, ke_hat.nrows())?;
    check_dim("K_e estimate", sp, ke_hat.ncols())?;
    if !all_finite(e.iter().chain(eta_meas.iter()).chain(state.xi.iter())) {
        return Err(Error::NonFinite("controller input"));
    }
    if !all_finite(j_t_hat.iter().chain(jp_gamma.iter()).chain(ke_hat.iter())) {
        return Err(Error::NonFinite("controller Jacobian"));
    }

    let eta = deadband(eta_meas, gains.eta_t);
    let kp_e = e.component_mul(&gains.k_p);
    let ki_xi = state.xi.component_mul(&gains.k_i);
    // force channel in joint space, shared by all three rates
    let force_joint = jp_gamma.transpose() * (ke_hat * &eta);

    let jt_t = j_t_hat.transpose();
    let pos_joint = &jt_t * &kp_e;
    let xi_drive = j_t_hat * (&pos_joint + &force_joint).component_mul(&gains.k_gamma);
    let xi_dot = xi_drive.component_mul(&gains.k_i) - state.xi.component_mul(&gains.k_xi);

    let gamma_dot = (&jt_t * (&kp_e + &ki_xi)).component_mul(&gains.k_gamma)
        + force_joint.component_mul(&gains.k_eta);

    let q_r_dot = j_t_hat * force_joint.component_mul(&gains.k_gamma_eta)
        - sigma(gains.sigma_p, &eta) * &kp_e;

    if !all_finite(gamma_dot.iter().chain(xi_dot.iter()).chain(q_r_dot.iter())) {
        return Err(Error::NonFinite("controller output"));
    }
    // x + 0.0 folds -0.0 into +0.0, so an exact equilibrium is bitwise zero
    Ok(ControlOutput {
        gamma_dot: gamma_dot.add_scalar(0.0),
        xi_dot: xi_dot.add_scalar(0.0),
        q_r_dot: q_r_dot.add_scalar(0.0),
        eta,
    })
}

/// Explicit Euler update of ξ and q_r.
pub fn integrate_controller(
    state: &ControllerState,
    out: &ControlOutput,
    dt: f64,
) -> Result<ControllerState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter {
            field: "dt".into(),
            reason: format!("must be positive, got {dt}"),
        });
    }
    Ok(ControllerState {
        xi: &state.xi + dt * &out.xi_dot,
        q_r: &state.q_r + dt * &out.q_r_dot,
        f_r: state.f_r.clone(),
    })
}
