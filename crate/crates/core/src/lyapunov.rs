//! Closed-loop matrices and the Lyapunov certificate along simulated runs.
//!
//! With `x = col(ξ, e, η)` and `ē = K_P e` the closed loop reads
//! `ẋ = Â x + B̃ γ̇`, where Â is built from the estimated Jacobian and moduli and
//! B̃ γ̇ collects the parameter-error terms. The certificate evaluates
//!
//! ```text
//! V = ½‖x‖²_𝒦 + ½ Tr(Θ̃ᵀ Γ_Θ⁻¹ Θ̃) + ½ Σ k̃†² / Γ†,   𝒦 = diag(I, K_P, I)
//! ```
//!
//! and the analytic bound on V̇ as a sum of weighted squares, so it is exactly
//! non-positive. Both need the true parameters, so this module is an analysis
//! surface for simulation only.

use nalgebra::{DMatrix, DVector};

use crate::adaptation::AdaptationParams;
use crate::controller::{sigma, Gains};
use crate::kinematics::RankMargins;

/// Â for the current estimates. Block sizes are `S, S, S_p`.
///
/// The e-row force block uses `K_γη - K_η`, which is `K_γ` for the default
/// gains and makes the cross terms of `𝒦Â + Âᵀ𝒦` cancel.
pub fn assemble_closed_loop(
    j_t_hat: &DMatrix<f64>,
    jp_gamma: &DMatrix<f64>,
    ke_hat: &DMatrix<f64>,
    gains: &Gains,
    sigma_val: f64,
) -> DMatrix<f64> {
    let s = j_t_hat.nrows();
    let sp = jp_gamma.nrows();
    let kg = DMatrix::from_diagonal(&gains.k_gamma);
    let ke = DMatrix::from_diagonal(&gains.k_eta);
    let kge = DMatrix::from_diagonal(&(&gains.k_gamma_eta - &gains.k_eta));
    let kp = DMatrix::from_diagonal(&gains.k_p);
    let ki = DMatrix::from_diagonal(&gains.k_i);
    let kxi = DMatrix::from_diagonal(&gains.k_xi);

    let jt_t = j_t_hat.transpose();
    let jp_t = jp_gamma.transpose();
    let cal_jt = j_t_hat * &kg * &jt_t; // 𝒥̂_T
    let cal_jtg = j_t_hat * &kg * &jp_t; // 𝒥̂_Tγ
    let cal_jg = jp_gamma * &ke * &jp_t; // 𝒥_γ
    let sig = DMatrix::<f64>::identity(s, s) * sigma_val;

    let mut a = DMatrix::zeros(2 * s + sp, 2 * s + sp);
    let mut put = |r: usize, c: usize, block: DMatrix<f64>| {
        a.view_mut((r, c), block.shape()).copy_from(&block);
    };
    put(0, 0, -&kxi);
    put(0, s, &ki * &cal_jt * &kp);
    put(0, 2 * s, &ki * &cal_jtg * ke_hat);
    put(s, 0, -(&cal_jt * &ki));
    put(s, s, -((&cal_jt + sig) * &kp));
    put(s, 2 * s, j_t_hat * &kge * &jp_t * ke_hat);
    put(2 * s, 0, -(ke_hat * cal_jtg.transpose() * &ki));
    put(2 * s, s, -(ke_hat * cal_jtg.transpose() * &kp));
    put(2 * s, 2 * s, -(ke_hat * &cal_jg * ke_hat));
    a
}

/// `B̃ γ̇`: the e-row picks up `J_δ Θ̃ᵀ J_fg γ̇` and the η-row `-K̃_e Jp_γ γ̇`.
pub fn mismatch_rate(
    j_delta: &DMatrix<f64>,
    theta_tilde: &DMatrix<f64>,
    jfg: &DMatrix<f64>,
    ke_tilde: &DMatrix<f64>,
    jp_gamma: &DMatrix<f64>,
    gamma_dot: &DVector<f64>,
) -> DVector<f64> {
    let s = j_delta.nrows();
    let sp = jp_gamma.nrows();
    let mut out = DVector::zeros(2 * s + sp);
    out.rows_mut(s, s)
        .copy_from(&(j_delta * theta_tilde.transpose() * (jfg * gamma_dot)));
    out.rows_mut(2 * s, sp)
        .copy_from(&(-(ke_tilde * (jp_gamma * gamma_dot))));
    out
}

pub fn stack_state(xi: &DVector<f64>, e: &DVector<f64>, eta: &DVector<f64>) -> DVector<f64> {
    let mut x = DVector::zeros(xi.len() + e.len() + eta.len());
    x.rows_mut(0, xi.len()).copy_from(xi);
    x.rows_mut(xi.len(), e.len()).copy_from(e);
    x.rows_mut(xi.len() + e.len(), eta.len()).copy_from(eta);
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub v: f64,
    /// Parameter part of V (Θ̃ and k̃ terms).
    pub v_param: f64,
    pub vdot_bound: f64,
    pub x: DVector<f64>,
    pub rank_margins: RankMargins,
}

/// Parameter errors, true minus estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterError {
    pub theta: DMatrix<f64>,
    pub ke_top: f64,
    pub ke_perp: f64,
}

pub fn lyapunov_value(
    xi: &DVector<f64>,
    e: &DVector<f64>,
    eta: &DVector<f64>,
    err: &ParameterError,
    gains: &Gains,
    adapt: &AdaptationParams,
) -> (f64, f64) {
    let v_x = 0.5 * (xi.norm_squared() + e.component_mul(&gains.k_p).dot(e) + eta.norm_squared());
    let v_theta: f64 = err
        .theta
        .row_iter()
        .zip(adapt.gamma_theta.iter())
        .map(|(row, g)| row.norm_squared() / g)
        .sum::<f64>()
        * 0.5;
    let v_ke = 0.5
        * (err.ke_top * err.ke_top / adapt.gamma_ke_top
            + err.ke_perp * err.ke_perp / adapt.gamma_ke_perp);
    (v_x + v_theta + v_ke, v_theta + v_ke)
}

/// `-ξᵀK_ξξ - Σ K_γj (Ĵ_Tᵀē)_j² - σ|ē|² - Σ K_ηj (Jp_γᵀK̂_eη)_j²`.
pub fn vdot_bound(
    xi: &DVector<f64>,
    e: &DVector<f64>,
    eta: &DVector<f64>,
    j_t_hat: &DMatrix<f64>,
    jp_gamma: &DMatrix<f64>,
    ke_hat: &DMatrix<f64>,
    gains: &Gains,
) -> f64 {
    let e_bar = e.component_mul(&gains.k_p);
    let weighted = |w: &DVector<f64>, v: &DVector<f64>| -> f64 {
        w.iter().zip(v.iter()).map(|(w, v)| w * v * v).sum()
    };
    let t_xi = weighted(&gains.k_xi, xi);
    let t_e = weighted(&gains.k_gamma, &(j_t_hat.transpose() * &e_bar));
    let t_sigma = sigma(gains.sigma_p, eta) * e_bar.norm_squared();
    let t_eta = weighted(&gains.k_eta, &(jp_gamma.transpose() * (ke_hat * eta)));
    -(t_xi + t_e + t_sigma + t_eta)
}

#[allow(clippy::too_many_arguments)]
pub fn certify(
    xi: &DVector<f64>,
    e: &DVector<f64>,
    eta: &DVector<f64>,
    err: &ParameterError,
    j_t_hat: &DMatrix<f64>,
    jp_gamma: &DMatrix<f64>,
    ke_hat: &DMatrix<f64>,
    gains: &Gains,
    adapt: &AdaptationParams,
    rank_margins: RankMargins,
) -> Certificate {
    let (v, v_param) = lyapunov_value(xi, e, eta, err, gains, adapt);
    Certificate {
        v,
        v_param,
        vdot_bound: vdot_bound(xi, e, eta, j_t_hat, jp_gamma, ke_hat, gains),
        x: stack_state(xi, e, eta),
        rank_margins,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, Gains) {
        let jt = DMatrix::from_row_slice(
            3,
            4,
            &[-0.30, -0.22, -0.12, -0.05, 0.25, 0.20, 0.14, 0.09, 1.0, 1.0, 1.0, 1.0],
        );
        let jp = DMatrix::from_row_slice(2, 4, &[-0.28, -0.2, -0.1, -0.04, 0.26, 0.21, 0.13, 0.1]);
        let ke = DMatrix::from_row_slice(2, 2, &[0.006, 0.001, 0.001, 0.009]);
        (jt, jp, ke, Gains::benchmark())
    }

    fn zero_err() -> ParameterError {
        ParameterError {
            theta: DMatrix::zeros(9, 3),
            ke_top: 0.0,
            ke_perp: 0.0,
        }
    }

    #[test]
    fn eta_block_is_symmetric_negative_semidefinite() {
        let (jt, jp, ke, g) = setup();
        let a = assemble_closed_loop(&jt, &jp, &ke, &g, 0.2);
        let blk = a.view((6, 6), (2, 2)).into_owned();
        assert!((&blk - blk.transpose()).amax() < 1e-15);
        let eig = blk.symmetric_eigenvalues();
        assert!(eig.iter().all(|v| *v <= 1e-15));
    }

    #[test]
    fn weighted_cross_blocks_cancel() {
        let (jt, jp, ke, g) = setup();
        let a = assemble_closed_loop(&jt, &jp, &ke, &g, 0.2);
        let mut w = DVector::from_element(8, 1.0);
        w.rows_mut(3, 3).copy_from(&g.k_p);
        let kcal = DMatrix::from_diagonal(&w);
        let sym = &kcal * &a + a.transpose() * &kcal;
        let ranges = [(0, 3), (3, 3), (6, 2)];
        for (i, &(ri, ni)) in ranges.iter().enumerate() {
            for (j, &(rj, nj)) in ranges.iter().enumerate() {
                if i != j {
                    let blk = sym.view((ri, rj), (ni, nj));
                    assert!(blk.amax() < 1e-14, "block ({i},{j}) = {blk}");
                }
            }
        }
    }

    #[test]
    fn model_matches_control_law() {
        // ẋ from the controller rates, with exact parameters, equals Â x
        use crate::controller::{control_step, ControllerState};
        let (jt, jp, ke, mut g) = setup();
        g.eta_t = 0.0;
        let xi = DVector::from_vec(vec![0.01, -0.02, 0.03]);
        let e = DVector::from_vec(vec![0.02, -0.01, 0.05]);
        let eta = DVector::from_vec(vec![0.4, -0.3]);
        let st = ControllerState {
            xi: xi.clone(),
            q_r: DVector::zeros(3),
            f_r: DVector::zeros(2),
        };
        let out = control_step(&st, &e, &eta, &jt, &jp, &ke, &g).unwrap();
        // q̇ = Ĵ_T γ̇ and ḟ = K̂_e Jp_γ γ̇ in the estimated model
        let e_dot = &out.q_r_dot - &jt * &out.gamma_dot;
        let eta_dot = -(&ke * (&jp * &out.gamma_dot));
        let x_dot = stack_state(&out.xi_dot, &e_dot, &eta_dot);
        let a = assemble_closed_loop(&jt, &jp, &ke, &g, sigma(g.sigma_p, &eta));
        let model = &a * stack_state(&xi, &e, &eta);
        assert!((x_dot - model).amax() < 1e-13);
    }

    #[test]
    fn zero_state_zero_value() {
        let (jt, jp, ke, g) = setup();
        let adapt = AdaptationParams::benchmark(3);
        let z3 = DVector::zeros(3);
        let z2 = DVector::zeros(2);
        let (v, _) = lyapunov_value(&z3, &z3, &z2, &zero_err(), &g, &adapt);
        assert_eq!(v, 0.0);
        assert_eq!(vdot_bound(&z3, &z3, &z2, &jt, &jp, &ke, &g), 0.0);
    }

    proptest! {
        #[test]
        fn value_is_quadratic(vals in proptest::collection::vec(-1.0f64..1.0, 8 + 27 + 2)) {
            let g = Gains::benchmark();
            let adapt = AdaptationParams::benchmark(3);
            let xi = DVector::from_column_slice(&vals[0..3]);
            let e = DVector::from_column_slice(&vals[3..6]);
            let eta = DVector::from_column_slice(&vals[6..8]);
            let err = ParameterError {
                theta: DMatrix::from_column_slice(9, 3, &vals[8..35]),
                ke_top: vals[35],
                ke_perp: vals[36],
            };
            let err2 = ParameterError {
                theta: 2.0 * &err.theta,
                ke_top: 2.0 * err.ke_top,
                ke_perp: 2.0 * err.ke_perp,
            };
            let (v, _) = lyapunov_value(&xi, &e, &eta, &err, &g, &adapt);
            let (v2, _) = lyapunov_value(&(2.0 * &xi), &(2.0 * &e), &(2.0 * &eta), &err2, &g, &adapt);
            prop_assert!(v >= 0.0);
            prop_assert!((v2 - 4.0 * v).abs() <= 1e-12 * v.max(1.0));
        }

        #[test]
        fn bound_never_positive(vals in proptest::collection::vec(-1.0f64..1.0, 8)) {
            let (jt, jp, ke, g) = setup();
            let b = vdot_bound(
                &DVector::from_column_slice(&vals[0..3]),
                &DVector::from_column_slice(&vals[3..6]),
                &DVector::from_column_slice(&vals[6..8]),
                &jt, &jp, &ke, &g,
            );
            prop_assert!(b <= 0.0);
        }

        #[test]
        fn bound_matches_quadratic_form(vals in proptest::collection::vec(-1.0f64..1.0, 8)) {
            // with exact parameters V̇ = xᵀ𝒦Âx, which equals the bound
            let (jt, jp, ke, g) = setup();
            let xi = DVector::from_column_slice(&vals[0..3]);
            let e = DVector::from_column_slice(&vals[3..6]);
            let eta = DVector::from_column_slice(&vals[6..8]);
            let a = assemble_closed_loop(&jt, &jp, &ke, &g, sigma(g.sigma_p, &eta));
            let x = stack_state(&xi, &e, &eta);
            let mut w = DVector::from_element(8, 1.0);
            w.rows_mut(3, 3).copy_from(&g.k_p);
            let vdot = x.component_mul(&w).dot(&(&a * &x));
            let bound = vdot_bound(&xi, &e, &eta, &jt, &jp, &ke, &g);
            prop_assert!((vdot - bound).abs() < 1e-10 * bound.abs().max(1e-3));
        }
    }
}
