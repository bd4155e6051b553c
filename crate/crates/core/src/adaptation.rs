//! Adaptive laws for the flexibility parameters Θ̂ and the contact moduli k̂_e.
//!
//! ```text
//! Θ̂̇   = Γ_Θ J_fg γ̇ eᵀ K_P J_δ
//! k̂̇_e† = Proj(ϖ†, ρ(k̂_e†)),   ϖ† = -Γ† ηᵀ N† Jp_γ γ̇
//! ```
//!
//! The projection keeps each modulus estimate in `[k_m, k_M]`, using the convex
//! boundary function ρ that is 1 on the bounds and negative on the inner set.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::contact::{unit_projectors, StiffnessMatrix};
use crate::error::{Error, Result};
use crate::flex::theta_from;

/// Slack for the bound check, so that a value clamped onto the boundary is
/// never reported as outside it.
const BOUND_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionBounds {
    pub k_m: f64,
    pub k_max: f64,
    pub beta: f64,
}

impl ProjectionBounds {
    pub fn benchmark() -> Self {
        Self {
            k_m: 0.0040,
            k_max: 0.0120,
            beta: 0.4,
        }
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.k_max + self.k_m)
    }

    fn half_width(&self) -> f64 {
        0.5 * (self.k_max - self.k_m)
    }

    pub fn violations(&self, field: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.k_max > self.k_m) || !self.k_m.is_finite() || !self.k_max.is_finite() {
            out.push(format!(
                "{field}: k_m ({}) must be below k_M ({})",
                self.k_m, self.k_max
            ));
        }
        if !(self.k_m > 0.0) {
            out.push(format!("{field}.k_m: must be positive, got {}", self.k_m));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            out.push(format!("{field}.beta: must lie in (0, 1), got {}", self.beta));
        }
        out
    }

    fn check(&self) -> Result<()> {
        match self.violations("bounds").into_iter().next() {
            None => Ok(()),
            Some(reason) => Err(Error::InvalidParameter {
                field: "projection bounds".into(),
                reason,
            }),
        }
    }

    pub fn contains(&self, kappa: f64) -> bool {
        kappa >= self.k_m - BOUND_TOL && kappa <= self.k_max + BOUND_TOL
    }
}

/// `ρ(κ̂) = (κ̂ - c)² / ((1-β²) h²) - β²/(1-β²)`.
pub fn rho(kappa: f64, b: &ProjectionBounds) -> Result<f64> {
    b.check()?;
    Ok(rho_unchecked(kappa, b))
}

fn rho_unchecked(kappa: f64, b: &ProjectionBounds) -> f64 {
    let beta2 = b.beta * b.beta;
    let h = b.half_width();
    let d = kappa - b.center();
    d * d / ((1.0 - beta2) * h * h) - beta2 / (1.0 - beta2)
}

pub fn rho_prime(kappa: f64, b: &ProjectionBounds) -> Result<f64> {
    b.check()?;
    let h = b.half_width();
    Ok(2.0 * (kappa - b.center()) / ((1.0 - b.beta * b.beta) * h * h))
}

/// `(1 - ρ) ϖ` inside the boundary layer when pushing outward, `ϖ` otherwise.
pub fn proj(varpi: f64, kappa: f64, b: &ProjectionBounds) -> Result<f64> {
    b.check()?;
    if !b.contains(kappa) {
        return Err(Error::OutOfProjectionBounds {
            value: kappa,
            lo: b.k_m,
            hi: b.k_max,
        });
    }
    let r = rho_unchecked(kappa, b);
    let outward = (kappa - b.center()) * varpi > 0.0;
    if r > 0.0 && outward {
        Ok((1.0 - r.min(1.0)) * varpi)
    } else {
        Ok(varpi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationParams {
    /// Diagonal of Γ_Θ, `3M` entries.
    pub gamma_theta: DVector<f64>,
    pub gamma_ke_top: f64,
    pub gamma_ke_perp: f64,
    pub bounds_top: ProjectionBounds,
    pub bounds_perp: ProjectionBounds,
}

/// The six benchmark Γ_Θ values.
pub const BENCHMARK_GAMMA_THETA: [f64; 6] = [257.1, 1929.0, 3857.0, 51.43, 385.7, 771.4];

/// Spreads six Γ_Θ values over the `3M` diagonal: the first three on the
/// normal-force rows, the last three on the tangential rows and again on the
/// gravity rows. Rows past the third in a block reuse the block's last value.
pub fn gamma_theta_from_six(values: &[f64; 6], m: usize) -> DVector<f64> {
    let pick = |offset: usize, i: usize| values[offset + i.min(2)];
    DVector::from_iterator(
        3 * m,
        (0..m)
            .map(|i| pick(0, i))
            .chain((0..m).map(|i| pick(3, i)))
            .chain((0..m).map(|i| pick(3, i))),
    )
}

impl AdaptationParams {
    pub fn benchmark(m: usize) -> Self {
        Self {
            gamma_theta: gamma_theta_from_six(&BENCHMARK_GAMMA_THETA, m),
            gamma_ke_top: 0.0040,
            gamma_ke_perp: 0.0020,
            bounds_top: ProjectionBounds::benchmark(),
            bounds_perp: ProjectionBounds::benchmark(),
        }
    }

    pub fn violations(&self, m: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.gamma_theta.len() != 3 * m {
            out.push(format!(
                "adaptation.gamma_theta: expected {} entries, got {}",
                3 * m,
                self.gamma_theta.len()
            ));
        }
        if let Some((i, v)) = self
            .gamma_theta
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            out.push(format!("adaptation.gamma_theta[{i}]: must be positive, got {v}"));
        }
        for (name, v) in [("gamma_ke_top", self.gamma_ke_top), ("gamma_ke_perp", self.gamma_ke_perp)] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("adaptation.{name}: must be positive, got {v}"));
            }
        }
        out.extend(self.bounds_top.violations("adaptation.bounds_top"));
        out.extend(self.bounds_perp.violations("adaptation.bounds_perp"));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveState {
    pub theta_hat: DMatrix<f64>,
    pub ke_hat_top: f64,
    pub ke_hat_perp: f64,
}

impl AdaptiveState {
    /// Θ̂(0) from the nominal joint stiffness with both moduli at the centre of
    /// their bounds.
    pub fn nominal(k: &DMatrix<f64>, params: &AdaptationParams) -> Result<Self> {
        let top = params.bounds_top.center();
        let perp = params.bounds_perp.center();
        Ok(Self {
            theta_hat: theta_from(k, top, perp)?,
            ke_hat_top: top,
            ke_hat_perp: perp,
        })
    }

    pub fn ke_hat(&self, n: Vector2<f64>) -> StiffnessMatrix {
        StiffnessMatrix::from_unit_normal(n, self.ke_hat_top, self.ke_hat_perp)
    }

    /// Initialisation condition `ρ(k̂(0)) ≤ 1` on both channels.
    pub fn admissible(&self, params: &AdaptationParams) -> bool {
        params.bounds_top.contains(self.ke_hat_top) && params.bounds_perp.contains(self.ke_hat_perp)
    }
}

/// Raw and projected modulus rates for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeRates {
    pub varpi_top: f64,
    pub varpi_perp: f64,
    pub top: f64,
    pub perp: f64,
}

/// `ϖ† = -Γ† ηᵀ N† Jp_γ γ̇` per channel, then projected.
pub fn ke_update(
    eta: &Vector2<f64>,
    n: &Vector2<f64>,
    jp_gamma: &DMatrix<f64>,
    gamma_dot: &DVector<f64>,
    params: &AdaptationParams,
    state: &AdaptiveState,
) -> Result<KeRates> {
    if jp_gamma.nrows() != 2 {
        return Err(Error::DimensionMismatch {
            what: "Jp_gamma rows",
            expected: 2,
            got: jp_gamma.nrows(),
        });
    }
    let v = jp_gamma * gamma_dot;
    let v = Vector2::new(v[0], v[1]);
    let (top, perp) = unit_projectors(*n);
    // + 0.0 folds -0.0, keeping the equilibrium rates bitwise zero
    let varpi_top = -params.gamma_ke_top * eta.dot(&(top * v)) + 0.0;
    let varpi_perp = -params.gamma_ke_perp * eta.dot(&(perp * v)) + 0.0;
    Ok(KeRates {
        varpi_top,
        varpi_perp,
        top: proj(varpi_top, state.ke_hat_top, &params.bounds_top)?,
        perp: proj(varpi_perp, state.ke_hat_perp, &params.bounds_perp)?,
    })
}

/// `Γ_Θ J_fg γ̇ eᵀ K_P J_δ`, a rank-one `3M x M` rate.
pub fn theta_update(
    jfg: &DMatrix<f64>,
    gamma_dot: &DVector<f64>,
    e: &DVector<f64>,
    k_p: &DVector<f64>,
    j_delta: &DMatrix<f64>,
    gamma_theta: &DVector<f64>,
) -> DMatrix<f64> {
    let left = (jfg * gamma_dot).component_mul(gamma_theta);
    let right = j_delta.transpose() * e.component_mul(k_p);
    (left * right.transpose()).add_scalar(0.0)
}

/// Euler step of the estimates. The moduli are clamped onto their bounds
/// afterwards, since a finite step inside the boundary layer can overshoot.
/// Returns the new state and the modulus rates actually applied.
pub fn step_estimates(
    state: &AdaptiveState,
    theta_dot: &DMatrix<f64>,
    rates: &KeRates,
    params: &AdaptationParams,
    dt: f64,
) -> (AdaptiveState, (f64, f64)) {
    // The applied rate is the projected one unless the clamp engaged; recovering
    // it from the difference of the states would only add roundoff.
    let clamp = |k: f64, rate: f64, b: &ProjectionBounds| {
        let next = k + dt * rate;
        if next < b.k_m || next > b.k_max {
            let c = next.clamp(b.k_m, b.k_max);
            (c, (c - k) / dt)
        } else {
            (next, rate)
        }
    };
    let (top, top_rate) = clamp(state.ke_hat_top, rates.top, &params.bounds_top);
    let (perp, perp_rate) = clamp(state.ke_hat_perp, rates.perp, &params.bounds_perp);
    let applied = (top_rate, perp_rate);
    (
        AdaptiveState {
            theta_hat: &state.theta_hat + dt * theta_dot,
            ke_hat_top: top,
            ke_hat_perp: perp,
        },
        applied,
    )
}

/// Contribution of the projection to the derivative of the parameter part of
/// the Lyapunov function, `k̃ (ϖ - applied) / Γ` with `k̃ = k - k̂`. Non-positive
/// whenever the true modulus lies in the inner set `ρ ≤ 0`.
pub fn projection_correction(k_true: f64, k_hat: f64, varpi: f64, applied: f64, gamma: f64) -> f64 {
    (k_true - k_hat) * (varpi - applied) / gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b() -> ProjectionBounds {
        ProjectionBounds::benchmark()
    }

    #[test]
    fn rho_at_center_and_bounds() {
        let c = rho(0.008, &b()).unwrap();
        assert!((c + 0.16 / 0.84).abs() < 1e-12);
        assert!((c + 0.190476).abs() < 1e-6);
        assert!((rho(0.012, &b()).unwrap() - 1.0).abs() < 1e-12);
        assert!((rho(0.004, &b()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rho_is_zero_on_inner_set_edge() {
        // ρ = 0 at |κ - c| = β h
        assert!(rho(0.008 + 0.4 * 0.004, &b()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn degenerate_bounds_rejected() {
        let bad = ProjectionBounds {
            k_m: 0.012,
            k_max: 0.004,
            beta: 0.4,
        };
        assert!(rho(0.008, &bad).is_err());
        assert!(bad.violations("x").iter().any(|v| v.contains("k_M")));
    }

    #[test]
    fn projection_examples() {
        assert_eq!(proj(0.3, 0.008, &b()).unwrap(), 0.3);
        assert_eq!(proj(0.3, 0.012, &b()).unwrap(), 0.0);
        assert_eq!(proj(-0.3, 0.012, &b()).unwrap(), -0.3);
        assert_eq!(proj(-0.3, 0.004, &b()).unwrap(), 0.0);
        assert!(matches!(
            proj(0.1, 0.013, &b()),
            Err(Error::OutOfProjectionBounds { .. })
        ));
    }

    #[test]
    fn benchmark_gamma_theta_layout() {
        let g = gamma_theta_from_six(&BENCHMARK_GAMMA_THETA, 3);
        assert_eq!(
            g.as_slice(),
            &[257.1, 1929.0, 3857.0, 51.43, 385.7, 771.4, 51.43, 385.7, 771.4]
        );
    }

    #[test]
    fn nominal_state_is_admissible() {
        let params = AdaptationParams::benchmark(3);
        let k = DMatrix::from_diagonal_element(3, 3, 45.0);
        let st = AdaptiveState::nominal(&k, &params).unwrap();
        assert!(st.admissible(&params));
        assert!(rho(st.ke_hat_top, &params.bounds_top).unwrap() <= 1.0);
        assert!((st.theta_hat[(6, 0)] + 1.0 / 45.0).abs() < 1e-15);
        assert!(params.violations(3).is_empty());
    }

    #[test]
    fn ke_rates_vanish_without_error_or_motion() {
        let params = AdaptationParams::benchmark(3);
        let st = AdaptiveState::nominal(&DMatrix::identity(3, 3), &params).unwrap();
        let jp = DMatrix::from_row_slice(2, 4, &[0.1, 0.2, 0.3, 0.4, -0.2, 0.1, 0.0, 0.3]);
        let n = Vector2::new(0.0, -1.0);
        let r = ke_update(&Vector2::zeros(), &n, &jp, &DVector::from_element(4, 1.0), &params, &st).unwrap();
        assert_eq!((r.top, r.perp), (0.0, 0.0));
        let r = ke_update(&Vector2::new(1.0, 2.0), &n, &jp, &DVector::zeros(4), &params, &st).unwrap();
        assert_eq!((r.top, r.perp), (0.0, 0.0));
    }

    #[test]
    fn ke_rate_scalar_oracle() {
        let params = AdaptationParams::benchmark(3);
        let st = AdaptiveState::nominal(&DMatrix::identity(3, 3), &params).unwrap();
        let jp = DMatrix::from_row_slice(2, 4, &[0.1, 0.2, 0.3, 0.4, -0.2, 0.1, 0.0, 0.3]);
        let gd = DVector::from_vec(vec![0.5, -0.2, 0.1, 0.3]);
        let eta = Vector2::new(0.7, -0.4);
        let r = ke_update(&eta, &Vector2::new(-1.0, 0.0), &jp, &gd, &params, &st).unwrap();
        let vx = 0.1 * 0.5 + 0.2 * -0.2 + 0.3 * 0.1 + 0.4 * 0.3;
        let vy = -0.2 * 0.5 + 0.1 * -0.2 + 0.0 * 0.1 + 0.3 * 0.3;
        assert!((r.varpi_top - (-0.0040 * 0.7 * vx)).abs() < 1e-16);
        assert!((r.varpi_perp - (-0.0020 * -0.4 * vy)).abs() < 1e-16);
        // centre of the bounds, so nothing is projected
        assert_eq!(r.top, r.varpi_top);
    }

    #[test]
    fn theta_rate_vanishes_with_zero_error_or_motion() {
        let jfg = DMatrix::from_fn(9, 4, |i, j| (i as f64 - j as f64) * 0.1);
        let jd = DMatrix::from_fn(3, 3, |i, j| 0.1 + (i * j) as f64 * 0.05);
        let kp = DVector::from_vec(vec![0.5949, 0.5949, 0.0214]);
        let g = gamma_theta_from_six(&BENCHMARK_GAMMA_THETA, 3);
        let gd = DVector::from_element(4, 0.3);
        let e = DVector::from_vec(vec![0.01, -0.02, 0.1]);
        assert!(theta_update(&jfg, &gd, &DVector::zeros(3), &kp, &jd, &g).iter().all(|v| *v == 0.0));
        assert!(theta_update(&jfg, &DVector::zeros(4), &e, &kp, &jd, &g).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn clamped_step_stays_in_bounds() {
        let params = AdaptationParams::benchmark(3);
        let mut st = AdaptiveState::nominal(&DMatrix::identity(3, 3), &params).unwrap();
        st.ke_hat_top = 0.0119;
        // ρ close to but below 1 here, so the scaled rate is small and positive
        let rates = KeRates {
            varpi_top: 10.0,
            varpi_perp: -10.0,
            top: proj(10.0, 0.0119, &params.bounds_top).unwrap(),
            perp: -10.0,
        };
        let (next, applied) = step_estimates(&st, &DMatrix::zeros(9, 3), &rates, &params, 0.025);
        assert_eq!(next.ke_hat_top, 0.012);
        assert_eq!(next.ke_hat_perp, 0.004);
        assert!(applied.0 <= rates.top && applied.1 >= rates.perp);
    }

    proptest! {
        #[test]
        fn rho_symmetric_about_center(x in 0.0f64..0.004) {
            let lo = rho(0.008 - x, &b()).unwrap();
            let hi = rho(0.008 + x, &b()).unwrap();
            prop_assert!((lo - hi).abs() < 1e-12);
        }

        #[test]
        fn rho_convex(a in 0.004f64..0.012, c in 0.004f64..0.012, t in 0.0f64..1.0) {
            let mid = rho(t * a + (1.0 - t) * c, &b()).unwrap();
            let chord = t * rho(a, &b()).unwrap() + (1.0 - t) * rho(c, &b()).unwrap();
            prop_assert!(mid <= chord + 1e-12);
        }

        #[test]
        fn rho_prime_matches_difference(k in 0.0041f64..0.0119) {
            let h = 1e-7;
            let fd = (rho(k + h, &b()).unwrap() - rho(k - h, &b()).unwrap()) / (2.0 * h);
            prop_assert!((fd - rho_prime(k, &b()).unwrap()).abs() < 1e-4 * fd.abs().max(1.0));
        }

        #[test]
        fn projection_never_helps_the_wrong_way(
            k_hat in 0.004f64..=0.012,
            k_true in 0.0064f64..=0.0096,
            varpi in -1.0f64..1.0,
        ) {
            let p = proj(varpi, k_hat, &b()).unwrap();
            // (κ - κ̂)(Proj - ϖ) ≥ 0 for truths in the inner set
            prop_assert!((k_true - k_hat) * (p - varpi) >= -1e-18);
            prop_assert!(projection_correction(k_true, k_hat, varpi, p, 0.004) <= 1e-15);
        }

        #[test]
        fn projection_is_continuous(k_hat in 0.004f64..0.012, varpi in -1.0f64..1.0) {
            let dk = 1e-9;
            let a = proj(varpi, k_hat, &b()).unwrap();
            let c = proj(varpi, (k_hat + dk).min(0.012), &b()).unwrap();
            prop_assert!((a - c).abs() < 1e-5 * varpi.abs().max(1e-12) + 1e-12);
        }

        #[test]
        fn estimate_never_leaves_bounds(
            start in 0.004f64..=0.012,
            pushes in proptest::collection::vec(-5.0f64..5.0, 1..200),
        ) {
            let params = AdaptationParams::benchmark(3);
            let mut st = AdaptiveState::nominal(&DMatrix::identity(3, 3), &params).unwrap();
            st.ke_hat_top = start;
            for w in pushes {
                let r = KeRates { varpi_top: w, varpi_perp: 0.0, top: proj(w, st.ke_hat_top, &params.bounds_top).unwrap(), perp: 0.0 };
                st = step_estimates(&st, &DMatrix::zeros(9, 3), &r, &params, 0.025).0;
                prop_assert!(params.bounds_top.contains(st.ke_hat_top));
            }
        }

        #[test]
        fn theta_rate_has_rank_at_most_one(
            vals in proptest::collection::vec(-1.0f64..1.0, 36 + 9 + 4 + 3),
        ) {
            let jfg = DMatrix::from_column_slice(9, 4, &vals[0..36]);
            let jd = DMatrix::from_column_slice(3, 3, &vals[36..45]);
            let gd = DVector::from_column_slice(&vals[45..49]);
            let e = DVector::from_column_slice(&vals[49..52]);
            let kp = DVector::from_vec(vec![0.5949, 0.5949, 0.0214]);
            let g = gamma_theta_from_six(&BENCHMARK_GAMMA_THETA, 3);
            let rate = theta_update(&jfg, &gd, &e, &kp, &jd, &g);
            let sv = rate.singular_values();
            let top = sv.max();
            let mut sorted: Vec<f64> = sv.iter().copied().collect();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assert!(sorted[1] <= 1e-12 * top.max(1e-300) + 1e-300);
        }
    }
}
