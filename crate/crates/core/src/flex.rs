//! Pseudo-static joint flexibility.
//!
//! The flexible joints sit at the equilibrium `K δ = -Jp_δᵀ f + g_δ` with
//! `g_δ = Jcg_δᵀ m g0`. Differentiating it along the actuated joints with the
//! δ-dependence of the Jacobians frozen gives the linear-in-parameters rate
//!
//! ```text
//! δ̇ = K⁻¹ ((k_eᵀ, 1) ⊗ I_M) J_fg γ̇ = -Θᵀ J_fg γ̇
//! ```
//!
//! where `J_fg` stacks a normal-force block, a tangential-force block and a
//! gravity block, each `M x N`. The force blocks carry the minus sign of the
//! equilibrium so that the product reproduces the rate of the solved δ.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::contact::{contact_force, unit_projectors, ContactParams};
use crate::error::{Error, Result};
use crate::kinematics::{Chain, JacobianSet, JointState, SP};

pub const DEFLECTION_TOL: f64 = 1e-10;
pub const DEFLECTION_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct DeflectionSolution {
    pub delta: DVector<f64>,
    pub p: Vector2<f64>,
    pub force: Vector2<f64>,
    pub active: bool,
    pub iterations: usize,
}

/// Contact normal and rest point, the part of the interface the controller is
/// assumed to know.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactGeometry {
    pub n: Vector2<f64>,
    pub p_s: Vector2<f64>,
}

impl From<&ContactParams> for ContactGeometry {
    fn from(cp: &ContactParams) -> Self {
        Self { n: cp.n, p_s: cp.p_s }
    }
}

/// `Jcg_δᵀ m g0`.
pub fn gravity_torque(jcg_delta: &DMatrix<f64>, total_mass: f64, g0: &Vector2<f64>) -> DVector<f64> {
    jcg_delta.transpose() * (total_mass * g0)
}

/// How the contact force is switched on while iterating.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Activation {
    /// Full force when penetrating, none otherwise.
    Gap,
    /// A fixed fraction of the elastic force, regardless of the gap.
    Scaled(f64),
}

/// `(-Jp_δᵀ f + g_δ, p, f, active)` at `(γ, δ)`.
fn static_load(
    chain: &Chain,
    cp: Option<&ContactParams>,
    js: &JointState,
    activation: Activation,
) -> Result<(DVector<f64>, Vector2<f64>, Vector2<f64>, bool)> {
    let (p, jp_delta, jcg_delta) = chain.deflection_terms(js)?;
    let (force, active) = match (cp, activation) {
        (Some(cp), Activation::Gap) => {
            let active = cp.is_penetrating(&p);
            (contact_force(cp, &p, active), active)
        }
        (Some(cp), Activation::Scaled(lambda)) => (lambda * contact_force(cp, &p, true), lambda > 0.0),
        (None, _) => (Vector2::zeros(), false),
    };
    let g = gravity_torque(&jcg_delta, chain.total_mass(), &chain.params().g0);
    Ok((g - jp_delta.transpose() * force, p, force, active))
}

/// `‖K δ + Jp_δᵀ f - g_δ‖∞` at `(γ, δ)`, the defining-equation residual, with
/// the contact force taken from the penetration test.
pub fn static_residual(chain: &Chain, cp: Option<&ContactParams>, js: &JointState) -> Result<f64> {
    let (rhs, ..) = static_load(chain, cp, js, Activation::Gap)?;
    let k = chain.params().stiffness_matrix();
    Ok((k * &js.delta - rhs).amax())
}

/// Same residual for a given end-effector force, e.g. the one a plant state
/// carries.
pub fn force_residual(chain: &Chain, js: &JointState, force: &Vector2<f64>) -> Result<f64> {
    let (_, jp_delta, jcg_delta) = chain.deflection_terms(js)?;
    let g = gravity_torque(&jcg_delta, chain.total_mass(), &chain.params().g0);
    let k = chain.params().stiffness_matrix();
    Ok((k * &js.delta + jp_delta.transpose() * force - g).amax())
}

fn picard(
    chain: &Chain,
    cp: Option<&ContactParams>,
    gamma: &DVector<f64>,
    initial: &DVector<f64>,
    activation: Activation,
) -> Result<DeflectionSolution> {
    let k_inv: Vec<f64> = chain.params().compounds.iter().map(|c| 1.0 / c.k).collect();
    let mut js = JointState::new(gamma.clone(), initial.clone());
    let mut last_step = f64::INFINITY;
    for it in 1..=DEFLECTION_MAX_ITER {
        let (rhs, ..) = static_load(chain, cp, &js, activation)?;
        let next = DVector::from_iterator(js.delta.len(), rhs.iter().zip(&k_inv).map(|(r, ki)| r * ki));
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("deflection iterate"));
        }
        last_step = (&next - &js.delta).amax();
        js.delta = next;
        if last_step < DEFLECTION_TOL {
            let (_, p, force, active) = static_load(chain, cp, &js, activation)?;
            return Ok(DeflectionSolution {
                delta: js.delta,
                p,
                force,
                active,
                iterations: it,
            });
        }
    }
    Err(Error::DeflectionDiverged {
        iterations: DEFLECTION_MAX_ITER,
        last_step,
    })
}

/// Fixed-point iteration `δ ← K⁻¹(-Jp_δ(γ,δ)ᵀ f(p(γ,δ)) + g_δ(γ,δ))`, contact
/// activation re-evaluated at every iterate.
///
/// The tangential spring is anchored at `p_s`, so away from `p_s` the force
/// jumps when the end effector crosses the surface. If the loaded arm lifts
/// off and the unloaded arm sinks in, neither side has an equilibrium and the
/// iteration cycles. The solution is then the one that rests on the surface
/// under a fraction `λ ∈ (0, 1)` of the elastic force, found by bracketing
/// `λ` on the gap.
pub fn solve_static_deflection(
    chain: &Chain,
    cp: Option<&ContactParams>,
    gamma: &DVector<f64>,
    initial: Option<&DVector<f64>>,
) -> Result<DeflectionSolution> {
    let start = initial.cloned().unwrap_or_else(|| DVector::zeros(chain.m()));
    let (iterations, last_step) = match picard(chain, cp, gamma, &start, Activation::Gap) {
        Ok(sol) => return Ok(sol),
        Err(Error::DeflectionDiverged { iterations, last_step }) => (iterations, last_step),
        Err(e) => return Err(e),
    };
    let diverged = |_: Error| Error::DeflectionDiverged { iterations, last_step };
    let Some(c) = cp else { return Err(Error::DeflectionDiverged { iterations, last_step }) };

    let free = picard(chain, cp, gamma, &start, Activation::Scaled(0.0)).map_err(diverged)?;
    let loaded = picard(chain, cp, gamma, &free.delta, Activation::Scaled(1.0)).map_err(diverged)?;
    let (g_free, g_loaded) = (c.gap(&free.p), c.gap(&loaded.p));
    if !(g_free <= 0.0 && g_loaded > 0.0) {
        return Err(Error::DeflectionDiverged { iterations, last_step });
    }
    // keep the penetrating end, so the returned force never pulls
    let (mut lo, mut hi) = ((0.0, g_free, free), (1.0, g_loaded));
    for _ in 0..GRAZING_MAX_ITER {
        let lambda = 0.5 * (lo.0 + hi.0);
        let sol = picard(chain, cp, gamma, &lo.2.delta, Activation::Scaled(lambda))?;
        let g = c.gap(&sol.p);
        if g <= 0.0 {
            lo = (lambda, g, sol);
        } else {
            hi = (lambda, g);
        }
        if -lo.1 < GRAZING_GAP_TOL || hi.0 - lo.0 < f64::EPSILON {
            break;
        }
    }
    let mut sol = lo.2;
    sol.active = true;
    Ok(sol)
}

const GRAZING_GAP_TOL: f64 = 1e-13;
const GRAZING_MAX_ITER: usize = 80;

/// Compound force/gravity Jacobian `J_fg` (`3M x N`).
///
/// Column `k` of the force block for projector `N†` is
/// `-(∂Jp_δᵀ/∂γ_k N†(p - p_s) + Jp_δᵀ N† Jp_γ e_k)`; column `k` of the gravity
/// block is `∂Jcg_δᵀ/∂γ_k m g0`. Without a contact interface the force blocks
/// are zero.
pub fn compute_jfg(
    jac: &JacobianSet,
    p: &Vector2<f64>,
    contact: Option<&ContactGeometry>,
    total_mass: f64,
    g0: &Vector2<f64>,
) -> DMatrix<f64> {
    let n = jac.jp_gamma.ncols();
    let m = jac.jp_delta.ncols();
    let mut jfg = DMatrix::zeros(3 * m, n);

    if let Some(geo) = contact {
        let (top, perp) = unit_projectors(geo.n);
        let d = p - geo.p_s;
        let jpd_t = jac.jp_delta.transpose();
        for (block, proj) in [top, perp].iter().enumerate() {
            let pd = proj * d;
            // Jp_δᵀ N† Jp_γ, all columns at once
            let coupling = &jpd_t * (proj * jac.jp_gamma.fixed_rows::<SP>(0));
            for k in 0..n {
                let col = jac.djp_delta_dgamma[k].transpose() * pd + coupling.column(k);
                jfg.view_mut((block * m, k), (m, 1)).copy_from(&(-col));
            }
        }
    }

    let mg = total_mass * g0;
    for k in 0..n {
        let col = jac.djcg_delta_dgamma[k].transpose() * mg;
        jfg.view_mut((2 * m, k), (m, 1)).copy_from(&col);
    }
    jfg
}

/// `Θ` (`3M x M`) with `Θᵀ = [-k_top K⁻¹ | -k_perp K⁻¹ | -K⁻¹]`.
pub fn theta_from(k: &DMatrix<f64>, ke_top: f64, ke_perp: f64) -> Result<DMatrix<f64>> {
    let m = k.nrows();
    if k.ncols() != m {
        return Err(Error::DimensionMismatch {
            what: "K columns",
            expected: m,
            got: k.ncols(),
        });
    }
    let k_inv = k.clone().try_inverse().ok_or(Error::SingularStiffness)?;
    if !k_inv.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularStiffness);
    }
    let k_inv_t = k_inv.transpose();
    let mut theta = DMatrix::zeros(3 * m, m);
    for (block, scale) in [ke_top, ke_perp, 1.0].into_iter().enumerate() {
        theta
            .view_mut((block * m, 0), (m, m))
            .copy_from(&(-scale * &k_inv_t));
    }
    Ok(theta)
}

/// `Ĵ_T = J_γ - J_δ Θ̂ᵀ J_fg`.
pub fn estimated_task_jacobian(
    jac: &JacobianSet,
    theta_hat: &DMatrix<f64>,
    jfg: &DMatrix<f64>,
) -> DMatrix<f64> {
    &jac.j_gamma - &jac.j_delta * (theta_hat.transpose() * jfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::ChainParams;

    fn chain_with_gravity(g0: Vector2<f64>) -> Chain {
        let mut p = ChainParams::benchmark();
        p.g0 = g0;
        Chain::new(p).unwrap()
    }

    fn gamma(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn unloaded_springs_do_not_deflect() {
        let chain = chain_with_gravity(Vector2::zeros());
        let sol = solve_static_deflection(&chain, None, &gamma(&[0.3, -0.2, 0.1, 0.4]), None).unwrap();
        assert_eq!(sol.delta, DVector::zeros(3));
        assert!(!sol.active);
    }

    #[test]
    fn gravity_first_iterate_is_close_to_converged() {
        let chain = chain_with_gravity(Vector2::new(0.0, -9.81));
        let g = DVector::zeros(4);
        let js = JointState::new(g.clone(), DVector::zeros(3));
        let jac = chain.jacobians(&js).unwrap();
        let tau = gravity_torque(&jac.jcg_delta, chain.total_mass(), &chain.params().g0);
        let seed: Vec<f64> = tau
            .iter()
            .zip(&chain.params().compounds)
            .map(|(t, c)| t / c.k)
            .collect();
        let sol = solve_static_deflection(&chain, None, &g, None).unwrap();
        for (d, s) in sol.delta.iter().zip(&seed) {
            assert!(*s < 0.0, "gravity pulls the horizontal arm down");
            assert!(((d - s) / s).abs() < 0.05, "converged {d} vs seed {s}");
        }
    }

    #[test]
    fn returned_deflection_satisfies_equilibrium() {
        let chain = chain_with_gravity(Vector2::new(0.0, -9.81));
        let g = gamma(&[0.9, 0.5, 0.3, 0.2]);
        let p0 = chain
            .forward_kinematics(&JointState::new(g.clone(), DVector::zeros(3)))
            .unwrap()
            .p;
        let cp = ContactParams::new(Vector2::new(0.0, -1.0), p0 - Vector2::new(0.01, 0.03), 40.0, 20.0)
            .unwrap();
        let sol = solve_static_deflection(&chain, Some(&cp), &g, None).unwrap();
        assert!(sol.active);
        let js = JointState::new(g, sol.delta.clone());
        assert!(static_residual(&chain, Some(&cp), &js).unwrap() < 1e-9);
    }

    #[test]
    fn soft_joints_under_stiff_contact_diverge() {
        let mut params = ChainParams::benchmark();
        params.g0 = Vector2::zeros();
        for c in &mut params.compounds {
            c.k = 0.8;
        }
        let chain = Chain::new(params).unwrap();
        let g = gamma(&[0.9, 0.5, 0.3, 0.2]);
        let p0 = chain
            .forward_kinematics(&JointState::new(g.clone(), DVector::zeros(3)))
            .unwrap()
            .p;
        let cp = ContactParams::new(Vector2::new(0.0, -1.0), p0 - Vector2::new(0.0, 0.05), 100.0, 50.0)
            .unwrap();
        let r = solve_static_deflection(&chain, Some(&cp), &g, None);
        assert!(matches!(r, Err(Error::DeflectionDiverged { .. })), "{r:?}");
    }

    #[test]
    fn theta_gravity_only() {
        let k = DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 4.0, 5.0]));
        let theta = theta_from(&k, 0.0, 0.0).unwrap();
        assert!(theta.rows(0, 6).iter().all(|&v| v == 0.0));
        assert_eq!(theta.rows(6, 3).diagonal(), DVector::from_column_slice(&[-0.5, -0.25, -0.2]));
    }

    #[test]
    fn theta_scalar_stiffness() {
        let k = DMatrix::identity(3, 3) * 0.8;
        let theta = theta_from(&k, 0.012, 0.004).unwrap();
        for i in 0..3 {
            assert!((theta[(i, i)] + 0.012 / 0.8).abs() < 1e-16);
            assert!((theta[(3 + i, i)] + 0.004 / 0.8).abs() < 1e-16);
            assert!((theta[(6 + i, i)] + 1.0 / 0.8).abs() < 1e-15);
        }
        assert_eq!(theta[(0, 1)], 0.0);
    }

    #[test]
    fn theta_rejects_singular_stiffness() {
        let k = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 0.0, 1.0]));
        assert!(matches!(theta_from(&k, 1.0, 1.0), Err(Error::SingularStiffness)));
    }

    #[test]
    fn theta_is_affine_in_moduli() {
        let k = DMatrix::from_diagonal(&DVector::from_column_slice(&[40.0, 45.0, 50.0]));
        let base = theta_from(&k, 0.0, 0.0).unwrap();
        let one = theta_from(&k, 3.0, 1.5).unwrap();
        let scaled = theta_from(&k, 2.5 * 3.0, 2.5 * 1.5).unwrap();
        assert!(((&scaled - &base) - 2.5 * (&one - &base)).amax() < 1e-15);
    }

    #[test]
    fn zero_theta_gives_rigid_jacobian() {
        let chain = chain_with_gravity(Vector2::new(0.0, -9.81));
        let js = JointState::from_slices(&[0.3, -0.2, 0.1, 0.4], &[0.05, -0.03, 0.02]);
        let jac = chain.jacobians(&js).unwrap();
        let p = chain.forward_kinematics(&js).unwrap().p;
        let geo = ContactGeometry {
            n: Vector2::new(0.0, -1.0),
            p_s: p,
        };
        let jfg = compute_jfg(&jac, &p, Some(&geo), chain.total_mass(), &chain.params().g0);
        assert_eq!(jfg.shape(), (9, 4));
        let jt = estimated_task_jacobian(&jac, &DMatrix::zeros(9, 3), &jfg);
        assert_eq!(jt.shape(), (3, 4));
        assert_eq!(jt, jac.j_gamma);
    }

    #[test]
    fn rest_point_force_blocks_reduce_to_coupling_term() {
        let chain = chain_with_gravity(Vector2::zeros());
        let js = JointState::from_slices(&[0.7, 0.4, 0.3, 0.5], &[0.0; 3]);
        let jac = chain.jacobians(&js).unwrap();
        let p = chain.forward_kinematics(&js).unwrap().p;
        let n = Vector2::new(0.0, -1.0);
        let geo = ContactGeometry { n, p_s: p };
        let jfg = compute_jfg(&jac, &p, Some(&geo), chain.total_mass(), &Vector2::zeros());
        let (top, perp) = unit_projectors(n);
        let jpg = jac.jp_gamma.clone();
        let top_block = -(jac.jp_delta.transpose() * (top * jpg.fixed_rows::<2>(0)));
        let perp_block = -(jac.jp_delta.transpose() * (perp * jpg.fixed_rows::<2>(0)));
        assert!((jfg.rows(0, 3) - top_block).amax() < 1e-15);
        assert!((jfg.rows(3, 3) - perp_block).amax() < 1e-15);
        assert!(jfg.rows(6, 3).iter().all(|&v| v == 0.0));
    }
}
