#![allow(dead_code)]

use flexarm::contact::ContactParams;
use flexarm::export::write_csv;
use flexarm::flex::gravity_torque;
use flexarm::kinematics::{Chain, ChainParams, JointState};
use flexarm::sim::RunLog;
use nalgebra::{DMatrix, DVector, Vector2};
use sha2::{Digest, Sha256};

pub fn benchmark_chain() -> Chain {
    Chain::new(ChainParams::benchmark()).unwrap()
}

/// Joint angles and links in chain order, written out by hand for the
/// compound topology: (γ_i, l_i), (δ_i, L_i) per compound, then (γ_N, l_ee).
fn angle_link_sequence(p: &ChainParams, gamma: &[f64], delta: &[f64]) -> Vec<(f64, f64, f64, f64)> {
    let mut seq = Vec::new();
    for (i, c) in p.compounds.iter().enumerate() {
        seq.push((gamma[i], c.l, c.l_cg, c.m));
        seq.push((delta[i], c.big_l, c.big_l_cg, c.big_m));
    }
    seq.push((gamma[p.compounds.len()], p.ee.l_ee, p.ee.l_cg_ee, p.ee.m_ee));
    seq
}

/// End-effector pose from the cumulative-angle sum.
pub fn pose_by_sum(p: &ChainParams, gamma: &[f64], delta: &[f64]) -> (Vector2<f64>, f64) {
    let mut phi = 0.0;
    let (mut x, mut y) = (0.0, 0.0);
    for (angle, len, _, _) in angle_link_sequence(p, gamma, delta) {
        phi += angle;
        x += len * phi.cos();
        y += len * phi.sin();
    }
    (Vector2::new(x, y), phi)
}

/// Centre of mass by summing every link's CG.
pub fn cg_by_sum(p: &ChainParams, gamma: &[f64], delta: &[f64]) -> Vector2<f64> {
    let mut phi = 0.0;
    let mut base = Vector2::zeros();
    let mut acc = Vector2::zeros();
    let mut mass = 0.0;
    for (angle, len, cg, m) in angle_link_sequence(p, gamma, delta) {
        phi += angle;
        let u = Vector2::new(phi.cos(), phi.sin());
        acc += m * (base + cg * u);
        mass += m;
        base += len * u;
    }
    acc / mass
}

pub fn rel_err(analytic: &DMatrix<f64>, oracle: &DMatrix<f64>) -> f64 {
    (analytic - oracle).amax() / oracle.amax().max(analytic.amax()).max(1e-12)
}

pub fn rel_err_vec(analytic: &DVector<f64>, oracle: &DVector<f64>) -> f64 {
    (analytic - oracle).norm() / oracle.norm().max(analytic.norm()).max(1e-300)
}

/// Central differences of `f` along every coordinate of `(γ, δ)`.
pub fn central_diff(
    js: &JointState,
    h: f64,
    rows: usize,
    f: impl Fn(&JointState) -> DVector<f64>,
) -> DMatrix<f64> {
    let (n, m) = (js.gamma.len(), js.delta.len());
    let mut out = DMatrix::zeros(rows, n + m);
    for c in 0..n + m {
        let mut plus = js.clone();
        let mut minus = js.clone();
        if c < n {
            plus.gamma[c] += h;
            minus.gamma[c] -= h;
        } else {
            plus.delta[c - n] += h;
            minus.delta[c - n] -= h;
        }
        out.set_column(c, &((f(&plus) - f(&minus)) / (2.0 * h)));
    }
    out
}

/// Pseudo-static deflection right-hand side `K⁻¹(-Jp_δᵀ f + g_δ)` at a fixed
/// `(γ, δ)`, i.e. with the Jacobians' dependence on δ frozen.
pub fn frozen_deflection_map(chain: &Chain, cp: Option<&ContactParams>, js: &JointState) -> DVector<f64> {
    let (p, jp_delta, jcg_delta) = chain.deflection_terms(js).unwrap();
    let f = match cp {
        Some(c) => c.stiffness().ke * (p - c.p_s),
        None => Vector2::zeros(),
    };
    let g = gravity_torque(&jcg_delta, chain.total_mass(), &chain.params().g0);
    let k = chain.params().stiffness_matrix();
    k.try_inverse().unwrap() * (g - jp_delta.transpose() * f)
}

pub fn csv_digest(log: &RunLog) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(log, &mut buf).unwrap();
    Sha256::digest(&buf).to_vec()
}

/// `∂/∂δ` of [`frozen_deflection_map`], the feedback of the deflection onto
/// its own load that the linear-in-parameters rate leaves out.
pub fn deflection_feedback(chain: &Chain, cp: Option<&ContactParams>, js: &JointState) -> DMatrix<f64> {
    let m = js.delta.len();
    let h = 1e-6;
    let mut out = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut plus = js.clone();
        let mut minus = js.clone();
        plus.delta[j] += h;
        minus.delta[j] -= h;
        let col = (frozen_deflection_map(chain, cp, &plus) - frozen_deflection_map(chain, cp, &minus)) / (2.0 * h);
        out.set_column(j, &col);
    }
    out
}

/// Rate of the solved deflection: the frozen rate pushed through
/// `(I - ∂M/∂δ)⁻¹`.
pub fn full_deflection_rate(
    chain: &Chain,
    cp: Option<&ContactParams>,
    js: &JointState,
    frozen_rate: &DVector<f64>,
) -> DVector<f64> {
    let m = js.delta.len();
    let a = DMatrix::identity(m, m) - deflection_feedback(chain, cp, js);
    a.lu().solve(frozen_rate).unwrap()
}
