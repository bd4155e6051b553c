//! The invariant suite behind the `check` subcommand.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adaptation::theta_update;
use crate::controller::{control_step, ControllerState};
use crate::error::Result;
use crate::export::write_csv;
use crate::kinematics::{Chain, ChainParams, JointState};
use crate::scenario::Scenario;
use crate::sim::{run, RunLog};

pub const BUILTIN_SCENARIOS: [&str; 3] = ["mixed", "force", "position"];

pub const JACOBIAN_REL_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Overrides shared by every CLI subcommand.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub duration: Option<f64>,
    pub fidelity: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, sc: &mut Scenario) {
        if let Some(s) = self.seed {
            sc.seed = s;
        }
        if let Some(d) = self.duration {
            sc.duration = d;
        }
        if let Some(f) = self.fidelity {
            sc.fidelity.set_all(f);
        }
    }
}

fn rel_err(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    (analytic - fd).amax() / fd.amax().max(analytic.amax()).max(1e-12)
}

/// Worst relative error of every Jacobian block and third-order slice
/// against central differences at one configuration.
pub fn jacobian_fd_error(chain: &Chain, js: &JointState) -> Result<f64> {
    let (n, m) = (chain.n(), chain.m());
    let jac = chain.jacobians(js)?;
    let mut fd_j = DMatrix::zeros(3, n + m);
    let mut fd_cg = DMatrix::zeros(2, m);
    let mut fd_djp = vec![DMatrix::zeros(2, m); n];
    let mut fd_djcg = vec![DMatrix::zeros(2, m); n];
    for c in 0..n + m {
        let shifted = |h: f64| {
            let mut s = js.clone();
            if c < n {
                s.gamma[c] += h;
            } else {
                s.delta[c - n] += h;
            }
            s
        };
        let (plus, minus) = (shifted(FD_STEP), shifted(-FD_STEP));
        let qp = chain.forward_kinematics(&plus)?.q();
        let qm = chain.forward_kinematics(&minus)?.q();
        fd_j.set_column(c, &((qp - qm) / (2.0 * FD_STEP)));
        if c >= n {
            let cp = chain.center_of_mass(&plus)?.0;
            let cm = chain.center_of_mass(&minus)?.0;
            fd_cg.set_column(c - n, &((cp - cm) / (2.0 * FD_STEP)));
        } else {
            let (_, jpp, jcp) = chain.deflection_terms(&plus)?;
            let (_, jpm, jcm) = chain.deflection_terms(&minus)?;
            fd_djp[c] = (jpp - jpm) / (2.0 * FD_STEP);
            fd_djcg[c] = (jcp - jcm) / (2.0 * FD_STEP);
        }
    }
    let mut worst = rel_err(&jac.j, &fd_j)
        .max(rel_err(&jac.jp_gamma, &fd_j.view((0, 0), (2, n)).into_owned()))
        .max(rel_err(&jac.jp_delta, &fd_j.view((0, n), (2, m)).into_owned()))
        .max(rel_err(&jac.jalpha_gamma, &fd_j.view((2, 0), (1, n)).into_owned()))
        .max(rel_err(&jac.jalpha_delta, &fd_j.view((2, n), (1, m)).into_owned()))
        .max(rel_err(&jac.jcg_delta, &fd_cg));
    for k in 0..n {
        worst = worst
            .max(rel_err(&jac.djp_delta_dgamma[k], &fd_djp[k]))
            .max(rel_err(&jac.djcg_delta_dgamma[k], &fd_djcg[k]));
    }
    Ok(worst)
}

pub fn random_joint_state(rng: &mut impl Rng, n: usize, m: usize) -> JointState {
    let gamma: Vec<f64> = (0..n).map(|_| rng.random_range(-3.1..3.1)).collect();
    let delta: Vec<f64> = (0..m).map(|_| rng.random_range(-0.2..0.2)).collect();
    JointState::from_slices(&gamma, &delta)
}

fn check_jacobians(seed: u64) -> CheckOutcome {
    let name = "Jacobians match central differences";
    let chain = match Chain::new(ChainParams::benchmark()) {
        Ok(c) => c,
        Err(e) => return CheckOutcome::new(name, false, e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let js = random_joint_state(&mut rng, chain.n(), chain.m());
        match jacobian_fd_error(&chain, &js) {
            Ok(err) => worst = worst.max(err),
            Err(e) => return CheckOutcome::new(name, false, e.to_string()),
        }
    }
    CheckOutcome::new(
        name,
        worst < JACOBIAN_REL_TOL,
        format!("worst relative error {worst:.2e} over 200 poses"),
    )
}

/// At `e = η = ξ = 0` every rate is exactly zero.
fn check_equilibrium(sc: &Scenario) -> CheckOutcome {
    let name = "zero state gives bitwise-zero rates";
    let outcome = (|| -> Result<bool> {
        let chain = Chain::new(sc.chain.clone())?;
        let js = JointState::new(sc.initial_gamma.clone(), DVector::zeros(chain.m()));
        let jac = chain.jacobians(&js)?;
        let q = chain.forward_kinematics(&js)?.q();
        let state = ControllerState::new(DVector::from_column_slice(q.as_slice()), DVector::zeros(2));
        let zero_e = DVector::zeros(3);
        let ke = DMatrix::from_diagonal_element(2, 2, 0.008);
        let out = control_step(&state, &zero_e, &DVector::zeros(2), &jac.j_gamma, &jac.jp_gamma, &ke, &sc.gains)?;
        let jfg = DMatrix::from_element(3 * chain.m(), chain.n(), 0.1);
        let theta_dot = theta_update(&jfg, &out.gamma_dot, &zero_e, &sc.gains.k_p, &jac.j_delta, &sc.adaptation.gamma_theta);
        Ok(out
            .gamma_dot
            .iter()
            .chain(&out.xi_dot)
            .chain(&out.q_r_dot)
            .chain(&theta_dot)
            .all(|v| v.to_bits() == 0))
    })();
    match outcome {
        Ok(ok) => CheckOutcome::new(name, ok, if ok { "all rates +0.0" } else { "nonzero rate" }),
        Err(e) => CheckOutcome::new(name, false, e.to_string()),
    }
}

fn csv_bytes(log: &RunLog) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(log, &mut buf)?;
    Ok(buf)
}

/// Largest one-step V increase relative to `max(V(0), 1)`.
pub fn relative_v_increase(log: &RunLog) -> f64 {
    let v0 = log.records.first().map_or(1.0, |r| r.v).max(1.0);
    crate::export::max_v_increase(&log.records) / v0
}

pub const V_SLACK: f64 = 1e-6;

fn check_scenario(name: &str, overrides: &Overrides, out: &mut Vec<CheckOutcome>) {
    let Some(mut sc) = Scenario::builtin(name) else {
        out.push(CheckOutcome::new(format!("{name}: built-in exists"), false, "unknown scenario"));
        return;
    };
    overrides.apply(&mut sc);
    let log = match run(&sc) {
        Ok(log) => {
            out.push(CheckOutcome::new(
                format!("{name}: run completes"),
                true,
                format!("{} steps", log.records.len()),
            ));
            log
        }
        Err(aborted) => {
            out.push(CheckOutcome::new(format!("{name}: run completes"), false, aborted.to_string()));
            return;
        }
    };
    for m in &log.monitors {
        let detail = match &m.first {
            Some((t, msg)) => format!("{} violations, first at t = {t:.3} s: {msg}", m.violations),
            None => "no violations".to_string(),
        };
        out.push(CheckOutcome::new(format!("{name}: {}", m.name), m.passed(), detail));
    }
    let again = run(&sc).map_err(|e| e.to_string()).and_then(|l| csv_bytes(&l).map_err(|e| e.to_string()));
    let first = csv_bytes(&log).map_err(|e| e.to_string());
    out.push(match (first, again) {
        (Ok(a), Ok(b)) => CheckOutcome::new(
            format!("{name}: identical logs for the same seed"),
            a == b,
            format!("{} CSV bytes", a.len()),
        ),
        (Err(e), _) | (_, Err(e)) => CheckOutcome::new(format!("{name}: identical logs for the same seed"), false, e),
    });
    if !sc.fidelity.noise_enabled && !sc.fidelity.quantization_enabled && !sc.fidelity.rate_enabled {
        let rel = relative_v_increase(&log);
        out.push(CheckOutcome::new(
            format!("{name}: V non-increasing"),
            rel <= V_SLACK,
            format!("largest step increase {rel:.2e} of max(V0, 1)"),
        ));
    }
}

pub fn run_suite(overrides: &Overrides) -> Vec<CheckOutcome> {
    let mut out = vec![check_jacobians(overrides.seed.unwrap_or(1))];
    if let Some(sc) = Scenario::builtin("mixed") {
        out.push(check_equilibrium(&sc));
    }
    for name in BUILTIN_SCENARIOS {
        check_scenario(name, overrides, &mut out);
    }
    out
}
