//! Quasi-static ground-truth plant and its sensors.
//!
//! The servos integrate the held rate command exactly; their encoders report
//! the angle rounded to the servo resolution when quantization is on. The
//! flexible joints are re-solved to static equilibrium after every substep.

use nalgebra::{DVector, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contact::ContactParams;
use crate::error::{Error, Result};
use crate::flex::solve_static_deflection;
use crate::kinematics::{Chain, JointState};

/// Servo resolution, 0.3 degrees.
pub const SERVO_RESOLUTION: f64 = 0.0052;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidelityOptions {
    pub servo_quantization: f64,
    pub quantization_enabled: bool,
    /// Standard deviation of the force sensor noise per axis (N).
    pub force_noise_std: f64,
    pub noise_enabled: bool,
    /// Control and measurement rate (Hz). When disabled the controller runs at
    /// every plant step.
    pub measurement_rate: f64,
    pub rate_enabled: bool,
    pub plant_dt: f64,
}

impl Default for FidelityOptions {
    fn default() -> Self {
        Self::on()
    }
}

impl FidelityOptions {
    pub fn on() -> Self {
        Self {
            servo_quantization: SERVO_RESOLUTION,
            quantization_enabled: true,
            force_noise_std: 0.004,
            noise_enabled: true,
            measurement_rate: 40.0,
            rate_enabled: true,
            plant_dt: 1e-3,
        }
    }

    pub fn off() -> Self {
        Self {
            quantization_enabled: false,
            noise_enabled: false,
            rate_enabled: false,
            ..Self::on()
        }
    }

    pub fn set_all(&mut self, enabled: bool) {
        self.quantization_enabled = enabled;
        self.noise_enabled = enabled;
        self.rate_enabled = enabled;
    }

    /// Plant substeps per control step.
    pub fn substeps(&self) -> usize {
        if self.rate_enabled {
            ((1.0 / self.measurement_rate) / self.plant_dt).round().max(1.0) as usize
        } else {
            1
        }
    }

    pub fn control_dt(&self) -> f64 {
        self.substeps() as f64 * self.plant_dt
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.plant_dt > 0.0 && self.plant_dt.is_finite()) {
            out.push(format!("fidelity.plant_dt: must be positive, got {}", self.plant_dt));
        }
        if !(self.measurement_rate > 0.0 && self.measurement_rate.is_finite()) {
            out.push(format!(
                "fidelity.measurement_rate: must be positive, got {}",
                self.measurement_rate
            ));
        } else if self.plant_dt > 1.0 / self.measurement_rate {
            out.push(format!(
                "fidelity.plant_dt: {} exceeds the measurement period {}",
                self.plant_dt,
                1.0 / self.measurement_rate
            ));
        } else {
            let ratio = 1.0 / (self.measurement_rate * self.plant_dt);
            if (ratio - ratio.round()).abs() > 1e-6 {
                out.push(format!(
                    "fidelity.plant_dt: measurement period is not a whole number of plant steps ({ratio})"
                ));
            }
        }
        if !(self.servo_quantization > 0.0 && self.servo_quantization.is_finite()) {
            out.push(format!(
                "fidelity.servo_quantization: must be positive, got {}",
                self.servo_quantization
            ));
        }
        if !(self.force_noise_std >= 0.0 && self.force_noise_std.is_finite()) {
            out.push(format!(
                "fidelity.force_noise_std: must be non-negative, got {}",
                self.force_noise_std
            ));
        }
        out
    }
}

pub fn quantize(x: f64, resolution: f64) -> f64 {
    (x / resolution).round() * resolution
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub gamma: DVector<f64>,
    pub delta: DVector<f64>,
    pub p: Vector2<f64>,
    pub alpha: f64,
    pub f_true: Vector2<f64>,
    pub contact_active: bool,
    pub t: f64,
}

impl PlantState {
    pub fn q(&self) -> Vector3<f64> {
        Vector3::new(self.p.x, self.p.y, self.alpha)
    }

    pub fn joints(&self) -> JointState {
        JointState::new(self.gamma.clone(), self.delta.clone())
    }

    /// Static equilibrium at the initial joint angles.
    pub fn at_rest(
        chain: &Chain,
        cp: Option<&ContactParams>,
        gamma0: &DVector<f64>,
    ) -> Result<Self> {
        if gamma0.len() != chain.n() {
            return Err(Error::DimensionMismatch {
                what: "initial gamma",
                expected: chain.n(),
                got: gamma0.len(),
            });
        }
        settle(chain, cp, gamma0.clone(), None, 0.0)
    }
}

fn settle(
    chain: &Chain,
    cp: Option<&ContactParams>,
    gamma: DVector<f64>,
    delta_guess: Option<&DVector<f64>>,
    t: f64,
) -> Result<PlantState> {
    let sol = solve_static_deflection(chain, cp, &gamma, delta_guess)?;
    let pose = chain.forward_kinematics(&JointState::new(gamma.clone(), sol.delta.clone()))?;
    Ok(PlantState {
        gamma,
        delta: sol.delta,
        p: pose.p,
        alpha: pose.alpha,
        f_true: sol.force,
        contact_active: sol.active,
        t,
    })
}

/// One plant substep under a held rate command.
pub fn plant_step(
    state: &PlantState,
    gamma_dot_cmd: &DVector<f64>,
    chain: &Chain,
    cp: Option<&ContactParams>,
    dt: f64,
) -> Result<PlantState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter {
            field: "dt".into(),
            reason: format!("must be positive, got {dt}"),
        });
    }
    if gamma_dot_cmd.len() != chain.n() {
        return Err(Error::DimensionMismatch {
            what: "gamma_dot command",
            expected: chain.n(),
            got: gamma_dot_cmd.len(),
        });
    }
    let gamma = &state.gamma + dt * gamma_dot_cmd;
    if !gamma.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("joint angles"));
    }
    settle(chain, cp, gamma, Some(&state.delta), state.t + dt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub gamma: DVector<f64>,
    pub delta: DVector<f64>,
    pub f: Vector2<f64>,
}

/// Encoders, deflection potentiometers and the force sensor. Owns the noise
/// stream, so one seed gives one reproducible sequence.
#[derive(Debug, Clone)]
pub struct Sensors {
    rng: ChaCha8Rng,
}

impl Sensors {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn measure(&mut self, state: &PlantState, opts: &FidelityOptions) -> Measurement {
        let mut f = state.f_true;
        if opts.noise_enabled && opts.force_noise_std > 0.0 {
            // std was validated non-negative and finite
            let normal = Normal::new(0.0, opts.force_noise_std).expect("valid noise std");
            f.x += normal.sample(&mut self.rng);
            f.y += normal.sample(&mut self.rng);
        }
        Measurement {
            gamma: if opts.quantization_enabled {
                state.gamma.map(|g| quantize(g, opts.servo_quantization))
            } else {
                state.gamma.clone()
            },
            delta: state.delta.clone(),
            f,
        }
    }
}
