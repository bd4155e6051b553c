//! Scenario configuration.
//!
//! Files are JSON with lengths in cm and masses in g, as on the rig's data
//! sheet; everything is SI once loaded. Every field is optional and falls back
//! to the benchmark arm, gains and the mixed approach/press/retreat mission, so
//! an empty file (or `{}`) is the default scenario.

use std::path::Path;

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::adaptation::{gamma_theta_from_six, AdaptationParams, ProjectionBounds, BENCHMARK_GAMMA_THETA};
use crate::contact::ContactParams;
use crate::controller::Gains;
use crate::error::{Error, Result};
use crate::kinematics::{ChainParams, CompoundJoint, EndEffectorLink};
use crate::plant::FidelityOptions;

const CM: f64 = 0.01;
const G: f64 = 0.001;
const DEG: f64 = std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Task-space waypoint `(x, y, α)` in m and rad.
    Waypoint(Vector3<f64>),
    /// Force reference in N.
    Force(Vector2<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Entry {
    Start,
    At { t: f64 },
    /// Previous waypoint reached within `tol` (m) for `dwell` seconds.
    PositionConverged { tol: f64, dwell: f64, timeout: f64 },
    /// Previous force reference held within `tol` (N) for `dwell` seconds.
    ForceConverged { tol: f64, dwell: f64, timeout: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub target: Target,
    pub entry: Entry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub chain: ChainParams,
    pub contact: Option<ContactParams>,
    pub gains: Gains,
    pub adaptation: AdaptationParams,
    pub fidelity: FidelityOptions,
    pub initial_gamma: DVector<f64>,
    pub phases: Vec<Phase>,
    pub duration: f64,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// file format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompoundFile {
    pub l_cm: f64,
    #[serde(rename = "L_cm")]
    pub big_l_cm: f64,
    pub l_cg_cm: f64,
    #[serde(rename = "L_cg_cm")]
    pub big_l_cg_cm: f64,
    pub m_g: f64,
    #[serde(rename = "M_g")]
    pub big_m_g: f64,
    pub k_nm_per_deg: f64,
}

impl Default for CompoundFile {
    fn default() -> Self {
        Self {
            l_cm: 4.8,
            big_l_cm: 6.2,
            l_cg_cm: 2.4,
            big_l_cg_cm: 3.6,
            m_g: 25.0,
            big_m_g: 64.0,
            k_nm_per_deg: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndEffectorFile {
    pub l_cm: f64,
    pub l_cg_cm: f64,
    pub m_g: f64,
}

impl Default for EndEffectorFile {
    fn default() -> Self {
        Self {
            l_cm: 12.0,
            l_cg_cm: 6.0,
            m_g: 72.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainFile {
    pub compounds: Vec<CompoundFile>,
    pub ee: EndEffectorFile,
    pub g0: [f64; 2],
}

impl Default for ChainFile {
    fn default() -> Self {
        Self {
            compounds: vec![CompoundFile::default(); 3],
            ee: EndEffectorFile::default(),
            g0: [0.0, -9.81],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactFile {
    pub n: [f64; 2],
    pub p_s_cm: [f64; 2],
    pub ke_top: f64,
    pub ke_perp: f64,
}

impl Default for ContactFile {
    fn default() -> Self {
        Self {
            n: [0.0, -1.0],
            p_s_cm: MIXED_SURFACE_CM,
            ke_top: 40.0,
            ke_perp: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainsFile {
    pub k_p: Vec<f64>,
    pub k_i: Vec<f64>,
    pub k_xi: Vec<f64>,
    pub k_gamma: Vec<f64>,
    pub k_eta: Vec<f64>,
    /// Defaults to `k_gamma + k_eta` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_gamma_eta: Option<Vec<f64>>,
    pub sigma_p: f64,
    pub eta_t: f64,
}

impl Default for GainsFile {
    fn default() -> Self {
        let g = Gains::benchmark();
        Self {
            k_p: g.k_p.as_slice().to_vec(),
            k_i: g.k_i.as_slice().to_vec(),
            k_xi: g.k_xi.as_slice().to_vec(),
            k_gamma: g.k_gamma.as_slice().to_vec(),
            k_eta: g.k_eta.as_slice().to_vec(),
            k_gamma_eta: None,
            sigma_p: g.sigma_p,
            eta_t: g.eta_t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsFile {
    pub k_m: f64,
    #[serde(rename = "k_M")]
    pub k_max: f64,
    pub beta: f64,
}

impl Default for BoundsFile {
    fn default() -> Self {
        let b = ProjectionBounds::benchmark();
        Self {
            k_m: b.k_m,
            k_max: b.k_max,
            beta: b.beta,
        }
    }
}

impl From<&BoundsFile> for ProjectionBounds {
    fn from(b: &BoundsFile) -> Self {
        Self {
            k_m: b.k_m,
            k_max: b.k_max,
            beta: b.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationFile {
    /// Six values (spread over the blocks) or the full `3M` diagonal.
    pub gamma_theta: Vec<f64>,
    pub gamma_ke_top: f64,
    pub gamma_ke_perp: f64,
    pub bounds: BoundsFile,
    /// Separate bounds for the tangential channel, defaults to `bounds`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds_perp: Option<BoundsFile>,
}

impl Default for AdaptationFile {
    fn default() -> Self {
        Self {
            gamma_theta: BENCHMARK_GAMMA_THETA.to_vec(),
            gamma_ke_top: 0.0040,
            gamma_ke_perp: 0.0020,
            bounds: BoundsFile::default(),
            bounds_perp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EntryFile {
    Start,
    Time { t_s: f64 },
    PositionConverged { tol_cm: f64, dwell_s: f64, timeout_s: f64 },
    ForceConverged { tol_n: f64, dwell_s: f64, timeout_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhaseFile {
    /// `[x_cm, y_cm, alpha_rad]`.
    PositionWaypoint { target: [f64; 3], entry: EntryFile },
    /// `[f_x, f_y]` in N.
    ForceRegulation { target: [f64; 2], entry: EntryFile },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    pub chain: ChainFile,
    /// `null` for a run with no interface at all.
    pub contact: Option<ContactFile>,
    pub gains: GainsFile,
    pub adaptation: AdaptationFile,
    pub fidelity: FidelityOptions,
    pub initial_gamma_rad: Vec<f64>,
    pub phases: Vec<PhaseFile>,
}

/// Ceiling height and contact rest point shared by the built-in missions.
const MIXED_SURFACE_CM: [f64; 2] = [33.0, 25.0];
const FORCE_SURFACE_CM: [f64; 2] = [33.5, 22.87];
const START_GAMMA: [f64; 4] = [1.2, -0.4, -0.3, -0.5];

impl Default for ScenarioFile {
    fn default() -> Self {
        Self::mixed()
    }
}

impl ScenarioFile {
    /// Approach below the ceiling, press with 2 N straight up, retreat.
    pub fn mixed() -> Self {
        Self {
            name: "mixed".into(),
            seed: 1,
            duration_s: 100.0,
            chain: ChainFile::default(),
            contact: Some(ContactFile::default()),
            gains: GainsFile::default(),
            adaptation: AdaptationFile::default(),
            fidelity: FidelityOptions::on(),
            initial_gamma_rad: START_GAMMA.to_vec(),
            phases: vec![
                PhaseFile::PositionWaypoint {
                    target: [MIXED_SURFACE_CM[0], MIXED_SURFACE_CM[1] - 0.5, 0.0],
                    entry: EntryFile::Start,
                },
                PhaseFile::ForceRegulation {
                    target: [0.0, 2.0],
                    entry: EntryFile::PositionConverged {
                        tol_cm: 0.3,
                        dwell_s: 0.5,
                        timeout_s: 10.0,
                    },
                },
                PhaseFile::PositionWaypoint {
                    target: [MIXED_SURFACE_CM[0], MIXED_SURFACE_CM[1] - 1.0, 0.0],
                    entry: EntryFile::ForceConverged {
                        tol_n: 0.05,
                        dwell_s: 2.0,
                        timeout_s: 60.0,
                    },
                },
            ],
        }
    }

    /// Pure force regulation at `f_r = (-1, 1.5)` N from a pose just inside
    /// the interface, with every fidelity option off.
    pub fn force() -> Self {
        let mut gains = GainsFile::default();
        gains.eta_t = 0.0;
        Self {
            name: "force".into(),
            seed: 1,
            duration_s: 60.0,
            chain: ChainFile::default(),
            contact: Some(ContactFile {
                p_s_cm: FORCE_SURFACE_CM,
                ..ContactFile::default()
            }),
            gains,
            adaptation: AdaptationFile::default(),
            fidelity: FidelityOptions::off(),
            initial_gamma_rad: START_GAMMA.to_vec(),
            phases: vec![PhaseFile::ForceRegulation {
                target: [-1.0, 1.5],
                entry: EntryFile::Start,
            }],
        }
    }

    /// Free-space waypoint regulation, no interface.
    pub fn position() -> Self {
        Self {
            name: "position".into(),
            seed: 1,
            duration_s: 20.0,
            contact: None,
            phases: vec![PhaseFile::PositionWaypoint {
                target: [30.0, 20.0, 0.2],
                entry: EntryFile::Start,
            }],
            ..Self::mixed()
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "mixed" => Some(Self::mixed()),
            "force" => Some(Self::force()),
            "position" => Some(Self::position()),
            _ => None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Converts to SI and validates, listing every violation.
    pub fn into_scenario(&self) -> Result<Scenario> {
        let mut problems = Vec::new();

        let chain = ChainParams {
            compounds: self
                .chain
                .compounds
                .iter()
                .map(|c| CompoundJoint {
                    l: c.l_cm * CM,
                    big_l: c.big_l_cm * CM,
                    l_cg: c.l_cg_cm * CM,
                    big_l_cg: c.big_l_cg_cm * CM,
                    m: c.m_g * G,
                    big_m: c.big_m_g * G,
                    k: c.k_nm_per_deg / DEG,
                })
                .collect(),
            ee: EndEffectorLink {
                l_ee: self.chain.ee.l_cm * CM,
                l_cg_ee: self.chain.ee.l_cg_cm * CM,
                m_ee: self.chain.ee.m_g * G,
            },
            g0: Vector2::from(self.chain.g0),
        };
        problems.extend(chain.violations());
        let n = chain.n_actuated();
        let m = chain.n_flexible();

        let contact = match &self.contact {
            None => None,
            Some(c) => {
                let p_s = Vector2::new(c.p_s_cm[0] * CM, c.p_s_cm[1] * CM);
                match ContactParams::new(Vector2::from(c.n), p_s, c.ke_top, c.ke_perp) {
                    Ok(cp) => Some(cp),
                    Err(e) => {
                        problems.push(format!("contact: {e}"));
                        None
                    }
                }
            }
        };

        let dv = |v: &[f64]| DVector::from_column_slice(v);
        let k_gamma = dv(&self.gains.k_gamma);
        let k_eta = dv(&self.gains.k_eta);
        let k_gamma_eta = match &self.gains.k_gamma_eta {
            Some(v) => dv(v),
            None if k_gamma.len() == k_eta.len() => &k_gamma + &k_eta,
            None => DVector::zeros(k_gamma.len()),
        };
        let gains = Gains {
            k_p: dv(&self.gains.k_p),
            k_i: dv(&self.gains.k_i),
            k_xi: dv(&self.gains.k_xi),
            k_gamma,
            k_eta,
            k_gamma_eta,
            sigma_p: self.gains.sigma_p,
            eta_t: self.gains.eta_t,
        };
        problems.extend(gains.violations());
        if gains.n() != n {
            problems.push(format!(
                "gains.k_gamma: {} entries for a chain with {n} actuated joints",
                gains.n()
            ));
        }
        if gains.s() != 3 {
            problems.push(format!("gains.k_p: expected 3 entries, got {}", gains.s()));
        }

        let gamma_theta = match self.adaptation.gamma_theta.len() {
            6 => {
                let mut six = [0.0; 6];
                six.copy_from_slice(&self.adaptation.gamma_theta);
                gamma_theta_from_six(&six, m)
            }
            _ => dv(&self.adaptation.gamma_theta),
        };
        let bounds_top = ProjectionBounds::from(&self.adaptation.bounds);
        let adaptation = AdaptationParams {
            gamma_theta,
            gamma_ke_top: self.adaptation.gamma_ke_top,
            gamma_ke_perp: self.adaptation.gamma_ke_perp,
            bounds_top,
            bounds_perp: self
                .adaptation
                .bounds_perp
                .as_ref()
                .map(ProjectionBounds::from)
                .unwrap_or(bounds_top),
        };
        problems.extend(adaptation.violations(m));

        problems.extend(self.fidelity.violations());

        if self.initial_gamma_rad.len() != n {
            problems.push(format!(
                "initial_gamma_rad: expected {n} entries, got {}",
                self.initial_gamma_rad.len()
            ));
        }
        if !self.initial_gamma_rad.iter().all(|v| v.is_finite()) {
            problems.push("initial_gamma_rad: must be finite".into());
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            problems.push(format!("duration_s: must be positive, got {}", self.duration_s));
        }

        let phases = convert_phases(&self.phases, contact.is_some(), &mut problems);

        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Scenario {
            name: self.name.clone(),
            chain,
            contact,
            gains,
            adaptation,
            fidelity: self.fidelity,
            initial_gamma: dv(&self.initial_gamma_rad),
            phases,
            duration: self.duration_s,
            seed: self.seed,
        })
    }
}

fn convert_phases(files: &[PhaseFile], has_contact: bool, problems: &mut Vec<String>) -> Vec<Phase> {
    if files.is_empty() {
        problems.push("phases: at least one phase required".into());
    }
    let mut out = Vec::with_capacity(files.len());
    let mut last_time = f64::NEG_INFINITY;
    for (i, ph) in files.iter().enumerate() {
        let (target, entry) = match ph {
            PhaseFile::PositionWaypoint { target, entry } => (
                Target::Waypoint(Vector3::new(target[0] * CM, target[1] * CM, target[2])),
                entry,
            ),
            PhaseFile::ForceRegulation { target, entry } => {
                if !has_contact {
                    problems.push(format!("phases[{i}]: force regulation needs a contact interface"));
                }
                (Target::Force(Vector2::from(*target)), entry)
            }
        };
        let finite = match target {
            Target::Waypoint(q) => q.iter().all(|v| v.is_finite()),
            Target::Force(f) => f.iter().all(|v| v.is_finite()),
        };
        if !finite {
            problems.push(format!("phases[{i}].target: must be finite"));
        }
        let entry = match *entry {
            EntryFile::Start => Entry::Start,
            EntryFile::Time { t_s } => Entry::At { t: t_s },
            EntryFile::PositionConverged {
                tol_cm,
                dwell_s,
                timeout_s,
            } => Entry::PositionConverged {
                tol: tol_cm * CM,
                dwell: dwell_s,
                timeout: timeout_s,
            },
            EntryFile::ForceConverged {
                tol_n,
                dwell_s,
                timeout_s,
            } => Entry::ForceConverged {
                tol: tol_n,
                dwell: dwell_s,
                timeout: timeout_s,
            },
        };
        match (i, entry) {
            (0, Entry::Start) => {}
            (0, _) => problems.push("phases[0].entry: the first phase must use `start`".into()),
            (_, Entry::Start) => problems.push(format!("phases[{i}].entry: only the first phase may use `start`")),
            (_, Entry::At { t }) => {
                if !(t > last_time && t > 0.0) {
                    problems.push(format!(
                        "phases[{i}].entry.t_s: phase times must be strictly increasing, got {t}"
                    ));
                }
                last_time = t;
            }
            (_, Entry::PositionConverged { tol, dwell, timeout } | Entry::ForceConverged { tol, dwell, timeout }) => {
                if !(tol > 0.0 && dwell >= 0.0 && timeout > 0.0) {
                    problems.push(format!(
                        "phases[{i}].entry: tolerance and timeout must be positive, dwell non-negative"
                    ));
                }
                let prev_is_force = matches!(out.last(), Some(Phase { target: Target::Force(_), .. }));
                let wants_force = matches!(entry, Entry::ForceConverged { .. });
                if i > 0 && prev_is_force != wants_force {
                    problems.push(format!(
                        "phases[{i}].entry: convergence test does not match the kind of phase {}",
                        i - 1
                    ));
                }
            }
        }
        out.push(Phase { target, entry });
    }
    out
}

impl Scenario {
    pub fn builtin(name: &str) -> Option<Self> {
        ScenarioFile::builtin(name).map(|f| f.into_scenario().expect("built-in scenarios are valid"))
    }

    /// Back to the file representation (cm, g).
    pub fn to_file(&self) -> ScenarioFile {
        let compounds = self
            .chain
            .compounds
            .iter()
            .map(|c| CompoundFile {
                l_cm: c.l / CM,
                big_l_cm: c.big_l / CM,
                l_cg_cm: c.l_cg / CM,
                big_l_cg_cm: c.big_l_cg / CM,
                m_g: c.m / G,
                big_m_g: c.big_m / G,
                k_nm_per_deg: c.k * DEG,
            })
            .collect();
        let phases = self
            .phases
            .iter()
            .map(|ph| {
                let entry = match ph.entry {
                    Entry::Start => EntryFile::Start,
                    Entry::At { t } => EntryFile::Time { t_s: t },
                    Entry::PositionConverged { tol, dwell, timeout } => EntryFile::PositionConverged {
                        tol_cm: tol / CM,
                        dwell_s: dwell,
                        timeout_s: timeout,
                    },
                    Entry::ForceConverged { tol, dwell, timeout } => EntryFile::ForceConverged {
                        tol_n: tol,
                        dwell_s: dwell,
                        timeout_s: timeout,
                    },
                };
                match ph.target {
                    Target::Waypoint(q) => PhaseFile::PositionWaypoint {
                        target: [q.x / CM, q.y / CM, q.z],
                        entry,
                    },
                    Target::Force(f) => PhaseFile::ForceRegulation {
                        target: [f.x, f.y],
                        entry,
                    },
                }
            })
            .collect();
        let bounds = |b: &ProjectionBounds| BoundsFile {
            k_m: b.k_m,
            k_max: b.k_max,
            beta: b.beta,
        };
        ScenarioFile {
            name: self.name.clone(),
            seed: self.seed,
            duration_s: self.duration,
            chain: ChainFile {
                compounds,
                ee: EndEffectorFile {
                    l_cm: self.chain.ee.l_ee / CM,
                    l_cg_cm: self.chain.ee.l_cg_ee / CM,
                    m_g: self.chain.ee.m_ee / G,
                },
                g0: [self.chain.g0.x, self.chain.g0.y],
            },
            contact: self.contact.map(|c| ContactFile {
                n: [c.n.x, c.n.y],
                p_s_cm: [c.p_s.x / CM, c.p_s.y / CM],
                ke_top: c.ke_top,
                ke_perp: c.ke_perp,
            }),
            gains: GainsFile {
                k_p: self.gains.k_p.as_slice().to_vec(),
                k_i: self.gains.k_i.as_slice().to_vec(),
                k_xi: self.gains.k_xi.as_slice().to_vec(),
                k_gamma: self.gains.k_gamma.as_slice().to_vec(),
                k_eta: self.gains.k_eta.as_slice().to_vec(),
                k_gamma_eta: Some(self.gains.k_gamma_eta.as_slice().to_vec()),
                sigma_p: self.gains.sigma_p,
                eta_t: self.gains.eta_t,
            },
            adaptation: AdaptationFile {
                gamma_theta: self.adaptation.gamma_theta.as_slice().to_vec(),
                gamma_ke_top: self.adaptation.gamma_ke_top,
                gamma_ke_perp: self.adaptation.gamma_ke_perp,
                bounds: bounds(&self.adaptation.bounds_top),
                bounds_perp: Some(bounds(&self.adaptation.bounds_perp)),
            },
            fidelity: self.fidelity,
            initial_gamma_rad: self.initial_gamma.as_slice().to_vec(),
            phases,
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    ScenarioFile::parse(&text)?.into_scenario()
}
