//! Planar serial-chain kinematics for arms built from alternating actuated
//! and flexible revolute joints.
//!
//! The chain is described at construction time as an ordered list of
//! [`Segment`]s, each one a revolute joint followed by a rigid link. The
//! benchmark topology is three compound joints (actuated joint, short link,
//! flexible joint, long link) followed by a final actuated joint carrying the
//! end-effector link, but any ordering of actuated/flexible joints works.
//!
//! All quantities are SI. Angles are cumulative along the chain, so the
//! end-effector orientation is simply the sum of every joint angle.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the planar position sub-space.
pub const SP: usize = 2;
/// Dimension of the planar task space, position plus orientation.
pub const S: usize = 3;

/// Benchmark joint stiffness, 0.8 N·m per degree, expressed in N·m/rad.
pub const BENCHMARK_STIFFNESS: f64 = 0.8 * 180.0 / std::f64::consts::PI;

/// One actuated + flexible pair with its two links.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompoundJoint {
    /// Link between the actuated joint and the flexible joint (m).
    pub l: f64,
    /// Link after the flexible joint (m).
    pub big_l: f64,
    /// Centre-of-mass offset along `l` (m).
    pub l_cg: f64,
    /// Centre-of-mass offset along `big_l` (m).
    pub big_l_cg: f64,
    /// Mass of link `l` (kg).
    pub m: f64,
    /// Mass of link `big_l` (kg).
    pub big_m: f64,
    /// Flexible joint stiffness (N·m/rad).
    pub k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndEffectorLink {
    pub l_ee: f64,
    pub l_cg_ee: f64,
    pub m_ee: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub compounds: Vec<CompoundJoint>,
    pub ee: EndEffectorLink,
    /// Gravity acceleration in the plane of motion (m/s²).
    pub g0: Vector2<f64>,
}

impl ChainParams {
    /// The benchmark arm: three identical compound joints and the EE link.
    pub fn benchmark() -> Self {
        let compound = CompoundJoint {
            l: 0.048,
            big_l: 0.062,
            l_cg: 0.024,
            big_l_cg: 0.036,
            m: 0.025,
            big_m: 0.064,
            k: BENCHMARK_STIFFNESS,
        };
        Self {
            compounds: vec![compound; 3],
            ee: EndEffectorLink {
                l_ee: 0.12,
                l_cg_ee: 0.06,
                m_ee: 0.072,
            },
            g0: Vector2::new(0.0, -9.81),
        }
    }

    /// Number of actuated joints.
    pub fn n_actuated(&self) -> usize {
        self.compounds.len() + 1
    }

    /// Number of flexible joints.
    pub fn n_flexible(&self) -> usize {
        self.compounds.len()
    }

    /// Diagonal flexible stiffness matrix `K`.
    pub fn stiffness_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.compounds.len(),
            self.compounds.iter().map(|c| c.k),
        ))
    }

    pub fn total_mass(&self) -> f64 {
        self.compounds.iter().map(|c| c.m + c.big_m).sum::<f64>() + self.ee.m_ee
    }

    /// Every invariant breach, not only the first.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.compounds.is_empty() {
            out.push("chain.compounds: at least one compound joint required".into());
        }
        for (i, c) in self.compounds.iter().enumerate() {
            let checks = [
                ("l", c.l > 0.0),
                ("L", c.big_l > 0.0),
                ("m", c.m > 0.0),
                ("M", c.big_m > 0.0),
                ("k", c.k > 0.0),
                ("l_cg", c.l_cg >= 0.0 && c.l_cg <= c.l),
                ("L_cg", c.big_l_cg >= 0.0 && c.big_l_cg <= c.big_l),
            ];
            for (name, ok) in checks {
                if !ok {
                    out.push(format!("chain.compounds[{i}].{name}: out of range"));
                }
            }
        }
        if !(self.ee.l_ee > 0.0) {
            out.push("chain.ee.l_ee: must be > 0".into());
        }
        if !(self.ee.m_ee > 0.0) {
            out.push("chain.ee.m_ee: must be > 0".into());
        }
        if !(self.ee.l_cg_ee >= 0.0 && self.ee.l_cg_ee <= self.ee.l_ee) {
            out.push("chain.ee.l_cg_ee: must lie within [0, l_ee]".into());
        }
        if !(self.g0.x.is_finite() && self.g0.y.is_finite()) {
            out.push("chain.g0: must be finite".into());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointRef {
    Actuated(usize),
    Flexible(usize),
}

/// A revolute joint followed by a rigid link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub joint: JointRef,
    pub length: f64,
    pub cg: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub gamma: DVector<f64>,
    pub delta: DVector<f64>,
}

impl JointState {
    pub fn new(gamma: DVector<f64>, delta: DVector<f64>) -> Self {
        Self { gamma, delta }
    }

    pub fn from_slices(gamma: &[f64], delta: &[f64]) -> Self {
        Self {
            gamma: DVector::from_column_slice(gamma),
            delta: DVector::from_column_slice(delta),
        }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            gamma: DVector::zeros(n),
            delta: DVector::zeros(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskPose {
    pub p: Vector2<f64>,
    pub alpha: f64,
}

impl TaskPose {
    /// `q = col(p, alpha)`.
    pub fn q(&self) -> Vector3<f64> {
        Vector3::new(self.p.x, self.p.y, self.alpha)
    }
}

/// All kinematic Jacobians of the chain at one configuration.
///
/// Third-order tensors are stored as one `SP x M` slice per actuated joint.
#[derive(Debug, Clone)]
pub struct JacobianSet {
    pub j: DMatrix<f64>,
    pub j_gamma: DMatrix<f64>,
    pub j_delta: DMatrix<f64>,
    pub jp_gamma: DMatrix<f64>,
    pub jp_delta: DMatrix<f64>,
    pub jalpha_gamma: DMatrix<f64>,
    pub jalpha_delta: DMatrix<f64>,
    pub jcg_delta: DMatrix<f64>,
    pub djp_delta_dgamma: Vec<DMatrix<f64>>,
    pub djcg_delta_dgamma: Vec<DMatrix<f64>>,
}

/// Smallest singular values of `J` and `Jp_gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMargins {
    pub j: f64,
    pub jp_gamma: f64,
}

/// Joint origins, cumulative angles and link CG positions along the chain.
#[derive(Debug, Clone)]
struct Frames {
    origins: Vec<Vector2<f64>>,
    cgs: Vec<Vector2<f64>>,
    ee: Vector2<f64>,
    alpha: f64,
}

#[inline]
fn rot90(v: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

/// A validated chain with its segment topology.
#[derive(Debug, Clone)]
pub struct Chain {
    params: ChainParams,
    segments: Vec<Segment>,
    total_mass: f64,
    actuated_segment: Vec<usize>,
    flexible_segment: Vec<usize>,
}

impl Chain {
    /// Builds the benchmark topology: γ_i, l_i, δ_i, L_i for every compound
    /// joint, then the final actuated joint and the EE link.
    pub fn new(params: ChainParams) -> Result<Self> {
        let violations = params.violations();
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let mut segments = Vec::with_capacity(2 * params.compounds.len() + 1);
        for (i, c) in params.compounds.iter().enumerate() {
            segments.push(Segment {
                joint: JointRef::Actuated(i),
                length: c.l,
                cg: c.l_cg,
                mass: c.m,
            });
            segments.push(Segment {
                joint: JointRef::Flexible(i),
                length: c.big_l,
                cg: c.big_l_cg,
                mass: c.big_m,
            });
        }
        segments.push(Segment {
            joint: JointRef::Actuated(params.compounds.len()),
            length: params.ee.l_ee,
            cg: params.ee.l_cg_ee,
            mass: params.ee.m_ee,
        });
        Self::from_segments(params, segments)
    }

    /// Arbitrary topology. Actuated and flexible indices must each be
    /// contiguous from zero.
    pub fn from_segments(params: ChainParams, segments: Vec<Segment>) -> Result<Self> {
        let mut actuated = Vec::new();
        let mut flexible = Vec::new();
        for (s, seg) in segments.iter().enumerate() {
            match seg.joint {
                JointRef::Actuated(i) => {
                    if i != actuated.len() {
                        return Err(Error::InvalidParameter {
                            field: format!("segments[{s}]"),
                            reason: "actuated joints must be numbered in order".into(),
                        });
                    }
                    actuated.push(s);
                }
                JointRef::Flexible(j) => {
                    if j != flexible.len() {
                        return Err(Error::InvalidParameter {
                            field: format!("segments[{s}]"),
                            reason: "flexible joints must be numbered in order".into(),
                        });
                    }
                    flexible.push(s);
                }
            }
        }
        if flexible.len() != params.compounds.len() {
            return Err(Error::DimensionMismatch {
                what: "flexible joints vs stiffness entries",
                expected: params.compounds.len(),
                got: flexible.len(),
            });
        }
        let total_mass = segments.iter().map(|s| s.mass).sum();
        Ok(Self {
            params,
            segments,
            total_mass,
            actuated_segment: actuated,
            flexible_segment: flexible,
        })
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn n(&self) -> usize {
        self.actuated_segment.len()
    }

    pub fn m(&self) -> usize {
        self.flexible_segment.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    fn check_dims(&self, js: &JointState) -> Result<()> {
        if js.gamma.len() != self.n() {
            return Err(Error::DimensionMismatch {
                what: "gamma",
                expected: self.n(),
                got: js.gamma.len(),
            });
        }
        if js.delta.len() != self.m() {
            return Err(Error::DimensionMismatch {
                what: "delta",
                expected: self.m(),
                got: js.delta.len(),
            });
        }
        Ok(())
    }

    fn joint_angle(&self, js: &JointState, joint: JointRef) -> f64 {
        match joint {
            JointRef::Actuated(i) => js.gamma[i],
            JointRef::Flexible(j) => js.delta[j],
        }
    }

    fn frames(&self, js: &JointState) -> Frames {
        let mut origins = Vec::with_capacity(self.segments.len());
        let mut cgs = Vec::with_capacity(self.segments.len());
        let mut phi = 0.0;
        let mut o = Vector2::zeros();
        for seg in &self.segments {
            phi += self.joint_angle(js, seg.joint);
            let u = Vector2::new(phi.cos(), phi.sin());
            origins.push(o);
            cgs.push(o + seg.cg * u);
            o += seg.length * u;
        }
        Frames {
            origins,
            cgs,
            ee: o,
            alpha: phi,
        }
    }

    pub fn forward_kinematics(&self, js: &JointState) -> Result<TaskPose> {
        self.check_dims(js)?;
        let f = self.frames(js);
        Ok(TaskPose {
            p: f.ee,
            alpha: f.alpha,
        })
    }

    /// Mass-weighted centre of mass and the total mass.
    pub fn center_of_mass(&self, js: &JointState) -> Result<(Vector2<f64>, f64)> {
        self.check_dims(js)?;
        let f = self.frames(js);
        let weighted = self
            .segments
            .iter()
            .zip(&f.cgs)
            .fold(Vector2::zeros(), |acc, (seg, c)| acc + seg.mass * c);
        Ok((weighted / self.total_mass, self.total_mass))
    }

    /// Column of the CG Jacobian for the joint at segment `s`.
    fn cg_column(&self, f: &Frames, s: usize) -> Vector2<f64> {
        let o = f.origins[s];
        let mut col = Vector2::zeros();
        for t in s..self.segments.len() {
            col += self.segments[t].mass * rot90(f.cgs[t] - o);
        }
        col / self.total_mass
    }

    /// EE position with `Jp_delta` and `Jcg_delta` only; the inner loop of the
    /// static deflection solve needs nothing else.
    pub fn deflection_terms(
        &self,
        js: &JointState,
    ) -> Result<(Vector2<f64>, DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(js)?;
        let f = self.frames(js);
        let m = self.m();
        let mut jp_delta = DMatrix::zeros(SP, m);
        let mut jcg_delta = DMatrix::zeros(SP, m);
        for (j, &s) in self.flexible_segment.iter().enumerate() {
            jp_delta.set_column(j, &rot90(f.ee - f.origins[s]));
            jcg_delta.set_column(j, &self.cg_column(&f, s));
        }
        Ok((f.ee, jp_delta, jcg_delta))
    }

    pub fn jacobians(&self, js: &JointState) -> Result<JacobianSet> {
        self.check_dims(js)?;
        let f = self.frames(js);
        let (n, m) = (self.n(), self.m());
        let p = f.ee;

        let mut jp_gamma = DMatrix::zeros(SP, n);
        for (i, &s) in self.actuated_segment.iter().enumerate() {
            jp_gamma.set_column(i, &rot90(p - f.origins[s]));
        }
        let mut jp_delta = DMatrix::zeros(SP, m);
        let mut jcg_delta = DMatrix::zeros(SP, m);
        for (j, &s) in self.flexible_segment.iter().enumerate() {
            jp_delta.set_column(j, &rot90(p - f.origins[s]));
            jcg_delta.set_column(j, &self.cg_column(&f, s));
        }

        // d/dθ_r of rot90(x - o_s) where both points move with every joint up
        // to them: the pivot becomes the later of the two joints.
        let mut djp_delta_dgamma = Vec::with_capacity(n);
        let mut djcg_delta_dgamma = Vec::with_capacity(n);
        for &r in &self.actuated_segment {
            let mut dp = DMatrix::zeros(SP, m);
            let mut dcg = DMatrix::zeros(SP, m);
            for (j, &s) in self.flexible_segment.iter().enumerate() {
                let pivot = r.max(s);
                dp.set_column(j, &(-(p - f.origins[pivot])));
                let mut acc = Vector2::zeros();
                for t in pivot..self.segments.len() {
                    acc -= self.segments[t].mass * (f.cgs[t] - f.origins[pivot]);
                }
                dcg.set_column(j, &(acc / self.total_mass));
            }
            djp_delta_dgamma.push(dp);
            djcg_delta_dgamma.push(dcg);
        }

        let jalpha_gamma = DMatrix::from_element(1, n, 1.0);
        let jalpha_delta = DMatrix::from_element(1, m, 1.0);

        let mut j_gamma = DMatrix::zeros(S, n);
        j_gamma.view_mut((0, 0), (SP, n)).copy_from(&jp_gamma);
        j_gamma.view_mut((SP, 0), (1, n)).copy_from(&jalpha_gamma);
        let mut j_delta = DMatrix::zeros(S, m);
        j_delta.view_mut((0, 0), (SP, m)).copy_from(&jp_delta);
        j_delta.view_mut((SP, 0), (1, m)).copy_from(&jalpha_delta);
        let mut j = DMatrix::zeros(S, n + m);
        j.view_mut((0, 0), (S, n)).copy_from(&j_gamma);
        j.view_mut((0, n), (S, m)).copy_from(&j_delta);

        Ok(JacobianSet {
            j,
            j_gamma,
            j_delta,
            jp_gamma,
            jp_delta,
            jalpha_gamma,
            jalpha_delta,
            jcg_delta,
            djp_delta_dgamma,
            djcg_delta_dgamma,
        })
    }
}

impl JacobianSet {
    /// Smallest singular values of `J` and `Jp_gamma`; zero means rank loss.
    pub fn rank_margins(&self) -> RankMargins {
        RankMargins {
            j: smallest_singular_value(&self.j),
            jp_gamma: smallest_singular_value(&self.jp_gamma),
        }
    }
}

pub fn smallest_singular_value(a: &DMatrix<f64>) -> f64 {
    a.singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
