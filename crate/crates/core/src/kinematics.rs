//! Kinematic trees loaded from `model-v1` documents: forward kinematics,
//! geometric Jacobians and Yoshikawa manipulability.
//!
//! A `model-v1` document is TOML:
//!
//! ```toml
//! format = "model-v1"
//! name = "arm7-generic"
//!
//! [[joint]]
//! name = "arm_j1"
//! type = "revolute"          # revolute | prismatic | fixed
//! parent = "base"            # optional, defaults to the previous joint
//! xyz = [0.0, 0.0, 0.333]    # origin in the parent frame, meters
//! rpy = [0.0, 0.0, 0.0]      # origin rotation, Rz(yaw) Ry(pitch) Rx(roll)
//! axis = [0.0, 0.0, 1.0]
//! limits = [-2.9, 2.9]
//! neutral = 0.0              # optional
//! mimic = { joint = "other", multiplier = 1.0, offset = 0.0 }  # optional
//!
//! [frames]
//! ee = "arm_ee"              # alias -> joint name
//! ```
//!
//! Joints must be listed parent-first. Every joint name is also a frame name,
//! as is `base`.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use nalgebra::storage::StorageMut;
use nalgebra::{DMatrix, DVector, Dim, Matrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::se3::{Pose, Quat};

pub const MODEL_FORMAT: &str = "model-v1";
pub const BASE_FRAME: &str = "base";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("model document does not parse: {0}")]
    Parse(String),
    #[error("unsupported model format {0:?}, expected \"model-v1\"")]
    Format(String),
    #[error("joint {joint:?}: {reason}")]
    Schema { joint: String, reason: String },
    #[error("joint {0:?}: limit_lo > limit_hi")]
    LimitOrder(String),
    #[error("mimic cycle through joint {0:?}")]
    CyclicMimic(String),
    #[error("frame {frame:?} refers to unknown joint {joint:?}")]
    UnknownFrameTarget { frame: String, joint: String },
    #[error("unknown frame {0:?}")]
    UnknownFrame(String),
    #[error("joint vector has length {got}, model has {expected} DOF")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimicSpec {
    pub joint: String,
    #[serde(default = "one")]
    pub multiplier: f64,
    #[serde(default)]
    pub offset: f64,
}

fn one() -> f64 {
    1.0
}

/// One `[[joint]]` entry of a model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: JointType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xyz: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpy: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neutral: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mimic: Option<MimicSpec>,
}

/// Parsed but unvalidated model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub name: String,
    #[serde(rename = "joint", default)]
    pub joints: Vec<JointSpec>,
    #[serde(default)]
    pub frames: BTreeMap<String, String>,
}

impl ModelDocument {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model documents always serialize")
    }

    /// Mounts `child` under joint `parent_joint` of `self`. The child's root
    /// joints (those parented to `base`) get `parent_joint` as parent and
    /// the mount origin prepended. Roots must carry no origin of their own.
    pub fn attach(
        &self,
        child: &ModelDocument,
        parent_joint: &str,
        mount_xyz: [f64; 3],
        mount_rpy: [f64; 3],
        name: &str,
    ) -> Result<ModelDocument, ModelError> {
        let mut out = self.clone();
        out.name = name.to_string();
        let mut first = true;
        for j in &child.joints {
            let mut j = j.clone();
            let is_root = match &j.parent {
                Some(p) => p == BASE_FRAME,
                None => first,
            };
            first = false;
            if is_root {
                if j.xyz.is_some() || j.rpy.is_some() {
                    return Err(ModelError::Schema {
                        joint: j.name.clone(),
                        reason: "attached root joint must not carry an origin".into(),
                    });
                }
                j.parent = Some(parent_joint.to_string());
                j.xyz = Some(mount_xyz);
                j.rpy = Some(mount_rpy);
            }
            // implicit "previous joint" parents keep their predecessor after
            // concatenation
            out.joints.push(j);
        }
        for (k, v) in &child.frames {
            if out.frames.contains_key(k) {
                return Err(ModelError::Schema {
                    joint: k.clone(),
                    reason: "frame alias defined in both models".into(),
                });
            }
            out.frames.insert(k.clone(), v.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mimic {
    /// Joint index of the source.
    pub source: usize,
    pub multiplier: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointType,
    pub parent: Option<usize>,
    pub origin: Pose,
    pub axis: Vector3<f64>,
    pub limit_lo: f64,
    pub limit_hi: f64,
    pub neutral: f64,
    pub mimic: Option<Mimic>,
    /// Position in the joint vector, for actuated joints only.
    pub dof_index: Option<usize>,
}

impl Joint {
    pub fn is_moving(&self) -> bool {
        self.kind != JointType::Fixed
    }
}

/// Configuration vector over the actuated (non-fixed, non-mimic) joints.
#[derive(Debug, Clone, PartialEq)]
pub struct JointVector(pub DVector<f64>);

impl JointVector {
    pub fn zeros(n: usize) -> Self {
        JointVector(DVector::zeros(n))
    }

    pub fn from_slice(v: &[f64]) -> Self {
        JointVector(DVector::from_column_slice(v))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }
}

impl From<Vec<f64>> for JointVector {
    fn from(v: Vec<f64>) -> Self {
        JointVector(DVector::from_vec(v))
    }
}

impl From<DVector<f64>> for JointVector {
    fn from(v: DVector<f64>) -> Self {
        JointVector(v)
    }
}

impl Deref for JointVector {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

impl DerefMut for JointVector {
    fn deref_mut(&mut self) -> &mut DVector<f64> {
        &mut self.0
    }
}

/// Immutable, validated kinematic tree.
#[derive(Debug, Clone)]
pub struct KinematicModel {
    name: String,
    joints: Vec<Joint>,
    frames: BTreeMap<String, Option<usize>>,
    actuated: Vec<usize>,
    document: ModelDocument,
}

fn schema(joint: &str, reason: impl Into<String>) -> ModelError {
    ModelError::Schema {
        joint: joint.to_string(),
        reason: reason.into(),
    }
}

/// Parses and validates a `model-v1` document.
pub fn load_model(text: &str) -> Result<KinematicModel, ModelError> {
    KinematicModel::from_document(ModelDocument::parse(text)?)
}

impl KinematicModel {
    pub fn from_document(doc: ModelDocument) -> Result<Self, ModelError> {
        if doc.format != MODEL_FORMAT {
            return Err(ModelError::Format(doc.format.clone()));
        }
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut joints: Vec<Joint> = Vec::with_capacity(doc.joints.len());
        for (i, spec) in doc.joints.iter().enumerate() {
            let name = spec.name.as_str();
            if name.is_empty() || name == BASE_FRAME {
                return Err(schema(name, "invalid joint name"));
            }
            if index.insert(name, i).is_some() {
                return Err(schema(name, "duplicate joint name"));
            }
            let parent = match spec.parent.as_deref() {
                Some(BASE_FRAME) => None,
                Some(p) => Some(
                    *index
                        .get(p)
                        .filter(|&&pi| pi < i)
                        .ok_or_else(|| schema(name, format!("parent {p:?} not defined earlier")))?,
                ),
                None => i.checked_sub(1),
            };
            let xyz = spec.xyz.unwrap_or([0.0; 3]);
            let rpy = spec.rpy.unwrap_or([0.0; 3]);
            if xyz.iter().chain(rpy.iter()).any(|v| !v.is_finite()) {
                return Err(schema(name, "non-finite origin"));
            }
            let origin = Pose::new(
                Vector3::from(xyz),
                Quat::from_rpy(rpy[0], rpy[1], rpy[2]),
            );
            let (axis, lo, hi) = match spec.kind {
                JointType::Fixed => {
                    if spec.mimic.is_some() {
                        return Err(schema(name, "fixed joint cannot mimic"));
                    }
                    (Vector3::z(), 0.0, 0.0)
                }
                _ => {
                    let a = Vector3::from(
                        spec.axis.ok_or_else(|| schema(name, "missing axis"))?,
                    );
                    let n = a.norm();
                    if !(n > 1e-12) || !n.is_finite() {
                        return Err(schema(name, "axis must be a nonzero vector"));
                    }
                    let [lo, hi] = spec.limits.ok_or_else(|| schema(name, "missing limits"))?;
                    if !lo.is_finite() || !hi.is_finite() {
                        return Err(schema(name, "non-finite limits"));
                    }
                    if lo > hi {
                        return Err(ModelError::LimitOrder(name.to_string()));
                    }
                    (a / n, lo, hi)
                }
            };
            let neutral = spec.neutral.unwrap_or(0.0_f64.clamp(lo, hi));
            joints.push(Joint {
                name: name.to_string(),
                kind: spec.kind,
                parent,
                origin,
                axis,
                limit_lo: lo,
                limit_hi: hi,
                neutral,
                mimic: None,
                dof_index: None,
            });
        }

        // Mimic sources may be declared after their followers.
        for (i, spec) in doc.joints.iter().enumerate() {
            if let Some(m) = &spec.mimic {
                let src = *index
                    .get(m.joint.as_str())
                    .ok_or_else(|| schema(&spec.name, format!("mimic source {:?} unknown", m.joint)))?;
                if joints[src].kind == JointType::Fixed {
                    return Err(schema(&spec.name, "mimic source is a fixed joint"));
                }
                if !m.multiplier.is_finite() || !m.offset.is_finite() {
                    return Err(schema(&spec.name, "non-finite mimic coefficients"));
                }
                joints[i].mimic = Some(Mimic {
                    source: src,
                    multiplier: m.multiplier,
                    offset: m.offset,
                });
            }
        }
        for i in 0..joints.len() {
            let mut seen = vec![false; joints.len()];
            let mut k = i;
            while let Some(m) = joints[k].mimic {
                if seen[k] {
                    return Err(ModelError::CyclicMimic(joints[i].name.clone()));
                }
                seen[k] = true;
                k = m.source;
            }
        }

        let mut actuated = Vec::new();
        for (i, j) in joints.iter_mut().enumerate() {
            if j.is_moving() && j.mimic.is_none() {
                j.dof_index = Some(actuated.len());
                actuated.push(i);
            }
        }

        let mut frames: BTreeMap<String, Option<usize>> = BTreeMap::new();
        frames.insert(BASE_FRAME.to_string(), None);
        for (i, j) in joints.iter().enumerate() {
            frames.insert(j.name.clone(), Some(i));
        }
        for (alias, target) in &doc.frames {
            let ji = *index.get(target.as_str()).ok_or_else(|| {
                ModelError::UnknownFrameTarget {
                    frame: alias.clone(),
                    joint: target.clone(),
                }
            })?;
            if let Some(Some(existing)) = frames.get(alias) {
                if *existing != ji {
                    return Err(schema(alias, "frame alias shadows a different joint"));
                }
            }
            frames.insert(alias.clone(), Some(ji));
        }

        Ok(KinematicModel {
            name: doc.name.clone(),
            joints,
            frames,
            actuated,
            document: doc,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn document(&self) -> &ModelDocument {
        &self.document
    }

    /// Number of actuated joints (fixed and mimic joints excluded).
    pub fn dof(&self) -> usize {
        self.actuated.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    /// Joint indices of the actuated joints, in joint-vector order.
    pub fn actuated(&self) -> &[usize] {
        &self.actuated
    }

    pub fn actuated_names(&self) -> Vec<&str> {
        self.actuated
            .iter()
            .map(|&i| self.joints[i].name.as_str())
            .collect()
    }

    /// Number of non-fixed joints, mimics included.
    pub fn moving_frames(&self) -> usize {
        self.joints.iter().filter(|j| j.is_moving()).count()
    }

    pub fn frame_names(&self) -> impl Iterator<Item = &str> {
        self.frames.keys().map(|s| s.as_str())
    }

    pub fn has_frame(&self, frame: &str) -> bool {
        self.frames.contains_key(frame)
    }

    /// Joint index behind a frame name; `None` for `base`.
    pub fn frame_joint(&self, frame: &str) -> Result<Option<usize>, ModelError> {
        self.frames
            .get(frame)
            .copied()
            .ok_or_else(|| ModelError::UnknownFrame(frame.to_string()))
    }

    pub fn limits_lo(&self) -> JointVector {
        JointVector::from(
            self.actuated
                .iter()
                .map(|&i| self.joints[i].limit_lo)
                .collect::<Vec<_>>(),
        )
    }

    pub fn limits_hi(&self) -> JointVector {
        JointVector::from(
            self.actuated
                .iter()
                .map(|&i| self.joints[i].limit_hi)
                .collect::<Vec<_>>(),
        )
    }

    pub fn neutral(&self) -> JointVector {
        JointVector::from(
            self.actuated
                .iter()
                .map(|&i| self.joints[i].neutral)
                .collect::<Vec<_>>(),
        )
    }

    pub fn clamp(&self, q: &JointVector) -> JointVector {
        let mut out = q.clone();
        for (k, &i) in self.actuated.iter().enumerate() {
            out[k] = out[k].clamp(self.joints[i].limit_lo, self.joints[i].limit_hi);
        }
        out
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        q.len() == self.dof()
            && self.actuated.iter().enumerate().all(|(k, &i)| {
                q[k] >= self.joints[i].limit_lo && q[k] <= self.joints[i].limit_hi
            })
    }

    fn check_dim(&self, q: &JointVector) -> Result<(), ModelError> {
        if q.len() != self.dof() {
            return Err(ModelError::Dimension {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    fn joint_value(&self, q: &JointVector, i: usize) -> f64 {
        let j = &self.joints[i];
        match (j.kind, j.mimic, j.dof_index) {
            (JointType::Fixed, _, _) => 0.0,
            (_, Some(m), _) => m.multiplier * self.joint_value(q, m.source) + m.offset,
            (_, None, Some(k)) => q[k],
            (_, None, None) => unreachable!("moving non-mimic joints are actuated"),
        }
    }

    /// Per-joint values with mimic joints expanded; fixed joints read 0.
    pub fn expand(&self, q: &JointVector) -> Result<Vec<f64>, ModelError> {
        self.check_dim(q)?;
        Ok((0..self.joints.len()).map(|i| self.joint_value(q, i)).collect())
    }

    /// Base-frame pose of every joint frame, in joint order.
    pub fn fk_all(&self, q: &JointVector) -> Result<Vec<Pose>, ModelError> {
        let values = self.expand(q)?;
        let mut out: Vec<Pose> = Vec::with_capacity(self.joints.len());
        for (i, j) in self.joints.iter().enumerate() {
            let parent = j.parent.map(|p| out[p]).unwrap_or_else(Pose::identity);
            let motion = match j.kind {
                JointType::Fixed => Pose::identity(),
                JointType::Revolute => {
                    Pose::new(Vector3::zeros(), Quat::from_axis_angle(&j.axis, values[i]))
                }
                JointType::Prismatic => Pose::from_translation(j.axis * values[i]),
            };
            out.push(parent.compose(&j.origin).compose(&motion));
        }
        Ok(out)
    }

    /// Pose of `frame` in base coordinates.
    pub fn fk(&self, q: &JointVector, frame: &str) -> Result<Pose, ModelError> {
        let fj = self.frame_joint(frame)?;
        let all = self.fk_all(q)?;
        Ok(fj.map(|i| all[i]).unwrap_or_else(Pose::identity))
    }

    /// Folds the column contribution of joint `i` into actuated columns.
    fn column_target(&self, mut i: usize) -> (usize, f64) {
        let mut scale = 1.0;
        loop {
            let j = &self.joints[i];
            match (j.mimic, j.dof_index) {
                (Some(m), _) => {
                    scale *= m.multiplier;
                    i = m.source;
                }
                (None, Some(k)) => return (k, scale),
                (None, None) => unreachable!("fixed joints contribute no column"),
            }
        }
    }

    /// Geometric Jacobian (linear rows over angular rows, base frame) of the
    /// origin of `frame`, given precomputed `fk_all` poses.
    pub fn jacobian_with(&self, poses: &[Pose], frame: &str) -> Result<DMatrix<f64>, ModelError> {
        let mut jac = DMatrix::zeros(6, self.dof());
        let Some(fi) = self.frame_joint(frame)? else {
            return Ok(jac);
        };
        let p_f = poses[fi].p;
        let mut k = Some(fi);
        while let Some(i) = k {
            let j = &self.joints[i];
            if j.is_moving() {
                let z = poses[i].q.rotate(&j.axis);
                let (col, scale) = self.column_target(i);
                let (lin, ang) = match j.kind {
                    JointType::Revolute => (z.cross(&(p_f - poses[i].p)), z),
                    _ => (z, Vector3::zeros()),
                };
                for r in 0..3 {
                    jac[(r, col)] += scale * lin[r];
                    jac[(r + 3, col)] += scale * ang[r];
                }
            }
            k = j.parent;
        }
        Ok(jac)
    }

    /// Geometric Jacobian of `frame`, 6 × DOF.
    pub fn jacobian(&self, q: &JointVector, frame: &str) -> Result<DMatrix<f64>, ModelError> {
        let poses = self.fk_all(q)?;
        self.jacobian_with(&poses, frame)
    }

    /// Yoshikawa manipulability `sqrt(det(J Jᵀ))` over the full 6-row
    /// Jacobian.
    pub fn manipulability(&self, q: &JointVector, frame: &str) -> Result<f64, ModelError> {
        self.manipulability_rows(q, frame, &[0, 1, 2, 3, 4, 5])
    }

    /// Manipulability of the task-reduced Jacobian made of `rows`.
    pub fn manipulability_rows(
        &self,
        q: &JointVector,
        frame: &str,
        rows: &[usize],
    ) -> Result<f64, ModelError> {
        let jac = self.jacobian(q, frame)?;
        Ok(manipulability_of(&jac.select_rows(rows)))
    }

    /// Sum of link offsets on the path from `from` (exclusive) down to `to`.
    pub fn chain_length(&self, from: &str, to: &str) -> Result<f64, ModelError> {
        let start = self.frame_joint(from)?;
        let mut k = self.frame_joint(to)?;
        let mut len = 0.0;
        while let Some(i) = k {
            if Some(i) == start {
                return Ok(len);
            }
            len += self.joints[i].origin.p.norm();
            k = self.joints[i].parent;
        }
        if start.is_none() {
            Ok(len)
        } else {
            Err(ModelError::UnknownFrame(format!("{to} is not below {from}")))
        }
    }
}

#[derive(Debug, Clone)]
struct ChainLink {
    rot: Matrix3<f64>,
    trans: Vector3<f64>,
    axis: Vector3<f64>,
    /// Cross-product matrix of `axis` and its square, for Rodrigues.
    k: Matrix3<f64>,
    k2: Matrix3<f64>,
    kind: JointType,
    /// Joint value as `scale * q[col] + offset`.
    col: usize,
    scale: f64,
    offset: f64,
}

/// The joints from the root to one frame, flattened for repeated FK and
/// Jacobian evaluation.
#[derive(Debug, Clone)]
pub struct SerialChain {
    links: Vec<ChainLink>,
    dof: usize,
}

impl SerialChain {
    pub fn new(model: &KinematicModel, frame: &str) -> Result<Self, ModelError> {
        let mut path = Vec::new();
        let mut k = model.frame_joint(frame)?;
        while let Some(i) = k {
            path.push(i);
            k = model.joints[i].parent;
        }
        path.reverse();
        let links = path
            .into_iter()
            .map(|i| {
                let j = &model.joints[i];
                let (mut col, mut scale, mut offset) = (0, 0.0, 0.0);
                if j.is_moving() {
                    // value = m1 (m2 (... q + c_n) + c2) + c1
                    let (mut idx, mut m, mut c) = (i, 1.0, 0.0);
                    loop {
                        let jj = &model.joints[idx];
                        match (jj.mimic, jj.dof_index) {
                            (Some(mm), _) => {
                                c += m * mm.offset;
                                m *= mm.multiplier;
                                idx = mm.source;
                            }
                            (None, Some(d)) => {
                                col = d;
                                break;
                            }
                            (None, None) => unreachable!("mimic sources are moving joints"),
                        }
                    }
                    scale = m;
                    offset = c;
                }
                let k = j.axis.cross_matrix();
                ChainLink {
                    rot: j.origin.q.to_rotation_matrix(),
                    trans: j.origin.p,
                    axis: j.axis,
                    k,
                    k2: k * k,
                    kind: j.kind,
                    col,
                    scale,
                    offset,
                }
            })
            .collect();
        Ok(SerialChain {
            links,
            dof: model.dof(),
        })
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    fn step(
        link: &ChainLink,
        q: &[f64],
        r: &Matrix3<f64>,
        p: &Vector3<f64>,
    ) -> (Matrix3<f64>, Vector3<f64>) {
        let p_new = p + r * link.trans;
        let r_org = r * link.rot;
        match link.kind {
            JointType::Fixed => (r_org, p_new),
            JointType::Revolute => {
                let th = link.scale * q[link.col] + link.offset;
                let m = Matrix3::identity() + link.k * th.sin() + link.k2 * (1.0 - th.cos());
                (r_org * m, p_new)
            }
            JointType::Prismatic => {
                let d = link.scale * q[link.col] + link.offset;
                (r_org, p_new + r_org * link.axis * d)
            }
        }
    }

    /// Rotation and position of the chain's frame.
    pub fn fk(&self, q: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
        let mut r = Matrix3::identity();
        let mut p = Vector3::zeros();
        for link in &self.links {
            (r, p) = Self::step(link, q, &r, &p);
        }
        (r, p)
    }

    /// Frame pose plus the 6 × DOF geometric Jacobian written into `jac`.
    pub fn fk_jacobian(&self, q: &[f64], jac: &mut DMatrix<f64>) -> (Matrix3<f64>, Vector3<f64>) {
        if jac.shape() != (6, self.dof) {
            *jac = DMatrix::zeros(6, self.dof);
        }
        self.fk_jacobian_into(q, jac)
    }

    /// As [`SerialChain::fk_jacobian`] for any 6-row output with at least
    /// DOF columns.
    pub fn fk_jacobian_into<R: Dim, C: Dim, S: StorageMut<f64, R, C>>(
        &self,
        q: &[f64],
        jac: &mut Matrix<f64, R, C, S>,
    ) -> (Matrix3<f64>, Vector3<f64>) {
        jac.fill(0.0);
        let mut r = Matrix3::identity();
        let mut p = Vector3::zeros();
        // linear rows hold p_j × z until the end point is known
        for link in &self.links {
            (r, p) = Self::step(link, q, &r, &p);
            let z = r * link.axis * link.scale;
            match link.kind {
                JointType::Fixed => {}
                JointType::Revolute => {
                    let lin = p.cross(&z);
                    for row in 0..3 {
                        jac[(row, link.col)] += lin[row];
                        jac[(row + 3, link.col)] += z[row];
                    }
                }
                JointType::Prismatic => {
                    for row in 0..3 {
                        jac[(row, link.col)] += z[row];
                    }
                }
            }
        }
        for c in 0..jac.ncols() {
            let ang = Vector3::new(jac[(3, c)], jac[(4, c)], jac[(5, c)]);
            let lin = ang.cross(&p);
            for row in 0..3 {
                jac[(row, c)] += lin[row];
            }
        }
        (r, p)
    }
}

/// `sqrt(det(J Jᵀ))`, with round-off negatives clamped to zero.
pub fn manipulability_of(jac: &DMatrix<f64>) -> f64 {
    if jac.nrows() > jac.ncols() {
        return 0.0;
    }
    let jjt = jac * jac.transpose();
    jjt.determinant().max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use std::f64::consts::FRAC_PI_2;

    const PLANAR: &str = r#"
format = "model-v1"
name = "planar2"

[[joint]]
name = "j1"
type = "revolute"
parent = "base"
axis = [0.0, 0.0, 1.0]
limits = [-3.14, 3.14]

[[joint]]
name = "j2"
type = "revolute"
xyz = [1.0, 0.0, 0.0]
axis = [0.0, 0.0, 1.0]
limits = [-3.14, 3.14]

[[joint]]
name = "tip"
type = "fixed"
xyz = [1.0, 0.0, 0.0]
"#;

    #[test]
    fn fixture_dof_counts() {
        let arm = fixtures::arm7_generic();
        assert_eq!(arm.dof(), 7);
        let hand = fixtures::hand12_generic();
        assert_eq!(hand.dof(), 12);
        assert_eq!(hand.moving_frames(), 14);
    }

    #[test]
    fn serial_chain_matches_tree_kinematics() {
        let m = fixtures::arm7_hand12();
        let q = JointVector::from((0..19).map(|i| 0.1 * i as f64 - 0.5).collect::<Vec<_>>());
        let q = m.clamp(&q);
        for frame in ["ee", "middle_tip", "thumb_tip"] {
            let chain = SerialChain::new(&m, frame).unwrap();
            let mut jac = DMatrix::zeros(1, 1);
            let (r, p) = chain.fk_jacobian(q.as_slice(), &mut jac);
            let pose = m.fk(&q, frame).unwrap();
            assert!((p - pose.p).amax() < 1e-12);
            assert!((r - pose.q.to_rotation_matrix()).amax() < 1e-12);
            assert!((jac - m.jacobian(&q, frame).unwrap()).amax() < 1e-12);
        }
    }

    #[test]
    fn planar_tip() {
        let m = load_model(PLANAR).unwrap();
        let p = m.fk(&JointVector::from_slice(&[0.0, FRAC_PI_2]), "tip").unwrap();
        assert!((p.p - Vector3::new(1.0, 1.0, 0.0)).amax() < 1e-15);
    }

    #[test]
    fn planar_manipulability_and_singularity() {
        let m = load_model(PLANAR).unwrap();
        let q = JointVector::from_slice(&[0.3, FRAC_PI_2]);
        let w = m.manipulability_rows(&q, "tip", &[0, 1]).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        let straight = JointVector::from_slice(&[0.3, 0.0]);
        let w0 = m.manipulability_rows(&straight, "tip", &[0, 1]).unwrap();
        assert!(w0.abs() < 1e-7);
        // linear rows rank 1, along the tangent of the stretched arm
        let jac = m.jacobian(&straight, "tip").unwrap();
        let lin = jac.rows(0, 2).into_owned();
        let tangent = Vector3::new(-0.3_f64.sin(), 0.3_f64.cos(), 0.0);
        for c in 0..2 {
            let col = Vector3::new(lin[(0, c)], lin[(1, c)], 0.0);
            assert!(col.cross(&tangent).norm() < 1e-12);
        }
        // 6-row manipulability of a 2-DOF chain is zero
        assert_eq!(m.manipulability(&q, "tip").unwrap(), 0.0);
    }

    #[test]
    fn limit_order_error_names_joint() {
        let bad = PLANAR.replacen("[-3.14, 3.14]", "[1.0, -1.0]", 1);
        assert_eq!(load_model(&bad).unwrap_err(), ModelError::LimitOrder("j1".into()));
    }

    #[test]
    fn cyclic_mimic_rejected() {
        let doc = format!(
            "{PLANAR}\n[[joint]]\nname = \"a\"\ntype = \"revolute\"\naxis = [0.0,0.0,1.0]\nlimits = [-1.0,1.0]\nmimic = {{ joint = \"b\" }}\n\n[[joint]]\nname = \"b\"\ntype = \"revolute\"\naxis = [0.0,0.0,1.0]\nlimits = [-1.0,1.0]\nmimic = {{ joint = \"a\" }}\n"
        );
        assert!(matches!(load_model(&doc), Err(ModelError::CyclicMimic(_))));
    }

    #[test]
    fn unknown_frame_reference_rejected() {
        let doc = format!("{PLANAR}\n[frames]\nee = \"nope\"\n");
        assert_eq!(
            load_model(&doc).unwrap_err(),
            ModelError::UnknownFrameTarget {
                frame: "ee".into(),
                joint: "nope".into()
            }
        );
        let m = load_model(PLANAR).unwrap();
        assert!(matches!(
            m.fk(&JointVector::zeros(2), "nope"),
            Err(ModelError::UnknownFrame(_))
        ));
    }

    #[test]
    fn wrong_format_and_dimension() {
        let bad = PLANAR.replace("model-v1", "model-v0");
        assert!(matches!(load_model(&bad), Err(ModelError::Format(_))));
        let m = load_model(PLANAR).unwrap();
        assert!(matches!(
            m.fk(&JointVector::zeros(3), "tip"),
            Err(ModelError::Dimension { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn mimic_columns_fold_into_source() {
        let hand = fixtures::hand12_generic();
        let q = hand.neutral();
        let jac = hand.jacobian(&q, "middle_tip").unwrap();
        let names = hand.actuated_names();
        let pip = names.iter().position(|n| *n == "middle_pip").unwrap();
        let mcp = names.iter().position(|n| *n == "middle_mcp").unwrap();
        for (c, name) in names.iter().enumerate() {
            let nonzero = jac.column(c).amax() > 0.0;
            assert_eq!(nonzero, c == pip || c == mcp, "{name}");
        }
        // pip column = d tip/d pip + 0.8 d tip/d dip; check the angular part
        assert!((jac[(4, pip)].abs() - 1.8).abs() < 1e-12);
    }

    #[test]
    fn chain_length_of_pinky() {
        let hand = fixtures::hand12_generic();
        let l = hand.chain_length("pinky_mcp", "pinky_tip").unwrap();
        assert!((l - 0.085).abs() < 1e-15);
    }
}
