//! Hand branch: landmark normalization, adaptive reference vectors, robust
//! vector-matching retargeting and output smoothing.
//!
//! Landmarks follow the 21-point MediaPipe ordering: 0 wrist, then four
//! points per finger from thumb to pinky (MCP/CMC first, tip last), so the
//! fingertips are 4, 8, 12, 16, 20 and the finger bases 1, 5, 9, 13, 17.
//!
//! The robot hand model is expected in the same canonical frame the
//! normalized landmarks use: origin at the wrist, +x toward the middle MCP,
//! +z along the palm normal.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::kinematics::{JointVector, KinematicModel, ModelError};
use crate::se3::Pose;

pub const NUM_LANDMARKS: usize = 21;
pub use crate::types::HAND_DOF;

pub const WRIST: usize = 0;
pub const THUMB_TIP: usize = 4;
pub const INDEX_MCP: usize = 5;
pub const INDEX_TIP: usize = 8;
pub const MIDDLE_MCP: usize = 9;
pub const MIDDLE_TIP: usize = 12;
pub const RING_TIP: usize = 16;
pub const PINKY_MCP: usize = 17;
pub const PINKY_TIP: usize = 20;

pub const FINGERTIPS: [usize; 5] = [THUMB_TIP, INDEX_TIP, MIDDLE_TIP, RING_TIP, PINKY_TIP];
pub const ROBOT_TIPS: [&str; 5] = ["thumb_tip", "index_tip", "middle_tip", "ring_tip", "pinky_tip"];
pub const ROBOT_WRIST: &str = "wrist";
pub const ROBOT_PINKY_MCP: &str = "pinky_mcp";

/// Wrist-relative landmark magnitude above which a frame is rejected.
pub const MAX_LANDMARK_RADIUS: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HandError {
    #[error("degenerate hand frame: MCP construction vectors are parallel")]
    Degenerate,
    #[error("invalid hand frame: {0}")]
    InvalidFrame(String),
    #[error("invalid retarget config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandFrame {
    pub t: f64,
    pub wrist: Pose,
    pub landmarks: [Vector3<f64>; NUM_LANDMARKS],
}

impl HandFrame {
    pub fn validate(&self) -> Result<(), HandError> {
        if !self.t.is_finite()
            || !self.wrist.p.iter().all(|v| v.is_finite())
            || !self.wrist.q.is_finite()
        {
            return Err(HandError::InvalidFrame("non-finite time or wrist pose".into()));
        }
        let w = self.landmarks[WRIST];
        for (i, l) in self.landmarks.iter().enumerate() {
            if !l.iter().all(|v| v.is_finite()) {
                return Err(HandError::InvalidFrame(format!("landmark {i} is not finite")));
            }
            let r = (l - w).norm();
            if r > MAX_LANDMARK_RADIUS {
                return Err(HandError::InvalidFrame(format!(
                    "landmark {i} is {r:.3} m from the wrist"
                )));
            }
        }
        Ok(())
    }
}

/// Canonical basis (columns x, y, z) of a raw landmark set.
pub fn canonical_basis(landmarks: &[Vector3<f64>; NUM_LANDMARKS]) -> Result<Matrix3<f64>, HandError> {
    let w = landmarks[WRIST];
    let to_index = landmarks[INDEX_MCP] - w;
    let to_middle = landmarks[MIDDLE_MCP] - w;
    let (ni, nm) = (to_index.norm(), to_middle.norm());
    if ni == 0.0 || nm == 0.0 {
        return Err(HandError::Degenerate);
    }
    let normal = to_index.cross(&to_middle);
    if normal.norm() / (ni * nm) < 1e-6 {
        return Err(HandError::Degenerate);
    }
    let x = to_middle / nm;
    let z = normal.normalize();
    let y = z.cross(&x);
    Ok(Matrix3::from_columns(&[x, y, z]))
}

/// Expresses the landmarks wrist-relative in the canonical hand frame and
/// multiplies them by `hand_scale`. The wrist pose is passed through.
pub fn normalize_frame(raw: &HandFrame, hand_scale: f64) -> Result<HandFrame, HandError> {
    raw.validate()?;
    let basis = canonical_basis(&raw.landmarks)?;
    let rt = basis.transpose();
    let w = raw.landmarks[WRIST];
    let mut landmarks = [Vector3::zeros(); NUM_LANDMARKS];
    for (out, l) in landmarks.iter_mut().zip(raw.landmarks.iter()) {
        *out = rt * (l - w) * hand_scale;
    }
    Ok(HandFrame {
        t: raw.t,
        wrist: raw.wrist,
        landmarks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefKind {
    WristFinger,
    FingerFinger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefState {
    Projected,
    Free,
}

/// Which landmarks and robot frames a reference vector connects. The vector
/// points from the first endpoint to the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefPair {
    pub kind: RefKind,
    pub human: [usize; 2],
    pub robot: [String; 2],
}

/// The 5 wrist-to-fingertip and 10 fingertip-pair vectors.
pub fn default_pairs() -> Vec<RefPair> {
    let mut pairs = Vec::with_capacity(15);
    for (h, r) in FINGERTIPS.iter().zip(ROBOT_TIPS) {
        pairs.push(RefPair {
            kind: RefKind::WristFinger,
            human: [WRIST, *h],
            robot: [ROBOT_WRIST.into(), r.into()],
        });
    }
    for a in 0..5 {
        for b in a + 1..5 {
            pairs.push(RefPair {
                kind: RefKind::FingerFinger,
                human: [FINGERTIPS[a], FINGERTIPS[b]],
                robot: [ROBOT_TIPS[a].into(), ROBOT_TIPS[b].into()],
            });
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefVectorSpec {
    pub kind: RefKind,
    pub human: [usize; 2],
    pub robot: [String; 2],
    pub state: RefState,
    pub weight: f64,
    pub reference: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetargetConfig {
    pub d_proj: f64,
    pub d_esc: f64,
    /// Projected length for fingertip pairs.
    pub eta_finger: f64,
    /// Projected length for wrist-to-fingertip vectors.
    pub eta_wrist: f64,
    pub scale: f64,
    pub weight_projected_finger: f64,
    pub weight_projected_wrist: f64,
    pub weight_free: f64,
    pub huber_delta: f64,
    pub lambda: f64,
    pub ema_alpha: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub hand_scale: f64,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        RetargetConfig {
            d_proj: 0.03,
            d_esc: 0.03,
            eta_finger: 1e-4,
            eta_wrist: 3e-2,
            scale: 1.0,
            weight_projected_finger: 400.0,
            weight_projected_wrist: 200.0,
            weight_free: 1.0,
            huber_delta: 0.02,
            lambda: 1e-2,
            ema_alpha: 0.6,
            gamma_lo: 1.2,
            gamma_hi: 2.2,
            ratio_lo: 0.3,
            ratio_hi: 0.95,
            tol: 1e-6,
            max_iters: 200,
            hand_scale: 1.0,
        }
    }
}

impl RetargetConfig {
    pub fn validate(&self) -> Result<(), HandError> {
        let bad = |m: &str| Err(HandError::BadConfig(m.into()));
        let all = [
            self.d_proj,
            self.d_esc,
            self.eta_finger,
            self.eta_wrist,
            self.scale,
            self.weight_projected_finger,
            self.weight_projected_wrist,
            self.weight_free,
            self.huber_delta,
            self.lambda,
            self.ema_alpha,
            self.gamma_lo,
            self.gamma_hi,
            self.ratio_lo,
            self.ratio_hi,
            self.tol,
            self.hand_scale,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("all parameters must be finite and nonnegative");
        }
        if self.d_proj > self.d_esc {
            return bad("d_proj must not exceed d_esc");
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return bad("ema_alpha must lie in (0, 1]");
        }
        if self.gamma_lo > self.gamma_hi {
            return bad("gamma_lo must not exceed gamma_hi");
        }
        if self.ratio_lo >= self.ratio_hi {
            return bad("ratio_lo must be below ratio_hi");
        }
        if self.huber_delta == 0.0 || self.hand_scale == 0.0 {
            return bad("huber_delta and hand_scale must be positive");
        }
        Ok(())
    }
}

pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

pub fn ema_filter(q_new: &JointVector, q_smoothed_prev: &JointVector, alpha: f64) -> JointVector {
    assert_eq!(q_new.len(), q_smoothed_prev.len(), "EMA inputs differ in length");
    JointVector(q_new.0.zip_map(&q_smoothed_prev.0, |n, p| alpha * n + (1.0 - alpha) * p))
}

/// Result of one retargeting solve. `converged` is false when the iteration
/// cap was hit; `q` is then the best iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct RetargetOutcome {
    pub q: JointVector,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

/// Immutable retargeting problem: robot hand model, config and pair layout.
#[derive(Debug, Clone)]
pub struct HandRetargeter {
    model: KinematicModel,
    cfg: RetargetConfig,
    pairs: Vec<RefPair>,
    pinky_length: f64,
    /// Distinct robot endpoint frames, and for each pair the index of its
    /// two endpoints in that list.
    frames: Vec<String>,
    pair_frames: Vec<[usize; 2]>,
}

/// Positions and linear Jacobians of the endpoint frames at one q.
struct EndpointState {
    p: Vec<Vector3<f64>>,
    jac: Vec<DMatrix<f64>>,
}

impl HandRetargeter {
    pub fn new(model: KinematicModel, cfg: RetargetConfig) -> Result<Self, HandError> {
        Self::with_pairs(model, cfg, default_pairs())
    }

    pub fn with_pairs(
        model: KinematicModel,
        cfg: RetargetConfig,
        pairs: Vec<RefPair>,
    ) -> Result<Self, HandError> {
        cfg.validate()?;
        let mut frames: Vec<String> = Vec::new();
        let mut pair_frames = Vec::with_capacity(pairs.len());
        for pair in &pairs {
            if pair.human.iter().any(|&h| h >= NUM_LANDMARKS) {
                return Err(HandError::BadConfig("landmark index out of range".into()));
            }
            let mut ids = [0; 2];
            for (slot, name) in ids.iter_mut().zip(pair.robot.iter()) {
                model.frame_joint(name)?;
                *slot = match frames.iter().position(|f| f == name) {
                    Some(i) => i,
                    None => {
                        frames.push(name.clone());
                        frames.len() - 1
                    }
                };
            }
            pair_frames.push(ids);
        }
        let pinky_length = model.chain_length(ROBOT_PINKY_MCP, ROBOT_TIPS[4])?;
        if pinky_length <= 0.0 {
            return Err(HandError::BadConfig("robot pinky chain has zero length".into()));
        }
        Ok(HandRetargeter {
            model,
            cfg,
            pairs,
            pinky_length,
            frames,
            pair_frames,
        })
    }

    pub fn model(&self) -> &KinematicModel {
        &self.model
    }

    pub fn config(&self) -> &RetargetConfig {
        &self.cfg
    }

    pub fn pairs(&self) -> &[RefPair] {
        &self.pairs
    }

    /// Rest length of the robot pinky from MCP to tip.
    pub fn pinky_length(&self) -> f64 {
        self.pinky_length
    }

    /// Pinky extension factor from the MCP-to-tip distance of the (canonical)
    /// human frame relative to the robot pinky length.
    pub fn pinky_gamma(&self, frame: &HandFrame) -> f64 {
        let r = (frame.landmarks[PINKY_TIP] - frame.landmarks[PINKY_MCP]).norm() / self.pinky_length;
        gamma_for_ratio(r, &self.cfg)
    }

    /// Builds the reference set for a canonical frame. `prev` is the set
    /// built for the previous frame (empty at session start).
    pub fn build_references(&self, frame: &HandFrame, prev: &[RefVectorSpec]) -> Vec<RefVectorSpec> {
        let cfg = &self.cfg;
        let gamma = self.pinky_gamma(frame);
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, pair)| {
                let v = frame.landmarks[pair.human[1]] - frame.landmarks[pair.human[0]];
                let d = v.norm();
                let previous = prev.get(i).filter(|p| p.human == pair.human && p.robot == pair.robot);
                let (state, reference) = if d < cfg.d_proj {
                    let eta = match pair.kind {
                        RefKind::FingerFinger => cfg.eta_finger,
                        RefKind::WristFinger => cfg.eta_wrist,
                    };
                    let unit = if d > 0.0 { v / d } else { Vector3::zeros() };
                    (RefState::Projected, unit * eta)
                } else if d > cfg.d_esc {
                    (RefState::Free, v * cfg.scale)
                } else if let Some(p) = previous {
                    return p.clone();
                } else {
                    (RefState::Free, v * cfg.scale)
                };
                let weight = match (state, pair.kind) {
                    (RefState::Free, _) => cfg.weight_free,
                    (RefState::Projected, RefKind::FingerFinger) => cfg.weight_projected_finger,
                    (RefState::Projected, RefKind::WristFinger) => cfg.weight_projected_wrist,
                };
                let pinky = pair.kind == RefKind::WristFinger && pair.human[1] == PINKY_TIP;
                RefVectorSpec {
                    kind: pair.kind,
                    human: pair.human,
                    robot: pair.robot.clone(),
                    state,
                    weight,
                    reference: if pinky { reference * gamma } else { reference },
                }
            })
            .collect()
    }

    /// Free references that the robot hand reproduces exactly at `q`.
    pub fn self_references(&self, q: &JointVector) -> Result<Vec<RefVectorSpec>, HandError> {
        let poses = self.model.fk_all(q)?;
        let pos = self.frame_positions(&poses)?;
        Ok(self
            .pairs
            .iter()
            .zip(&self.pair_frames)
            .map(|(pair, [a, b])| RefVectorSpec {
                kind: pair.kind,
                human: pair.human,
                robot: pair.robot.clone(),
                state: RefState::Free,
                weight: self.cfg.weight_free,
                reference: pos[*b] - pos[*a],
            })
            .collect())
    }

    fn frame_positions(&self, poses: &[Pose]) -> Result<Vec<Vector3<f64>>, HandError> {
        self.frames
            .iter()
            .map(|f| {
                Ok(match self.model.frame_joint(f)? {
                    Some(j) => poses[j].p,
                    None => Vector3::zeros(),
                })
            })
            .collect()
    }

    fn endpoints(&self, q: &JointVector, with_jac: bool) -> Result<EndpointState, HandError> {
        let poses = self.model.fk_all(q)?;
        let p = self.frame_positions(&poses)?;
        let jac = if with_jac {
            self.frames
                .iter()
                .map(|f| Ok(self.model.jacobian_with(&poses, f)?.rows(0, 3).into_owned()))
                .collect::<Result<Vec<_>, HandError>>()?
        } else {
            Vec::new()
        };
        Ok(EndpointState { p, jac })
    }

    fn check_refs(&self, refs: &[RefVectorSpec]) -> Result<(), HandError> {
        if refs.len() != self.pairs.len() {
            return Err(HandError::BadConfig(format!(
                "expected {} references, got {}",
                self.pairs.len(),
                refs.len()
            )));
        }
        Ok(())
    }

    /// Objective, gradient and (when `want_grad`) the Gauss-Newton model
    /// Hessian `sum_i w_i c_i J_iᵀ J_i + 2 lambda I`, where `c_i` is the
    /// Huber weight `min(1, delta / r_i)`.
    fn eval(
        &self,
        q: &JointVector,
        refs: &[RefVectorSpec],
        q_prev: &JointVector,
        want_grad: bool,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>), HandError> {
        let ep = self.endpoints(q, want_grad)?;
        let delta = self.cfg.huber_delta;
        let n = if want_grad { self.model.dof() } else { 0 };
        let mut f = 0.0;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for (spec, [a, b]) in refs.iter().zip(&self.pair_frames) {
            let e = ep.p[*b] - ep.p[*a] - spec.reference;
            let r = e.norm();
            f += spec.weight * huber(r, delta);
            if want_grad {
                let c = spec.weight * if r <= delta { 1.0 } else { delta / r };
                let jv = &ep.jac[*b] - &ep.jac[*a];
                g += jv.transpose() * (e * c);
                h += jv.tr_mul(&jv) * c;
            }
        }
        let dq = &q.0 - &q_prev.0;
        f += self.cfg.lambda * dq.norm_squared();
        if want_grad {
            g += &dq * (2.0 * self.cfg.lambda);
            for i in 0..n {
                h[(i, i)] += 2.0 * self.cfg.lambda;
            }
        }
        Ok((f, g, h))
    }

    /// `sum_i w_i huber(|v_i(q) - ref_i|) + lambda |q - q_prev|^2`.
    pub fn objective(
        &self,
        q: &JointVector,
        refs: &[RefVectorSpec],
        q_prev: &JointVector,
    ) -> Result<f64, HandError> {
        self.check_refs(refs)?;
        Ok(self.eval(q, refs, q_prev, false)?.0)
    }

    pub fn gradient(
        &self,
        q: &JointVector,
        refs: &[RefVectorSpec],
        q_prev: &JointVector,
    ) -> Result<DVector<f64>, HandError> {
        self.check_refs(refs)?;
        Ok(self.eval(q, refs, q_prev, true)?.1)
    }

    /// Box-constrained minimization warm-started at `q_prev`.
    pub fn solve(
        &self,
        refs: &[RefVectorSpec],
        q_prev: &JointVector,
    ) -> Result<RetargetOutcome, HandError> {
        self.solve_from(refs, q_prev, q_prev)
    }

    /// As `solve`, with the iteration started at `q_start` instead.
    ///
    /// Projected Newton iteration on the Gauss-Newton model: joints held at a
    /// bound by the gradient are fixed, the rest take a Levenberg-damped
    /// model step, and the step is accepted by projected Armijo backtracking.
    /// Stops when the projected gradient, scaled by the inverse model Hessian
    /// (the free-joint Newton step, in joint units), drops to `tol`.
    pub fn solve_from(
        &self,
        refs: &[RefVectorSpec],
        q_prev: &JointVector,
        q_start: &JointVector,
    ) -> Result<RetargetOutcome, HandError> {
        self.check_refs(refs)?;
        let n = self.model.dof();
        if q_prev.len() != n || q_start.len() != n {
            return Err(HandError::BadConfig(format!("joint vectors must have {n} entries")));
        }
        if !q_prev.is_finite() || !q_start.is_finite() {
            return Err(HandError::BadConfig("non-finite joint vector".into()));
        }
        let lo = self.model.limits_lo().0;
        let hi = self.model.limits_hi().0;
        let project = |x: &DVector<f64>| x.zip_zip_map(&lo, &hi, |v, l, h| v.clamp(l, h));

        let mut x = project(&q_start.0);
        let (mut fx, mut gx, mut hx) = self.eval(&JointVector(x.clone()), refs, q_prev, true)?;
        let mut iterations = 0;
        let mut converged = false;

        while iterations < self.cfg.max_iters {
            let active: Vec<bool> = (0..n)
                .map(|i| (x[i] <= lo[i] && gx[i] > 0.0) || (x[i] >= hi[i] && gx[i] < 0.0))
                .collect();
            let pg = DVector::from_fn(n, |i, _| if active[i] { 0.0 } else { gx[i] });
            let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
            let model = self.model_step(&hx, &gx, &free);
            let scaled = match &model {
                Some(d) => d.amax(),
                None => pg.amax(),
            };
            if scaled <= self.cfg.tol || pg.amax() == 0.0 {
                converged = true;
                break;
            }
            iterations += 1;
            let d = model.unwrap_or_else(|| -pg.clone());

            let mut step = None;
            let mut t = 1.0;
            for _ in 0..60 {
                let xn = project(&(&x + &d * t));
                let (fn_, _, _) = self.eval(&JointVector(xn.clone()), refs, q_prev, false)?;
                if fn_ <= fx + 1e-4 * gx.dot(&(&xn - &x)) {
                    step = Some(xn);
                    break;
                }
                t *= 0.5;
            }
            let Some(xn) = step else {
                break;
            };
            x = xn;
            (fx, gx, hx) = self.eval(&JointVector(x.clone()), refs, q_prev, true)?;
        }

        Ok(RetargetOutcome {
            q: JointVector(x),
            iterations,
            converged,
            objective: fx,
        })
    }

    /// Descent direction on the free joints from the damped model Hessian.
    fn model_step(&self, h: &DMatrix<f64>, g: &DVector<f64>, free: &[usize]) -> Option<DVector<f64>> {
        let m = free.len();
        if m == 0 {
            return None;
        }
        let scale = free.iter().map(|&i| h[(i, i)]).fold(0.0_f64, f64::max);
        let mu = 1e-10 * scale + 1e-14;
        let hf = DMatrix::from_fn(m, m, |r, c| h[(free[r], free[c])] + if r == c { mu } else { 0.0 });
        let gf = DVector::from_fn(m, |r, _| g[free[r]]);
        let df = hf.cholesky()?.solve(&gf);
        let mut d = DVector::zeros(g.len());
        for (r, &i) in free.iter().enumerate() {
            d[i] = -df[r];
        }
        (d.dot(g) < 0.0).then_some(d)
    }
}

pub fn gamma_for_ratio(r: f64, cfg: &RetargetConfig) -> f64 {
    let u = ((r - cfg.ratio_lo) / (cfg.ratio_hi - cfg.ratio_lo)).clamp(0.0, 1.0);
    cfg.gamma_lo + (cfg.gamma_hi - cfg.gamma_lo) * u
}

/// Robot frames standing in for each landmark when the robot hand itself
/// plays the human. Landmarks without a matching joint use the midpoint of
/// the two listed frames.
pub const SYNTHETIC_LANDMARK_FRAMES: [(&str, &str); NUM_LANDMARKS] = [
    ("wrist", "wrist"),
    ("thumb_cmc", "thumb_cmc"),
    ("thumb_mcp", "thumb_mcp"),
    ("thumb_ip", "thumb_ip"),
    ("thumb_tip", "thumb_tip"),
    ("index_mcp", "index_mcp"),
    ("index_pip", "index_pip"),
    ("index_pip", "index_tip"),
    ("index_tip", "index_tip"),
    ("middle_mcp", "middle_mcp"),
    ("middle_pip", "middle_pip"),
    ("middle_dip", "middle_dip"),
    ("middle_tip", "middle_tip"),
    ("ring_mcp", "ring_mcp"),
    ("ring_pip", "ring_pip"),
    ("ring_dip", "ring_dip"),
    ("ring_tip", "ring_tip"),
    ("pinky_mcp", "pinky_mcp"),
    ("pinky_pip", "pinky_pip"),
    ("pinky_pip", "pinky_tip"),
    ("pinky_tip", "pinky_tip"),
];

/// Landmarks read off the robot hand's own forward kinematics at `q`,
/// expressed in the hand model's base frame.
pub fn synthetic_landmarks(
    model: &KinematicModel,
    q: &JointVector,
) -> Result<[Vector3<f64>; NUM_LANDMARKS], ModelError> {
    let poses = model.fk_all(q)?;
    let mut cache: BTreeMap<&str, Vector3<f64>> = BTreeMap::new();
    let mut at = |name: &'static str| -> Result<Vector3<f64>, ModelError> {
        if let Some(p) = cache.get(name) {
            return Ok(*p);
        }
        let p = match model.frame_joint(name)? {
            Some(j) => poses[j].p,
            None => Vector3::zeros(),
        };
        cache.insert(name, p);
        Ok(p)
    };
    let mut out = [Vector3::zeros(); NUM_LANDMARKS];
    for (slot, (a, b)) in out.iter_mut().zip(SYNTHETIC_LANDMARK_FRAMES) {
        *slot = (at(a)? + at(b)?) * 0.5;
    }
    Ok(out)
}

/// Per-stream retargeting state: previous solution, EMA memory and the
/// reference set of the previous frame.
#[derive(Debug, Clone)]
pub struct HandSession {
    retargeter: HandRetargeter,
    refs: Vec<RefVectorSpec>,
    q_prev: JointVector,
    q_smoothed: JointVector,
}

/// Output of one session step.
#[derive(Debug, Clone, PartialEq)]
pub struct HandStep {
    pub raw: RetargetOutcome,
    pub smoothed: JointVector,
}

impl HandSession {
    /// `q_init` seeds both the warm start and the EMA memory.
    pub fn new(retargeter: HandRetargeter, q_init: JointVector) -> Result<Self, HandError> {
        if q_init.len() != retargeter.model.dof() {
            return Err(HandError::BadConfig("initial hand configuration has wrong length".into()));
        }
        let q = retargeter.model.clamp(&q_init);
        Ok(HandSession {
            retargeter,
            refs: Vec::new(),
            q_prev: q.clone(),
            q_smoothed: q,
        })
    }

    pub fn retargeter(&self) -> &HandRetargeter {
        &self.retargeter
    }

    pub fn references(&self) -> &[RefVectorSpec] {
        &self.refs
    }

    pub fn smoothed(&self) -> &JointVector {
        &self.q_smoothed
    }

    /// Normalizes a raw frame, updates references, solves and smooths.
    pub fn step(&mut self, raw: &HandFrame) -> Result<HandStep, HandError> {
        let cfg = self.retargeter.config();
        let frame = normalize_frame(raw, cfg.hand_scale)?;
        let refs = self.retargeter.build_references(&frame, &self.refs);
        let out = self.retargeter.solve(&refs, &self.q_prev)?;
        let smoothed = ema_filter(&out.q, &self.q_smoothed, cfg.ema_alpha);
        self.refs = refs;
        self.q_prev = out.q.clone();
        self.q_smoothed = smoothed.clone();
        Ok(HandStep { raw: out, smoothed })
    }
}
