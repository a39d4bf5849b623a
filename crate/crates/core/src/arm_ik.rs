//! Arm branch inverse kinematics for a 7-joint arm.
//!
//! The last joint parameterizes the redundancy. For a fixed value of it the
//! remaining 6-joint chain is solved numerically from several seeds (damped
//! least squares), which yields a small candidate set. A scalar Brent search
//! over the last joint then maximizes
//!
//! `J(q) = w_m M(q) - w_n |W_n (q - q_neutral)| - w_c |W_c (q - q_prev)|`
//!
//! where `M` is Yoshikawa manipulability.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, Vector3, Vector6};

use crate::brent;
use crate::kinematics::{manipulability_of, JointVector, KinematicModel, ModelError, SerialChain};
use crate::se3::{Pose, Quat};

pub use crate::types::ARM_DOF;
const REDUNDANT: usize = ARM_DOF - 1;
/// A seed is abandoned once its pose error has not dropped below
/// `STALL_RATIO` times its best value for `STALL_ITERATIONS` iterations.
const STALL_RATIO: f64 = 0.99;
const STALL_ITERATIONS: usize = 10;
/// Width to which feasibility edges between scan samples are bisected.
const EDGE_TOL: f64 = 1e-9;
/// Local maxima of a scan that are examined further.
const REFINED_PEAKS: usize = 3;
/// Rescans of a peak's neighborhood before Brent takes over.
const REFINE_DEPTH: usize = 1;
/// Samples per rescan.
const REFINE_POINTS: usize = 17;
/// Value Brent sees for a joint-7 angle with no admissible candidate.
const INFEASIBLE_COST: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IkError {
    #[error("target unreachable for every admissible joint-7 angle")]
    Unreachable,
    #[error("invalid IK request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkRequest {
    pub target: Pose,
    pub q_prev: JointVector,
    pub q_neutral: JointVector,
}

/// Weights of the redundancy objective. The diagonal matrices are stored as
/// their diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct RedundancyWeights {
    pub w_m: f64,
    pub w_n: f64,
    pub w_c: f64,
    pub neutral_diag: DVector<f64>,
    pub continuity_diag: DVector<f64>,
}

impl RedundancyWeights {
    /// `w_m = 1, w_n = 0.5, w_c = 2`, both diagonals `1 / joint range`.
    pub fn default_for(model: &KinematicModel) -> Self {
        let range = model.limits_hi().0 - model.limits_lo().0;
        let diag = range.map(|r| if r > 0.0 { 1.0 / r } else { 0.0 });
        RedundancyWeights {
            w_m: 1.0,
            w_n: 0.5,
            w_c: 2.0,
            neutral_diag: diag.clone(),
            continuity_diag: diag,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        RedundancyWeights {
            w_m: self.w_m * k,
            w_n: self.w_n * k,
            w_c: self.w_c * k,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), IkError> {
        let ok = [self.w_m, self.w_n, self.w_c]
            .iter()
            .chain(self.neutral_diag.iter())
            .chain(self.continuity_diag.iter())
            .all(|v| v.is_finite() && *v >= 0.0);
        if ok && self.neutral_diag.len() == ARM_DOF && self.continuity_diag.len() == ARM_DOF {
            Ok(())
        } else {
            Err(IkError::BadRequest(
                "redundancy weights must be nonnegative with 7-entry diagonals".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkConfig {
    pub ee_frame: String,
    pub dls_damping: f64,
    pub step_cap: f64,
    pub max_dls_iterations: usize,
    pub position_tol: f64,
    pub orientation_tol: f64,
    /// Largest pose-error component at which an iteration counts as
    /// converged; anything else is dropped even when within tolerance.
    pub convergence_tol: f64,
    pub dedup_tol: f64,
    /// Candidates below this manipulability are discarded.
    pub min_manipulability: f64,
    pub brent_tol: f64,
    pub brent_max_iterations: usize,
    /// Half width of the initial joint-7 bracket around the previous value.
    pub bracket_half_width: f64,
    /// Uniform samples taken over a bracket before the Brent refinement.
    pub scan_points: usize,
    /// Seeds tried in addition to `q_prev` and `q_neutral`.
    pub extra_seeds: Vec<JointVector>,
}

impl Default for IkConfig {
    fn default() -> Self {
        IkConfig {
            ee_frame: "ee".into(),
            dls_damping: 1e-3,
            step_cap: 0.2,
            max_dls_iterations: 200,
            position_tol: 1e-4,
            orientation_tol: 1e-3,
            convergence_tol: 1e-10,
            dedup_tol: 1e-6,
            min_manipulability: 1e-4,
            brent_tol: 1e-6,
            brent_max_iterations: 100,
            bracket_half_width: 0.6,
            scan_points: 48,
            extra_seeds: Vec::new(),
        }
    }
}

/// One element of the fixed-joint-7 solution set.
#[derive(Debug, Clone, PartialEq)]
pub struct IkCandidate {
    pub q: JointVector,
    pub position_err: f64,
    pub orientation_err: f64,
    pub manipulability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q: JointVector,
    pub objective: f64,
    pub position_err: f64,
    pub orientation_err: f64,
}

/// Diagnostics of one `resolve` call.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolveStats {
    /// Final joint-7 search interval.
    pub bracket: (f64, f64),
    pub widened: bool,
    pub evaluations: usize,
    pub brent_iterations: usize,
    pub q7: f64,
}

/// Numerical arm IK over a 7-DOF model.
#[derive(Debug, Clone)]
pub struct ArmIk {
    model: KinematicModel,
    cfg: IkConfig,
    chain: SerialChain,
}

impl ArmIk {
    pub fn new(model: KinematicModel, cfg: IkConfig) -> Result<Self, IkError> {
        if model.dof() != ARM_DOF {
            return Err(IkError::BadRequest(format!(
                "arm model has {} DOF, expected 7",
                model.dof()
            )));
        }
        if model.frame_joint(&cfg.ee_frame)?.is_none() {
            return Err(IkError::BadRequest("end-effector frame cannot be base".into()));
        }
        let chain = SerialChain::new(&model, &cfg.ee_frame)?;
        Ok(ArmIk { model, cfg, chain })
    }

    pub fn model(&self) -> &KinematicModel {
        &self.model
    }

    pub fn config(&self) -> &IkConfig {
        &self.cfg
    }

    pub fn q7_limits(&self) -> (f64, f64) {
        let j = &self.model.joints()[self.model.actuated()[REDUNDANT]];
        (j.limit_lo, j.limit_hi)
    }

    pub fn fk(&self, q: &JointVector) -> Result<Pose, ModelError> {
        if q.len() != ARM_DOF {
            return Err(ModelError::Dimension {
                expected: ARM_DOF,
                got: q.len(),
            });
        }
        let (r, p) = self.chain.fk(q.as_slice());
        Ok(Pose::new(p, Quat::from_rotation_matrix(&r)))
    }

    fn pose_error(target: &Pose, target_r: &Matrix3<f64>, r: &Matrix3<f64>, p: &Vector3<f64>) -> Vector6<f64> {
        let ep = target.p - p;
        let er = Quat::from_rotation_matrix(&(target_r * r.transpose())).to_rotation_vector();
        Vector6::new(ep.x, ep.y, ep.z, er.x, er.y, er.z)
    }

    /// Damped least squares on joints 1-6 with joint 7 locked.
    fn dls(&self, target: &Pose, q7: f64, seed: &JointVector) -> Option<IkCandidate> {
        let mut q = self.model.clamp(seed);
        q[REDUNDANT] = q7;
        self.dls_from(target, q, REDUNDANT)
    }

    /// Damped least squares moving the first `free` joints.
    fn dls_from(&self, target: &Pose, mut q: JointVector, free: usize) -> Option<IkCandidate> {
        let lo = self.model.limits_lo();
        let hi = self.model.limits_hi();
        let lambda2 = self.cfg.dls_damping * self.cfg.dls_damping;
        let target_r = target.q.to_rotation_matrix();
        let mut jac = SMatrix::<f64, 6, ARM_DOF>::zeros();
        let (mut best, mut stalled) = (f64::INFINITY, 0);
        let mut converged = false;
        for _ in 0..=self.cfg.max_dls_iterations {
            let (r, p) = self.chain.fk_jacobian_into(q.as_slice(), &mut jac);
            let err = Self::pose_error(target, &target_r, &r, &p);
            if err.amax() <= self.cfg.convergence_tol {
                converged = true;
                break;
            }
            let e = err.norm();
            if e < STALL_RATIO * best {
                best = e;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= STALL_ITERATIONS {
                    break;
                }
            }
            let mut jf = jac;
            jf.columns_mut(free, ARM_DOF - free).fill(0.0);
            let a = jf * jf.transpose() + Matrix6::identity() * lambda2;
            let y = a.cholesky()?.solve(&err);
            let mut dq = jf.transpose() * y;
            let step = dq.amax();
            if step > self.cfg.step_cap {
                dq *= self.cfg.step_cap / step;
            }
            let mut moved = 0.0_f64;
            for k in 0..free {
                let next = (q[k] + dq[k]).clamp(lo[k], hi[k]);
                moved = moved.max((next - q[k]).abs());
                q[k] = next;
            }
            if moved < 1e-15 {
                break;
            }
        }
        if !converged {
            return None;
        }
        let (r, p) = self.chain.fk_jacobian_into(q.as_slice(), &mut jac);
        let pose = Pose::new(p, Quat::from_rotation_matrix(&r));
        let (position_err, orientation_err) = pose.error_to(target);
        if !(position_err <= self.cfg.position_tol && orientation_err <= self.cfg.orientation_tol) {
            return None;
        }
        Some(IkCandidate {
            q,
            position_err,
            orientation_err,
            manipulability: (jac * jac.transpose()).determinant().max(0.0).sqrt(),
        })
    }

    /// Converged, limit-respecting, non-singular solutions with joint 7 held
    /// at `q7`, one per distinct basin reached from `seeds`.
    pub fn solve_fixed_q7(&self, target: &Pose, q7: f64, seeds: &[JointVector]) -> Vec<IkCandidate> {
        let mut out: Vec<IkCandidate> = Vec::new();
        for seed in seeds {
            if seed.len() != ARM_DOF {
                continue;
            }
            let Some(c) = self.dls(target, q7, seed) else {
                continue;
            };
            if c.manipulability < self.cfg.min_manipulability || !self.model.within_limits(&c.q) {
                continue;
            }
            let dup = out
                .iter()
                .any(|o| (&o.q.0 - &c.q.0).amax() <= self.cfg.dedup_tol);
            if !dup {
                out.push(c);
            }
        }
        out
    }

    /// `J(q)` for an explicit configuration.
    pub fn redundancy_objective(
        &self,
        q: &JointVector,
        req: &IkRequest,
        w: &RedundancyWeights,
    ) -> Result<f64, ModelError> {
        if q.len() != ARM_DOF {
            return Err(ModelError::Dimension {
                expected: ARM_DOF,
                got: q.len(),
            });
        }
        let mut jac = DMatrix::zeros(6, ARM_DOF);
        self.chain.fk_jacobian(q.as_slice(), &mut jac);
        Ok(objective_value(manipulability_of(&jac), q, req, w))
    }

    /// Seeds for every fixed-q7 solve of a request: where `q_prev` and
    /// `q_neutral` settle with all joints free (or the raw value when that
    /// fails), then the configured extras.
    fn seeds(&self, req: &IkRequest) -> Vec<JointVector> {
        let mut seeds: Vec<JointVector> = [&req.q_prev, &req.q_neutral]
            .iter()
            .map(|s| {
                self.dls_from(&req.target, (*s).clone(), ARM_DOF)
                    .map_or_else(|| (*s).clone(), |c| c.q)
            })
            .collect();
        seeds.extend(self.cfg.extra_seeds.iter().cloned());
        seeds
    }

    /// Best candidate at `q7`, by objective then by closeness to `q_prev`.
    fn best_at(
        &self,
        req: &IkRequest,
        w: &RedundancyWeights,
        seeds: &[JointVector],
        q7: f64,
    ) -> Option<(f64, IkCandidate)> {
        let mut best: Option<(f64, IkCandidate)> = None;
        for c in self.solve_fixed_q7(&req.target, q7, seeds) {
            let val = objective_value(c.manipulability, &c.q, req, w);
            let better = match &best {
                None => true,
                Some((bv, bc)) => {
                    if (val - bv).abs() <= 1e-12 * (1.0 + bv.abs()) {
                        (&c.q.0 - &req.q_prev.0).amax() < (&bc.q.0 - &req.q_prev.0).amax()
                    } else {
                        val > *bv
                    }
                }
            };
            if better {
                best = Some((val, c));
            }
        }
        best
    }

    /// Evaluates `g(q7)`, the best objective over the candidate set at `q7`
    /// (`None` if the set is empty). Uses the same seeds as `resolve`.
    pub fn objective_at(
        &self,
        req: &IkRequest,
        w: &RedundancyWeights,
        q7: f64,
    ) -> Option<f64> {
        let seeds = self.seeds(req);
        self.best_at(req, w, &seeds, q7).map(|(v, _)| v)
    }

    fn check_request(&self, req: &IkRequest, w: &RedundancyWeights) -> Result<IkRequest, IkError> {
        w.validate()?;
        if req.q_prev.len() != ARM_DOF || req.q_neutral.len() != ARM_DOF {
            return Err(IkError::BadRequest("q_prev and q_neutral must have 7 entries".into()));
        }
        if !req.q_prev.is_finite() || !req.q_neutral.is_finite() || !req.target.p.iter().all(|v| v.is_finite()) || !req.target.q.is_finite() {
            return Err(IkError::BadRequest("non-finite request".into()));
        }
        Ok(IkRequest {
            target: req.target,
            q_prev: self.model.clamp(&req.q_prev),
            q_neutral: self.model.clamp(&req.q_neutral),
        })
    }

    /// Redundancy resolution: maximizes `g(q7)` over the bracket by a scan,
    /// feasibility-edge bisection and Brent refinement.
    pub fn resolve(&self, req: &IkRequest, w: &RedundancyWeights) -> Result<IkSolution, IkError> {
        self.resolve_with_stats(req, w).map(|(s, _)| s)
    }

    pub fn resolve_with_stats(
        &self,
        req: &IkRequest,
        w: &RedundancyWeights,
    ) -> Result<(IkSolution, ResolveStats), IkError> {
        let req = self.check_request(req, w)?;
        let seeds = self.seeds(&req);
        let (lo, hi) = self.q7_limits();
        let q7_prev = req.q_prev[REDUNDANT].clamp(lo, hi);
        let local = (
            (q7_prev - self.cfg.bracket_half_width).max(lo),
            (q7_prev + self.cfg.bracket_half_width).min(hi),
        );
        let mut stats = ResolveStats {
            bracket: local,
            widened: false,
            evaluations: 0,
            brent_iterations: 0,
            q7: q7_prev,
        };

        let mut found = self.search(&req, w, &seeds, local, q7_prev, &mut stats);
        let interior_edge = |x: f64| {
            let edge_tol = 4.0 * self.cfg.brent_tol;
            ((x - local.0).abs() <= edge_tol && local.0 > lo)
                || ((local.1 - x).abs() <= edge_tol && local.1 < hi)
        };
        let widen = match &found {
            None => true,
            Some((x, _, _)) => interior_edge(*x),
        };
        if widen && local != (lo, hi) {
            stats.widened = true;
            stats.bracket = (lo, hi);
            let full = self.search(&req, w, &seeds, (lo, hi), q7_prev, &mut stats);
            found = match (found, full) {
                (Some(a), Some(b)) => Some(if b.1 > a.1 { b } else { a }),
                (a, b) => a.or(b),
            };
        }
        let (x, objective, cand) = found.ok_or(IkError::Unreachable)?;
        stats.q7 = x;
        Ok((
            IkSolution {
                q: cand.q,
                objective,
                position_err: cand.position_err,
                orientation_err: cand.orientation_err,
            },
            stats,
        ))
    }

    /// Scan, locate feasibility edges, then refine the most promising
    /// points with Brent. Returns the best point evaluated.
    fn search(
        &self,
        req: &IkRequest,
        w: &RedundancyWeights,
        seeds: &[JointVector],
        (a, b): (f64, f64),
        init: f64,
        stats: &mut ResolveStats,
    ) -> Option<(f64, f64, IkCandidate)> {
        let mut best: Option<(f64, f64, IkCandidate)> = None;
        let mut eval = |x: f64, stats: &mut ResolveStats| -> Option<f64> {
            stats.evaluations += 1;
            let (v, c) = self.best_at(req, w, seeds, x)?;
            if best.as_ref().is_none_or(|(_, bv, _)| v > *bv) {
                best = Some((x, v, c));
            }
            Some(v)
        };
        // joint-7 angles where each seed settles with all joints free
        let mut extra: Vec<f64> = seeds.iter().filter(|s| s.len() == ARM_DOF).map(|s| s[REDUNDANT]).collect();
        extra.push(init);
        extra.retain(|x| *x > a && *x < b);
        self.explore(&mut eval, (a, b), self.cfg.scan_points, &extra, REFINE_DEPTH, stats);
        best
    }

    fn explore(
        &self,
        eval: &mut impl FnMut(f64, &mut ResolveStats) -> Option<f64>,
        (a, b): (f64, f64),
        n: usize,
        extra: &[f64],
        depth: usize,
        stats: &mut ResolveStats,
    ) {
        let n = n.max(2);
        let mut xs: Vec<f64> = (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect();
        xs.extend_from_slice(extra);
        xs.sort_by(|p, q| p.total_cmp(q));
        xs.dedup();
        let vals: Vec<Option<f64>> = xs.iter().map(|&x| eval(x, stats)).collect();

        // (start, lo, hi) intervals handed to Brent
        let mut starts: Vec<(f64, f64, f64)> = Vec::new();
        for i in 0..xs.len() - 1 {
            let (fi, fj) = (vals[i].is_some(), vals[i + 1].is_some());
            if fi == fj {
                continue;
            }
            let (mut feas, mut infeas) = if fi { (xs[i], xs[i + 1]) } else { (xs[i + 1], xs[i]) };
            let other = feas;
            while (feas - infeas).abs() > EDGE_TOL {
                let mid = 0.5 * (feas + infeas);
                if eval(mid, stats).is_some() {
                    feas = mid;
                } else {
                    infeas = mid;
                }
            }
            starts.push((feas, feas.min(other), feas.max(other)));
        }
        let mut peaks: Vec<(f64, usize)> = (0..xs.len())
            .filter_map(|k| {
                let v = vals[k]?;
                let left = k.checked_sub(1).and_then(|j| vals[j]).unwrap_or(f64::NEG_INFINITY);
                let right = vals.get(k + 1).copied().flatten().unwrap_or(f64::NEG_INFINITY);
                (v >= left && v >= right).then_some((v, k))
            })
            .collect();
        peaks.sort_by(|p, q| q.0.total_cmp(&p.0));
        peaks.truncate(REFINED_PEAKS);
        let windows: Vec<(f64, f64, f64)> = peaks
            .iter()
            .map(|&(_, k)| {
                let lo = if k > 0 { xs[k - 1] } else { a };
                let hi = if k + 1 < xs.len() { xs[k + 1] } else { b };
                (xs[k], lo, hi)
            })
            .collect();
        if depth == 0 {
            starts.extend(windows.iter().copied());
        }

        for (x0, lo, hi) in starts {
            let r = brent::minimize(
                |x| eval(x, stats).map_or(INFEASIBLE_COST, |v| -v),
                lo,
                hi,
                x0,
                self.cfg.brent_tol,
                self.cfg.brent_max_iterations,
            );
            stats.brent_iterations += r.iterations;
        }
        if depth > 0 {
            for (_, lo, hi) in windows {
                self.explore(eval, (lo, hi), REFINE_POINTS, &[], depth - 1, stats);
            }
        }
    }
}

fn weighted_norm(diag: &DVector<f64>, d: &DVector<f64>) -> f64 {
    diag.component_mul(d).norm()
}

fn objective_value(m: f64, q: &JointVector, req: &IkRequest, w: &RedundancyWeights) -> f64 {
    w.w_m * m
        - w.w_n * weighted_norm(&w.neutral_diag, &(&q.0 - &req.q_neutral.0))
        - w.w_c * weighted_norm(&w.continuity_diag, &(&q.0 - &req.q_prev.0))
}

/// Columns 1-6 of a 6 × 7 Jacobian.
pub fn redundant_block(jac: &DMatrix<f64>) -> Matrix6<f64> {
    jac.fixed_view::<6, 6>(0, 0).into_owned()
}
