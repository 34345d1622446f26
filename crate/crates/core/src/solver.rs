//! LM-damped IRLS optimization with pluggable robust kernels.
//!
//! Two entry points share the same machinery: [`optimize_pose`] refines a
//! single camera pose against fixed landmarks (tracking), and
//! [`optimize_window`] jointly refines a window of keyframe poses and the
//! landmarks they observe (local bundle adjustment, gauge fixed on the
//! first keyframe, points eliminated through a Schur complement).
//!
//! In the adaptive kernel mode the loss shape is re-estimated from the
//! current whitened residual magnitudes at the start of every outer
//! iteration, then held fixed while the state step runs. Both halves of
//! that alternation are descent steps on the joint likelihood: the shape
//! update is a grid-search argmin, and LM steps are only accepted when the
//! robust cost decreases.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector, SMatrix, Vector2, Vector3, Vector6};

use crate::alpha::{estimate_alpha, nll, ResidualSet};
use crate::geometry::{
    reprojection_residual, residual_jacobians, se3_exp, CameraIntrinsics, MapPoint, Observation,
    SE3Pose,
};
use crate::kernel::{rho_raw, weight_raw, AlphaGrid, PartitionTable};
use crate::{invalid, Error, Result};

type Matrix6 = SMatrix<f64, 6, 6>;
type Matrix63 = SMatrix<f64, 6, 3>;
type Matrix3 = SMatrix<f64, 3, 3>;

const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e10;
/// Costs below this are treated as already optimal.
const COST_FLOOR: f64 = 1e-24;

/// Robust kernel selection for a solve.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelMode {
    /// Classical Huber loss on the whitened magnitude.
    Huber { delta: f64 },
    /// Generalized loss with a fixed shape.
    BarronFixed { alpha: f64, c: f64 },
    /// Generalized loss whose shape is re-estimated each outer iteration.
    BarronAdaptive { grid: AlphaGrid, c: f64 },
}

impl KernelMode {
    pub fn adaptive_default() -> Self {
        KernelMode::BarronAdaptive { grid: AlphaGrid::default(), c: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelMode::Huber { delta } => {
                if !(delta.is_finite() && *delta > 0.0) {
                    return Err(invalid(format!("huber delta must be > 0, got {delta}")));
                }
            }
            KernelMode::BarronFixed { alpha, c } => {
                crate::kernel::KernelParams::new(*alpha, *c)?;
            }
            KernelMode::BarronAdaptive { c, .. } => {
                if !(c.is_finite() && *c > 0.0) {
                    return Err(invalid(format!("kernel scale must be > 0, got {c}")));
                }
            }
        }
        Ok(())
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, KernelMode::BarronAdaptive { .. })
    }

    /// Loss at magnitude `e`; `alpha_current` is only consulted in the
    /// adaptive mode.
    pub fn rho_at(&self, e: f64, alpha_current: f64) -> f64 {
        match self {
            KernelMode::Huber { delta } => huber_rho(e, *delta),
            KernelMode::BarronFixed { alpha, c } => rho_raw(e, *alpha, *c),
            KernelMode::BarronAdaptive { c, .. } => rho_raw(e, alpha_current, *c),
        }
    }

    /// IRLS weight at magnitude `e`.
    pub fn weight_at(&self, e: f64, alpha_current: f64) -> f64 {
        match self {
            KernelMode::Huber { delta } => huber_weight(e, *delta),
            KernelMode::BarronFixed { alpha, c } => weight_raw(e, *alpha, *c),
            KernelMode::BarronAdaptive { c, .. } => weight_raw(e, alpha_current, *c),
        }
    }
}

fn huber_rho(e: f64, delta: f64) -> f64 {
    if e <= delta {
        0.5 * e * e
    } else {
        delta * (e - 0.5 * delta)
    }
}

fn huber_weight(e: f64, delta: f64) -> f64 {
    if e <= delta {
        1.0
    } else {
        delta / e
    }
}

/// Sum of kernel losses over a set of residual magnitudes.
pub fn robust_cost(residual_magnitudes: &[f64], mode: &KernelMode, alpha_current: f64) -> f64 {
    residual_magnitudes.iter().map(|&e| mode.rho_at(e, alpha_current)).sum()
}

/// Chi-square gating on whitened magnitudes: `flag_i = e_i^2 > threshold`.
pub fn classify_outliers(residual_magnitudes: &[f64], threshold: f64) -> Vec<bool> {
    assert!(threshold > 0.0);
    residual_magnitudes.iter().map(|&e| e * e > threshold).collect()
}

/// Iteration limits, damping schedule and gating thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub lm_initial_lambda: f64,
    pub lm_lambda_factor: f64,
    pub rel_cost_tolerance: f64,
    /// Starting shape for the adaptive mode (a grid node).
    pub alpha_init: f64,
    /// 2-DOF chi-square gate on squared whitened magnitudes.
    pub outlier_chi2_threshold: f64,
    /// When set, observations flagged by the gate are dropped from
    /// subsequent outer iterations instead of staying as diagnostics.
    pub remove_flagged_outliers: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 10,
            max_inner_iterations: 10,
            lm_initial_lambda: 1e-4,
            lm_lambda_factor: 10.0,
            rel_cost_tolerance: 1e-8,
            alpha_init: 2.0,
            outlier_chi2_threshold: 5.991,
            remove_flagged_outliers: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iterations == 0 || self.max_inner_iterations == 0 {
            return Err(invalid("iteration limits must be positive"));
        }
        if !(self.lm_initial_lambda > 0.0 && self.lm_lambda_factor > 1.0) {
            return Err(invalid("damping parameters must be positive (factor > 1)"));
        }
        if !(self.rel_cost_tolerance > 0.0 && self.rel_cost_tolerance < 1.0) {
            return Err(invalid("relative cost tolerance must be in (0, 1)"));
        }
        if !(self.alpha_init.is_finite() && self.alpha_init <= 2.0) {
            return Err(invalid("alpha_init must be finite and <= 2"));
        }
        if !(self.outlier_chi2_threshold > 0.0) {
            return Err(invalid("outlier threshold must be positive"));
        }
        Ok(())
    }
}

/// One accepted LM step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub outer_iteration: usize,
    pub cost: f64,
    /// Shape in effect when the step was taken; NaN for the Huber kernel.
    pub alpha: f64,
    pub lambda: f64,
}

/// Diagnostics for one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub final_cost: f64,
    /// Robust cost at the start and after every accepted LM step.
    pub cost_trace: Vec<f64>,
    /// Shape selected at each outer iteration (adaptive mode only).
    pub alpha_trace: Vec<f64>,
    /// Robust cost at the end of each outer iteration.
    pub outer_costs: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub iterations_used: usize,
    pub outlier_flags: Vec<bool>,
    pub converged: bool,
}

impl SolveReport {
    /// Text table with one `iteration cost alpha lambda` row per accepted
    /// step.
    pub fn to_table(&self) -> String {
        let mut out = String::from("# iteration cost alpha lambda\n");
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&format!("{} {} {} {}\n", i, s.cost, s.alpha, s.lambda));
        }
        out
    }
}

/// Single-pose refinement problem: landmarks stay fixed.
#[derive(Debug, Clone)]
pub struct TrackingProblem {
    pub initial_pose: SE3Pose,
    pub fixed_points: Vec<MapPoint>,
    pub observations: Vec<Observation>,
    pub intrinsics: CameraIntrinsics,
}

/// Windowed bundle adjustment problem. The first keyframe is the gauge and
/// is held fixed.
#[derive(Debug, Clone)]
pub struct WindowProblem {
    /// `(frame_id, initial pose)` per keyframe, gauge first.
    pub keyframes: Vec<(usize, SE3Pose)>,
    pub points: Vec<MapPoint>,
    pub observations: Vec<Observation>,
    pub intrinsics: CameraIntrinsics,
}

/// Updated state produced by [`optimize_window`].
#[derive(Debug, Clone)]
pub struct WindowSolution {
    pub keyframes: Vec<(usize, SE3Pose)>,
    pub points: Vec<MapPoint>,
}

impl WindowProblem {
    /// Index maps plus structural checks: resolvable references, at least
    /// two observations per point, and an observation graph connected to
    /// the gauge keyframe.
    fn resolve(&self) -> Result<(HashMap<usize, usize>, HashMap<u64, usize>, Vec<(usize, usize)>)> {
        if self.keyframes.is_empty() {
            return Err(Error::Structure("window has no keyframes".into()));
        }
        let mut kf_index = HashMap::new();
        for (i, (frame, _)) in self.keyframes.iter().enumerate() {
            if kf_index.insert(*frame, i).is_some() {
                return Err(Error::Structure(format!("duplicate keyframe frame id {frame}")));
            }
        }
        let mut pt_index = HashMap::new();
        for (i, p) in self.points.iter().enumerate() {
            if pt_index.insert(p.id, i).is_some() {
                return Err(Error::Structure(format!("duplicate point id {}", p.id)));
            }
        }
        let mut edges = Vec::with_capacity(self.observations.len());
        let mut obs_per_point = vec![0usize; self.points.len()];
        for obs in &self.observations {
            let &kf = kf_index
                .get(&obs.frame_id)
                .ok_or_else(|| Error::Structure(format!("observation references unknown frame {}", obs.frame_id)))?;
            let &pt = pt_index
                .get(&obs.point_id)
                .ok_or_else(|| Error::Structure(format!("observation references unknown point {}", obs.point_id)))?;
            obs_per_point[pt] += 1;
            edges.push((kf, pt));
        }
        if let Some(pt) = obs_per_point.iter().position(|&n| n < 2) {
            return Err(Error::Structure(format!(
                "point {} has fewer than two observations",
                self.points[pt].id
            )));
        }
        // Bipartite BFS from the gauge keyframe.
        let mut kf_seen = vec![false; self.keyframes.len()];
        let mut pt_seen = vec![false; self.points.len()];
        let mut queue = VecDeque::new();
        kf_seen[0] = true;
        queue.push_back((true, 0usize));
        while let Some((is_kf, idx)) = queue.pop_front() {
            for &(kf, pt) in &edges {
                if is_kf && kf == idx && !pt_seen[pt] {
                    pt_seen[pt] = true;
                    queue.push_back((false, pt));
                } else if !is_kf && pt == idx && !kf_seen[kf] {
                    kf_seen[kf] = true;
                    queue.push_back((true, kf));
                }
            }
        }
        if kf_seen.iter().any(|s| !s) || pt_seen.iter().any(|s| !s) {
            return Err(Error::Structure(
                "observation graph is not connected to the gauge keyframe".into(),
            ));
        }
        Ok((kf_index, pt_index, edges))
    }
}

fn damped(mut m: Matrix6, lambda: f64) -> Matrix6 {
    for i in 0..6 {
        m[(i, i)] *= 1.0 + lambda;
    }
    m
}

fn damped3(mut m: Matrix3, lambda: f64) -> Matrix3 {
    for i in 0..3 {
        m[(i, i)] *= 1.0 + lambda;
    }
    m
}

/// Refines a single pose by LM-damped IRLS. The kernel must be a fixed
/// mode; shape adaptation is reserved for windowed bundle adjustment.
pub fn optimize_pose(
    problem: &TrackingProblem,
    mode: &KernelMode,
    config: &SolverConfig,
) -> Result<(SE3Pose, SolveReport)> {
    mode.validate()?;
    config.validate()?;
    if mode.is_adaptive() {
        return Err(invalid(
            "adaptive kernel mode is not available for single-pose tracking; use a fixed shape",
        ));
    }
    let positions: HashMap<u64, Vector3<f64>> =
        problem.fixed_points.iter().map(|p| (p.id, p.position)).collect();
    for obs in &problem.observations {
        if !positions.contains_key(&obs.point_id) {
            return Err(Error::Structure(format!(
                "observation references unknown point {}",
                obs.point_id
            )));
        }
    }
    let n = problem.observations.len();
    let alpha = match mode {
        KernelMode::BarronFixed { alpha, .. } => *alpha,
        _ => f64::NAN,
    };

    let mut pose = problem.initial_pose;
    let mut active = vec![true; n];

    let residuals = |pose: &SE3Pose, active: &[bool]| -> Vec<Option<Vector2<f64>>> {
        problem
            .observations
            .iter()
            .enumerate()
            .map(|(i, obs)| {
                if !active[i] {
                    return None;
                }
                reprojection_residual(obs, pose, &positions[&obs.point_id], &problem.intrinsics)
            })
            .collect()
    };
    let magnitudes =
        |rs: &[Option<Vector2<f64>>]| -> Vec<f64> { rs.iter().flatten().map(|r| r.norm()).collect() };

    let initial = residuals(&pose, &active);
    if initial.iter().flatten().count() < 6 {
        return Err(Error::Observability(
            "pose refinement needs at least six usable observations".into(),
        ));
    }

    let mut cost = robust_cost(&magnitudes(&initial), mode, alpha);
    let mut lambda = config.lm_initial_lambda;
    let mut report = SolveReport {
        final_cost: cost,
        cost_trace: vec![cost],
        alpha_trace: Vec::new(),
        outer_costs: Vec::new(),
        steps: vec![StepRecord { outer_iteration: 0, cost, alpha, lambda }],
        iterations_used: 0,
        outlier_flags: vec![false; n],
        converged: false,
    };

    for outer in 0..config.max_outer_iterations {
        report.iterations_used = outer + 1;
        if cost <= COST_FLOOR {
            report.converged = true;
            report.outer_costs.push(cost);
            break;
        }
        // Linearize at the current pose.
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (i, obs) in problem.observations.iter().enumerate() {
            if !active[i] {
                continue;
            }
            let point = positions[&obs.point_id];
            let Some(r) = reprojection_residual(obs, &pose, &point, &problem.intrinsics) else {
                continue;
            };
            let Some((j_pose, _)) = residual_jacobians(obs, &pose, &point, &problem.intrinsics)
            else {
                continue;
            };
            let w = mode.weight_at(r.norm(), alpha);
            h += w * j_pose.transpose() * j_pose;
            g += w * j_pose.transpose() * r;
        }

        let mut accepted = false;
        let prev_cost = cost;
        for _ in 0..config.max_inner_iterations {
            let Some(chol) = damped(h, lambda).cholesky() else {
                lambda *= config.lm_lambda_factor;
                if lambda > LAMBDA_MAX {
                    break;
                }
                continue;
            };
            let delta = chol.solve(&(-g));
            let candidate = se3_exp(&delta).compose(&pose);
            let cand_cost = robust_cost(&magnitudes(&residuals(&candidate, &active)), mode, alpha);
            if cand_cost.is_finite() && cand_cost < cost {
                pose = candidate;
                cost = cand_cost;
                lambda = (lambda / config.lm_lambda_factor).max(LAMBDA_MIN);
                report.cost_trace.push(cost);
                report.steps.push(StepRecord { outer_iteration: outer, cost, alpha, lambda });
                accepted = true;
                break;
            }
            lambda *= config.lm_lambda_factor;
            if lambda > LAMBDA_MAX {
                break;
            }
        }
        report.outer_costs.push(cost);
        if !accepted {
            report.converged = false;
            break;
        }
        if config.remove_flagged_outliers {
            let rs = residuals(&pose, &active);
            for (i, r) in rs.iter().enumerate() {
                if let Some(r) = r {
                    if r.norm_squared() > config.outlier_chi2_threshold {
                        active[i] = false;
                    }
                }
            }
        }
        if prev_cost - cost <= config.rel_cost_tolerance * prev_cost.max(1e-300) {
            report.converged = true;
            break;
        }
    }

    let final_rs = residuals(&pose, &active);
    for (i, r) in final_rs.iter().enumerate() {
        report.outlier_flags[i] = match r {
            Some(r) => r.norm_squared() > config.outlier_chi2_threshold,
            None => true,
        };
    }
    report.final_cost = cost;
    Ok((pose, report))
}

/// Jointly refines the non-gauge keyframe poses and all points of a
/// window. In the adaptive mode the kernel shape is re-estimated from the
/// current whitened residual magnitudes at the start of every outer
/// iteration and recorded in the report's `alpha_trace`.
pub fn optimize_window(
    problem: &WindowProblem,
    mode: &KernelMode,
    config: &SolverConfig,
    table: &PartitionTable,
) -> Result<(WindowSolution, SolveReport)> {
    mode.validate()?;
    config.validate()?;
    let (_, _, edges) = problem.resolve()?;

    let n_kf = problem.keyframes.len();
    let n_pt = problem.points.len();
    let n_obs = problem.observations.len();
    let c_dim = 6 * (n_kf - 1);
    let kernel_c = match mode {
        KernelMode::BarronFixed { c, .. } | KernelMode::BarronAdaptive { c, .. } => *c,
        KernelMode::Huber { .. } => 1.0,
    };

    let mut poses: Vec<SE3Pose> = problem.keyframes.iter().map(|(_, p)| *p).collect();
    let mut points: Vec<Vector3<f64>> = problem.points.iter().map(|p| p.position).collect();
    let mut active = vec![true; n_obs];
    let mut alpha_cur = match mode {
        KernelMode::BarronFixed { alpha, .. } => *alpha,
        KernelMode::BarronAdaptive { .. } => table.snap_alpha(config.alpha_init),
        KernelMode::Huber { .. } => f64::NAN,
    };

    let eval_residuals = |poses: &[SE3Pose], points: &[Vector3<f64>], active: &[bool]| {
        problem
            .observations
            .iter()
            .zip(edges.iter())
            .enumerate()
            .map(|(i, (obs, &(kf, pt)))| {
                if !active[i] {
                    return None;
                }
                reprojection_residual(obs, &poses[kf], &points[pt], &problem.intrinsics)
            })
            .collect::<Vec<Option<Vector2<f64>>>>()
    };
    let magnitudes =
        |rs: &[Option<Vector2<f64>>]| -> Vec<f64> { rs.iter().flatten().map(|r| r.norm()).collect() };

    let mut lambda = config.lm_initial_lambda;
    let mut report = SolveReport {
        final_cost: 0.0,
        cost_trace: Vec::new(),
        alpha_trace: Vec::new(),
        outer_costs: Vec::new(),
        steps: Vec::new(),
        iterations_used: 0,
        outlier_flags: vec![false; n_obs],
        converged: false,
    };
    let mut prev_outer: Option<(f64, f64)> = None;
    let mut cost = f64::INFINITY;

    for outer in 0..config.max_outer_iterations {
        report.iterations_used = outer + 1;
        let rs = eval_residuals(&poses, &points, &active);
        let mags = magnitudes(&rs);
        if mags.is_empty() {
            return Err(Error::Structure("no usable observations in window".into()));
        }

        if mode.is_adaptive() {
            // Alternation step 1: fix the state, update the shape. The
            // estimator sees magnitudes rescaled to the unit-scale density.
            let whitened: Vec<f64> = mags.iter().map(|e| e / kernel_c).collect();
            let set = ResidualSet::new(whitened)?;
            let new_alpha = estimate_alpha(&set, table)?;
            debug_assert!(
                nll(&set, new_alpha, table).unwrap_or(f64::INFINITY)
                    <= nll(&set, alpha_cur, table).unwrap_or(f64::INFINITY) + 1e-9,
                "shape update must not increase the likelihood objective"
            );
            alpha_cur = new_alpha;
            report.alpha_trace.push(alpha_cur);
        }

        cost = robust_cost(&mags, mode, alpha_cur);
        if outer == 0 {
            report.cost_trace.push(cost);
            report.steps.push(StepRecord { outer_iteration: 0, cost, alpha: alpha_cur, lambda });
        }
        if cost <= COST_FLOOR {
            report.converged = true;
            report.outer_costs.push(cost);
            break;
        }

        // Alternation step 2: fix the shape, update poses and points.
        let prev_cost = cost;
        let mut h_cc = vec![Matrix6::zeros(); n_kf.saturating_sub(1)];
        let mut g_c = vec![Vector6::zeros(); n_kf.saturating_sub(1)];
        let mut h_pp = vec![Matrix3::zeros(); n_pt];
        let mut g_p = vec![Vector3::zeros(); n_pt];
        let mut couplings: Vec<Vec<(usize, Matrix63)>> = vec![Vec::new(); n_pt];

        for (i, (obs, &(kf, pt))) in problem.observations.iter().zip(edges.iter()).enumerate() {
            if !active[i] {
                continue;
            }
            let Some(r) = reprojection_residual(obs, &poses[kf], &points[pt], &problem.intrinsics)
            else {
                continue;
            };
            let Some((j_pose, j_point)) =
                residual_jacobians(obs, &poses[kf], &points[pt], &problem.intrinsics)
            else {
                continue;
            };
            let w = mode.weight_at(r.norm(), alpha_cur);
            h_pp[pt] += w * j_point.transpose() * j_point;
            g_p[pt] += w * j_point.transpose() * r;
            if kf > 0 {
                let c = kf - 1;
                h_cc[c] += w * j_pose.transpose() * j_pose;
                g_c[c] += w * j_pose.transpose() * r;
                let block = w * j_pose.transpose() * j_point;
                match couplings[pt].iter_mut().find(|(cc, _)| *cc == c) {
                    Some((_, existing)) => *existing += block,
                    None => couplings[pt].push((c, block)),
                }
            }
        }

        let mut accepted = false;
        for _ in 0..config.max_inner_iterations {
            // Schur complement over the points.
            let mut s = DMatrix::<f64>::zeros(c_dim, c_dim);
            let mut b = DVector::<f64>::zeros(c_dim);
            for (c, blk) in h_cc.iter().enumerate() {
                s.view_mut((6 * c, 6 * c), (6, 6)).copy_from(&damped(*blk, lambda));
                b.rows_mut(6 * c, 6).copy_from(&(-g_c[c]));
            }
            let mut hpp_inv: Vec<Option<Matrix3>> = Vec::with_capacity(n_pt);
            for pt in 0..n_pt {
                let inv = damped3(h_pp[pt], lambda)
                    .cholesky()
                    .map(|ch| ch.inverse());
                if let Some(inv) = &inv {
                    let binv_gp = inv * g_p[pt];
                    for &(c1, w1) in &couplings[pt] {
                        let mut rows = b.rows_mut(6 * c1, 6);
                        rows += w1 * binv_gp;
                        for &(c2, w2) in &couplings[pt] {
                            let block = w1 * inv * w2.transpose();
                            let mut view = s.view_mut((6 * c1, 6 * c2), (6, 6));
                            view -= block;
                        }
                    }
                }
                hpp_inv.push(inv);
            }

            let delta_c = if c_dim == 0 {
                Some(DVector::zeros(0))
            } else {
                s.cholesky().map(|ch| ch.solve(&b))
            };
            let Some(delta_c) = delta_c else {
                lambda *= config.lm_lambda_factor;
                if lambda > LAMBDA_MAX {
                    break;
                }
                continue;
            };

            let mut cand_poses = poses.clone();
            for c in 0..n_kf - 1 {
                let xi = Vector6::from_iterator(delta_c.rows(6 * c, 6).iter().copied());
                cand_poses[c + 1] = se3_exp(&xi).compose(&poses[c + 1]);
            }
            let mut cand_points = points.clone();
            for pt in 0..n_pt {
                if let Some(inv) = &hpp_inv[pt] {
                    let mut acc = g_p[pt];
                    for &(c, w) in &couplings[pt] {
                        let xi = Vector6::from_iterator(delta_c.rows(6 * c, 6).iter().copied());
                        acc += w.transpose() * xi;
                    }
                    cand_points[pt] -= inv * acc;
                }
            }

            let cand_cost =
                robust_cost(&magnitudes(&eval_residuals(&cand_poses, &cand_points, &active)), mode, alpha_cur);
            if cand_cost.is_finite() && cand_cost < cost {
                poses = cand_poses;
                points = cand_points;
                cost = cand_cost;
                lambda = (lambda / config.lm_lambda_factor).max(LAMBDA_MIN);
                report.cost_trace.push(cost);
                report
                    .steps
                    .push(StepRecord { outer_iteration: outer, cost, alpha: alpha_cur, lambda });
                accepted = true;
                break;
            }
            lambda *= config.lm_lambda_factor;
            if lambda > LAMBDA_MAX {
                break;
            }
        }

        report.outer_costs.push(cost);
        if !accepted {
            report.converged = false;
            break;
        }
        if config.remove_flagged_outliers {
            let rs = eval_residuals(&poses, &points, &active);
            let mut removed = false;
            for (i, r) in rs.iter().enumerate() {
                if let Some(r) = r {
                    if r.norm_squared() > config.outlier_chi2_threshold {
                        active[i] = false;
                        removed = true;
                    }
                }
            }
            if removed {
                prev_outer = None;
                continue;
            }
        }
        if let Some((prev_alpha, prev_end)) = prev_outer {
            let same_shape = !mode.is_adaptive()
                || (prev_alpha.is_finite() && (prev_alpha - alpha_cur).abs() < 1e-12);
            if same_shape && prev_end - cost <= config.rel_cost_tolerance * prev_end.max(1e-300) {
                report.converged = true;
                break;
            }
        }
        debug_assert!(cost <= prev_cost);
        prev_outer = Some((alpha_cur, cost));
    }

    let final_rs = eval_residuals(&poses, &points, &active);
    for (i, r) in final_rs.iter().enumerate() {
        report.outlier_flags[i] = match r {
            Some(r) => r.norm_squared() > config.outlier_chi2_threshold,
            None => true,
        };
    }
    report.final_cost = cost;

    let solution = WindowSolution {
        keyframes: problem
            .keyframes
            .iter()
            .zip(poses.iter())
            .map(|(&(frame, _), pose)| (frame, *pose))
            .collect(),
        points: problem
            .points
            .iter()
            .zip(points.iter())
            .map(|(p, pos)| MapPoint::new(p.id, *pos))
            .collect(),
    };
    Ok((solution, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::shared_table;
    use crate::sim::{generate_scene, render_frame, SceneConfig};
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn static_scene(seed: u64) -> crate::sim::SimScene {
        let config = SceneConfig {
            n_static: 80,
            n_known_dynamic: 0,
            n_unknown_dynamic: 0,
            pixel_noise_sigma: 0.0,
            depth_noise_sigma: 0.0,
            seed,
            ..SceneConfig::default()
        };
        generate_scene(&config).unwrap()
    }

    fn tracking_problem(scene: &crate::sim::SimScene, frame: usize, initial: SE3Pose) -> TrackingProblem {
        let obs = render_frame(scene, frame).unwrap();
        TrackingProblem {
            initial_pose: initial,
            fixed_points: scene.initial_map(),
            observations: obs.observations,
            intrinsics: scene.intrinsics,
        }
    }

    fn pose_error(a: &SE3Pose, b: &SE3Pose) -> (f64, f64) {
        let rel = a.between(b);
        (rel.rotation_angle(), rel.translation.norm())
    }

    #[test]
    fn robust_cost_examples() {
        assert_eq!(robust_cost(&[], &KernelMode::Huber { delta: 1.0 }, f64::NAN), 0.0);
        let c = robust_cost(&[1.0, 1.0], &KernelMode::BarronFixed { alpha: 2.0, c: 1.0 }, f64::NAN);
        assert!((c - 1.0).abs() < 1e-12);
        let c = robust_cost(&[3.0], &KernelMode::Huber { delta: 1.0 }, f64::NAN);
        assert!((c - 2.5).abs() < 1e-12);
    }

    #[test]
    fn classify_outliers_examples() {
        assert_eq!(classify_outliers(&[0.0], 5.991), vec![false]);
        assert_eq!(classify_outliers(&[5.992f64.sqrt()], 5.991), vec![true]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mags: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..5.0)).collect();
        let got = classify_outliers(&mags, 5.991);
        // Independently coded comparator.
        for (e, flag) in mags.iter().zip(got.iter()) {
            let expected = e.powi(2) > 5.991;
            assert_eq!(*flag, expected);
        }
    }

    #[test]
    fn quadratic_mode_weights_are_constant() {
        let mode = KernelMode::BarronFixed { alpha: 2.0, c: 1.0 };
        for e in [0.0, 0.3, 2.0, 50.0] {
            assert_eq!(mode.weight_at(e, f64::NAN), 1.0);
        }
        let mode = KernelMode::BarronFixed { alpha: 2.0, c: 2.0 };
        for e in [0.0, 1.0, 10.0] {
            assert_eq!(mode.weight_at(e, f64::NAN), 0.25);
        }
    }

    #[test]
    fn adaptive_mode_rejected_for_tracking() {
        let scene = static_scene(1);
        let problem = tracking_problem(&scene, 0, scene.gt_trajectory[0]);
        let err = optimize_pose(&problem, &KernelMode::adaptive_default(), &SolverConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn pose_recovery_from_perturbed_start() {
        let scene = static_scene(2);
        let gt = scene.gt_trajectory[10];
        let twist = Vector6::new(0.03, -0.03, 0.02, 0.05, -0.02, 0.04);
        let problem = tracking_problem(&scene, 10, se3_exp(&twist).compose(&gt));
        for mode in [
            KernelMode::BarronFixed { alpha: 1.0, c: 1.0 },
            KernelMode::Huber { delta: 1.345 },
        ] {
            let (pose, report) = optimize_pose(&problem, &mode, &SolverConfig::default()).unwrap();
            let (rot, trans) = pose_error(&pose, &gt);
            assert!(rot < 1e-6 && trans < 1e-6, "{mode:?}: rot {rot} trans {trans}");
            assert!(report.converged);
        }
    }

    #[test]
    fn already_optimal_pose_converges_immediately() {
        let scene = static_scene(3);
        let gt = scene.gt_trajectory[5];
        let problem = tracking_problem(&scene, 5, gt);
        let (pose, report) =
            optimize_pose(&problem, &KernelMode::BarronFixed { alpha: 2.0, c: 1.0 }, &SolverConfig::default())
                .unwrap();
        assert!(report.converged);
        assert!(report.iterations_used <= 2);
        assert!(report.final_cost < 1e-20);
        let (rot, trans) = pose_error(&pose, &gt);
        assert!(rot < 1e-12 && trans < 1e-12);
    }

    #[test]
    fn under_constrained_problem_is_an_observability_error() {
        let scene = static_scene(4);
        let mut problem = tracking_problem(&scene, 0, scene.gt_trajectory[0]);
        problem.observations.truncate(5);
        match optimize_pose(&problem, &KernelMode::Huber { delta: 1.0 }, &SolverConfig::default()) {
            Err(Error::Observability(_)) => {}
            other => panic!("expected observability error, got {other:?}"),
        }
    }

    #[test]
    fn cost_trace_is_non_increasing_under_fixed_shape() {
        let scene = static_scene(6);
        let gt = scene.gt_trajectory[20];
        let twist = Vector6::new(0.05, 0.02, -0.04, 0.1, -0.05, 0.08);
        let problem = tracking_problem(&scene, 20, se3_exp(&twist).compose(&gt));
        let (_, report) =
            optimize_pose(&problem, &KernelMode::BarronFixed { alpha: 1.0, c: 1.0 }, &SolverConfig::default())
                .unwrap();
        for pair in report.cost_trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        assert!(report.cost_trace.len() >= 2);
    }

    #[test]
    fn fixed_quadratic_matches_unweighted_least_squares() {
        let scene = static_scene(7);
        let gt = scene.gt_trajectory[15];
        let twist = Vector6::new(0.02, -0.01, 0.02, 0.04, 0.03, -0.02);
        let problem = tracking_problem(&scene, 15, se3_exp(&twist).compose(&gt));
        let (pose, _) =
            optimize_pose(&problem, &KernelMode::BarronFixed { alpha: 2.0, c: 1.0 }, &SolverConfig::default())
                .unwrap();
        // Plain undamped Gauss-Newton as the independent route.
        let positions: HashMap<u64, Vector3<f64>> =
            problem.fixed_points.iter().map(|p| (p.id, p.position)).collect();
        let mut gn_pose = problem.initial_pose;
        for _ in 0..20 {
            let mut h = Matrix6::zeros();
            let mut g = Vector6::zeros();
            for obs in &problem.observations {
                let p = positions[&obs.point_id];
                let (Some(r), Some((j, _))) = (
                    reprojection_residual(obs, &gn_pose, &p, &problem.intrinsics),
                    residual_jacobians(obs, &gn_pose, &p, &problem.intrinsics),
                ) else {
                    continue;
                };
                h += j.transpose() * j;
                g += j.transpose() * r;
            }
            let delta = h.cholesky().unwrap().solve(&(-g));
            gn_pose = se3_exp(&delta).compose(&gn_pose);
        }
        let (rot, trans) = pose_error(&pose, &gn_pose);
        assert!(rot < 1e-8 && trans < 1e-8, "rot {rot} trans {trans}");
    }

    #[test]
    fn fixed_shape_one_beats_huber_under_gross_outliers() {
        let mut barron_wins = 0;
        for seed in 1..=10u64 {
            let scene = static_scene(100 + seed);
            let gt = scene.gt_trajectory[8];
            let mut problem = tracking_problem(&scene, 8, gt);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = problem.observations.len();
            for i in 0..n {
                if rng.random_range(0.0..1.0) < 0.3 {
                    problem.observations[i].pixel = Vector2::new(
                        rng.random_range(0.0..640.0),
                        rng.random_range(0.0..480.0),
                    );
                }
            }
            let twist = Vector6::new(0.02, -0.02, 0.01, 0.03, 0.02, -0.03);
            problem.initial_pose = se3_exp(&twist).compose(&gt);
            let config = SolverConfig::default();
            let (pose_b, _) =
                optimize_pose(&problem, &KernelMode::BarronFixed { alpha: 1.0, c: 1.0 }, &config).unwrap();
            let (pose_h, _) =
                optimize_pose(&problem, &KernelMode::Huber { delta: 1.345 }, &config).unwrap();
            let (rot_b, trans_b) = pose_error(&pose_b, &gt);
            let (rot_h, trans_h) = pose_error(&pose_h, &gt);
            if rot_b + trans_b < rot_h + trans_h {
                barron_wins += 1;
            }
        }
        assert!(barron_wins >= 7, "fixed-shape kernel won only {barron_wins}/10 seeds");
    }

    fn window_problem_from_scene(
        scene: &crate::sim::SimScene,
        frames: &[usize],
        pose_noise: f64,
        point_noise: f64,
        seed: u64,
    ) -> (WindowProblem, Vec<SE3Pose>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut observations = Vec::new();
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for &f in frames {
            let rendered = render_frame(scene, f).unwrap();
            for o in &rendered.observations {
                *counts.entry(o.point_id).or_default() += 1;
            }
            observations.extend(rendered.observations);
        }
        observations.retain(|o| counts[&o.point_id] >= 2);
        let mut keyframes = Vec::new();
        let gt: Vec<SE3Pose> = frames.iter().map(|&f| scene.gt_trajectory[f]).collect();
        for (i, &f) in frames.iter().enumerate() {
            let pose = if i == 0 || pose_noise == 0.0 {
                gt[i]
            } else {
                let xi = Vector6::from_fn(|_, _| rng.random_range(-pose_noise..pose_noise));
                se3_exp(&xi).compose(&gt[i])
            };
            keyframes.push((f, pose));
        }
        let points = scene
            .points
            .iter()
            .filter(|p| counts.get(&p.point.id).copied().unwrap_or(0) >= 2)
            .map(|p| {
                let jitter = if point_noise > 0.0 {
                    Vector3::from_fn(|_, _| rng.random_range(-point_noise..point_noise))
                } else {
                    Vector3::zeros()
                };
                MapPoint::new(p.point.id, p.point.position + jitter)
            })
            .collect();
        (
            WindowProblem { keyframes, points, observations, intrinsics: scene.intrinsics },
            gt,
        )
    }

    #[test]
    fn static_window_recovers_poses_and_selects_shape_two() {
        let scene = static_scene(8);
        let (problem, gt) = window_problem_from_scene(&scene, &[0, 5, 10], 0.02, 0.03, 99);
        let (solution, report) = optimize_window(
            &problem,
            &KernelMode::adaptive_default(),
            &SolverConfig::default(),
            shared_table(),
        )
        .unwrap();
        for (i, (_, pose)) in solution.keyframes.iter().enumerate() {
            let (rot, trans) = pose_error(pose, &gt[i]);
            assert!(rot < 1e-5 && trans < 1e-5, "kf {i}: rot {rot} trans {trans}");
        }
        assert_eq!(*report.alpha_trace.last().unwrap(), 2.0);
        assert!(report.final_cost < 1e-10);
    }

    #[test]
    fn window_costs_non_increasing_within_each_shape() {
        let scene = static_scene(9);
        let (problem, _) = window_problem_from_scene(&scene, &[0, 5, 10, 15], 0.03, 0.05, 13);
        let (_, report) = optimize_window(
            &problem,
            &KernelMode::BarronFixed { alpha: 1.0, c: 1.0 },
            &SolverConfig::default(),
            shared_table(),
        )
        .unwrap();
        for pair in report.cost_trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn window_gauge_invariance() {
        let scene = static_scene(10);
        let (problem, _) = window_problem_from_scene(&scene, &[0, 5, 10], 0.02, 0.03, 7);
        let table = shared_table();
        let mode = KernelMode::BarronFixed { alpha: 1.0, c: 1.0 };
        let config = SolverConfig::default();
        let (_, base) = optimize_window(&problem, &mode, &config, table).unwrap();

        // Remap the world by a rigid transform and re-solve.
        let g = se3_exp(&Vector6::new(0.4, -0.2, 0.3, 1.0, -2.0, 0.5));
        let g_inv = g.inverse();
        let mut remapped = problem.clone();
        for (_, pose) in remapped.keyframes.iter_mut() {
            *pose = pose.compose(&g_inv);
        }
        for p in remapped.points.iter_mut() {
            p.position = g.transform(&p.position);
        }
        let (_, transformed) = optimize_window(&remapped, &mode, &config, table).unwrap();
        assert!(
            (base.final_cost - transformed.final_cost).abs() < 1e-9,
            "{} vs {}",
            base.final_cost,
            transformed.final_cost
        );
    }

    #[test]
    fn window_structural_errors() {
        let scene = static_scene(11);
        let (mut problem, _) = window_problem_from_scene(&scene, &[0, 5], 0.0, 0.0, 1);
        // Orphan observation.
        problem.observations[0].point_id = 999_999;
        match optimize_window(
            &problem,
            &KernelMode::Huber { delta: 1.0 },
            &SolverConfig::default(),
            shared_table(),
        ) {
            Err(Error::Structure(_)) => {}
            other => panic!("expected structure error, got {other:?}"),
        }

        // A point observed once.
        let (mut problem, _) = window_problem_from_scene(&scene, &[0, 5], 0.0, 0.0, 1);
        let victim = problem.observations[0].point_id;
        let mut first = true;
        problem.observations.retain(|o| {
            if o.point_id == victim && !first {
                false
            } else {
                if o.point_id == victim {
                    first = false;
                }
                true
            }
        });
        match optimize_window(
            &problem,
            &KernelMode::Huber { delta: 1.0 },
            &SolverConfig::default(),
            shared_table(),
        ) {
            Err(Error::Structure(_)) => {}
            other => panic!("expected structure error, got {other:?}"),
        }
    }

    #[test]
    fn solver_config_validation() {
        let mut config = SolverConfig::default();
        assert!(config.validate().is_ok());
        config.rel_cost_tolerance = 1.5;
        assert!(config.validate().is_err());
        config = SolverConfig { max_outer_iterations: 0, ..SolverConfig::default() };
        assert!(config.validate().is_err());
        config = SolverConfig { lm_lambda_factor: 0.5, ..SolverConfig::default() };
        assert!(config.validate().is_err());
    }

    #[test]
    fn report_table_has_expected_columns() {
        let scene = static_scene(12);
        let gt = scene.gt_trajectory[3];
        let twist = Vector6::new(0.01, 0.01, -0.01, 0.02, 0.0, 0.01);
        let problem = tracking_problem(&scene, 3, se3_exp(&twist).compose(&gt));
        let (_, report) =
            optimize_pose(&problem, &KernelMode::BarronFixed { alpha: 1.0, c: 1.0 }, &SolverConfig::default())
                .unwrap();
        let table = report.to_table();
        let mut lines = table.lines();
        assert_eq!(lines.next().unwrap(), "# iteration cost alpha lambda");
        for line in lines {
            assert_eq!(line.split_whitespace().count(), 4);
        }
    }
}
