//! Local trajectory optimization for the filming drone.
//!
//! A plan is a fixed-horizon waypoint polyline. Each replan minimizes a
//! weighted sum of four terms: motion smoothness, adherence to the ideal
//! shot position relative to the forecast actor path, obstacle clearance,
//! and actor visibility. The minimizer is preconditioned gradient descent
//! where the preconditioner is the exact Hessian of the two quadratic
//! terms, factorized once per plan; with the field terms switched off a
//! single unit step is therefore an exact Newton solve.

use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::{wrap_angle, ActorForecast};
use crate::grid::OccupancyGrid;
use crate::sdf::DistanceField;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("invalid planner configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid shot: {0}")]
    InvalidShot(String),
    #[error("size mismatch: trajectory has {traj} waypoints, counterpart has {other}")]
    SizeMismatch { traj: usize, other: usize },
}

/// Inner line-of-sight samples per drone-actor pair, trapezoid weighted.
const OCCLUSION_SAMPLES: usize = 16;

/// Read-only signed distance lookup for cost evaluation: the field holds
/// magnitudes, the grid holds the signs.
#[derive(Clone, Copy)]
pub struct FieldView<'a> {
    pub grid: &'a OccupancyGrid,
    pub field: &'a DistanceField,
}

impl FieldView<'_> {
    pub fn truncation(&self) -> f64 {
        self.field.config().truncation
    }

    /// Clearance potential and its spatial gradient at a world point.
    /// Points outside the mapped box are priced like deeply interior
    /// obstacle points (value at negative truncation) with zero gradient,
    /// so the optimizer neither trusts nor chases unmapped space.
    pub fn clearance(&self, p: &Vector3<f64>, epsilon_obs: f64) -> (f64, Vector3<f64>) {
        match self.field.value_and_gradient(self.grid, p) {
            Ok((d, gd)) => {
                let (c, slope) = potential_and_slope(d, epsilon_obs);
                (c, gd * slope)
            }
            Err(_) => {
                let (c, _) = potential_and_slope(-self.truncation(), epsilon_obs);
                (c, Vector3::zeros())
            }
        }
    }
}

/// Drone path over a fixed horizon: `n` waypoints spaced `t_f/(n-1)` apart
/// plus a yaw per waypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Vector3<f64>>,
    pub headings: Vec<f64>,
    pub t_f: f64,
}

impl Trajectory {
    pub fn new(
        waypoints: Vec<Vector3<f64>>,
        headings: Vec<f64>,
        t_f: f64,
    ) -> Result<Self, PlannerError> {
        if waypoints.len() < 2 {
            return Err(PlannerError::InvalidTrajectory(format!(
                "need at least 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        if headings.len() != waypoints.len() {
            return Err(PlannerError::SizeMismatch { traj: waypoints.len(), other: headings.len() });
        }
        if !(t_f.is_finite() && t_f > 0.0) {
            return Err(PlannerError::InvalidTrajectory(format!("t_f must be positive, got {t_f}")));
        }
        Ok(Trajectory { waypoints, headings, t_f })
    }

    /// All waypoints parked at one pose; the usual cold-start plan seed.
    pub fn hover(p: Vector3<f64>, heading: f64, n: usize, t_f: f64) -> Result<Self, PlannerError> {
        Trajectory::new(vec![p; n], vec![heading; n], t_f)
    }

    pub fn n(&self) -> usize {
        self.waypoints.len()
    }

    pub fn dt(&self) -> f64 {
        self.t_f / (self.n() - 1) as f64
    }

    /// Pose at time `t`, clamped to the horizon. Position interpolates
    /// linearly, heading along the shorter arc.
    pub fn sample(&self, t: f64) -> (Vector3<f64>, f64) {
        let dt = self.dt();
        let s = (t / dt).clamp(0.0, (self.n() - 1) as f64);
        let i = (s.floor() as usize).min(self.n() - 2);
        let frac = s - i as f64;
        let p = self.waypoints[i] + (self.waypoints[i + 1] - self.waypoints[i]) * frac;
        let h = self.headings[i] + wrap_angle(self.headings[i + 1] - self.headings[i]) * frac;
        (p, wrap_angle(h))
    }

    fn waypoint_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, 3, |i, a| self.waypoints[i][a])
    }

    /// Re-derives headings so every waypoint faces its actor sample.
    /// Waypoints essentially coincident with the actor keep their heading.
    pub fn point_toward(&mut self, actor: &ActorForecast) {
        for (i, w) in self.waypoints.iter().enumerate() {
            if let Some(s) = actor.samples.get(i) {
                let d = s.position - w;
                if d.norm() > 1e-6 {
                    self.headings[i] = d.y.atan2(d.x);
                }
            }
        }
    }
}

/// Where the camera should sit relative to the actor: a sphere of radius
/// `rho` around the actor, azimuth `phi_rel` measured from the actor's
/// heading, elevation `theta_rel`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotSpec {
    pub rho: f64,
    pub phi_rel: f64,
    pub theta_rel: f64,
}

impl ShotSpec {
    pub fn validate(&self) -> Result<(), PlannerError> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(PlannerError::InvalidShot(format!("rho must be positive, got {}", self.rho)));
        }
        if !(0.0..=std::f64::consts::TAU).contains(&self.phi_rel) {
            return Err(PlannerError::InvalidShot(format!(
                "phi_rel must lie in [0, 2pi], got {}",
                self.phi_rel
            )));
        }
        if !(-std::f64::consts::PI..=std::f64::consts::PI).contains(&self.theta_rel) {
            return Err(PlannerError::InvalidShot(format!(
                "theta_rel must lie in [-pi, pi], got {}",
                self.theta_rel
            )));
        }
        Ok(())
    }

    /// World-frame offset from actor to camera for an actor heading `psi`.
    pub fn offset(&self, psi: f64) -> Vector3<f64> {
        let az = psi + self.phi_rel;
        Vector3::new(
            self.rho * az.cos() * self.theta_rel.cos(),
            self.rho * az.sin() * self.theta_rel.cos(),
            self.rho * self.theta_rel.sin(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Shot adherence weight.
    pub lambda1: f64,
    /// Obstacle clearance weight.
    pub lambda2: f64,
    /// Line-of-sight weight.
    pub lambda3: f64,
    /// Smoothness weight per difference order (velocity, acceleration, jerk).
    pub alpha: [f64; 3],
    /// Highest difference order penalized, 1 to 3.
    pub d_max: usize,
    /// Clearance distance below which the obstacle potential activates, m.
    pub epsilon_obs: f64,
    /// Step size divisor: each iterate moves 1/eta of the solved step.
    pub eta: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the per-waypoint RMS preconditioned gradient.
    pub grad_tolerance: f64,
    /// Waypoints per plan.
    pub n: usize,
    /// Horizon, s.
    pub t_f: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            lambda1: 10.0,
            lambda2: 100.0,
            lambda3: 50.0,
            alpha: [1.0, 1.0, 1.0],
            d_max: 3,
            epsilon_obs: 2.5,
            eta: 1.0,
            max_iterations: 10,
            grad_tolerance: 1e-3,
            n: 51,
            t_f: 10.0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PlannerError::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(PlannerError::InvalidConfig("alpha weights must be non-negative".into()));
        }
        if !(1..=3).contains(&self.d_max) {
            return Err(PlannerError::InvalidConfig(format!(
                "d_max must be 1 to 3, got {}",
                self.d_max
            )));
        }
        if !(self.epsilon_obs.is_finite() && self.epsilon_obs > 0.0) {
            return Err(PlannerError::InvalidConfig(format!(
                "epsilon_obs must be positive, got {}",
                self.epsilon_obs
            )));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(PlannerError::InvalidConfig(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if self.max_iterations < 1 {
            return Err(PlannerError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !(self.grad_tolerance.is_finite() && self.grad_tolerance > 0.0) {
            return Err(PlannerError::InvalidConfig(format!(
                "grad_tolerance must be positive, got {}",
                self.grad_tolerance
            )));
        }
        if self.n < self.d_max + 1 {
            return Err(PlannerError::InvalidConfig(format!(
                "n must be at least d_max + 1 = {}, got {}",
                self.d_max + 1,
                self.n
            )));
        }
        if !(self.t_f.is_finite() && self.t_f > 0.0) {
            return Err(PlannerError::InvalidConfig(format!(
                "t_f must be positive, got {}",
                self.t_f
            )));
        }
        Ok(())
    }
}

/// J(phi) = 1/2 tr(phi' A phi) + tr(phi' b) + c, the closed form the
/// quadratic cost terms share. The preconditioner is assembled from the
/// `a` blocks of these.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: f64,
}

impl QuadraticForm {
    pub fn smoothness(n: usize, dt: f64, cfg: &PlannerConfig) -> Result<Self, PlannerError> {
        let op = smoothness_operator(n, dt, &cfg.alpha, cfg.d_max)?;
        let norm = (n - 1) as f64;
        Ok(QuadraticForm { a: op / norm, b: DMatrix::zeros(n, 3), c: 0.0 })
    }

    pub fn shot(target: &Trajectory) -> Self {
        let n = target.n();
        let norm = (n - 1) as f64;
        let phi_s = target.waypoint_matrix();
        let c = phi_s.norm_squared() / (2.0 * norm);
        QuadraticForm { a: DMatrix::identity(n, n) / norm, b: -phi_s / norm, c }
    }

    pub fn eval(&self, phi: &DMatrix<f64>) -> f64 {
        0.5 * (phi.transpose() * &self.a * phi).trace() + (phi.transpose() * &self.b).trace() + self.c
    }

    pub fn gradient(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a * phi + &self.b
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut v = 1.0;
    for i in 0..k {
        v = v * (n - i) as f64 / (i + 1) as f64;
    }
    v
}

/// Order-d forward difference operator on n samples spaced dt apart,
/// (n-d) x n, scaled so rows approximate the d-th time derivative.
fn difference_operator(n: usize, order: usize, dt: f64) -> DMatrix<f64> {
    let rows = n - order;
    let scale = dt.powi(-(order as i32));
    let mut d = DMatrix::zeros(rows, n);
    for r in 0..rows {
        for k in 0..=order {
            let sign = if (order - k) % 2 == 0 { 1.0 } else { -1.0 };
            d[(r, r + k)] = sign * binomial(order, k) * scale;
        }
    }
    d
}

/// Sum of weighted squared-difference quadratics, unnormalized:
/// sum_d alpha_d D_d' D_d.
pub fn smoothness_operator(
    n: usize,
    dt: f64,
    alpha: &[f64; 3],
    d_max: usize,
) -> Result<DMatrix<f64>, PlannerError> {
    if !(1..=3).contains(&d_max) {
        return Err(PlannerError::InvalidConfig(format!("d_max must be 1 to 3, got {d_max}")));
    }
    if n < d_max + 1 {
        return Err(PlannerError::InvalidConfig(format!(
            "need at least d_max + 1 = {} waypoints, got {n}",
            d_max + 1
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(PlannerError::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let mut a = DMatrix::zeros(n, n);
    for order in 1..=d_max {
        let w = alpha[order - 1];
        if w == 0.0 {
            continue;
        }
        let d = difference_operator(n, order, dt);
        a += d.transpose() * d * w;
    }
    Ok(a)
}

/// Smoothness cost and gradient. The first waypoint is the flight
/// constraint, so its gradient row is zeroed.
pub fn smoothness_cost(
    traj: &Trajectory,
    cfg: &PlannerConfig,
) -> Result<(f64, DMatrix<f64>), PlannerError> {
    let form = QuadraticForm::smoothness(traj.n(), traj.dt(), cfg)?;
    let phi = traj.waypoint_matrix();
    let cost = form.eval(&phi);
    let mut grad = form.gradient(&phi);
    zero_row(&mut grad, 0);
    Ok((cost, grad))
}

/// The camera path that would hold the shot exactly: each actor sample
/// displaced along the shot sphere, yaw facing the actor.
pub fn ideal_shot_trajectory(
    actor: &ActorForecast,
    shot: &ShotSpec,
) -> Result<Trajectory, PlannerError> {
    shot.validate()?;
    if actor.samples.len() < 2 {
        return Err(PlannerError::InvalidTrajectory(format!(
            "actor forecast needs at least 2 samples, got {}",
            actor.samples.len()
        )));
    }
    let mut waypoints = Vec::with_capacity(actor.samples.len());
    let mut headings = Vec::with_capacity(actor.samples.len());
    for s in &actor.samples {
        let off = shot.offset(s.heading);
        waypoints.push(s.position + off);
        headings.push((-off.y).atan2(-off.x));
    }
    let t_f = actor.samples.last().expect("checked non-empty").t;
    Trajectory::new(waypoints, headings, t_f)
}

/// Mean squared deviation from the ideal shot path.
pub fn shot_quality_cost(
    traj: &Trajectory,
    shot_traj: &Trajectory,
) -> Result<(f64, DMatrix<f64>), PlannerError> {
    let n = traj.n();
    if shot_traj.n() != n {
        return Err(PlannerError::SizeMismatch { traj: n, other: shot_traj.n() });
    }
    let norm = (n - 1) as f64;
    let mut cost = 0.0;
    let mut grad = DMatrix::zeros(n, 3);
    for i in 0..n {
        let d = traj.waypoints[i] - shot_traj.waypoints[i];
        cost += d.norm_squared();
        if i > 0 {
            for a in 0..3 {
                grad[(i, a)] = d[a] / norm;
            }
        }
    }
    Ok((cost / (2.0 * norm), grad))
}

/// Clearance penalty on a signed distance: linear inside obstacles,
/// quadratic ramp within `epsilon_obs` of the surface, zero beyond.
/// Continuous with continuous slope at both joins.
pub fn obstacle_potential(d: f64, epsilon_obs: f64) -> f64 {
    potential_and_slope(d, epsilon_obs).0
}

fn potential_and_slope(d: f64, eps: f64) -> (f64, f64) {
    if d < 0.0 {
        (-d + 0.5 * eps, -1.0)
    } else if d <= eps {
        let r = d - eps;
        (r * r / (2.0 * eps), r / eps)
    } else {
        (0.0, 0.0)
    }
}

/// Obstacle proximity integrated along the path: per segment, potential at
/// the start waypoint times segment length. Arc-length weighting keeps the
/// optimizer from cheating by re-timing waypoints through obstacles.
pub fn safety_cost(
    traj: &Trajectory,
    field: FieldView<'_>,
    cfg: &PlannerConfig,
) -> (f64, DMatrix<f64>) {
    let n = traj.n();
    let w = &traj.waypoints;
    let mut cost = 0.0;
    let mut grad = DMatrix::zeros(n, 3);
    for i in 0..n - 1 {
        let (c, gc) = field.clearance(&w[i], cfg.epsilon_obs);
        let seg = w[i + 1] - w[i];
        let len = seg.norm();
        cost += c * len;
        if len > 1e-12 {
            let dir = seg / len;
            add_row(&mut grad, i, gc * len - dir * c);
            add_row(&mut grad, i + 1, dir * c);
        }
    }
    zero_row(&mut grad, 0);
    (cost, grad)
}

/// Visibility term: integrates the clearance potential along every
/// drone-to-actor sight line, weighted by sight line length and by how far
/// the drone moves while that line is blocked.
pub fn occlusion_cost(
    traj: &Trajectory,
    actor: &ActorForecast,
    field: FieldView<'_>,
    cfg: &PlannerConfig,
) -> Result<(f64, DMatrix<f64>), PlannerError> {
    let n = traj.n();
    if actor.samples.len() != n {
        return Err(PlannerError::SizeMismatch { traj: n, other: actor.samples.len() });
    }
    let k = OCCLUSION_SAMPLES;
    let dtau = 1.0 / (k - 1) as f64;
    let w = &traj.waypoints;
    let mut cost = 0.0;
    let mut grad = DMatrix::zeros(n, 3);
    for i in 0..n - 1 {
        let q = w[i];
        let a = actor.samples[i].position;
        let arc_v = w[i + 1] - q;
        let arc = arc_v.norm();
        let los = q - a;
        let dist = los.norm();
        if arc <= 1e-12 || dist <= 1e-12 {
            continue;
        }
        // trapezoid over the sight line, tau = 0 at the actor
        let mut inner = 0.0;
        let mut dinner_dq = Vector3::zeros();
        for j in 0..k {
            let tau = j as f64 * dtau;
            let wgt = dtau * if j == 0 || j == k - 1 { 0.5 } else { 1.0 };
            let p = a + los * tau;
            let (c, gc) = field.clearance(&p, cfg.epsilon_obs);
            inner += wgt * c;
            dinner_dq += gc * (wgt * tau);
        }
        cost += inner * dist * arc;
        let arc_dir = arc_v / arc;
        let los_dir = los / dist;
        add_row(&mut grad, i, dinner_dq * (dist * arc) + los_dir * (inner * arc) - arc_dir * (inner * dist));
        add_row(&mut grad, i + 1, arc_dir * (inner * dist));
    }
    zero_row(&mut grad, 0);
    Ok((cost, grad))
}

/// Per-term cost values of one evaluation, before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    pub smooth: f64,
    pub shot: f64,
    pub obstacle: f64,
    pub occlusion: f64,
}

impl CostTerms {
    pub fn weighted_total(&self, cfg: &PlannerConfig) -> f64 {
        self.smooth
            + cfg.lambda1 * self.shot
            + cfg.lambda2 * self.obstacle
            + cfg.lambda3 * self.occlusion
    }
}

fn assemble_cost(
    traj: &Trajectory,
    actor: &ActorForecast,
    shot_traj: &Trajectory,
    field: FieldView<'_>,
    cfg: &PlannerConfig,
    smooth_form: &QuadraticForm,
) -> Result<(CostTerms, DMatrix<f64>), PlannerError> {
    let phi = traj.waypoint_matrix();
    let j_smooth = smooth_form.eval(&phi);
    let mut grad = smooth_form.gradient(&phi);
    zero_row(&mut grad, 0);

    let (j_shot, g_shot) = shot_quality_cost(traj, shot_traj)?;
    let (j_obs, g_obs) = safety_cost(traj, field, cfg);
    let (j_occ, g_occ) = occlusion_cost(traj, actor, field, cfg)?;

    grad += g_shot * cfg.lambda1;
    grad += g_obs * cfg.lambda2;
    grad += g_occ * cfg.lambda3;
    Ok((CostTerms { smooth: j_smooth, shot: j_shot, obstacle: j_obs, occlusion: j_occ }, grad))
}

/// Weighted total objective and its gradient, start row zeroed.
pub fn total_cost(
    traj: &Trajectory,
    actor: &ActorForecast,
    shot: &ShotSpec,
    field: FieldView<'_>,
    cfg: &PlannerConfig,
) -> Result<(f64, DMatrix<f64>), PlannerError> {
    let shot_traj = ideal_shot_trajectory(actor, shot)?;
    let smooth_form = QuadraticForm::smoothness(traj.n(), traj.dt(), cfg)?;
    let (terms, grad) = assemble_cost(traj, actor, &shot_traj, field, cfg, &smooth_form)?;
    Ok((terms.weighted_total(cfg), grad))
}

/// What one call to [`plan`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// Descent steps actually applied.
    pub iterations: usize,
    /// True when the preconditioned gradient fell under tolerance.
    pub converged: bool,
    /// True when a non-finite cost or gradient appeared; the returned
    /// trajectory is the last finite iterate.
    pub aborted: bool,
    pub cost: f64,
    pub terms: CostTerms,
    /// Per-waypoint RMS of the final preconditioned gradient.
    pub grad_rms: f64,
    pub wall_ms: f64,
}

/// Minimizes the objective from `initial`, holding the first waypoint
/// fixed. The quadratic-term Hessian restricted to the movable waypoints is
/// factorized once and preconditions every step. Returns the optimized
/// trajectory with headings re-pointed at the actor.
pub fn plan(
    initial: &Trajectory,
    actor: &ActorForecast,
    shot: &ShotSpec,
    field: FieldView<'_>,
    cfg: &PlannerConfig,
) -> Result<(Trajectory, Diagnostics), PlannerError> {
    cfg.validate()?;
    shot.validate()?;
    let start = Instant::now();
    let n = initial.n();
    if n < cfg.d_max + 1 {
        return Err(PlannerError::InvalidConfig(format!(
            "trajectory has {n} waypoints, d_max {} needs at least {}",
            cfg.d_max,
            cfg.d_max + 1
        )));
    }
    if actor.samples.len() != n {
        return Err(PlannerError::SizeMismatch { traj: n, other: actor.samples.len() });
    }
    let dt = initial.dt();
    let m = n - 1;

    let smooth_form = QuadraticForm::smoothness(n, dt, cfg)?;
    let shot_traj = ideal_shot_trajectory(actor, shot)?;
    // Hessian of smoothness + lambda1 * shot on the movable block
    let mut precond = smooth_form.a.view((1, 1), (m, m)).into_owned();
    let shot_diag = cfg.lambda1 / (n - 1) as f64;
    for i in 0..m {
        precond[(i, i)] += shot_diag;
    }
    let chol = nalgebra::linalg::Cholesky::new(precond).ok_or_else(|| {
        PlannerError::InvalidConfig("preconditioner is not positive definite".into())
    })?;

    let mut traj = initial.clone();
    let mut prev = traj.clone();
    let mut iterations = 0usize;
    let mut converged = false;
    let mut aborted = false;
    let mut last_terms =
        CostTerms { smooth: f64::NAN, shot: f64::NAN, obstacle: f64::NAN, occlusion: f64::NAN };
    let mut last_cost = f64::NAN;
    let mut last_rms = f64::NAN;

    loop {
        let (terms, grad) = assemble_cost(&traj, actor, &shot_traj, field, cfg, &smooth_form)?;
        let j = terms.weighted_total(cfg);
        if !j.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            aborted = true;
            traj = prev;
            break;
        }
        let gf = grad.view((1, 0), (m, 3)).into_owned();
        let step = chol.solve(&gf);
        let rms = step.norm() / (m as f64).sqrt();
        last_terms = terms;
        last_cost = j;
        last_rms = rms;
        if rms < cfg.grad_tolerance {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iterations {
            break;
        }
        prev = traj.clone();
        for i in 0..m {
            for a in 0..3 {
                traj.waypoints[i + 1][a] -= step[(i, a)] / cfg.eta;
            }
        }
        iterations += 1;
    }

    traj.point_toward(actor);
    let diag = Diagnostics {
        iterations,
        converged,
        aborted,
        cost: last_cost,
        terms: last_terms,
        grad_rms: last_rms,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((traj, diag))
}

fn zero_row(m: &mut DMatrix<f64>, row: usize) {
    for a in 0..3 {
        m[(row, a)] = 0.0;
    }
}

fn add_row(m: &mut DMatrix<f64>, row: usize, v: Vector3<f64>) {
    for a in 0..3 {
        m[(row, a)] += v[a];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::ForecastSample;
    use crate::grid::{GridConfig, OccupancyGrid};
    use crate::sdf::{DistanceField, SdfConfig};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn straight_traj(from: Vector3<f64>, to: Vector3<f64>, n: usize, t_f: f64) -> Trajectory {
        let pts: Vec<_> = (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                from + (to - from) * s
            })
            .collect();
        Trajectory::new(pts, vec![0.0; n], t_f).unwrap()
    }

    fn random_traj(rng: &mut impl Rng, n: usize, t_f: f64, lo: f64, hi: f64) -> Trajectory {
        let pts: Vec<_> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(lo..hi),
                    rng.random_range(lo..hi),
                    rng.random_range(lo..hi),
                )
            })
            .collect();
        let headings: Vec<_> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        Trajectory::new(pts, headings, t_f).unwrap()
    }

    fn stationary_actor(p: Vector3<f64>, n: usize, dt: f64) -> ActorForecast {
        ActorForecast {
            samples: (0..n)
                .map(|k| ForecastSample { t: k as f64 * dt, position: p, heading: 0.0 })
                .collect(),
            dt,
        }
    }

    /// Free space everywhere except the listed occupied voxels.
    fn field_fixture(
        dims: [usize; 3],
        occupied: &[crate::Voxel],
    ) -> (OccupancyGrid, DistanceField) {
        let cfg = GridConfig { dims, resolution: 1.0, origin: [0.0; 3], ..GridConfig::default() };
        let mut grid = OccupancyGrid::new(cfg).unwrap();
        grid.cells_mut().fill(0);
        for &v in occupied {
            grid.set_cell(v, 255);
        }
        let field = DistanceField::batch_recompute(&grid, SdfConfig::default()).unwrap();
        (grid, field)
    }

    /// Central finite differences of an arbitrary scalar over the movable
    /// waypoints; row 0 left zero to match the ops' start-row convention.
    fn fd_gradient<F: Fn(&Trajectory) -> f64>(traj: &Trajectory, f: F, h: f64) -> DMatrix<f64> {
        let n = traj.n();
        let mut g = DMatrix::zeros(n, 3);
        for i in 1..n {
            for a in 0..3 {
                let mut hi = traj.clone();
                let mut lo = traj.clone();
                hi.waypoints[i][a] += h;
                lo.waypoints[i][a] -= h;
                g[(i, a)] = (f(&hi) - f(&lo)) / (2.0 * h);
            }
        }
        g
    }

    fn rel_err(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
        (got - want).norm() / want.norm().max(1.0)
    }

    #[test]
    fn identical_waypoints_have_zero_smoothness() {
        let traj = Trajectory::hover(Vector3::new(3.0, -1.0, 2.0), 0.0, 12, 4.0).unwrap();
        let (cost, grad) = smoothness_cost(&traj, &PlannerConfig::default()).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(grad.norm(), 0.0);
    }

    #[test]
    fn constant_speed_line_costs_half_speed_squared() {
        let cfg = PlannerConfig { alpha: [1.0, 0.0, 0.0], ..PlannerConfig::default() };
        let v = 2.3;
        let t_f = 4.0;
        let traj = straight_traj(
            Vector3::zeros(),
            Vector3::new(v * t_f, 0.0, 0.0),
            5,
            t_f,
        );
        let (cost, _) = smoothness_cost(&traj, &cfg).unwrap();
        assert_relative_eq!(cost, v * v / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let cfg = PlannerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let traj = random_traj(&mut rng, 9, 4.0, -5.0, 5.0);
            let (_, grad) = smoothness_cost(&traj, &cfg).unwrap();
            let fd = fd_gradient(&traj, |t| smoothness_cost(t, &cfg).unwrap().0, 1e-6);
            assert!(rel_err(&grad, &fd) < 1e-6, "rel err {}", rel_err(&grad, &fd));
        }
    }

    #[test]
    fn too_few_waypoints_for_third_order_is_an_error() {
        let traj = straight_traj(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), 3, 1.0);
        assert!(smoothness_cost(&traj, &PlannerConfig::default()).is_err());
    }

    #[test]
    fn shot_offset_examples() {
        let shot = ShotSpec { rho: 5.0, phi_rel: 0.0, theta_rel: 0.0 };
        assert_relative_eq!(
            (shot.offset(0.0) - Vector3::new(5.0, 0.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-15
        );
        let overhead = ShotSpec { rho: 3.0, phi_rel: 1.2, theta_rel: std::f64::consts::FRAC_PI_2 };
        for psi in [0.0, 0.7, -2.0] {
            let off = overhead.offset(psi);
            assert_relative_eq!(off.x, 0.0, epsilon = 1e-12);
            assert_relative_eq!(off.y, 0.0, epsilon = 1e-12);
            assert_relative_eq!(off.z, 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ideal_shot_points_sit_on_the_rho_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shot = ShotSpec { rho: 4.2, phi_rel: 2.0, theta_rel: 0.6 };
        let samples: Vec<_> = (0..20)
            .map(|k| ForecastSample {
                t: k as f64 * 0.2,
                position: Vector3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(0.0..3.0),
                ),
                heading: rng.random_range(-3.0..3.0),
            })
            .collect();
        let actor = ActorForecast { samples, dt: 0.2 };
        let ideal = ideal_shot_trajectory(&actor, &shot).unwrap();
        for (w, s) in ideal.waypoints.iter().zip(&actor.samples) {
            assert_relative_eq!((w - s.position).norm(), shot.rho, epsilon = 1e-12);
        }
    }

    #[test]
    fn shot_cost_of_single_displaced_waypoint() {
        let base = straight_traj(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), 2, 1.0);
        let mut moved = base.clone();
        moved.waypoints[1] += Vector3::new(3.0, 4.0, 0.0);
        let (cost, _) = shot_quality_cost(&moved, &base).unwrap();
        assert_relative_eq!(cost, 25.0 / 2.0, epsilon = 1e-12);
        let (zero, grad) = shot_quality_cost(&base, &base).unwrap();
        assert_eq!(zero, 0.0);
        assert_eq!(grad.norm(), 0.0);
    }

    #[test]
    fn shot_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = random_traj(&mut rng, 8, 3.0, -4.0, 4.0);
        let traj = random_traj(&mut rng, 8, 3.0, -4.0, 4.0);
        let (_, grad) = shot_quality_cost(&traj, &target).unwrap();
        let fd = fd_gradient(&traj, |t| shot_quality_cost(t, &target).unwrap().0, 1e-6);
        assert!(rel_err(&grad, &fd) < 1e-8, "rel err {}", rel_err(&grad, &fd));
    }

    #[test]
    fn potential_fixed_values_and_smooth_joins() {
        assert_relative_eq!(obstacle_potential(0.0, 2.5), 1.25, epsilon = 1e-15);
        assert_relative_eq!(obstacle_potential(-1.0, 2.5), 2.25, epsilon = 1e-15);
        assert_eq!(obstacle_potential(2.5, 2.5), 0.0);
        assert_eq!(obstacle_potential(7.0, 2.5), 0.0);
        // value and slope agree from both sides of each join
        for join in [0.0, 2.5] {
            let h = 1e-7;
            let below = obstacle_potential(join - h, 2.5);
            let above = obstacle_potential(join + h, 2.5);
            assert!((below - above).abs() < 1e-6);
            let slope_below = (obstacle_potential(join, 2.5) - obstacle_potential(join - h, 2.5)) / h;
            let slope_above = (obstacle_potential(join + h, 2.5) - obstacle_potential(join, 2.5)) / h;
            assert!((slope_below - slope_above).abs() < 1e-5);
        }
    }

    #[test]
    fn safety_vanishes_far_from_obstacles_and_on_stationary_paths() {
        let (grid, field) = field_fixture([20, 20, 10], &[crate::Voxel::new(2, 2, 2)]);
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig::default();
        let far = straight_traj(
            Vector3::new(12.0, 12.0, 5.0),
            Vector3::new(17.0, 17.0, 7.0),
            10,
            5.0,
        );
        let (cost, grad) = safety_cost(&far, view, &cfg);
        assert_eq!(cost, 0.0);
        assert_eq!(grad.norm(), 0.0);

        let parked = Trajectory::hover(Vector3::new(2.8, 2.8, 2.8), 0.0, 10, 5.0).unwrap();
        let (cost, _) = safety_cost(&parked, view, &cfg);
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn safety_matches_dense_quadrature_near_a_point_obstacle() {
        let (grid, field) = field_fixture([20, 20, 10], &[crate::Voxel::new(10, 10, 5)]);
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig::default();
        // obstacle center (10.5, 10.5, 5.5); pass 1.25 m = eps/2 away
        let traj = straight_traj(
            Vector3::new(3.0, 11.75, 5.5),
            Vector3::new(18.0, 11.75, 5.5),
            51,
            10.0,
        );
        let (cost, _) = safety_cost(&traj, view, &cfg);
        assert!(cost > 0.0);
        // rectangle rule over 1000 sub-samples of the same path
        let m = 1000;
        let mut dense = 0.0;
        for k in 0..m {
            let t0 = traj.t_f * k as f64 / m as f64;
            let t1 = traj.t_f * (k + 1) as f64 / m as f64;
            let (p0, _) = traj.sample(t0);
            let (p1, _) = traj.sample(t1);
            dense += view.clearance(&p0, cfg.epsilon_obs).0 * (p1 - p0).norm();
        }
        let rel = (cost - dense).abs() / dense;
        assert!(rel < 0.05, "discretization off by {rel}");
    }

    #[test]
    fn safety_gradient_matches_finite_differences() {
        let (grid, field) = field_fixture(
            [20, 20, 10],
            &[crate::Voxel::new(10, 10, 5), crate::Voxel::new(8, 11, 5)],
        );
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let traj = random_traj(&mut rng, 10, 4.0, 4.0, 16.0);
            let (_, grad) = safety_cost(&traj, view, &cfg);
            let fd = fd_gradient(&traj, |t| safety_cost(t, view, &cfg).0, 1e-6);
            assert!(rel_err(&grad, &fd) < 1e-4, "rel err {}", rel_err(&grad, &fd));
        }
    }

    #[test]
    fn out_of_bounds_queries_price_like_deep_obstacle_with_flat_gradient() {
        let (grid, field) = field_fixture([20, 20, 10], &[]);
        let view = FieldView { grid: &grid, field: &field };
        let (c, g) = view.clearance(&Vector3::new(-5.0, 3.0, 3.0), 2.5);
        assert_relative_eq!(c, field.config().truncation + 1.25, epsilon = 1e-12);
        assert_eq!(g, Vector3::zeros());
    }

    #[test]
    fn occlusion_zero_with_clear_sight_and_degenerate_geometry() {
        let (grid, field) = field_fixture([20, 20, 10], &[crate::Voxel::new(2, 17, 8)]);
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig::default();
        let n = 12;
        let traj = straight_traj(
            Vector3::new(12.0, 4.0, 5.0),
            Vector3::new(16.0, 8.0, 5.0),
            n,
            5.0,
        );
        let actor = stationary_actor(Vector3::new(12.0, 9.0, 1.5), n, traj.dt());
        let (cost, grad) = occlusion_cost(&traj, &actor, view, &cfg).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(grad.norm(), 0.0);

        // drone parked exactly on the actor: both factors vanish
        let parked = Trajectory::hover(Vector3::new(12.0, 9.0, 1.5), 0.0, n, 5.0).unwrap();
        let actor2 = stationary_actor(Vector3::new(12.0, 9.0, 1.5), n, parked.dt());
        let (cost, _) = occlusion_cost(&parked, &actor2, view, &cfg).unwrap();
        assert_eq!(cost, 0.0);
    }

    fn wall_fixture() -> (OccupancyGrid, DistanceField) {
        let mut occupied = Vec::new();
        for y in 4..20 {
            for z in 0..10 {
                occupied.push(crate::Voxel::new(12, y, z));
            }
        }
        field_fixture([24, 24, 12], &occupied)
    }

    #[test]
    fn occlusion_behind_a_wall_matches_dense_double_quadrature() {
        let (grid, field) = wall_fixture();
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig::default();
        let n = 51;
        let traj = straight_traj(
            Vector3::new(18.0, 8.0, 5.0),
            Vector3::new(18.0, 16.0, 5.0),
            n,
            10.0,
        );
        let actor = stationary_actor(Vector3::new(6.0, 12.0, 2.0), n, traj.dt());
        let (cost, _) = occlusion_cost(&traj, &actor, view, &cfg).unwrap();
        assert!(cost > 0.0, "wall must occlude");

        // dense rectangle rule in time, dense trapezoid along each sight line
        let (mt, mtau) = (2000usize, 400usize);
        let mut dense = 0.0;
        let a = actor.samples[0].position;
        for k in 0..mt {
            let t0 = traj.t_f * k as f64 / mt as f64;
            let t1 = traj.t_f * (k + 1) as f64 / mt as f64;
            let (q0, _) = traj.sample(t0);
            let (q1, _) = traj.sample(t1);
            let dist = (q0 - a).norm();
            let mut inner = 0.0;
            for j in 0..mtau {
                let tau0 = j as f64 / (mtau - 1) as f64;
                let wgt = if j == 0 || j == mtau - 1 { 0.5 } else { 1.0 } / (mtau - 1) as f64;
                let p = a + (q0 - a) * tau0;
                inner += wgt * view.clearance(&p, cfg.epsilon_obs).0;
            }
            dense += inner * dist * (q1 - q0).norm();
        }
        let rel = (cost - dense).abs() / dense;
        assert!(rel < 0.05, "discretization off by {rel}");
    }

    #[test]
    fn occlusion_gradient_matches_finite_differences() {
        let (grid, field) = wall_fixture();
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let traj = random_traj(&mut rng, 10, 4.0, 10.0, 22.0);
            let actor = stationary_actor(Vector3::new(6.0, 12.0, 2.0), 10, traj.dt());
            let (_, grad) = occlusion_cost(&traj, &actor, view, &cfg).unwrap();
            let fd =
                fd_gradient(&traj, |t| occlusion_cost(t, &actor, view, &cfg).unwrap().0, 1e-6);
            assert!(rel_err(&grad, &fd) < 1e-4, "rel err {}", rel_err(&grad, &fd));
        }
    }

    #[test]
    fn total_cost_reduces_to_smoothness_when_weights_vanish() {
        let (grid, field) = field_fixture([20, 20, 10], &[crate::Voxel::new(10, 10, 5)]);
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..PlannerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traj = random_traj(&mut rng, 10, 4.0, 4.0, 16.0);
        let actor = stationary_actor(Vector3::new(10.0, 4.0, 2.0), 10, traj.dt());
        let shot = ShotSpec { rho: 4.0, phi_rel: 0.0, theta_rel: 0.3 };
        let (j, g) = total_cost(&traj, &actor, &shot, view, &cfg).unwrap();
        let (js, gs) = smoothness_cost(&traj, &cfg).unwrap();
        assert_relative_eq!(j, js, epsilon = 1e-12);
        assert_relative_eq!((g - gs).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn total_cost_is_the_weighted_sum_of_components() {
        let (grid, field) = wall_fixture();
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let traj = random_traj(&mut rng, 12, 5.0, 8.0, 20.0);
        let actor = stationary_actor(Vector3::new(6.0, 12.0, 2.0), 12, traj.dt());
        let shot = ShotSpec { rho: 5.0, phi_rel: 1.0, theta_rel: 0.4 };
        let (j, _) = total_cost(&traj, &actor, &shot, view, &cfg).unwrap();
        let ideal = ideal_shot_trajectory(&actor, &shot).unwrap();
        let parts = smoothness_cost(&traj, &cfg).unwrap().0
            + cfg.lambda1 * shot_quality_cost(&traj, &ideal).unwrap().0
            + cfg.lambda2 * safety_cost(&traj, view, &cfg).0
            + cfg.lambda3 * occlusion_cost(&traj, &actor, view, &cfg).unwrap().0;
        assert!((j - parts).abs() <= 1e-12 * parts.abs().max(1.0));
    }

    /// Solves the quadratic-only objective directly: movable block of
    /// (A_smooth + l1 I) phi = l1 phi_shot - coupling to the fixed start.
    fn quadratic_minimizer(
        initial: &Trajectory,
        shot_traj: &Trajectory,
        cfg: &PlannerConfig,
    ) -> DMatrix<f64> {
        let n = initial.n();
        let m = n - 1;
        let norm = (n - 1) as f64;
        let a = smoothness_operator(n, initial.dt(), &cfg.alpha, cfg.d_max).unwrap() / norm;
        let phi_s = shot_traj.waypoint_matrix();
        let mut lhs = a.view((1, 1), (m, m)).into_owned();
        for i in 0..m {
            lhs[(i, i)] += cfg.lambda1 / norm;
        }
        let start = initial.waypoint_matrix().row(0).into_owned();
        let coupling = a.view((1, 0), (m, 1)).into_owned() * start;
        let rhs = phi_s.view((1, 0), (m, 3)).into_owned() * (cfg.lambda1 / norm) - coupling;
        lhs.lu().solve(&rhs).unwrap()
    }

    #[test]
    fn quadratic_objective_reaches_the_analytic_minimum() {
        let (grid, field) = field_fixture([20, 20, 10], &[]);
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig {
            lambda2: 0.0,
            lambda3: 0.0,
            max_iterations: 3,
            grad_tolerance: 1e-10,
            ..PlannerConfig::default()
        };
        let n = 21;
        let traj = straight_traj(Vector3::new(4.0, 4.0, 4.0), Vector3::new(15.0, 6.0, 5.0), n, 5.0);
        let actor = stationary_actor(Vector3::new(10.0, 14.0, 1.0), n, traj.dt());
        let shot = ShotSpec { rho: 4.0, phi_rel: 0.5, theta_rel: 0.2 };
        let (out, diag) = plan(&traj, &actor, &shot, view, &cfg).unwrap();
        assert!(diag.converged);
        let ideal = ideal_shot_trajectory(&actor, &shot).unwrap();
        let want = quadratic_minimizer(&traj, &ideal, &cfg);
        for i in 1..n {
            for a in 0..3 {
                assert_relative_eq!(out.waypoints[i][a], want[(i - 1, a)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn unit_step_on_quadratic_objective_is_an_exact_newton_solve() {
        let (grid, field) = field_fixture([20, 20, 10], &[]);
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig {
            lambda2: 0.0,
            lambda3: 0.0,
            eta: 1.0,
            max_iterations: 1,
            grad_tolerance: 1e-8,
            ..PlannerConfig::default()
        };
        let n = 21;
        let traj = straight_traj(Vector3::new(4.0, 4.0, 4.0), Vector3::new(14.0, 12.0, 6.0), n, 5.0);
        let actor = stationary_actor(Vector3::new(10.0, 14.0, 1.0), n, traj.dt());
        let shot = ShotSpec { rho: 3.0, phi_rel: 0.0, theta_rel: 0.1 };
        let (_, diag) = plan(&traj, &actor, &shot, view, &cfg).unwrap();
        assert_eq!(diag.iterations, 1);
        assert!(diag.converged, "grad rms {} not under 1e-8", diag.grad_rms);
    }

    #[test]
    fn starting_at_the_optimum_changes_nothing() {
        let (grid, field) = field_fixture([20, 20, 10], &[]);
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig {
            lambda2: 0.0,
            lambda3: 0.0,
            ..PlannerConfig::default()
        };
        let n = 21;
        let seed = straight_traj(Vector3::new(4.0, 4.0, 4.0), Vector3::new(14.0, 12.0, 6.0), n, 5.0);
        let actor = stationary_actor(Vector3::new(10.0, 14.0, 1.0), n, seed.dt());
        let shot = ShotSpec { rho: 3.0, phi_rel: 0.0, theta_rel: 0.1 };
        let (opt, _) = plan(&seed, &actor, &shot, view, &cfg).unwrap();
        let (again, diag) = plan(&opt, &actor, &shot, view, &cfg).unwrap();
        assert_eq!(diag.iterations, 0);
        assert!(diag.converged);
        assert_eq!(again, opt);
    }

    #[test]
    fn start_waypoint_survives_optimization_bit_for_bit() {
        let (grid, field) = wall_fixture();
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig::default();
        let n = 21;
        let start = Vector3::new(18.0, 7.3, 5.1);
        let traj = straight_traj(start, Vector3::new(18.0, 17.0, 5.0), n, 5.0);
        let actor = stationary_actor(Vector3::new(6.0, 12.0, 2.0), n, traj.dt());
        let shot = ShotSpec { rho: 6.0, phi_rel: 0.0, theta_rel: 0.4 };
        let (out, diag) = plan(&traj, &actor, &shot, view, &cfg).unwrap();
        assert!(!diag.aborted);
        assert!(diag.iterations > 0);
        assert_eq!(out.waypoints[0], start);
        assert!(out.waypoints[n - 1] != traj.waypoints[n - 1], "optimizer should move the tail");
    }

    #[test]
    fn quadratic_descent_is_monotone_for_unit_and_larger_eta() {
        let (grid, field) = field_fixture([20, 20, 10], &[]);
        let view = FieldView { grid: &grid, field: &field };
        let n = 15;
        let traj = straight_traj(Vector3::new(4.0, 4.0, 4.0), Vector3::new(12.0, 5.0, 6.0), n, 5.0);
        let actor = stationary_actor(Vector3::new(10.0, 12.0, 1.0), n, traj.dt());
        let shot = ShotSpec { rho: 4.0, phi_rel: 0.3, theta_rel: 0.2 };
        for eta in [1.0, 2.5] {
            let mut costs = Vec::new();
            for cap in 0..6 {
                let cfg = PlannerConfig {
                    lambda2: 0.0,
                    lambda3: 0.0,
                    eta,
                    max_iterations: cap.max(1),
                    grad_tolerance: 1e-14,
                    ..PlannerConfig::default()
                };
                let run_cfg = PlannerConfig { max_iterations: cap.max(1), ..cfg.clone() };
                let out = if cap == 0 {
                    traj.clone()
                } else {
                    plan(&traj, &actor, &shot, view, &run_cfg).unwrap().0
                };
                costs.push(total_cost(&out, &actor, &shot, view, &cfg).unwrap().0);
            }
            for w in costs.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "cost rose from {} to {} at eta {eta}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn headings_point_at_the_actor() {
        let (grid, field) = wall_fixture();
        let view = FieldView { grid: &grid, field: &field };
        let cfg = PlannerConfig::default();
        let n = 21;
        let traj = straight_traj(Vector3::new(18.0, 7.0, 5.0), Vector3::new(18.0, 16.0, 5.0), n, 5.0);
        let actor = stationary_actor(Vector3::new(6.0, 12.0, 2.0), n, traj.dt());
        let shot = ShotSpec { rho: 6.0, phi_rel: 0.0, theta_rel: 0.4 };
        let (out, _) = plan(&traj, &actor, &shot, view, &cfg).unwrap();
        for (i, w) in out.waypoints.iter().enumerate() {
            let d = actor.samples[i].position - w;
            if d.norm() > 1e-6 {
                assert_relative_eq!(out.headings[i], d.y.atan2(d.x), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn preconditioner_block_is_positive_definite() {
        for lambda1 in [0.0, 10.0] {
            let cfg = PlannerConfig { lambda1, ..PlannerConfig::default() };
            let n = 51;
            let a = smoothness_operator(n, 0.2, &cfg.alpha, cfg.d_max).unwrap();
            assert_relative_eq!((&a - a.transpose()).norm(), 0.0, epsilon = 1e-9);
            let m = n - 1;
            let mut p = a.view((1, 1), (m, m)).into_owned() / (n - 1) as f64;
            for i in 0..m {
                p[(i, i)] += lambda1 / (n - 1) as f64;
            }
            assert!(nalgebra::linalg::Cholesky::new(p).is_some(), "lambda1 {lambda1}");
        }
    }

    #[test]
    fn sampling_interpolates_and_clamps() {
        let traj = Trajectory::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(2.0, 0.0, 0.0),
                Vector3::new(2.0, 2.0, 0.0),
            ],
            vec![0.0, 1.0, 3.0],
            2.0,
        )
        .unwrap();
        let (p, h) = traj.sample(0.5);
        assert_relative_eq!(p.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(h, 0.5, epsilon = 1e-12);
        let (p, _) = traj.sample(-1.0);
        assert_eq!(p, traj.waypoints[0]);
        let (p, h) = traj.sample(99.0);
        assert_eq!(p, traj.waypoints[2]);
        assert_relative_eq!(h, 3.0, epsilon = 1e-12);
        // heading wraps along the short way
        let w = Trajectory::new(
            vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
            vec![3.0, -3.0],
            1.0,
        )
        .unwrap();
        let (_, h) = w.sample(0.5);
        assert!(h.abs() > 3.0, "midpoint should pass through +-pi, got {h}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = PlannerConfig { lambda1: -1.0, ..PlannerConfig::default() };
        assert!(bad.validate().is_err());
        let bad = PlannerConfig { epsilon_obs: 0.0, ..PlannerConfig::default() };
        assert!(bad.validate().is_err());
        let bad = PlannerConfig { d_max: 4, ..PlannerConfig::default() };
        assert!(bad.validate().is_err());
        let bad = PlannerConfig { n: 3, ..PlannerConfig::default() };
        assert!(bad.validate().is_err());
        assert!(ShotSpec { rho: 0.0, phi_rel: 0.0, theta_rel: 0.0 }.validate().is_err());
        assert!(ShotSpec { rho: 1.0, phi_rel: 7.0, theta_rel: 0.0 }.validate().is_err());
        assert!(ShotSpec { rho: 1.0, phi_rel: 0.0, theta_rel: 4.0 }.validate().is_err());
    }
}
