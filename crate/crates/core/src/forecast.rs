//! Actor state estimation and short-horizon motion forecasting.
//!
//! Observations arrive as world-frame ground positions with a heading, either
//! directly from a simulator or via [`project_pixel_to_ground`] from an
//! onboard detector pixel. A Kalman filter per actor smooths them; walking
//! actors get a constant-velocity model, driving actors a constant
//! turn-rate-and-velocity model whose rollouts bend along circular arcs.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("pixel ({0}, {1}) outside the image")]
    PixelOutsideImage(f64, f64),
    #[error("view ray never reaches the ground plane")]
    NoGroundIntersection,
    #[error("invalid filter parameter: {0}")]
    InvalidParameter(String),
    #[error("observation io: {0}")]
    Io(#[from] std::io::Error),
    #[error("observation parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Wraps an angle into [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi);
    if r < 0.0 {
        r += two_pi;
    }
    r - std::f64::consts::PI
}

/// One actor fix. Serialized as JSON lines, one object per line, for replay
/// streams: `{"t":..., "x":..., "y":..., "z":..., "psi":...}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorObservation {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Heading in radians, [-pi, pi).
    pub psi: f64,
}

impl ActorObservation {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.psi.is_finite()
    }
}

pub fn write_observations<P: AsRef<Path>>(
    path: P,
    observations: &[ActorObservation],
) -> Result<(), ForecastError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for obs in observations {
        serde_json::to_writer(&mut f, obs)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_observations<P: AsRef<Path>>(path: P) -> Result<Vec<ActorObservation>, ForecastError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Pinhole camera with a world pose. Camera frame: +z through the lens,
/// +x right, +y down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), ForecastError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(ForecastError::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(ForecastError::InvalidCamera("image must have positive extent".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width && self.cy > 0.0 && self.cy < self.height) {
            return Err(ForecastError::InvalidCamera(
                "principal point must be inside the image".into(),
            ));
        }
        Ok(())
    }

    /// World direction of the view ray through a pixel.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let dir_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation * dir_cam
    }

    /// Forward pinhole projection. None when the point is not in front of
    /// the camera.
    pub fn project_world_to_pixel(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let pc = self.rotation.inverse() * (p - self.position);
        if pc.z <= 1e-12 {
            return None;
        }
        Some((self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy))
    }
}

/// Casts the view ray of an image pixel onto the horizontal plane
/// `z = ground_z`. Rays at or above the horizon never intersect and error
/// out rather than returning a point behind the camera.
pub fn project_pixel_to_ground(
    camera: &CameraModel,
    pixel: (f64, f64),
    ground_z: f64,
) -> Result<Vector3<f64>, ForecastError> {
    camera.validate()?;
    let (u, v) = pixel;
    if !(u >= 0.0 && u <= camera.width && v >= 0.0 && v <= camera.height) {
        return Err(ForecastError::PixelOutsideImage(u, v));
    }
    let dir = camera.pixel_ray(u, v);
    let t = (ground_z - camera.position.z) / dir.z;
    if !t.is_finite() || t <= 1e-12 {
        return Err(ForecastError::NoGroundIntersection);
    }
    let p = camera.position + dir * t;
    Ok(Vector3::new(p.x, p.y, ground_z))
}

/// Which motion model an actor gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActorKind {
    /// Constant velocity on the ground plane: state (x, y, z, vx, vy).
    Person,
    /// Constant turn rate and speed: state (x, y, z, v, psi, omega).
    Vehicle,
}

/// Noise configuration for [`ActorFilter`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Process acceleration density driving position uncertainty growth.
    pub sigma_acc: f64,
    /// Position measurement standard deviation, meters.
    pub sigma_meas: f64,
    /// Heading measurement standard deviation, radians (vehicle only).
    pub sigma_heading: f64,
    /// Vertical drift standard deviation; actors mostly stay on the ground.
    pub sigma_z: f64,
}

impl FilterParams {
    pub fn for_kind(kind: ActorKind) -> Self {
        let sigma_acc = match kind {
            ActorKind::Person => 1.0,
            ActorKind::Vehicle => 0.5,
        };
        FilterParams { sigma_acc, sigma_meas: 0.5, sigma_heading: 0.2, sigma_z: 0.05 }
    }

    fn validate(&self) -> Result<(), ForecastError> {
        for (name, v) in [
            ("sigma_acc", self.sigma_acc),
            ("sigma_meas", self.sigma_meas),
            ("sigma_heading", self.sigma_heading),
            ("sigma_z", self.sigma_z),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ForecastError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One time-stamped rollout sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastSample {
    /// Offset from the filter's current time, seconds.
    pub t: f64,
    pub position: Vector3<f64>,
    pub heading: f64,
}

/// Predicted actor path, sampled to match the planner's waypoint spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorForecast {
    pub samples: Vec<ForecastSample>,
    pub dt: f64,
}

/// Kalman filter over one actor. Person and vehicle variants share the
/// interface; the vehicle predict step is nonlinear and linearized on the
/// fly.
#[derive(Debug, Clone)]
pub struct ActorFilter {
    kind: ActorKind,
    params: FilterParams,
    state: DVector<f64>,
    cov: DMatrix<f64>,
    /// Most recent observed heading, the fallback when the velocity estimate
    /// is too small to define one.
    last_heading: f64,
}

impl ActorFilter {
    pub fn new(kind: ActorKind) -> Self {
        Self::with_params(kind, FilterParams::for_kind(kind)).expect("defaults are valid")
    }

    pub fn with_params(kind: ActorKind, params: FilterParams) -> Result<Self, ForecastError> {
        params.validate()?;
        let n = match kind {
            ActorKind::Person => 5,
            ActorKind::Vehicle => 6,
        };
        // diffuse prior: the first fixes dominate until the filter locks on
        Ok(ActorFilter {
            kind,
            params,
            state: DVector::zeros(n),
            cov: DMatrix::identity(n, n) * 1e4,
            last_heading: 0.0,
        })
    }

    /// Starts the filter on a first fix instead of a diffuse prior.
    pub fn from_observation(kind: ActorKind, obs: &ActorObservation) -> Self {
        let mut f = Self::new(kind);
        f.state[0] = obs.x;
        f.state[1] = obs.y;
        f.state[2] = obs.z;
        if kind == ActorKind::Vehicle {
            f.state[4] = obs.psi;
        }
        f.last_heading = obs.psi;
        f.cov = DMatrix::identity(f.state.len(), f.state.len());
        f
    }

    pub fn kind(&self) -> ActorKind {
        self.kind
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.state[0], self.state[1], self.state[2])
    }

    pub fn heading(&self) -> f64 {
        match self.kind {
            ActorKind::Person => {
                let (vx, vy) = (self.state[3], self.state[4]);
                if vx.hypot(vy) >= 0.1 {
                    vy.atan2(vx)
                } else {
                    self.last_heading
                }
            }
            ActorKind::Vehicle => self.state[4],
        }
    }

    /// One predict step plus, when a usable observation is present, a
    /// position (and heading, for vehicles) measurement update. Observations
    /// containing non-finite values are dropped and the step degrades to
    /// predict-only.
    pub fn kf_step(
        &mut self,
        dt: f64,
        obs: Option<&ActorObservation>,
    ) -> Result<(), ForecastError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(ForecastError::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        self.predict(dt);
        if let Some(o) = obs {
            if o.is_finite() {
                self.update(o);
            }
        }
        Ok(())
    }

    fn predict(&mut self, dt: f64) {
        match self.kind {
            ActorKind::Person => self.predict_person(dt),
            ActorKind::Vehicle => self.predict_vehicle(dt),
        }
        self.symmetrize();
    }

    fn predict_person(&mut self, dt: f64) {
        let mut f = DMatrix::identity(5, 5);
        f[(0, 3)] = dt;
        f[(1, 4)] = dt;
        self.state = &f * &self.state;

        // continuous white-noise acceleration, discretized exactly: chained
        // predicts over dt then dt' equal one predict over dt + dt'
        let sa2 = self.params.sigma_acc * self.params.sigma_acc;
        let (d2, d3) = (dt * dt, dt * dt * dt);
        let mut q = DMatrix::zeros(5, 5);
        for (pi, vi) in [(0usize, 3usize), (1, 4)] {
            q[(pi, pi)] = sa2 * d3 / 3.0;
            q[(pi, vi)] = sa2 * d2 / 2.0;
            q[(vi, pi)] = sa2 * d2 / 2.0;
            q[(vi, vi)] = sa2 * dt;
        }
        q[(2, 2)] = self.params.sigma_z * self.params.sigma_z * dt;
        self.cov = &f * &self.cov * f.transpose() + q;
    }

    fn predict_vehicle(&mut self, dt: f64) {
        let (v, psi, w) = (self.state[3], self.state[4], self.state[5]);
        let mut f = DMatrix::identity(6, 6);
        if w.abs() > 1e-6 {
            let (s0, c0) = psi.sin_cos();
            let (s1, c1) = (psi + w * dt).sin_cos();
            self.state[0] += v / w * (s1 - s0);
            self.state[1] += v / w * (c0 - c1);
            f[(0, 3)] = (s1 - s0) / w;
            f[(0, 4)] = v / w * (c1 - c0);
            f[(0, 5)] = v * dt * c1 / w - v / (w * w) * (s1 - s0);
            f[(1, 3)] = (c0 - c1) / w;
            f[(1, 4)] = v / w * (s1 - s0);
            f[(1, 5)] = v * dt * s1 / w - v / (w * w) * (c0 - c1);
        } else {
            let (s0, c0) = psi.sin_cos();
            self.state[0] += v * c0 * dt;
            self.state[1] += v * s0 * dt;
            f[(0, 3)] = c0 * dt;
            f[(0, 4)] = -v * s0 * dt;
            f[(0, 5)] = -0.5 * v * s0 * dt * dt;
            f[(1, 3)] = s0 * dt;
            f[(1, 4)] = v * c0 * dt;
            f[(1, 5)] = 0.5 * v * c0 * dt * dt;
        }
        self.state[4] = wrap_angle(psi + w * dt);
        f[(4, 5)] = dt;

        let sa = self.params.sigma_acc;
        let sw = 0.3; // turn-rate drift density
        let mut q = DMatrix::zeros(6, 6);
        q[(0, 0)] = (0.5 * sa * dt * dt).powi(2);
        q[(1, 1)] = (0.5 * sa * dt * dt).powi(2);
        q[(2, 2)] = (self.params.sigma_z * dt).powi(2);
        q[(3, 3)] = (sa * dt).powi(2);
        q[(4, 4)] = (0.5 * sw * dt * dt).powi(2);
        q[(5, 5)] = (sw * dt).powi(2);
        self.cov = &f * &self.cov * f.transpose() + q;
    }

    fn update(&mut self, obs: &ActorObservation) {
        let n = self.state.len();
        let (h, r, residual) = match self.kind {
            ActorKind::Person => {
                let mut h = DMatrix::zeros(3, n);
                h[(0, 0)] = 1.0;
                h[(1, 1)] = 1.0;
                h[(2, 2)] = 1.0;
                let r = DMatrix::identity(3, 3) * self.params.sigma_meas.powi(2);
                let residual = DVector::from_vec(vec![
                    obs.x - self.state[0],
                    obs.y - self.state[1],
                    obs.z - self.state[2],
                ]);
                (h, r, residual)
            }
            ActorKind::Vehicle => {
                let mut h = DMatrix::zeros(4, n);
                h[(0, 0)] = 1.0;
                h[(1, 1)] = 1.0;
                h[(2, 2)] = 1.0;
                h[(3, 4)] = 1.0;
                let mut r = DMatrix::identity(4, 4) * self.params.sigma_meas.powi(2);
                r[(3, 3)] = self.params.sigma_heading.powi(2);
                let residual = DVector::from_vec(vec![
                    obs.x - self.state[0],
                    obs.y - self.state[1],
                    obs.z - self.state[2],
                    wrap_angle(obs.psi - self.state[4]),
                ]);
                (h, r, residual)
            }
        };

        let s = &h * &self.cov * h.transpose() + &r;
        let s_inv = s.try_inverse().expect("innovation covariance is invertible");
        let k = &self.cov * h.transpose() * s_inv;
        self.state += &k * residual;
        if self.kind == ActorKind::Vehicle {
            self.state[4] = wrap_angle(self.state[4]);
        }
        // Joseph form keeps the covariance from drifting indefinite
        let ikh = DMatrix::identity(n, n) - &k * &h;
        self.cov = &ikh * &self.cov * ikh.transpose() + &k * r * k.transpose();
        self.symmetrize();
        self.last_heading = obs.psi;
    }

    fn symmetrize(&mut self) {
        let t = self.cov.transpose();
        self.cov = (&self.cov + t) * 0.5;
    }

    /// Rolls the current estimate forward without measurements. Sample 0 is
    /// the current state; spacing is exactly `dt` out to `horizon`.
    pub fn forecast(&self, horizon: f64, dt: f64) -> Result<ActorForecast, ForecastError> {
        if !(horizon.is_finite() && horizon > 0.0 && dt.is_finite() && dt > 0.0) {
            return Err(ForecastError::InvalidParameter(
                "forecast horizon and dt must be positive".into(),
            ));
        }
        let steps = (horizon / dt).round() as usize;
        let mut samples = Vec::with_capacity(steps + 1);
        match self.kind {
            ActorKind::Person => {
                let p0 = self.position();
                let vel = Vector3::new(self.state[3], self.state[4], 0.0);
                let heading = self.heading();
                for k in 0..=steps {
                    let t = k as f64 * dt;
                    samples.push(ForecastSample { t, position: p0 + vel * t, heading });
                }
            }
            ActorKind::Vehicle => {
                let (mut x, mut y, z) = (self.state[0], self.state[1], self.state[2]);
                let (v, mut psi, w) = (self.state[3], self.state[4], self.state[5]);
                for k in 0..=steps {
                    samples.push(ForecastSample {
                        t: k as f64 * dt,
                        position: Vector3::new(x, y, z),
                        heading: psi,
                    });
                    if w.abs() > 1e-6 {
                        let (s0, c0) = psi.sin_cos();
                        let (s1, c1) = (psi + w * dt).sin_cos();
                        x += v / w * (s1 - s0);
                        y += v / w * (c0 - c1);
                    } else {
                        x += v * psi.cos() * dt;
                        y += v * psi.sin() * dt;
                    }
                    psi = wrap_angle(psi + w * dt);
                }
            }
        }
        Ok(ActorForecast { samples, dt })
    }
}
