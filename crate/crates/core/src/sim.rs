//! Synthetic world, spinning LiDAR, and scripted actors.
//!
//! Everything here is a pure function of its inputs, so closed-loop runs
//! replay bit-identically from a scenario file and a seed. Obstacles are
//! analytic primitives (boxes, vertical cylinders, a ground plane); beam
//! intersections are closed-form, which keeps simulated hits exactly on
//! surfaces and lets tests check the geometry against independent algebra.

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::{ActorKind, ActorObservation};
use crate::geom::Aabb;
use crate::grid::RayMeasurement;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid lidar model: {0}")]
    InvalidLidar(String),
    #[error("invalid actor script: {0}")]
    InvalidActor(String),
}

/// Upright cylinder: circular footprint in the xy plane, flat caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerticalCylinder {
    pub center: [f64; 2],
    pub radius: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl VerticalCylinder {
    fn bounding_box(&self) -> Aabb {
        Aabb::new(
            [self.center[0] - self.radius, self.center[1] - self.radius, self.z_min],
            [self.center[0] + self.radius, self.center[1] + self.radius, self.z_max],
        )
    }
}

/// Static world: primitive obstacles over an infinite ground plane, all
/// inside an overall bounding box that also bounds flight and mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    #[serde(default)]
    pub boxes: Vec<Aabb>,
    #[serde(default)]
    pub cylinders: Vec<VerticalCylinder>,
    pub ground_z: f64,
    pub bounds: Aabb,
}

impl WorldModel {
    pub fn validate(&self) -> Result<(), SimError> {
        for a in 0..3 {
            if !(self.bounds.min[a] < self.bounds.max[a]) {
                return Err(SimError::InvalidWorld("bounds box is empty".into()));
            }
        }
        if !(self.ground_z >= self.bounds.min[2] && self.ground_z <= self.bounds.max[2]) {
            return Err(SimError::InvalidWorld(format!(
                "ground_z {} outside bounds",
                self.ground_z
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if (0..3).any(|a| !(b.min[a] < b.max[a])) {
                return Err(SimError::InvalidWorld(format!("box {i} is empty")));
            }
            if !self.bounds.contains_aabb(b) {
                return Err(SimError::InvalidWorld(format!("box {i} leaves the world bounds")));
            }
        }
        for (i, c) in self.cylinders.iter().enumerate() {
            if !(c.radius > 0.0 && c.z_min < c.z_max) {
                return Err(SimError::InvalidWorld(format!("cylinder {i} is degenerate")));
            }
            if !self.bounds.contains_aabb(&c.bounding_box()) {
                return Err(SimError::InvalidWorld(format!(
                    "cylinder {i} leaves the world bounds"
                )));
            }
        }
        Ok(())
    }
}

/// Spinning multi-channel rangefinder. Azimuth 0 is world +x, sweeping
/// counterclockwise; channel elevations tilt out of the horizontal plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarModel {
    /// Elevation angle per channel, radians.
    pub channels: Vec<f64>,
    /// Firings per revolution.
    pub azimuth_steps: usize,
    pub max_range: f64,
    /// Revolutions per second.
    pub rate_hz: f64,
}

impl LidarModel {
    /// 16 channels evenly spaced over +-15 degrees, 0.2 degree azimuth
    /// resolution, 100 m range, 10 revolutions per second.
    pub fn vlp16() -> Self {
        let half = 15.0f64.to_radians();
        let channels =
            (0..16).map(|i| -half + 2.0 * half * i as f64 / 15.0).collect();
        LidarModel { channels, azimuth_steps: 1800, max_range: 100.0, rate_hz: 10.0 }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.channels.is_empty() {
            return Err(SimError::InvalidLidar("no channels".into()));
        }
        let half = 15.0f64.to_radians() + 1e-9;
        if self.channels.iter().any(|e| !e.is_finite() || e.abs() > half) {
            return Err(SimError::InvalidLidar(
                "channel elevations must stay within +-15 degrees".into(),
            ));
        }
        if self.azimuth_steps == 0 {
            return Err(SimError::InvalidLidar("azimuth_steps must be positive".into()));
        }
        if !(self.max_range.is_finite() && self.max_range > 0.0) {
            return Err(SimError::InvalidLidar(format!(
                "max_range must be positive, got {}",
                self.max_range
            )));
        }
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return Err(SimError::InvalidLidar(format!(
                "rate_hz must be positive, got {}",
                self.rate_hz
            )));
        }
        Ok(())
    }
}

impl Default for LidarModel {
    fn default() -> Self {
        LidarModel::vlp16()
    }
}

/// Nearest positive ray parameter at which the ray hits anything, if any.
/// `dir` must be unit length so parameters are meters.
fn nearest_hit(world: &WorldModel, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 1e-12 && t <= max_range && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };

    if dir.z.abs() > 0.0 {
        let t = (world.ground_z - origin.z) / dir.z;
        consider(t);
    }

    for b in &world.boxes {
        let far = origin + dir * max_range;
        if let Some((t0, _)) = b.clip_segment(origin, &far) {
            consider(t0 * max_range);
        }
    }

    for c in &world.cylinders {
        let ox = origin.x - c.center[0];
        let oy = origin.y - c.center[1];
        let a = dir.x * dir.x + dir.y * dir.y;
        if a > 1e-15 {
            let bq = 2.0 * (ox * dir.x + oy * dir.y);
            let cq = ox * ox + oy * oy - c.radius * c.radius;
            let disc = bq * bq - 4.0 * a * cq;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for t in [(-bq - sq) / (2.0 * a), (-bq + sq) / (2.0 * a)] {
                    let z = origin.z + t * dir.z;
                    if z >= c.z_min && z <= c.z_max {
                        consider(t);
                    }
                }
            }
        }
        // flat caps
        if dir.z.abs() > 1e-15 {
            for z_cap in [c.z_min, c.z_max] {
                let t = (z_cap - origin.z) / dir.z;
                let x = origin.x + t * dir.x - c.center[0];
                let y = origin.y + t * dir.y - c.center[1];
                if x * x + y * y <= c.radius * c.radius {
                    consider(t);
                }
            }
        }
    }
    best
}

/// One full revolution of the scanner from a fixed position. Beams that hit
/// nothing within range report a miss endpoint at exactly `max_range`.
/// The caller promises the sensor sits inside the world bounds.
pub fn simulate_scan(
    world: &WorldModel,
    sensor: &Vector3<f64>,
    lidar: &LidarModel,
) -> Vec<RayMeasurement> {
    let mut out = Vec::with_capacity(lidar.channels.len() * lidar.azimuth_steps);
    for step in 0..lidar.azimuth_steps {
        let az = std::f64::consts::TAU * step as f64 / lidar.azimuth_steps as f64;
        let (sin_az, cos_az) = az.sin_cos();
        for &elev in &lidar.channels {
            let (sin_el, cos_el) = elev.sin_cos();
            let dir = Vector3::new(cos_el * cos_az, cos_el * sin_az, sin_el);
            let (range, is_hit) = match nearest_hit(world, sensor, &dir, lidar.max_range) {
                Some(t) => (t, true),
                None => (lidar.max_range, false),
            };
            out.push(RayMeasurement { sensor: *sensor, point: sensor + dir * range, is_hit });
        }
    }
    out
}

/// Motion script: either a polyline walked end to end, or a circle orbited
/// indefinitely. Speed is constant along the path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum ActorPath {
    Polyline { points: Vec<[f64; 3]> },
    Circle { center: [f64; 3], radius: f64, start_angle: f64, clockwise: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedActor {
    pub kind: ActorKind,
    pub path: ActorPath,
    /// Meters per second along the path.
    pub speed: f64,
}

impl ScriptedActor {
    pub fn validate(&self, bounds: &Aabb) -> Result<(), SimError> {
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return Err(SimError::InvalidActor(format!(
                "speed must be non-negative, got {}",
                self.speed
            )));
        }
        match &self.path {
            ActorPath::Polyline { points } => {
                if points.is_empty() {
                    return Err(SimError::InvalidActor("polyline needs at least one point".into()));
                }
                for p in points {
                    if !bounds.contains(&Vector3::new(p[0], p[1], p[2])) {
                        return Err(SimError::InvalidActor(format!(
                            "polyline point {p:?} leaves the world bounds"
                        )));
                    }
                }
            }
            ActorPath::Circle { center, radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(SimError::InvalidActor("circle radius must be positive".into()));
                }
                let lo = Vector3::new(center[0] - radius, center[1] - radius, center[2]);
                let hi = Vector3::new(center[0] + radius, center[1] + radius, center[2]);
                if !(bounds.contains(&lo) && bounds.contains(&hi)) {
                    return Err(SimError::InvalidActor("circle leaves the world bounds".into()));
                }
            }
        }
        Ok(())
    }

    /// Exact pose at time `t`. Polylines clamp to their final pose once the
    /// script distance runs out; circles orbit forever. Heading is the path
    /// tangent.
    pub fn pose_at(&self, t: f64) -> ActorObservation {
        match &self.path {
            ActorPath::Polyline { points } => self.polyline_pose(points, t),
            ActorPath::Circle { center, radius, start_angle, clockwise } => {
                let sgn = if *clockwise { -1.0 } else { 1.0 };
                let ang = start_angle + sgn * self.speed / radius * t;
                let (s, c) = ang.sin_cos();
                ActorObservation {
                    t,
                    x: center[0] + radius * c,
                    y: center[1] + radius * s,
                    z: center[2],
                    psi: crate::forecast::wrap_angle(ang + sgn * std::f64::consts::FRAC_PI_2),
                }
            }
        }
    }

    fn polyline_pose(&self, points: &[[f64; 3]], t: f64) -> ActorObservation {
        let pt = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
        let heading_of = |a: &Vector3<f64>, b: &Vector3<f64>| {
            let d = b - a;
            if d.x.hypot(d.y) > 1e-12 {
                d.y.atan2(d.x)
            } else {
                0.0
            }
        };
        if points.len() == 1 || self.speed == 0.0 {
            let p = pt(&points[0]);
            let psi = if points.len() > 1 { heading_of(&p, &pt(&points[1])) } else { 0.0 };
            return ActorObservation { t, x: p.x, y: p.y, z: p.z, psi };
        }
        let mut s = self.speed * t.max(0.0);
        for w in points.windows(2) {
            let (a, b) = (pt(&w[0]), pt(&w[1]));
            let len = (b - a).norm();
            if s <= len {
                let p = if len > 0.0 { a + (b - a) * (s / len) } else { a };
                let psi = heading_of(&a, &b);
                return ActorObservation { t, x: p.x, y: p.y, z: p.z, psi };
            }
            s -= len;
        }
        // past the end: parked at the last point, still facing along the
        // final segment
        let last = pt(points.last().expect("checked non-empty"));
        let prev = pt(&points[points.len() - 2]);
        let psi = heading_of(&prev, &last);
        ActorObservation { t, x: last.x, y: last.y, z: last.z, psi }
    }

    /// Total scripted path length; infinite for circles.
    pub fn path_length(&self) -> f64 {
        match &self.path {
            ActorPath::Polyline { points } => points
                .windows(2)
                .map(|w| {
                    (Vector3::from(w[1]) - Vector3::from(w[0])).norm()
                })
                .sum(),
            ActorPath::Circle { .. } => f64::INFINITY,
        }
    }
}

/// Adds seeded uniform noise in [-amplitude, amplitude] to the horizontal
/// position. z and heading pass through untouched.
pub fn perturb_observation(
    obs: &ActorObservation,
    amplitude: f64,
    seed: u64,
) -> ActorObservation {
    if amplitude == 0.0 {
        return *obs;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = rng.random_range(-amplitude..=amplitude);
    let dy = rng.random_range(-amplitude..=amplitude);
    ActorObservation { x: obs.x + dx, y: obs.y + dy, ..*obs }
}
