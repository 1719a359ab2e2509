//! Python bindings over the core stack: occupancy + distance mapping, the
//! scan simulator, actor filtering, the camera planner, and whole-scenario
//! runs. Mirrors the library API with plain tuples and JSON strings so the
//! module needs nothing beyond the standard library on the Python side.

use nalgebra::Vector3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use skyshot_core::forecast::{ActorFilter, ActorForecast, ActorKind, ActorObservation};
use skyshot_core::grid::{GridConfig, Occupancy, OccupancyGrid, RayMeasurement};
use skyshot_core::harness::{
    bench_map, compare_modes, run_scenario, run_scenario_overlapped, HarnessError, RunMode,
};
use skyshot_core::planner::{plan, FieldView, PlannerConfig, ShotSpec, Trajectory};
use skyshot_core::scenario::{load_scenario, rasterize_world, LoadedScenario};
use skyshot_core::sdf::{DistanceField, SdfConfig};
use skyshot_core::sim::simulate_scan;

type Point = (f64, f64, f64);
type Ray = (Point, Point, bool);

fn vec3(p: Point) -> Vector3<f64> {
    Vector3::new(p.0, p.1, p.2)
}

fn tup(v: &Vector3<f64>) -> Point {
    (v.x, v.y, v.z)
}

fn val_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Scenario(_) | HarnessError::Mode(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// One simulated sensor sweep: ranged returns plus max-range misses.
#[pyclass]
pub struct Scan {
    rays: Vec<RayMeasurement>,
}

#[pymethods]
impl Scan {
    fn __len__(&self) -> usize {
        self.rays.len()
    }

    fn hit_count(&self) -> usize {
        self.rays.iter().filter(|r| r.is_hit).count()
    }

    /// Every ray as ((sensor), (endpoint), is_hit).
    fn rays(&self) -> Vec<Ray> {
        self.rays
            .iter()
            .map(|r| (tup(&r.sensor), tup(&r.point), r.is_hit))
            .collect()
    }
}

/// Occupancy grid fused with its truncated signed distance field. Scans
/// update both together; distances stay equal to a from-scratch rebuild.
#[pyclass]
pub struct VoxelMap {
    grid: OccupancyGrid,
    field: DistanceField,
    sdf: SdfConfig,
}

impl VoxelMap {
    fn from_parts(grid: OccupancyGrid, sdf: SdfConfig) -> PyResult<Self> {
        let field = DistanceField::batch_recompute(&grid, sdf).map_err(val_err)?;
        Ok(VoxelMap { grid, field, sdf })
    }

    fn apply(&mut self, rays: &[RayMeasurement]) -> PyResult<usize> {
        let changes = self.grid.integrate_scan(rays);
        let touched = changes.len();
        self.field.apply_changes(&self.grid, &changes).map_err(val_err)?;
        Ok(touched)
    }
}

#[pymethods]
impl VoxelMap {
    #[new]
    #[pyo3(signature = (dims, resolution, origin, truncation = 5.0))]
    fn new(dims: (usize, usize, usize), resolution: f64, origin: Point, truncation: f64) -> PyResult<Self> {
        let cfg = GridConfig {
            dims: [dims.0, dims.1, dims.2],
            resolution,
            origin: [origin.0, origin.1, origin.2],
            ..GridConfig::default()
        };
        let grid = OccupancyGrid::new(cfg).map_err(val_err)?;
        let sdf = SdfConfig { truncation, ..SdfConfig::default() };
        Self::from_parts(grid, sdf)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.grid.config().dims;
        (d[0], d[1], d[2])
    }

    #[getter]
    fn resolution(&self) -> f64 {
        self.grid.config().resolution
    }

    #[getter]
    fn truncation(&self) -> f64 {
        self.sdf.truncation
    }

    /// Folds a scan into the grid and distance field incrementally.
    /// Returns the number of cells that changed occupancy class.
    fn integrate(&mut self, scan: &Scan) -> PyResult<usize> {
        self.apply(&scan.rays)
    }

    /// Same as `integrate`, for rays given as ((sensor), (endpoint), is_hit).
    fn integrate_rays(&mut self, rays: Vec<Ray>) -> PyResult<usize> {
        let rays: Vec<RayMeasurement> = rays
            .into_iter()
            .map(|(s, p, is_hit)| RayMeasurement { sensor: vec3(s), point: vec3(p), is_hit })
            .collect();
        self.apply(&rays)
    }

    /// Interpolated signed distance at a world point, meters. Negative
    /// inside obstacles, capped at the truncation radius.
    fn distance(&self, point: Point) -> PyResult<f64> {
        self.field.signed_distance_at(&self.grid, &vec3(point)).map_err(val_err)
    }

    /// "free", "unknown", or "occupied" at a world point; None outside.
    fn occupancy(&self, point: Point) -> Option<&'static str> {
        let v = self.grid.voxel_at_point(&vec3(point))?;
        Some(match self.grid.classify_voxel(v)? {
            Occupancy::Free => "free",
            Occupancy::Unknown => "unknown",
            Occupancy::Occupied => "occupied",
        })
    }

    /// True when the incrementally maintained field equals a full rebuild.
    fn consistent(&self) -> PyResult<bool> {
        let batch = DistanceField::batch_recompute(&self.grid, self.sdf).map_err(val_err)?;
        Ok(self.field.same_distances(&batch))
    }
}

/// Actor positions and headings sampled over a planning horizon.
#[pyclass]
pub struct Forecast {
    inner: ActorForecast,
}

#[pymethods]
impl Forecast {
    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    fn positions(&self) -> Vec<Point> {
        self.inner.samples.iter().map(|s| tup(&s.position)).collect()
    }

    fn headings(&self) -> Vec<f64> {
        self.inner.samples.iter().map(|s| s.heading).collect()
    }
}

/// Kalman filter over an actor's motion; feed observations, read forecasts.
#[pyclass]
pub struct ActorTracker {
    filter: Option<ActorFilter>,
    kind: ActorKind,
}

fn parse_kind(kind: &str) -> PyResult<ActorKind> {
    match kind {
        "person" => Ok(ActorKind::Person),
        "vehicle" => Ok(ActorKind::Vehicle),
        other => Err(PyValueError::new_err(format!(
            "unknown actor kind {other:?}, want person|vehicle"
        ))),
    }
}

#[pymethods]
impl ActorTracker {
    #[new]
    #[pyo3(signature = (kind = "person"))]
    fn new(kind: &str) -> PyResult<Self> {
        Ok(ActorTracker { filter: None, kind: parse_kind(kind)? })
    }

    /// Advances the filter by `dt` seconds; `obs` is (t, x, y, z, psi) or
    /// None for a dropped frame. The first call must carry an observation.
    #[pyo3(signature = (dt, obs = None))]
    fn step(&mut self, dt: f64, obs: Option<(f64, f64, f64, f64, f64)>) -> PyResult<()> {
        let obs = obs.map(|(t, x, y, z, psi)| ActorObservation { t, x, y, z, psi });
        match (&mut self.filter, obs) {
            (None, Some(o)) => {
                self.filter = Some(ActorFilter::from_observation(self.kind, &o));
                Ok(())
            }
            (None, None) => Err(PyValueError::new_err(
                "tracker is uninitialized; the first step needs an observation",
            )),
            (Some(f), o) => f.kf_step(dt, o.as_ref()).map_err(val_err),
        }
    }

    fn position(&self) -> PyResult<Point> {
        let f = self.filter.as_ref().ok_or_else(|| PyValueError::new_err("no observations yet"))?;
        Ok(tup(&f.position()))
    }

    fn heading(&self) -> PyResult<f64> {
        let f = self.filter.as_ref().ok_or_else(|| PyValueError::new_err("no observations yet"))?;
        Ok(f.heading())
    }

    /// Rolls the current estimate forward without measurements.
    fn forecast(&self, horizon: f64, dt: f64) -> PyResult<Forecast> {
        let f = self.filter.as_ref().ok_or_else(|| PyValueError::new_err("no observations yet"))?;
        Ok(Forecast { inner: f.forecast(horizon, dt).map_err(val_err)? })
    }
}

/// A bundled scenario file: world, sensor, scripted actor, shot, and the
/// planner settings it references.
#[pyclass]
pub struct Scenario {
    loaded: LoadedScenario,
}

#[pymethods]
impl Scenario {
    #[new]
    fn new(path: &str) -> PyResult<Self> {
        Ok(Scenario { loaded: load_scenario(path).map_err(val_err)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.loaded.scenario.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.loaded.scenario.seed
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.loaded.scenario.duration_s
    }

    #[setter]
    fn set_duration_s(&mut self, v: f64) -> PyResult<()> {
        if !(v.is_finite() && v >= 0.0) {
            return Err(PyValueError::new_err("duration must be finite and >= 0"));
        }
        self.loaded.scenario.duration_s = v;
        Ok(())
    }

    fn drone_start(&self) -> (Point, f64) {
        let d = &self.loaded.scenario.drone;
        ((d.start[0], d.start[1], d.start[2]), d.start_heading)
    }

    /// (rho, phi_rel, theta_rel) of the scripted shot.
    fn shot(&self) -> (f64, f64, f64) {
        let s = &self.loaded.scenario.shot;
        (s.rho, s.phi_rel, s.theta_rel)
    }

    /// Scripted actor pose at time t as (t, x, y, z, psi).
    fn actor_observation(&self, t: f64) -> (f64, f64, f64, f64, f64) {
        let o = self.loaded.scenario.actor.pose_at(t);
        (o.t, o.x, o.y, o.z, o.psi)
    }

    /// Ground-truth forecast: n script samples from t0 spanning t_f seconds.
    fn actor_forecast(&self, t0: f64, n: usize, t_f: f64) -> PyResult<Forecast> {
        if n < 2 || !(t_f.is_finite() && t_f > 0.0) {
            return Err(PyValueError::new_err("need n >= 2 and t_f > 0"));
        }
        let dt = t_f / (n - 1) as f64;
        let samples = (0..n)
            .map(|k| {
                let o = self.loaded.scenario.actor.pose_at(t0 + k as f64 * dt);
                skyshot_core::forecast::ForecastSample {
                    t: k as f64 * dt,
                    position: o.position(),
                    heading: o.psi,
                }
            })
            .collect();
        Ok(Forecast { inner: ActorForecast { samples, dt } })
    }

    /// Simulates one sweep of the scenario's sensor from a world position.
    fn scan(&self, position: Point) -> Scan {
        let rays =
            simulate_scan(&self.loaded.scenario.world, &vec3(position), &self.loaded.scenario.lidar);
        Scan { rays }
    }

    /// Map rasterized from the world model, the oracle the online map chases.
    fn ground_truth_map(&self) -> PyResult<VoxelMap> {
        let grid =
            rasterize_world(&self.loaded.scenario.world, &self.loaded.scenario.grid).map_err(val_err)?;
        VoxelMap::from_parts(grid, self.loaded.scenario.sdf)
    }

    /// All-unknown map on the scenario's grid, ready for `integrate`.
    fn empty_map(&self) -> PyResult<VoxelMap> {
        let grid = OccupancyGrid::new(self.loaded.scenario.grid.clone()).map_err(val_err)?;
        VoxelMap::from_parts(grid, self.loaded.scenario.sdf)
    }

    /// Closed-loop run; returns the report as a JSON string. `map` is
    /// online|gt-map, `actor` is gt|noisy:<amp>|kf.
    #[pyo3(signature = (map = "gt-map", actor = "gt", seed = None, overlap = false))]
    fn run(&self, map: &str, actor: &str, seed: Option<u64>, overlap: bool) -> PyResult<String> {
        let mode = RunMode::parse(map, actor).map_err(harness_err)?;
        let seed = seed.unwrap_or(self.loaded.scenario.seed);
        let report = if overlap {
            run_scenario_overlapped(&self.loaded, mode, seed)
        } else {
            run_scenario(&self.loaded, mode, seed)
        }
        .map_err(harness_err)?;
        json(&report)
    }

    /// Runs two modes on one seed; returns the comparison summary as JSON.
    /// Mode tokens look like "gt-map/gt" or "online/noisy:1.0".
    #[pyo3(signature = (a = "gt-map/gt", b = "online/gt", seed = None))]
    fn compare(&self, a: &str, b: &str, seed: Option<u64>) -> PyResult<String> {
        let a: RunMode = a.parse().map_err(harness_err)?;
        let b: RunMode = b.parse().map_err(harness_err)?;
        let seed = seed.unwrap_or(self.loaded.scenario.seed);
        let cmp = compare_modes(&self.loaded, a, b, seed).map_err(harness_err)?;
        json(&cmp.summary)
    }

    /// Replays the scenario's scan stream through the incremental map and
    /// periodic batch rebuilds; returns the benchmark summary as JSON.
    fn bench(&self) -> PyResult<String> {
        let report = bench_map(&self.loaded).map_err(harness_err)?;
        json(&report.summary)
    }
}

/// One planner invocation. Seeds a hover at `start`, optimizes against the
/// map and forecast, and returns (waypoints, headings, diagnostics).
#[pyfunction]
#[pyo3(signature = (
    map, forecast, rho, phi_rel, theta_rel, start, heading = 0.0,
    n = 51, t_f = 10.0, lambda1 = 10.0, lambda2 = 100.0, lambda3 = 50.0,
    eta = 1.0, max_iterations = 10, grad_tolerance = 1e-3, epsilon_obs = 2.5
))]
#[allow(clippy::too_many_arguments)]
fn plan_shot(
    py: Python<'_>,
    map: &VoxelMap,
    forecast: &Forecast,
    rho: f64,
    phi_rel: f64,
    theta_rel: f64,
    start: Point,
    heading: f64,
    n: usize,
    t_f: f64,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    eta: f64,
    max_iterations: usize,
    grad_tolerance: f64,
    epsilon_obs: f64,
) -> PyResult<(Vec<Point>, Vec<f64>, Py<PyDict>)> {
    let cfg = PlannerConfig {
        lambda1,
        lambda2,
        lambda3,
        eta,
        max_iterations,
        grad_tolerance,
        epsilon_obs,
        n,
        t_f,
        ..PlannerConfig::default()
    };
    let shot = ShotSpec { rho, phi_rel, theta_rel };
    let seed_traj = Trajectory::hover(vec3(start), heading, n, t_f).map_err(val_err)?;
    let view = FieldView { grid: &map.grid, field: &map.field };
    let (traj, diag) = plan(&seed_traj, &forecast.inner, &shot, view, &cfg).map_err(val_err)?;

    let d = PyDict::new(py);
    d.set_item("iterations", diag.iterations)?;
    d.set_item("converged", diag.converged)?;
    d.set_item("aborted", diag.aborted)?;
    d.set_item("cost", diag.cost)?;
    d.set_item("grad_rms", diag.grad_rms)?;
    d.set_item("smooth", diag.terms.smooth)?;
    d.set_item("shot", diag.terms.shot)?;
    d.set_item("obstacle", diag.terms.obstacle)?;
    d.set_item("occlusion", diag.terms.occlusion)?;

    let waypoints = traj.waypoints.iter().map(tup).collect();
    Ok((waypoints, traj.headings.clone(), d.unbind()))
}

#[pymodule]
fn skyshot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scan>()?;
    m.add_class::<VoxelMap>()?;
    m.add_class::<Forecast>()?;
    m.add_class::<ActorTracker>()?;
    m.add_class::<Scenario>()?;
    m.add_function(wrap_pyfunction!(plan_shot, m)?)?;
    Ok(())
}
