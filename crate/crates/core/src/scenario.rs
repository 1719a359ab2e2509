//! Scenario files: one TOML document describes a complete closed-loop run.
//!
//! A scenario bundles the world geometry, the mapping grid and field
//! settings, the sensor, the scripted actor, the shot, the drone start, and
//! the run schedule. Planner settings live in a separate file referenced by
//! relative path so several scenarios can share one tuning.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridConfig, OccupancyGrid};
use crate::planner::{PlannerConfig, ShotSpec};
use crate::sdf::SdfConfig;
use crate::sim::{LidarModel, ScriptedActor, WorldModel};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    World(#[from] crate::sim::SimError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Planner(#[from] crate::planner::PlannerError),
}

/// Where the drone starts and how fast the loop runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroneStart {
    pub start: [f64; 3],
    #[serde(default)]
    pub start_heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Total scripted run length, seconds.
    pub duration_s: f64,
    /// Closed-loop replan frequency, Hz.
    pub replan_hz: f64,
    /// Leading seconds excluded from recorded aggregates while the fresh
    /// map fills in. The loop still runs during warmup.
    #[serde(default)]
    pub warmup_s: f64,
    /// Planner settings file, relative to this scenario file. Defaults
    /// apply when omitted.
    #[serde(default)]
    pub planner_config: Option<PathBuf>,
    pub world: WorldModel,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub sdf: SdfConfig,
    #[serde(default)]
    pub lidar: LidarModel,
    pub actor: ScriptedActor,
    pub shot: ShotSpec,
    pub drone: DroneStart,
}

/// A scenario plus the planner settings it references.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub planner: PlannerConfig,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return Err(ScenarioError::Invalid(format!(
                "duration_s must be non-negative, got {}",
                self.duration_s
            )));
        }
        if !(self.replan_hz.is_finite() && self.replan_hz > 0.0) {
            return Err(ScenarioError::Invalid(format!(
                "replan_hz must be positive, got {}",
                self.replan_hz
            )));
        }
        if !(self.warmup_s.is_finite() && self.warmup_s >= 0.0) {
            return Err(ScenarioError::Invalid(format!(
                "warmup_s must be non-negative, got {}",
                self.warmup_s
            )));
        }
        self.world.validate()?;
        self.grid.validate()?;
        self.lidar.validate().map_err(ScenarioError::World)?;
        self.actor.validate(&self.world.bounds)?;
        self.shot.validate()?;
        let start = Vector3::from(self.drone.start);
        if !self.world.bounds.contains(&start) {
            return Err(ScenarioError::Invalid("drone start leaves the world bounds".into()));
        }
        if !self.grid.world_bounds().contains(&start) {
            return Err(ScenarioError::Invalid("drone start is outside the mapped volume".into()));
        }
        Ok(())
    }

    pub fn cycle_count(&self) -> usize {
        (self.duration_s * self.replan_hz).round() as usize
    }

    pub fn cycle_dt(&self) -> f64 {
        1.0 / self.replan_hz
    }
}

pub fn load_scenario<P: AsRef<Path>>(path: P) -> Result<LoadedScenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    let scenario: Scenario = toml::from_str(&text)
        .map_err(|source| ScenarioError::Parse { path: path.to_path_buf(), source: Box::new(source) })?;
    scenario.validate()?;

    let planner = match &scenario.planner_config {
        None => PlannerConfig::default(),
        Some(rel) => {
            let cfg_path = path.parent().unwrap_or(Path::new(".")).join(rel);
            let text = std::fs::read_to_string(&cfg_path)
                .map_err(|source| ScenarioError::Io { path: cfg_path.clone(), source })?;
            let cfg: PlannerConfig = toml::from_str(&text).map_err(|source| ScenarioError::Parse {
                path: cfg_path,
                source: Box::new(source),
            })?;
            cfg.validate()?;
            cfg
        }
    };
    Ok(LoadedScenario { scenario, planner })
}

/// Builds the map a run would converge to if the sensor had seen
/// everything: obstacle shells and the ground row occupied, the air free,
/// and spaces no beam can reach (obstacle interiors, below ground) unknown.
/// Matching the reachable-by-sensing structure keeps fields comparable
/// between precomputed and online runs.
pub fn rasterize_world(world: &WorldModel, grid_cfg: &GridConfig) -> Result<OccupancyGrid, ScenarioError> {
    world.validate()?;
    let mut grid = OccupancyGrid::new(grid_cfg.clone())?;
    let [nx, ny, nz] = grid_cfg.dims;
    let r = grid_cfg.resolution;

    // beams that hit z == ground_z end in this row (floor convention)
    let ground_row = ((world.ground_z - grid_cfg.origin[2]) / r).floor() as i32;

    let inside_obstacle = |p: &Vector3<f64>| -> bool {
        world.boxes.iter().any(|b| b.contains_strict(p))
            || world.cylinders.iter().any(|c| {
                let dx = p.x - c.center[0];
                let dy = p.y - c.center[1];
                dx * dx + dy * dy < c.radius * c.radius && p.z > c.z_min && p.z < c.z_max
            })
    };
    // a neighbor that is itself solid or under the floor cannot expose a wall
    let sealed = |p: &Vector3<f64>| inside_obstacle(p) || p.z < world.ground_z;

    let offsets = [
        Vector3::new(-r, 0.0, 0.0),
        Vector3::new(r, 0.0, 0.0),
        Vector3::new(0.0, -r, 0.0),
        Vector3::new(0.0, r, 0.0),
        Vector3::new(0.0, 0.0, -r),
        Vector3::new(0.0, 0.0, r),
    ];

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = crate::Voxel::new(x as i32, y as i32, z as i32);
                let p = grid.center_of(v);
                let value = if inside_obstacle(&p) {
                    if offsets.iter().all(|o| sealed(&(p + o))) {
                        crate::grid::UNKNOWN_CELL
                    } else {
                        u8::MAX
                    }
                } else if v.z == ground_row {
                    u8::MAX
                } else if v.z < ground_row {
                    crate::grid::UNKNOWN_CELL
                } else {
                    0
                };
                let idx = grid.index(v);
                grid.cells_mut()[idx] = value;
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Aabb;
    use crate::grid::Occupancy;
    use crate::sim::{ActorPath, VerticalCylinder};
    use crate::Voxel;

    fn demo_toml() -> String {
        r#"
name = "demo"
seed = 5
duration_s = 4.0
replan_hz = 5.0
warmup_s = 1.0

[world]
ground_z = 0.0
bounds = { min = [0.0, 0.0, 0.0], max = [60.0, 40.0, 30.0] }
boxes = [{ min = [20.0, 10.0, 0.0], max = [24.0, 14.0, 8.0] }]
cylinders = [{ center = [40.0, 20.0], radius = 2.0, z_min = 0.0, z_max = 12.0 }]

[grid]
dims = [60, 40, 30]
resolution = 1.0
origin = [0.0, 0.0, 0.0]

[sdf]
truncation = 5.0

[lidar]
channels = [-0.26, -0.13, 0.0, 0.13, 0.26]
azimuth_steps = 360
max_range = 100.0
rate_hz = 10.0

[actor]
kind = "person"
speed = 1.4
path = { shape = "polyline", points = [[10.0, 20.0, 0.0], [50.0, 20.0, 0.0]] }

[shot]
rho = 6.0
phi_rel = 1.5707963267948966
theta_rel = 0.4

[drone]
start = [10.0, 14.0, 4.0]
start_heading = 0.0
"#
        .to_string()
    }

    #[test]
    fn toml_round_trips_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.toml");
        std::fs::write(&path, demo_toml()).unwrap();
        let loaded = load_scenario(&path).unwrap();
        assert_eq!(loaded.scenario.name, "demo");
        assert_eq!(loaded.scenario.cycle_count(), 20);
        assert_eq!(loaded.scenario.lidar.channels.len(), 5);
        assert_eq!(loaded.planner, PlannerConfig::default());
        assert!(matches!(loaded.scenario.actor.path, ActorPath::Polyline { .. }));
    }

    #[test]
    fn referenced_planner_config_is_loaded_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("p.toml"), "lambda1 = 5.0\nn = 21\nt_f = 4.0\n").unwrap();
        let toml = demo_toml().replace("warmup_s = 1.0", "warmup_s = 1.0\nplanner_config = \"p.toml\"");
        let path = dir.path().join("demo.toml");
        std::fs::write(&path, toml).unwrap();
        let loaded = load_scenario(&path).unwrap();
        assert_eq!(loaded.planner.lambda1, 5.0);
        assert_eq!(loaded.planner.n, 21);
        // broken reference
        let toml = demo_toml().replace("warmup_s = 1.0", "planner_config = \"missing.toml\"");
        std::fs::write(&path, toml).unwrap();
        assert!(matches!(load_scenario(&path), Err(ScenarioError::Io { .. })));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.toml");
        // top-level junk
        std::fs::write(&path, demo_toml().replace("seed = 5", "seed = 5\nbogus_key = 1")).unwrap();
        assert!(matches!(load_scenario(&path), Err(ScenarioError::Parse { .. })));
        // junk inside the trailing [drone] table
        std::fs::write(&path, demo_toml() + "\nbogus_key = 1\n").unwrap();
        assert!(matches!(load_scenario(&path), Err(ScenarioError::Parse { .. })));

        std::fs::write(&path, demo_toml().replace("replan_hz = 5.0", "replan_hz = 0.0")).unwrap();
        assert!(matches!(load_scenario(&path), Err(ScenarioError::Invalid(_))));

        // actor outside the world
        std::fs::write(
            &path,
            demo_toml().replace("[50.0, 20.0, 0.0]", "[500.0, 20.0, 0.0]"),
        )
        .unwrap();
        assert!(load_scenario(&path).is_err());
    }

    #[test]
    fn rasterized_world_separates_shell_interior_air_and_ground() {
        let world = WorldModel {
            boxes: vec![Aabb::new([10.0, 10.0, 0.0], [16.0, 16.0, 6.0])],
            cylinders: vec![VerticalCylinder {
                center: [30.0, 20.0],
                radius: 3.0,
                z_min: 0.0,
                z_max: 10.0,
            }],
            ground_z: 0.0,
            bounds: Aabb::new([0.0, 0.0, 0.0], [40.0, 40.0, 20.0]),
        };
        let cfg = GridConfig {
            dims: [40, 40, 20],
            resolution: 1.0,
            origin: [0.0, 0.0, 0.0],
            ..GridConfig::default()
        };
        let grid = rasterize_world(&world, &cfg).unwrap();

        // ground row is the occupied shell of the half-space below it
        assert_eq!(grid.classify_voxel(Voxel::new(3, 3, 0)), Some(Occupancy::Occupied));
        // air above is free
        assert_eq!(grid.classify_voxel(Voxel::new(3, 3, 5)), Some(Occupancy::Free));
        // box wall is occupied, its core unknown
        assert_eq!(grid.classify_voxel(Voxel::new(10, 13, 3)), Some(Occupancy::Occupied));
        assert_eq!(grid.classify_voxel(Voxel::new(13, 13, 3)), Some(Occupancy::Unknown));
        // box roof is a shell too
        assert_eq!(grid.classify_voxel(Voxel::new(13, 13, 5)), Some(Occupancy::Occupied));
        // cylinder rim occupied
        assert_eq!(grid.classify_voxel(Voxel::new(27, 20, 4)), Some(Occupancy::Occupied));
        // outside the cylinder, free
        assert_eq!(grid.classify_voxel(Voxel::new(25, 20, 4)), Some(Occupancy::Free));
    }
}
