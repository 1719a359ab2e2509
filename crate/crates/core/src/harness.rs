//! Closed-loop scenario runner behind the command line: sense, map,
//! forecast, plan, move, repeat at the configured rate. Also hosts the
//! two-run ablation comparison and the map-update timing benchmark.
//!
//! Determinism contract: everything except wall-clock timings is a pure
//! function of the scenario file, the mode, and the seed. Timings live in
//! their own output file so the simulation outputs can be compared byte
//! for byte across runs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::forecast::{ActorFilter, ActorForecast, ForecastSample};
use crate::grid::OccupancyGrid;
use crate::planner::{
    self, CostTerms, FieldView, PlannerConfig, PlannerError, Trajectory,
};
use crate::scenario::{rasterize_world, LoadedScenario, ScenarioError};
use crate::sdf::DistanceField;
use crate::sim::{perturb_observation, simulate_scan, ScriptedActor};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Forecast(#[from] crate::forecast::ForecastError),
    #[error(transparent)]
    Field(#[from] crate::sdf::SdfError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad mode token: {0}")]
    Mode(String),
    #[error("incremental field diverged from batch at scan {scan}")]
    FieldDrift { scan: usize },
}

/// Where the planner's map comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    /// Fresh grid filled by simulated scans as the run progresses.
    Online,
    /// Field rasterized from the world model before the run starts.
    GroundTruth,
}

/// Where the actor forecast comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActorSource {
    /// The script itself, evaluated over the horizon.
    Ground,
    /// The script shifted by a fresh uniform offset each cycle.
    Noisy(f64),
    /// A filter fed the clean per-cycle observation, extrapolating forward.
    Filtered,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMode {
    pub map: MapSource,
    pub actor: ActorSource,
}

impl FromStr for MapSource {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "online" => Ok(MapSource::Online),
            "gt-map" => Ok(MapSource::GroundTruth),
            _ => Err(HarnessError::Mode(format!("unknown map source {s:?}, want online|gt-map"))),
        }
    }
}

impl FromStr for ActorSource {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        if s == "gt" {
            return Ok(ActorSource::Ground);
        }
        if s == "kf" {
            return Ok(ActorSource::Filtered);
        }
        if let Some(amp) = s.strip_prefix("noisy:") {
            let amp: f64 = amp
                .parse()
                .map_err(|_| HarnessError::Mode(format!("bad noise amplitude {amp:?}")))?;
            if !(amp.is_finite() && amp >= 0.0) {
                return Err(HarnessError::Mode(format!("noise amplitude must be >= 0, got {amp}")));
            }
            return Ok(ActorSource::Noisy(amp));
        }
        Err(HarnessError::Mode(format!("unknown actor source {s:?}, want gt|noisy:<amp>|kf")))
    }
}

impl RunMode {
    pub fn parse(map: &str, actor: &str) -> Result<Self, HarnessError> {
        Ok(RunMode { map: map.parse()?, actor: actor.parse()? })
    }
}

impl FromStr for RunMode {
    type Err = HarnessError;
    /// Parses the combined `<map>/<actor>` token used by `compare`.
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        let (map, actor) = s
            .split_once('/')
            .ok_or_else(|| HarnessError::Mode(format!("mode {s:?} wants <map>/<actor>")))?;
        RunMode::parse(map, actor)
    }
}

impl fmt::Display for MapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapSource::Online => "online",
            MapSource::GroundTruth => "gt-map",
        })
    }
}

impl fmt::Display for ActorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActorSource::Ground => f.write_str("gt"),
            ActorSource::Noisy(a) => write!(f, "noisy:{a}"),
            ActorSource::Filtered => f.write_str("kf"),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.map, self.actor)
    }
}

/// One planning cycle as recorded.
#[derive(Debug, Clone)]
pub struct CycleRecord {
    pub cycle: usize,
    /// Simulated time at cycle start, s.
    pub t: f64,
    /// True while the map is still filling in; excluded from aggregates.
    pub warmup: bool,
    /// Drone pose at cycle start.
    pub position: Vector3<f64>,
    pub heading: f64,
    /// Unweighted cost terms of the accepted plan.
    pub terms: CostTerms,
    /// Weighted objective of the accepted plan.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub aborted: bool,
    /// Minimum signed distance along the plan in the run's own field.
    pub min_dist: f64,
    /// Same, measured in the field rasterized from the true world.
    pub min_dist_true: f64,
    pub plan_ms: f64,
    pub map_ms: f64,
    pub cycle_ms: f64,
}

/// Deterministic summary over the recorded (post-warmup) cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregates {
    pub recorded_cycles: usize,
    pub avg_cost: f64,
    pub median_cost: f64,
    /// Per-term averages, unweighted.
    pub avg_terms: CostTerms,
    pub min_dist: f64,
    pub min_dist_true: f64,
    pub avg_iterations: f64,
    pub aborted_cycles: usize,
    pub nonconverged_cycles: usize,
}

/// Wall-clock summary over every cycle, warmup included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingAggregates {
    pub avg_plan_ms: f64,
    pub max_plan_ms: f64,
    pub avg_map_ms: f64,
    pub max_map_ms: f64,
    pub avg_cycle_ms: f64,
    pub max_cycle_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub cycles: usize,
    pub aggregates: Aggregates,
    pub timing: TimingAggregates,
    #[serde(skip)]
    pub records: Vec<CycleRecord>,
}

const ZERO_TERMS: CostTerms = CostTerms { smooth: 0.0, shot: 0.0, obstacle: 0.0, occlusion: 0.0 };

fn mean(xs: impl Iterator<Item = f64>, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        xs.sum::<f64>() / count as f64
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl Aggregates {
    pub fn from_records(records: &[CycleRecord]) -> Self {
        let rec: Vec<&CycleRecord> = records.iter().filter(|r| !r.warmup).collect();
        let n = rec.len();
        if n == 0 {
            return Aggregates {
                recorded_cycles: 0,
                avg_cost: 0.0,
                median_cost: 0.0,
                avg_terms: ZERO_TERMS,
                min_dist: 0.0,
                min_dist_true: 0.0,
                avg_iterations: 0.0,
                aborted_cycles: 0,
                nonconverged_cycles: 0,
            };
        }
        Aggregates {
            recorded_cycles: n,
            avg_cost: mean(rec.iter().map(|r| r.cost), n),
            median_cost: median(rec.iter().map(|r| r.cost).collect()),
            avg_terms: CostTerms {
                smooth: mean(rec.iter().map(|r| r.terms.smooth), n),
                shot: mean(rec.iter().map(|r| r.terms.shot), n),
                obstacle: mean(rec.iter().map(|r| r.terms.obstacle), n),
                occlusion: mean(rec.iter().map(|r| r.terms.occlusion), n),
            },
            min_dist: rec.iter().map(|r| r.min_dist).fold(f64::INFINITY, f64::min),
            min_dist_true: rec.iter().map(|r| r.min_dist_true).fold(f64::INFINITY, f64::min),
            avg_iterations: mean(rec.iter().map(|r| r.iterations as f64), n),
            aborted_cycles: rec.iter().filter(|r| r.aborted).count(),
            nonconverged_cycles: rec.iter().filter(|r| !r.converged).count(),
        }
    }
}

impl TimingAggregates {
    fn from_records(records: &[CycleRecord]) -> Self {
        let n = records.len();
        let max = |f: fn(&CycleRecord) -> f64| {
            records.iter().map(f).fold(0.0f64, f64::max)
        };
        TimingAggregates {
            avg_plan_ms: mean(records.iter().map(|r| r.plan_ms), n),
            max_plan_ms: max(|r| r.plan_ms),
            avg_map_ms: mean(records.iter().map(|r| r.map_ms), n),
            max_map_ms: max(|r| r.map_ms),
            avg_cycle_ms: mean(records.iter().map(|r| r.cycle_ms), n),
            max_cycle_ms: max(|r| r.cycle_ms),
        }
    }
}

/// Splitmix-style mixer for per-cycle noise streams: one scenario seed fans
/// out to decorrelated draws without an RNG object carried across cycles.
fn mix_seed(seed: u64, cycle: usize) -> u64 {
    let mut z = seed.wrapping_add((cycle as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Horizon forecast read straight off the script: sample j sits at
/// `t + j*dt` in world time, recorded as horizon-relative time `j*dt`.
fn script_forecast(actor: &ScriptedActor, t: f64, n: usize, dt: f64) -> ActorForecast {
    let samples = (0..n)
        .map(|j| {
            let obs = actor.pose_at(t + j as f64 * dt);
            ForecastSample { t: j as f64 * dt, position: obs.position(), heading: obs.psi }
        })
        .collect();
    ActorForecast { samples, dt }
}

fn point_distance(grid: &OccupancyGrid, field: &DistanceField, p: &Vector3<f64>) -> f64 {
    field.signed_distance_at(grid, p).unwrap_or(-field.config().truncation)
}

fn min_signed_distance(grid: &OccupancyGrid, field: &DistanceField, traj: &Trajectory) -> f64 {
    traj.waypoints
        .iter()
        .map(|w| point_distance(grid, field, w))
        .fold(f64::INFINITY, f64::min)
}

/// Seed trajectory for the next plan. With a previous solution, replay it
/// shifted one cycle forward (the tail clamps to its last pose); otherwise
/// start from the ideal shot path pulled onto the drone, the pull fading
/// linearly over the horizon.
fn seed_trajectory(
    prev: Option<&Trajectory>,
    forecast: &ActorForecast,
    shot: &crate::planner::ShotSpec,
    drone: Vector3<f64>,
    heading: f64,
    cfg: &PlannerConfig,
    cycle_dt: f64,
) -> Result<Trajectory, PlannerError> {
    let n = cfg.n;
    let dt = cfg.t_f / (n - 1) as f64;
    match prev {
        Some(p) => {
            let mut waypoints = Vec::with_capacity(n);
            let mut headings = Vec::with_capacity(n);
            for j in 0..n {
                let (pos, h) = p.sample(j as f64 * dt + cycle_dt);
                waypoints.push(pos);
                headings.push(h);
            }
            waypoints[0] = drone;
            headings[0] = heading;
            Trajectory::new(waypoints, headings, cfg.t_f)
        }
        None => {
            let ideal = planner::ideal_shot_trajectory(forecast, shot)?;
            let offset = drone - ideal.waypoints[0];
            let mut waypoints = ideal.waypoints;
            for (j, w) in waypoints.iter_mut().enumerate() {
                *w += offset * (1.0 - j as f64 / (n - 1) as f64);
            }
            let mut headings = ideal.headings;
            headings[0] = heading;
            Trajectory::new(waypoints, headings, cfg.t_f)
        }
    }
}

struct MapState {
    grid: OccupancyGrid,
    field: DistanceField,
}

impl MapState {
    /// Integrates one scan; returns (wall ms, cells whose class flipped).
    fn integrate(
        &mut self,
        world: &crate::sim::WorldModel,
        lidar: &crate::sim::LidarModel,
        pose: &Vector3<f64>,
    ) -> Result<(f64, usize), HarnessError> {
        let start = Instant::now();
        let rays = simulate_scan(world, pose, lidar);
        let changes = self.grid.integrate_scan(&rays);
        let changed = changes.len();
        self.field.apply_changes(&self.grid, &changes)?;
        Ok((start.elapsed().as_secs_f64() * 1e3, changed))
    }
}

/// Runs the closed loop: each cycle senses from the current pose, plans
/// against the map as of cycle start, then flies one cycle along the plan.
/// The scan taken during a cycle only becomes visible to the next one, so
/// the overlapped variant ([`run_scenario_overlapped`]) produces the same
/// records bit for bit.
pub fn run_scenario(
    loaded: &LoadedScenario,
    mode: RunMode,
    seed: u64,
) -> Result<RunReport, HarnessError> {
    run_loop(loaded, mode, seed, false)
}

/// Same loop, with scan integration of cycle k running on a second thread
/// while cycle k plans against a frozen snapshot.
pub fn run_scenario_overlapped(
    loaded: &LoadedScenario,
    mode: RunMode,
    seed: u64,
) -> Result<RunReport, HarnessError> {
    run_loop(loaded, mode, seed, true)
}

fn run_loop(
    loaded: &LoadedScenario,
    mode: RunMode,
    seed: u64,
    overlap: bool,
) -> Result<RunReport, HarnessError> {
    let sc = &loaded.scenario;
    let cfg = &loaded.planner;
    let n = cfg.n;
    let dt_plan = cfg.t_f / (n - 1) as f64;
    let cycle_dt = sc.cycle_dt();
    let cycles = sc.cycle_count();

    let truth_grid = rasterize_world(&sc.world, &sc.grid)?;
    let truth_field = DistanceField::batch_recompute(&truth_grid, sc.sdf)?;

    let mut map = match mode.map {
        MapSource::GroundTruth => {
            MapState { grid: truth_grid.clone(), field: truth_field.clone() }
        }
        MapSource::Online => {
            let grid = OccupancyGrid::new(sc.grid.clone())?;
            let field = DistanceField::batch_recompute(&grid, sc.sdf)?;
            MapState { grid, field }
        }
    };
    let online = mode.map == MapSource::Online;

    let mut drone = Vector3::from(sc.drone.start);
    let mut heading = sc.drone.start_heading;
    let mut filter: Option<ActorFilter> = None;
    let mut prev: Option<Trajectory> = None;
    let mut records = Vec::with_capacity(cycles);

    for k in 0..cycles {
        let cycle_start = Instant::now();
        let t = k as f64 * cycle_dt;
        let obs = sc.actor.pose_at(t);
        let warmup = t < sc.warmup_s;

        // during warmup the drone holds position and only maps; planning
        // into a mostly-unknown field is pointless and the optimizer would
        // fight uniform max-cost space
        if warmup {
            let map_ms = if online {
                let (ms, _) = map.integrate(&sc.world, &sc.lidar, &drone)?;
                ms
            } else {
                0.0
            };
            let own = point_distance(&map.grid, &map.field, &drone);
            let truth = point_distance(&truth_grid, &truth_field, &drone);
            if mode.actor == ActorSource::Filtered {
                // keep the filter fed so it has converged when planning starts
                match filter.as_mut() {
                    None => filter = Some(ActorFilter::from_observation(sc.actor.kind, &obs)),
                    Some(f) => f.kf_step(cycle_dt, Some(&obs))?,
                }
            }
            records.push(CycleRecord {
                cycle: k,
                t,
                warmup: true,
                position: drone,
                heading,
                terms: ZERO_TERMS,
                cost: 0.0,
                iterations: 0,
                converged: true,
                aborted: false,
                min_dist: own,
                min_dist_true: truth,
                plan_ms: 0.0,
                map_ms,
                cycle_ms: cycle_start.elapsed().as_secs_f64() * 1e3,
            });
            continue;
        }

        let forecast = match mode.actor {
            ActorSource::Ground => script_forecast(&sc.actor, t, n, dt_plan),
            ActorSource::Noisy(amp) => {
                let shifted = perturb_observation(&obs, amp, mix_seed(seed, k));
                let mut f = script_forecast(&sc.actor, t, n, dt_plan);
                let (dx, dy) = (shifted.x - obs.x, shifted.y - obs.y);
                for s in &mut f.samples {
                    s.position.x += dx;
                    s.position.y += dy;
                }
                f
            }
            ActorSource::Filtered => {
                match filter.as_mut() {
                    None => filter = Some(ActorFilter::from_observation(sc.actor.kind, &obs)),
                    Some(f) => f.kf_step(cycle_dt, Some(&obs))?,
                }
                filter.as_ref().expect("just installed").forecast(cfg.t_f, dt_plan)?
            }
        };

        let init = seed_trajectory(prev.as_ref(), &forecast, &sc.shot, drone, heading, cfg, cycle_dt)?;

        let plan_start = Instant::now();
        let (traj, diag, map_ms) = if online && overlap {
            let frozen_grid = map.grid.clone();
            let frozen_field = map.field.clone();
            let scan_pose = drone;
            let (plan_res, map_res) = std::thread::scope(|s| {
                let mapper = s.spawn(|| map.integrate(&sc.world, &sc.lidar, &scan_pose));
                let view = FieldView { grid: &frozen_grid, field: &frozen_field };
                let plan_res = planner::plan(&init, &forecast, &sc.shot, view, cfg);
                let map_res = mapper.join().expect("map lane panicked");
                (plan_res, map_res)
            });
            let (traj, diag) = plan_res?;
            let (map_ms, _) = map_res?;
            (traj, diag, map_ms)
        } else {
            let view = FieldView { grid: &map.grid, field: &map.field };
            let (traj, diag) = planner::plan(&init, &forecast, &sc.shot, view, cfg)?;
            let map_ms = if online {
                let (ms, _) = map.integrate(&sc.world, &sc.lidar, &drone)?;
                ms
            } else {
                0.0
            };
            (traj, diag, map_ms)
        };
        let plan_ms = plan_start.elapsed().as_secs_f64() * 1e3 - if online && !overlap { map_ms } else { 0.0 };

        // clearance checked against the map the plan saw, not the scan
        // that just landed
        let min_dist = match mode.map {
            MapSource::GroundTruth => min_signed_distance(&truth_grid, &truth_field, &traj),
            MapSource::Online => min_signed_distance(&map.grid, &map.field, &traj),
        };
        let min_dist_true = min_signed_distance(&truth_grid, &truth_field, &traj);

        records.push(CycleRecord {
            cycle: k,
            t,
            warmup: false,
            position: drone,
            heading,
            terms: diag.terms,
            cost: diag.cost,
            iterations: diag.iterations,
            converged: diag.converged,
            aborted: diag.aborted,
            min_dist,
            min_dist_true,
            plan_ms,
            map_ms,
            cycle_ms: cycle_start.elapsed().as_secs_f64() * 1e3,
        });

        let (next_pos, next_heading) = traj.sample(cycle_dt);
        drone = next_pos;
        heading = next_heading;
        prev = Some(traj);
    }

    Ok(RunReport {
        scenario: sc.name.clone(),
        mode: mode.to_string(),
        seed,
        cycles,
        aggregates: Aggregates::from_records(&records),
        timing: TimingAggregates::from_records(&records),
        records,
    })
}

// ---- comparison ----

/// Two full runs on the same script and seed, plus the paired summary the
/// ablation tables are built from.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub a: RunReport,
    pub b: RunReport,
    pub summary: ComparisonSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonSummary {
    pub scenario: String,
    pub seed: u64,
    pub mode_a: String,
    pub mode_b: String,
    pub a: Aggregates,
    pub b: Aggregates,
    /// avg cost of b over avg cost of a.
    pub cost_ratio: f64,
    /// RMS distance between the flown paths, paired per cycle.
    pub rms_divergence: f64,
    /// b minus a, per weighted cost component.
    pub delta_weighted: CostTerms,
    pub delta_cost: f64,
    /// Fraction of the cost increase owed to the shot term; absent when b
    /// is not costlier than a.
    pub shot_share_of_increase: Option<f64>,
}

pub fn compare_modes(
    loaded: &LoadedScenario,
    mode_a: RunMode,
    mode_b: RunMode,
    seed: u64,
) -> Result<Comparison, HarnessError> {
    let a = run_scenario(loaded, mode_a, seed)?;
    let b = run_scenario(loaded, mode_b, seed)?;
    let cfg = &loaded.planner;

    let paired: Vec<(&CycleRecord, &CycleRecord)> = a
        .records
        .iter()
        .zip(&b.records)
        .filter(|(ra, rb)| !ra.warmup && !rb.warmup)
        .collect();
    let rms_divergence = if paired.is_empty() {
        0.0
    } else {
        let sum: f64 =
            paired.iter().map(|(ra, rb)| (ra.position - rb.position).norm_squared()).sum();
        (sum / paired.len() as f64).sqrt()
    };

    let (ta, tb) = (a.aggregates.avg_terms, b.aggregates.avg_terms);
    let delta_weighted = CostTerms {
        smooth: tb.smooth - ta.smooth,
        shot: cfg.lambda1 * (tb.shot - ta.shot),
        obstacle: cfg.lambda2 * (tb.obstacle - ta.obstacle),
        occlusion: cfg.lambda3 * (tb.occlusion - ta.occlusion),
    };
    let delta_cost = b.aggregates.avg_cost - a.aggregates.avg_cost;
    let shot_share_of_increase =
        if delta_cost > 0.0 { Some(delta_weighted.shot / delta_cost) } else { None };

    let summary = ComparisonSummary {
        scenario: loaded.scenario.name.clone(),
        seed,
        mode_a: mode_a.to_string(),
        mode_b: mode_b.to_string(),
        a: a.aggregates,
        b: b.aggregates,
        cost_ratio: b.aggregates.avg_cost / a.aggregates.avg_cost,
        rms_divergence,
        delta_weighted,
        delta_cost,
        shot_share_of_increase,
    };
    Ok(Comparison { a, b, summary })
}

// ---- map benchmark ----

/// Batch reference every this many scans.
pub const BENCH_CHECKPOINT_EVERY: usize = 25;
/// Scans at or after this simulated time form the decay tail.
pub const BENCH_TAIL_START_S: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub scan: usize,
    pub t: f64,
    /// Cells whose classification flipped in this scan.
    pub changed_cells: usize,
    /// Wall time for integrating the scan and updating the field, ms.
    pub incremental_ms: f64,
    /// Wall time for a from-scratch field build at this point, when taken.
    pub batch_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub scans: usize,
    pub first_scan_ms: f64,
    /// Median incremental time over the tail window.
    pub median_tail_ms: f64,
    pub tail_start_s: f64,
    pub cumulative_incremental_ms: f64,
    pub batch_checkpoints: usize,
    pub avg_batch_ms: f64,
    /// What rebuilding from scratch every scan would have cost.
    pub batch_equivalent_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub scenario: String,
    pub records: Vec<BenchRecord>,
    pub summary: BenchSummary,
}

/// Online closed loop that times the map pipeline: per-scan incremental
/// update cost, with periodic from-scratch rebuilds for reference. Each
/// rebuild is also checked against the incremental field; divergence is an
/// error, not a statistic.
pub fn bench_map(loaded: &LoadedScenario) -> Result<BenchReport, HarnessError> {
    let sc = &loaded.scenario;
    let cfg = &loaded.planner;
    let n = cfg.n;
    let dt_plan = cfg.t_f / (n - 1) as f64;
    let cycle_dt = sc.cycle_dt();
    let cycles = sc.cycle_count();

    let grid = OccupancyGrid::new(sc.grid.clone())?;
    let field = DistanceField::batch_recompute(&grid, sc.sdf)?;
    let mut map = MapState { grid, field };

    let mut drone = Vector3::from(sc.drone.start);
    let mut heading = sc.drone.start_heading;
    let mut prev: Option<Trajectory> = None;
    let mut records = Vec::with_capacity(cycles);

    for k in 0..cycles {
        let t = k as f64 * cycle_dt;
        let (incremental_ms, changed_cells) = map.integrate(&sc.world, &sc.lidar, &drone)?;

        let batch_ms = if k % BENCH_CHECKPOINT_EVERY == 0 {
            let start = Instant::now();
            let reference = DistanceField::batch_recompute(&map.grid, sc.sdf)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if !reference.same_distances(&map.field) {
                return Err(HarnessError::FieldDrift { scan: k });
            }
            Some(ms)
        } else {
            None
        };

        records.push(BenchRecord { scan: k, t, changed_cells, incremental_ms, batch_ms });

        // keep the drone flying the shot so the map keeps growing
        let forecast = script_forecast(&sc.actor, t, n, dt_plan);
        let init =
            seed_trajectory(prev.as_ref(), &forecast, &sc.shot, drone, heading, cfg, cycle_dt)?;
        let view = FieldView { grid: &map.grid, field: &map.field };
        let (traj, _) = planner::plan(&init, &forecast, &sc.shot, view, cfg)?;
        let (next_pos, next_heading) = traj.sample(cycle_dt);
        drone = next_pos;
        heading = next_heading;
        prev = Some(traj);
    }

    let tail: Vec<f64> = records
        .iter()
        .filter(|r| r.t >= BENCH_TAIL_START_S)
        .map(|r| r.incremental_ms)
        .collect();
    let batch: Vec<f64> = records.iter().filter_map(|r| r.batch_ms).collect();
    let avg_batch_ms = mean(batch.iter().copied(), batch.len());
    let summary = BenchSummary {
        scans: records.len(),
        first_scan_ms: records.first().map_or(0.0, |r| r.incremental_ms),
        median_tail_ms: median(tail),
        tail_start_s: BENCH_TAIL_START_S,
        cumulative_incremental_ms: records.iter().map(|r| r.incremental_ms).sum(),
        batch_checkpoints: batch.len(),
        avg_batch_ms,
        batch_equivalent_ms: avg_batch_ms * records.len() as f64,
    };
    Ok(BenchReport { scenario: sc.name.clone(), records, summary })
}

// ---- artifact writers ----

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents)
        .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

fn ensure_dir(path: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(path)
        .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

fn flag(b: bool) -> u8 {
    b as u8
}

/// Simulation outputs only; wall-clock columns go to `timing.csv` so this
/// file is byte-stable for a given scenario, mode, and seed.
pub fn cycles_csv(records: &[CycleRecord]) -> String {
    let mut out = String::from(
        "cycle,t,warmup,x,y,z,heading,smooth,shot,obstacle,occlusion,cost,iterations,converged,aborted,min_dist,min_dist_true\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.cycle,
            r.t,
            flag(r.warmup),
            r.position.x,
            r.position.y,
            r.position.z,
            r.heading,
            r.terms.smooth,
            r.terms.shot,
            r.terms.obstacle,
            r.terms.occlusion,
            r.cost,
            r.iterations,
            flag(r.converged),
            flag(r.aborted),
            r.min_dist,
            r.min_dist_true,
        ));
    }
    out
}

fn timing_csv(records: &[CycleRecord]) -> String {
    let mut out = String::from("cycle,t,plan_ms,map_ms,cycle_ms\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.cycle, r.t, r.plan_ms, r.map_ms, r.cycle_ms
        ));
    }
    out
}

fn path_csv(records: &[CycleRecord]) -> String {
    let mut out = String::from("cycle,t,x,y,z,heading\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.cycle, r.t, r.position.x, r.position.y, r.position.z, r.heading
        ));
    }
    out
}

fn bench_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("scan,t,changed_cells,incremental_ms,batch_ms\n");
    for r in records {
        let batch = r.batch_ms.map_or(String::new(), |b| b.to_string());
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scan, r.t, r.changed_cells, r.incremental_ms, batch
        ));
    }
    out
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    scenario: &'a str,
    modes: Vec<String>,
    seed: u64,
    files: &'a [&'a str],
}

fn write_manifest(out: &Path, m: &Manifest<'_>) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    write_file(&out.join("manifest.json"), &text)
}

fn json_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn write_run_files(report: &RunReport, dir: &Path) -> Result<(), HarnessError> {
    ensure_dir(dir)?;
    write_file(&dir.join("report.json"), &json_pretty(report))?;
    write_file(&dir.join("cycles.csv"), &cycles_csv(&report.records))?;
    write_file(&dir.join("timing.csv"), &timing_csv(&report.records))?;
    Ok(())
}

/// Runs and writes `report.json`, `cycles.csv`, `timing.csv`, and a
/// manifest under `out`.
pub fn run_to_dir(
    loaded: &LoadedScenario,
    mode: RunMode,
    seed: u64,
    overlap: bool,
    out: &Path,
) -> Result<RunReport, HarnessError> {
    let report = if overlap {
        run_scenario_overlapped(loaded, mode, seed)?
    } else {
        run_scenario(loaded, mode, seed)?
    };
    write_run_files(&report, out)?;
    write_manifest(
        out,
        &Manifest {
            command: "run",
            scenario: &report.scenario,
            modes: vec![mode.to_string()],
            seed,
            files: &["report.json", "cycles.csv", "timing.csv"],
        },
    )?;
    Ok(report)
}

/// Runs both modes; writes `comparison.json`, per-mode artifact subdirs,
/// both flown paths, and a manifest under `out`.
pub fn compare_to_dir(
    loaded: &LoadedScenario,
    mode_a: RunMode,
    mode_b: RunMode,
    seed: u64,
    out: &Path,
) -> Result<Comparison, HarnessError> {
    let cmp = compare_modes(loaded, mode_a, mode_b, seed)?;
    ensure_dir(out)?;
    write_file(&out.join("comparison.json"), &json_pretty(&cmp.summary))?;
    write_run_files(&cmp.a, &out.join("a"))?;
    write_run_files(&cmp.b, &out.join("b"))?;
    write_file(&out.join("path_a.csv"), &path_csv(&cmp.a.records))?;
    write_file(&out.join("path_b.csv"), &path_csv(&cmp.b.records))?;
    write_manifest(
        out,
        &Manifest {
            command: "compare",
            scenario: &cmp.summary.scenario,
            modes: vec![mode_a.to_string(), mode_b.to_string()],
            seed,
            files: &[
                "comparison.json",
                "a/report.json",
                "a/cycles.csv",
                "a/timing.csv",
                "b/report.json",
                "b/cycles.csv",
                "b/timing.csv",
                "path_a.csv",
                "path_b.csv",
            ],
        },
    )?;
    Ok(cmp)
}

/// Benchmarks and writes `bench.csv`, `bench.json`, and a manifest under
/// `out`.
pub fn bench_to_dir(loaded: &LoadedScenario, out: &Path) -> Result<BenchReport, HarnessError> {
    let report = bench_map(loaded)?;
    ensure_dir(out)?;
    write_file(&out.join("bench.csv"), &bench_csv(&report.records))?;
    write_file(&out.join("bench.json"), &json_pretty(&report.summary))?;
    write_manifest(
        out,
        &Manifest {
            command: "bench-map",
            scenario: &report.scenario,
            modes: vec![],
            seed: loaded.scenario.seed,
            files: &["bench.csv", "bench.json"],
        },
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;

    fn desk_scenario() -> LoadedScenario {
        let toml = r#"
name = "desk"
seed = 9
duration_s = 8.0
replan_hz = 5.0
warmup_s = 2.0

[world]
ground_z = 0.0
bounds = { min = [0.0, 0.0, 0.0], max = [40.0, 30.0, 20.0] }
boxes = [{ min = [18.0, 8.0, 0.0], max = [21.0, 11.0, 7.0] }]

[grid]
dims = [40, 30, 20]
resolution = 1.0
origin = [0.0, 0.0, 0.0]

[sdf]
truncation = 4.0

[lidar]
channels = [-0.26, -0.13, 0.0, 0.13, 0.26]
azimuth_steps = 180
max_range = 60.0
rate_hz = 10.0

[actor]
kind = "person"
speed = 1.2
path = { shape = "polyline", points = [[8.0, 20.0, 1.0], [32.0, 20.0, 1.0]] }

[shot]
rho = 5.0
phi_rel = 1.5707963267948966
theta_rel = 0.5

[drone]
start = [8.0, 15.0, 4.0]
start_heading = 0.0
"#;
        let scenario: Scenario = toml::from_str(toml).unwrap();
        scenario.validate().unwrap();
        // weights sized for this map: heavier field terms overpower the
        // smoothness preconditioner and the updates stop contracting
        let planner = PlannerConfig {
            n: 21,
            t_f: 4.0,
            lambda2: 2.0,
            lambda3: 0.5,
            eta: 2.0,
            ..PlannerConfig::default()
        };
        LoadedScenario { scenario, planner }
    }

    #[test]
    fn mode_tokens_round_trip() {
        for tok in ["online/gt", "gt-map/kf", "online/noisy:1", "gt-map/noisy:0.25"] {
            let mode: RunMode = tok.parse().unwrap();
            assert_eq!(mode.to_string(), tok);
        }
        assert!("onlin/gt".parse::<RunMode>().is_err());
        assert!("online".parse::<RunMode>().is_err());
        assert!("online/noisy:-1".parse::<RunMode>().is_err());
        assert!("online/noisy:abc".parse::<RunMode>().is_err());
    }

    #[test]
    fn record_counts_and_warmup_split_follow_the_schedule() {
        let loaded = desk_scenario();
        let mode = RunMode { map: MapSource::GroundTruth, actor: ActorSource::Ground };
        let report = run_scenario(&loaded, mode, 9).unwrap();
        assert_eq!(report.cycles, 40);
        assert_eq!(report.records.len(), 40);
        // 2 s of warmup at 5 Hz
        assert_eq!(report.records.iter().filter(|r| r.warmup).count(), 10);
        assert_eq!(report.aggregates.recorded_cycles, 30);
        assert!(report.aggregates.avg_cost.is_finite());
        assert!(report.aggregates.min_dist > 0.0);
    }

    #[test]
    fn zero_duration_run_is_empty_with_zero_aggregates() {
        let mut loaded = desk_scenario();
        loaded.scenario.duration_s = 0.0;
        let mode = RunMode { map: MapSource::GroundTruth, actor: ActorSource::Ground };
        let report = run_scenario(&loaded, mode, 1).unwrap();
        assert_eq!(report.cycles, 0);
        assert!(report.records.is_empty());
        assert_eq!(report.aggregates.avg_cost, 0.0);
        assert_eq!(report.aggregates.median_cost, 0.0);
        assert_eq!(report.aggregates.recorded_cycles, 0);
    }

    #[test]
    fn reruns_are_byte_identical_and_seeds_matter_only_with_noise() {
        let loaded = desk_scenario();
        let noisy = RunMode { map: MapSource::Online, actor: ActorSource::Noisy(1.0) };
        let r1 = run_scenario(&loaded, noisy, 42).unwrap();
        let r2 = run_scenario(&loaded, noisy, 42).unwrap();
        assert_eq!(cycles_csv(&r1.records), cycles_csv(&r2.records));

        let r3 = run_scenario(&loaded, noisy, 43).unwrap();
        assert_ne!(cycles_csv(&r1.records), cycles_csv(&r3.records));

        // without noise the seed is inert
        let clean = RunMode { map: MapSource::Online, actor: ActorSource::Ground };
        let c1 = run_scenario(&loaded, clean, 1).unwrap();
        let c2 = run_scenario(&loaded, clean, 2).unwrap();
        assert_eq!(cycles_csv(&c1.records), cycles_csv(&c2.records));
    }

    #[test]
    fn overlapped_lanes_match_the_sequential_run_exactly() {
        let loaded = desk_scenario();
        let mode = RunMode { map: MapSource::Online, actor: ActorSource::Ground };
        let seq = run_scenario(&loaded, mode, 7).unwrap();
        let par = run_scenario_overlapped(&loaded, mode, 7).unwrap();
        assert_eq!(cycles_csv(&seq.records), cycles_csv(&par.records));
    }

    #[test]
    fn identical_modes_compare_to_unit_ratio_and_zero_divergence() {
        let loaded = desk_scenario();
        let mode = RunMode { map: MapSource::GroundTruth, actor: ActorSource::Ground };
        let cmp = compare_modes(&loaded, mode, mode, 3).unwrap();
        assert_eq!(cmp.summary.cost_ratio, 1.0);
        assert_eq!(cmp.summary.rms_divergence, 0.0);
        assert_eq!(cmp.summary.delta_cost, 0.0);
        assert!(cmp.summary.shot_share_of_increase.is_none());
    }

    #[test]
    fn noise_raises_cost_mostly_through_the_shot_term() {
        let loaded = desk_scenario();
        let gt = RunMode { map: MapSource::GroundTruth, actor: ActorSource::Ground };
        let noisy = RunMode { map: MapSource::GroundTruth, actor: ActorSource::Noisy(1.0) };
        let cmp = compare_modes(&loaded, gt, noisy, 11).unwrap();
        assert!(cmp.summary.delta_cost > 0.0, "noise should cost something");
        let share = cmp.summary.shot_share_of_increase.unwrap();
        assert!(share > 0.5, "shot term should dominate the increase, got {share}");
    }

    #[test]
    fn kf_mode_tracks_close_to_ground_truth_on_a_straight_walk() {
        let loaded = desk_scenario();
        let gt = RunMode { map: MapSource::GroundTruth, actor: ActorSource::Ground };
        let kf = RunMode { map: MapSource::GroundTruth, actor: ActorSource::Filtered };
        let cmp = compare_modes(&loaded, gt, kf, 5).unwrap();
        // converged filter on clean data should land within a few percent
        assert!(
            cmp.summary.cost_ratio < 1.25,
            "kf run should stay near gt cost, ratio {}",
            cmp.summary.cost_ratio
        );
        assert!(cmp.summary.rms_divergence < 2.0);
    }

    #[test]
    fn static_sensor_update_work_drains_to_zero() {
        let loaded = desk_scenario();
        let sc = &loaded.scenario;
        let grid = OccupancyGrid::new(sc.grid.clone()).unwrap();
        let field = DistanceField::batch_recompute(&grid, sc.sdf).unwrap();
        let mut map = MapState { grid, field };
        let pose = Vector3::from(sc.drone.start);
        let mut last_changed = usize::MAX;
        for _ in 0..40 {
            let (_, changed) = map.integrate(&sc.world, &sc.lidar, &pose).unwrap();
            last_changed = changed;
        }
        assert_eq!(last_changed, 0, "identical scans must stop flipping cells");
    }

    #[test]
    fn bench_records_decay_and_checkpoints() {
        let mut loaded = desk_scenario();
        loaded.scenario.duration_s = 6.0;
        let report = bench_map(&loaded).unwrap();
        assert_eq!(report.records.len(), 30);
        assert_eq!(report.summary.batch_checkpoints, 2, "scans 0 and 25");
        assert!(report.records[0].batch_ms.is_some());
        assert!(report.records[1].batch_ms.is_none());
        // a static-ish desk run still converges: late scans flip fewer
        // cells than the first
        let first = report.records[0].changed_cells;
        let last = report.records.last().unwrap().changed_cells;
        assert!(last < first / 4, "first {first}, last {last}");
    }

    #[test]
    fn artifact_writers_cover_the_documented_files() {
        let loaded = desk_scenario();
        let dir = tempfile::tempdir().unwrap();
        let mode = RunMode { map: MapSource::GroundTruth, actor: ActorSource::Ground };
        run_to_dir(&loaded, mode, 2, false, dir.path()).unwrap();
        for f in ["report.json", "cycles.csv", "timing.csv", "manifest.json"] {
            assert!(dir.path().join(f).is_file(), "missing {f}");
        }
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["mode"], "gt-map/gt");
        assert_eq!(report["cycles"], 40);

        let cdir = tempfile::tempdir().unwrap();
        let online = RunMode { map: MapSource::Online, actor: ActorSource::Ground };
        compare_to_dir(&loaded, mode, online, 2, cdir.path()).unwrap();
        for f in ["comparison.json", "a/cycles.csv", "b/cycles.csv", "path_a.csv", "path_b.csv"] {
            assert!(cdir.path().join(f).is_file(), "missing {f}");
        }
    }

    #[test]
    fn aggregates_recompute_from_the_csv_rows() {
        let loaded = desk_scenario();
        let mode = RunMode { map: MapSource::Online, actor: ActorSource::Noisy(0.5) };
        let report = run_scenario(&loaded, mode, 8).unwrap();
        let csv = cycles_csv(&report.records);
        let mut costs = Vec::new();
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let warmup: u8 = cols[2].parse().unwrap();
            if warmup == 0 {
                costs.push(cols[11].parse::<f64>().unwrap());
            }
        }
        assert_eq!(costs.len(), report.aggregates.recorded_cycles);
        let avg = costs.iter().sum::<f64>() / costs.len() as f64;
        assert_eq!(avg, report.aggregates.avg_cost, "csv must reproduce aggregates exactly");
        assert_eq!(median(costs), report.aggregates.median_cost);
    }
}
