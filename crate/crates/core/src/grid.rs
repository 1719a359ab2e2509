//! Log-odds occupancy grid fed by LiDAR rays.
//!
//! Cells are single bytes. A fresh map is all 127 (unknown); free-space
//! evidence decrements, hit evidence increments, both saturating. Every ray
//! update reports which voxels changed classification so the distance field
//! can follow along without rescanning the map.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Aabb, Voxel};

/// Cell value of an untouched map.
pub const UNKNOWN_CELL: u8 = 127;

const SNAPSHOT_MAGIC: [u8; 4] = *b"SSG1";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid config: {0}")]
    InvalidConfig(String),
    #[error("snapshot io: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("malformed snapshot: {0}")]
    Malformed(String),
}

/// Three-way cell classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Occupancy {
    Free,
    Unknown,
    Occupied,
}

/// Grid geometry plus the log-odds update constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub resolution: f64,
    pub origin: [f64; 3],
    /// Added to the endpoint cell of a hit ray.
    pub l_occ: u8,
    /// Subtracted from every cell a ray passes through.
    pub l_free: u8,
    /// Cells at or below this value classify as free.
    pub tau_free: u8,
    /// Cells at or above this value classify as occupied.
    pub tau_occ: u8,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            dims: [250, 250, 100],
            resolution: 1.0,
            origin: [0.0, 0.0, 0.0],
            l_occ: 32,
            l_free: 4,
            tau_free: 115,
            tau_occ: 140,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(GridError::InvalidConfig("dims must be positive".into()));
        }
        if self.dims.iter().any(|&d| d > i32::MAX as usize) {
            return Err(GridError::InvalidConfig("dims exceed i32 range".into()));
        }
        let cells: usize = self.dims.iter().product();
        if cells > u32::MAX as usize {
            return Err(GridError::InvalidConfig("cell count exceeds u32 range".into()));
        }
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(GridError::InvalidConfig("resolution must be positive".into()));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(GridError::InvalidConfig("origin must be finite".into()));
        }
        if !(self.tau_free < UNKNOWN_CELL && UNKNOWN_CELL < self.tau_occ) {
            return Err(GridError::InvalidConfig(
                "thresholds must straddle the unknown value: tau_free < 127 < tau_occ".into(),
            ));
        }
        if self.l_occ == 0 || self.l_free == 0 {
            return Err(GridError::InvalidConfig("l_occ and l_free must be at least 1".into()));
        }
        Ok(())
    }

    pub fn classify(&self, value: u8) -> Occupancy {
        if value <= self.tau_free {
            Occupancy::Free
        } else if value >= self.tau_occ {
            Occupancy::Occupied
        } else {
            Occupancy::Unknown
        }
    }

    pub fn world_bounds(&self) -> Aabb {
        let min = self.origin;
        let max = [
            self.origin[0] + self.dims[0] as f64 * self.resolution,
            self.origin[1] + self.dims[1] as f64 * self.resolution,
            self.origin[2] + self.dims[2] as f64 * self.resolution,
        ];
        Aabb::new(min, max)
    }
}

/// One beam: sensor origin, endpoint, and whether the endpoint is a real
/// return. A miss carries the point where the beam gave up (max range).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayMeasurement {
    pub sensor: Vector3<f64>,
    pub point: Vector3<f64>,
    pub is_hit: bool,
}

/// Voxels whose classification crossed a threshold during an update, split
/// by which side they ended on. `became_occupied` also carries unknown
/// voxels that just gained a free neighbor: they are new border candidates
/// for the distance field even though their own value never moved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChangeSet {
    pub became_occupied: Vec<Voxel>,
    pub became_free: Vec<Voxel>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.became_occupied.is_empty() && self.became_free.is_empty()
    }

    pub fn len(&self) -> usize {
        self.became_occupied.len() + self.became_free.len()
    }
}

#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    config: GridConfig,
    cells: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(config: GridConfig) -> Result<Self, GridError> {
        config.validate()?;
        let n = config.dims.iter().product();
        Ok(OccupancyGrid { config, cells: vec![UNKNOWN_CELL; n] })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn in_bounds(&self, v: Voxel) -> bool {
        v.x >= 0
            && v.y >= 0
            && v.z >= 0
            && (v.x as usize) < self.config.dims[0]
            && (v.y as usize) < self.config.dims[1]
            && (v.z as usize) < self.config.dims[2]
    }

    pub fn index(&self, v: Voxel) -> usize {
        let [dx, dy, _] = self.config.dims;
        (v.z as usize * dy + v.y as usize) * dx + v.x as usize
    }

    pub fn voxel_of_index(&self, idx: usize) -> Voxel {
        let [dx, dy, _] = self.config.dims;
        let x = idx % dx;
        let y = (idx / dx) % dy;
        let z = idx / (dx * dy);
        Voxel::new(x as i32, y as i32, z as i32)
    }

    pub fn cell(&self, v: Voxel) -> Option<u8> {
        self.in_bounds(v).then(|| self.cells[self.index(v)])
    }

    pub fn classify_voxel(&self, v: Voxel) -> Option<Occupancy> {
        self.cell(v).map(|c| self.config.classify(c))
    }

    /// World position of a voxel center.
    pub fn center_of(&self, v: Voxel) -> Vector3<f64> {
        let r = self.config.resolution;
        Vector3::new(
            self.config.origin[0] + (v.x as f64 + 0.5) * r,
            self.config.origin[1] + (v.y as f64 + 0.5) * r,
            self.config.origin[2] + (v.z as f64 + 0.5) * r,
        )
    }

    /// Voxel containing a world point, or None outside the grid. Points on
    /// the far boundary faces are folded into the last cell.
    pub fn voxel_at_point(&self, p: &Vector3<f64>) -> Option<Voxel> {
        if !self.config.world_bounds().contains(p) {
            return None;
        }
        Some(self.voxel_at_point_clamped(p))
    }

    fn voxel_at_point_clamped(&self, p: &Vector3<f64>) -> Voxel {
        let r = self.config.resolution;
        let mut c = [0i32; 3];
        for a in 0..3 {
            let raw = ((p[a] - self.config.origin[a]) / r).floor() as i64;
            c[a] = raw.clamp(0, self.config.dims[a] as i64 - 1) as i32;
        }
        Voxel::new(c[0], c[1], c[2])
    }

    /// All voxels the segment from `a` to `b` passes through, in order, each
    /// once, ending at the voxel containing `b`. The segment is clipped to
    /// the grid box first; a segment fully outside yields nothing.
    ///
    /// Stepping is the standard two-distance digital differential walk. When
    /// the segment crosses a voxel edge or corner exactly, all tied axes
    /// advance together, so the walk never visits a cell the segment only
    /// flies past on the wrong side of the corner.
    pub fn traverse_ray(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> Vec<Voxel> {
        let bounds = self.config.world_bounds();
        let Some((t0, t1)) = bounds.clip_segment(a, b) else {
            return Vec::new();
        };
        let full = b - a;
        let pa = a + full * t0;
        let pb = a + full * t1;
        let start = self.voxel_at_point_clamped(&pa);
        let end = self.voxel_at_point_clamped(&pb);

        let mut out = Vec::new();
        if start == end {
            out.push(start);
            return out;
        }

        let d = pb - pa;
        let r = self.config.resolution;
        let mut cur = start;
        let mut step = [0i32; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for axis in 0..3 {
            if d[axis] > 0.0 {
                step[axis] = 1;
                let boundary = self.config.origin[axis] + (cur_axis(cur, axis) + 1) as f64 * r;
                t_max[axis] = (boundary - pa[axis]) / d[axis];
                t_delta[axis] = r / d[axis];
            } else if d[axis] < 0.0 {
                step[axis] = -1;
                let boundary = self.config.origin[axis] + cur_axis(cur, axis) as f64 * r;
                t_max[axis] = (boundary - pa[axis]) / d[axis];
                t_delta[axis] = -r / d[axis];
            }
        }

        let l1 = (end.x - start.x).abs() + (end.y - start.y).abs() + (end.z - start.z).abs();
        let max_steps = l1 as usize + 3;
        loop {
            out.push(cur);
            if cur == end || out.len() > max_steps {
                break;
            }
            let tm = t_max[0].min(t_max[1]).min(t_max[2]);
            if tm > 1.0 + 1e-12 {
                break;
            }
            for axis in 0..3 {
                if t_max[axis] == tm {
                    match axis {
                        0 => cur.x += step[0],
                        1 => cur.y += step[1],
                        _ => cur.z += step[2],
                    }
                    t_max[axis] += t_delta[axis];
                }
            }
            if !self.in_bounds(cur) {
                break;
            }
        }
        out
    }

    /// Applies one beam to the map. Every traversed voxel loses `l_free`;
    /// a hit endpoint then gains `l_occ` on top of its decrement. A miss
    /// leaves its endpoint cell untouched and only clears the cells before
    /// it. Returns the classification changes, reconciled so each voxel
    /// appears in at most one list and the list matches its final state.
    pub fn update_ray(&mut self, ray: &RayMeasurement) -> ChangeSet {
        let path = self.traverse_ray(&ray.sensor, &ray.point);
        self.apply_path(&path, ray.is_hit)
    }

    fn apply_path(&mut self, path: &[Voxel], is_hit: bool) -> ChangeSet {
        let mut pre_class: Vec<(Voxel, Occupancy)> = Vec::with_capacity(path.len());
        // border candidates per the unknown-neighbor rule, gathered in ray
        // order against the evolving map state
        let mut candidates: Vec<Voxel> = Vec::new();

        let last_index = path.len().wrapping_sub(1);
        for (k, &v) in path.iter().enumerate() {
            let at_end = k == last_index;
            if at_end && !is_hit {
                break;
            }
            let idx = self.index(v);
            let before = self.cells[idx];
            let class_before = self.config.classify(before);
            let decremented = before.saturating_sub(self.config.l_free);
            if class_before != Occupancy::Free
                && self.config.classify(decremented) == Occupancy::Free
            {
                // cleared to free: any unknown face-neighbor now borders
                // free space
                self.cells[idx] = decremented;
                for n in v.neighbors6() {
                    if self.classify_voxel(n) == Some(Occupancy::Unknown) {
                        candidates.push(n);
                    }
                }
            } else {
                self.cells[idx] = decremented;
            }
            if at_end {
                let bumped = decremented.saturating_add(self.config.l_occ);
                self.cells[idx] = bumped;
            }
            pre_class.push((v, class_before));
        }

        self.reconcile(pre_class, candidates)
    }

    /// Builds the final ChangeSet from recorded pre-states: voxels are listed
    /// by where they ended up, so a hit endpoint that dipped through the free
    /// band on its way to occupied lands only in `became_occupied`.
    fn reconcile(
        &self,
        pre_class: Vec<(Voxel, Occupancy)>,
        candidates: Vec<Voxel>,
    ) -> ChangeSet {
        let mut set = ChangeSet::default();
        let mut seen: HashMap<Voxel, ()> = HashMap::new();
        for (v, before) in pre_class {
            let after = self.config.classify(self.cells[self.index(v)]);
            if before == after || seen.contains_key(&v) {
                continue;
            }
            seen.insert(v, ());
            if after == Occupancy::Free {
                set.became_free.push(v);
            } else {
                set.became_occupied.push(v);
            }
        }
        for v in candidates {
            if seen.contains_key(&v) {
                continue;
            }
            if self.config.classify(self.cells[self.index(v)]) != Occupancy::Free {
                seen.insert(v, ());
                set.became_occupied.push(v);
            }
        }
        set
    }

    /// Applies a whole scan ray by ray. The combined ChangeSet is the
    /// per-ray sets merged with the last classification winning, so a voxel
    /// flipping twice within one scan is reported once, by its final side.
    pub fn integrate_scan(&mut self, rays: &[RayMeasurement]) -> ChangeSet {
        #[derive(Clone, Copy)]
        enum Side {
            Occ,
            Free,
        }
        let mut order: Vec<(Voxel, Side)> = Vec::new();
        let mut last: HashMap<Voxel, usize> = HashMap::new();
        for ray in rays {
            let cs = self.update_ray(ray);
            for v in cs.became_free {
                last.insert(v, order.len());
                order.push((v, Side::Free));
            }
            for v in cs.became_occupied {
                last.insert(v, order.len());
                order.push((v, Side::Occ));
            }
        }
        let mut merged = ChangeSet::default();
        for (seq, (v, side)) in order.iter().enumerate() {
            if last[v] != seq {
                continue;
            }
            match side {
                Side::Free => merged.became_free.push(*v),
                Side::Occ => merged.became_occupied.push(*v),
            }
        }
        merged
    }

    /// Writes the map as a fixed 32-byte header (magic, dims, resolution,
    /// origin) followed by raw cells, x-fastest, plus a JSON sidecar holding
    /// the full config at `<path>.json`.
    pub fn save_snapshot<P: AsRef<Path>>(&self, path: P) -> Result<(), GridError> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&header_bytes(
            SNAPSHOT_MAGIC,
            self.config.dims,
            self.config.resolution,
            self.config.origin,
        ))?;
        f.write_all(&self.cells)?;
        let sidecar = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(sidecar_path(path), sidecar)?;
        Ok(())
    }

    pub fn load_snapshot<P: AsRef<Path>>(path: P) -> Result<Self, GridError> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path)?;
        let mut header = [0u8; 32];
        f.read_exact(&mut header)?;
        let (magic, dims, _res, _origin) = parse_header(&header)?;
        if magic != SNAPSHOT_MAGIC {
            return Err(GridError::Malformed("bad magic".into()));
        }
        let config: GridConfig =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        config.validate()?;
        if config.dims != dims {
            return Err(GridError::Malformed("sidecar dims disagree with header".into()));
        }
        let n: usize = dims.iter().product();
        let mut cells = vec![0u8; n];
        f.read_exact(&mut cells)?;
        Ok(OccupancyGrid { config, cells })
    }

    #[cfg(test)]
    pub(crate) fn set_cell(&mut self, v: Voxel, value: u8) {
        let idx = self.index(v);
        self.cells[idx] = value;
    }

    pub(crate) fn cells_mut(&mut self) -> &mut [u8] {
        &mut self.cells
    }
}

fn cur_axis(v: Voxel, axis: usize) -> i32 {
    match axis {
        0 => v.x,
        1 => v.y,
        _ => v.z,
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

pub(crate) fn header_bytes(magic: [u8; 4], dims: [usize; 3], resolution: f64, origin: [f64; 3]) -> [u8; 32] {
    let mut h = [0u8; 32];
    h[0..4].copy_from_slice(&magic);
    for a in 0..3 {
        h[4 + a * 4..8 + a * 4].copy_from_slice(&(dims[a] as u32).to_le_bytes());
    }
    h[16..20].copy_from_slice(&(resolution as f32).to_le_bytes());
    for a in 0..3 {
        h[20 + a * 4..24 + a * 4].copy_from_slice(&(origin[a] as f32).to_le_bytes());
    }
    h
}

pub(crate) fn parse_header(h: &[u8; 32]) -> Result<([u8; 4], [usize; 3], f32, [f32; 3]), GridError> {
    let magic = [h[0], h[1], h[2], h[3]];
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = u32::from_le_bytes(h[4 + a * 4..8 + a * 4].try_into().unwrap()) as usize;
    }
    let res = f32::from_le_bytes(h[16..20].try_into().unwrap());
    let mut origin = [0f32; 3];
    for a in 0..3 {
        origin[a] = f32::from_le_bytes(h[20 + a * 4..24 + a * 4].try_into().unwrap());
    }
    Ok((magic, dims, res, origin))
}
