//! Incrementally maintained truncated signed distance field.
//!
//! Border voxels are the distance sources: every occupied voxel (a direct
//! LiDAR return) and every unknown voxel that touches free space across a
//! face. Each cell stores the grid coordinates of its nearest border (as a
//! linear index) so distances are exact Euclidean values, not graph path
//! lengths, and stay exact under incremental edits.
//!
//! Distances are kept as integer squared voxel offsets internally, which
//! makes wavefront comparisons exact and makes an incrementally maintained
//! field bit-identical to one rebuilt from scratch.
//!
//! An update runs two waves over a distance-ordered queue: a raise wave
//! clears every cell whose recorded nearest border was demoted, then a lower
//! wave re-floods the cleared region from inserted borders and from the
//! still-valid cells ringing it.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Voxel;
use crate::grid::{ChangeSet, Occupancy, OccupancyGrid};

const FIELD_MAGIC: [u8; 4] = *b"SSF1";
const NO_ANCHOR: u32 = u32::MAX;
const NO_D2: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum SdfError {
    #[error("invalid sdf config: {0}")]
    InvalidConfig(String),
    #[error("query point {0:?} outside grid bounds")]
    OutOfBounds([f64; 3]),
    #[error("change set voxel {0:?} outside grid bounds")]
    VoxelOutOfBounds(Voxel),
    #[error("grid geometry does not match the field (dims/resolution/origin)")]
    GridMismatch,
    #[error("field io: {0}")]
    Io(#[from] std::io::Error),
    #[error("field sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Wavefront stencil. Distances are exact either way; the stencil only
/// decides through which neighbors nearest-border information travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    Six,
    #[default]
    TwentySix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdfConfig {
    /// Distance cap in meters. Cells farther than this from every border
    /// read exactly this value.
    pub truncation: f64,
    pub connectivity: Connectivity,
}

impl Default for SdfConfig {
    fn default() -> Self {
        SdfConfig { truncation: 5.0, connectivity: Connectivity::TwentySix }
    }
}

const OFFSETS_26: [(i32, i32, i32); 26] = {
    let mut out = [(0, 0, 0); 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = (dx, dy, dz);
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

const OFFSETS_6: [(i32, i32, i32); 6] =
    [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];

/// Truncated signed distance field mirroring one occupancy grid's geometry.
/// Cheap to snapshot: `clone()` copies the arrays and no queue state, since
/// updates always drain their wavefronts before returning.
#[derive(Debug, Clone)]
pub struct DistanceField {
    cfg: SdfConfig,
    dims: [usize; 3],
    resolution: f64,
    origin: [f64; 3],
    /// Inclusive truncation bound in squared voxel units.
    max_d2: u32,
    d2: Vec<u32>,
    anchor: Vec<u32>,
    border: Vec<bool>,
    border_count: usize,
    /// Scratch: distinct-cell touch marking per update call.
    touch_epoch: Vec<u32>,
    epoch: u32,
}

impl DistanceField {
    /// Empty field (no borders anywhere): every cell reads the truncation
    /// distance, negatively signed wherever the grid is not free.
    pub fn new(grid: &OccupancyGrid, cfg: SdfConfig) -> Result<Self, SdfError> {
        let g = grid.config();
        if !(cfg.truncation.is_finite() && cfg.truncation > 0.0) {
            return Err(SdfError::InvalidConfig("truncation must be positive".into()));
        }
        if cfg.truncation < 2.0 * g.resolution {
            return Err(SdfError::InvalidConfig(
                "truncation must be at least twice the grid resolution".into(),
            ));
        }
        let t = cfg.truncation / g.resolution;
        if t * t > 2.0_f64.powi(31) {
            return Err(SdfError::InvalidConfig("truncation too large for this resolution".into()));
        }
        let n: usize = g.dims.iter().product();
        Ok(DistanceField {
            cfg,
            dims: g.dims,
            resolution: g.resolution,
            origin: g.origin,
            max_d2: (t * t + 1e-9).floor() as u32,
            d2: vec![NO_D2; n],
            anchor: vec![NO_ANCHOR; n],
            border: vec![false; n],
            border_count: 0,
            touch_epoch: vec![0; n],
            epoch: 0,
        })
    }

    /// Rebuilds a field from scratch: scans the whole grid for border voxels
    /// and floods distances outward in one multi-source wave.
    pub fn batch_recompute(grid: &OccupancyGrid, cfg: SdfConfig) -> Result<Self, SdfError> {
        let mut field = Self::new(grid, cfg)?;
        let mut heap: BinaryHeap<Reverse<(u32, u32)>> = BinaryHeap::new();
        let n = field.d2.len();
        for idx in 0..n {
            if field.is_border_by_rule(grid, idx as u32) {
                field.border[idx] = true;
                field.border_count += 1;
                field.d2[idx] = 0;
                field.anchor[idx] = idx as u32;
                heap.push(Reverse((0, idx as u32)));
            }
        }
        field.lower_wave(&mut heap);
        Ok(field)
    }

    pub fn config(&self) -> &SdfConfig {
        &self.cfg
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn border_count(&self) -> usize {
        self.border_count
    }

    pub fn is_border(&self, v: Voxel) -> bool {
        self.voxel_index(v).map(|i| self.border[i as usize]).unwrap_or(false)
    }

    /// Sorted border voxel list, mainly for equivalence checks.
    pub fn border_voxels(&self) -> Vec<Voxel> {
        (0..self.border.len())
            .filter(|&i| self.border[i])
            .map(|i| self.voxel_of(i as u32))
            .collect()
    }

    pub fn squared_cells(&self) -> &[u32] {
        &self.d2
    }

    /// Unsigned distance of a voxel center to its nearest border, truncated.
    pub fn distance_of(&self, v: Voxel) -> Option<f64> {
        let idx = self.voxel_index(v)?;
        Some(self.cell_distance(idx as usize))
    }

    /// Signed per-voxel value: positive in free space, negative in unknown
    /// or occupied space.
    pub fn signed_of(&self, grid: &OccupancyGrid, v: Voxel) -> Option<f64> {
        let idx = self.voxel_index(v)?;
        Some(self.cell_signed(grid, idx as usize))
    }

    fn cell_distance(&self, idx: usize) -> f64 {
        if self.anchor[idx] == NO_ANCHOR {
            self.cfg.truncation
        } else {
            ((self.d2[idx] as f64).sqrt() * self.resolution).min(self.cfg.truncation)
        }
    }

    fn cell_signed(&self, grid: &OccupancyGrid, idx: usize) -> f64 {
        let d = self.cell_distance(idx);
        match grid.config().classify(grid.cells()[idx]) {
            Occupancy::Free => d,
            _ => -d,
        }
    }

    /// Folds a grid update into the field. The change set must come from the
    /// grid passed here, in its post-update state. Returns how many distinct
    /// cells were rewritten.
    pub fn apply_changes(
        &mut self,
        grid: &OccupancyGrid,
        changes: &ChangeSet,
    ) -> Result<usize, SdfError> {
        self.check_geometry(grid)?;
        if changes.is_empty() {
            return Ok(0);
        }

        // Border membership only depends on a voxel's own class and its face
        // neighbors' classes, so re-deciding it for every mentioned voxel
        // and their face neighbors covers every possible membership flip.
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.touch_epoch.fill(0);
            self.epoch = 1;
        }
        let seen_mark = self.epoch;
        let mut affected: Vec<u32> = Vec::with_capacity(changes.len() * 7);
        {
            let mut consider = |field: &mut Self, v: Voxel| {
                if let Some(idx) = field.voxel_index(v) {
                    if field.touch_epoch[idx as usize] != seen_mark {
                        field.touch_epoch[idx as usize] = seen_mark;
                        affected.push(idx);
                    }
                }
            };
            for &v in changes.became_occupied.iter().chain(changes.became_free.iter()) {
                if self.voxel_index(v).is_none() {
                    return Err(SdfError::VoxelOutOfBounds(v));
                }
                consider(self, v);
                for n in v.neighbors6() {
                    consider(self, n);
                }
            }
        }

        let mut inserts: Vec<u32> = Vec::new();
        let mut removals: Vec<u32> = Vec::new();
        for &idx in &affected {
            let want = self.is_border_by_rule(grid, idx);
            let have = self.border[idx as usize];
            if want && !have {
                inserts.push(idx);
            } else if !want && have {
                removals.push(idx);
            }
        }
        if inserts.is_empty() && removals.is_empty() {
            return Ok(0);
        }

        // fresh epoch for counting actual cell rewrites
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.touch_epoch.fill(0);
            self.epoch = 1;
        }
        let mut updated = 0usize;

        // raise wave: clear everything anchored to a demoted border, keep
        // the valid ring around the cleared region as re-entry seeds
        let mut frontier: Vec<u32> = Vec::new();
        if !removals.is_empty() {
            for &b in &removals {
                self.border[b as usize] = false;
                self.border_count -= 1;
            }
            let mut heap: BinaryHeap<Reverse<(u32, u32)>> = BinaryHeap::new();
            for &b in &removals {
                heap.push(Reverse((self.d2[b as usize], b)));
                self.touch(b, &mut updated);
                self.d2[b as usize] = NO_D2;
                self.anchor[b as usize] = NO_ANCHOR;
            }
            let offsets = self.offsets();
            while let Some(Reverse((_, v))) = heap.pop() {
                let (vx, vy, vz) = self.coords(v);
                for &(dx, dy, dz) in offsets {
                    let Some(n) = self.index_at(vx + dx, vy + dy, vz + dz) else {
                        continue;
                    };
                    let a = self.anchor[n as usize];
                    if a == NO_ANCHOR {
                        continue;
                    }
                    if self.border[a as usize] {
                        frontier.push(n);
                    } else {
                        heap.push(Reverse((self.d2[n as usize], n)));
                        self.touch(n, &mut updated);
                        self.d2[n as usize] = NO_D2;
                        self.anchor[n as usize] = NO_ANCHOR;
                    }
                }
            }
        }

        // lower wave: flood from new borders and from the valid ring
        let mut heap: BinaryHeap<Reverse<(u32, u32)>> = BinaryHeap::new();
        for &b in &inserts {
            self.border[b as usize] = true;
            self.border_count += 1;
            if self.d2[b as usize] != 0 || self.anchor[b as usize] != b {
                self.touch(b, &mut updated);
                self.d2[b as usize] = 0;
                self.anchor[b as usize] = b;
            }
            heap.push(Reverse((0, b)));
        }
        for f in frontier {
            let a = self.anchor[f as usize];
            if a != NO_ANCHOR && self.border[a as usize] {
                heap.push(Reverse((self.d2[f as usize], f)));
            }
        }
        self.lower_wave_counting(&mut heap, &mut updated);
        Ok(updated)
    }

    fn lower_wave(&mut self, heap: &mut BinaryHeap<Reverse<(u32, u32)>>) {
        let mut sink = 0usize;
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.touch_epoch.fill(0);
            self.epoch = 1;
        }
        self.lower_wave_counting(heap, &mut sink);
    }

    fn lower_wave_counting(
        &mut self,
        heap: &mut BinaryHeap<Reverse<(u32, u32)>>,
        updated: &mut usize,
    ) {
        let offsets = self.offsets();
        while let Some(Reverse((dv, v))) = heap.pop() {
            if dv > self.d2[v as usize] {
                continue; // superseded by a closer border since it was queued
            }
            let a = self.anchor[v as usize];
            let (ax, ay, az) = self.coords(a);
            let (vx, vy, vz) = self.coords(v);
            for &(dx, dy, dz) in offsets {
                let (nx, ny, nz) = (vx + dx, vy + dy, vz + dz);
                let Some(n) = self.index_at(nx, ny, nz) else { continue };
                let ex = (nx - ax) as i64;
                let ey = (ny - ay) as i64;
                let ez = (nz - az) as i64;
                let dd = (ex * ex + ey * ey + ez * ez) as u64;
                if dd <= self.max_d2 as u64 && (dd as u32) < self.d2[n as usize] {
                    self.touch(n, updated);
                    self.d2[n as usize] = dd as u32;
                    self.anchor[n as usize] = a;
                    heap.push(Reverse((dd as u32, n)));
                }
            }
        }
    }

    fn touch(&mut self, idx: u32, updated: &mut usize) {
        if self.touch_epoch[idx as usize] != self.epoch {
            self.touch_epoch[idx as usize] = self.epoch;
            *updated += 1;
        }
    }

    fn offsets(&self) -> &'static [(i32, i32, i32)] {
        match self.cfg.connectivity {
            Connectivity::Six => &OFFSETS_6,
            Connectivity::TwentySix => &OFFSETS_26,
        }
    }

    /// Border rule: occupied voxels are returns, unknown voxels touching
    /// free space across a face are the free-space frontier.
    fn is_border_by_rule(&self, grid: &OccupancyGrid, idx: u32) -> bool {
        let cells = grid.cells();
        let cfg = grid.config();
        match cfg.classify(cells[idx as usize]) {
            Occupancy::Occupied => true,
            Occupancy::Free => false,
            Occupancy::Unknown => {
                let (x, y, z) = self.coords(idx);
                for &(dx, dy, dz) in OFFSETS_6.iter() {
                    if let Some(n) = self.index_at(x + dx, y + dy, z + dz) {
                        if cfg.classify(cells[n as usize]) == Occupancy::Free {
                            return true;
                        }
                    }
                }
                false
            }
        }
    }

    fn check_geometry(&self, grid: &OccupancyGrid) -> Result<(), SdfError> {
        let g = grid.config();
        if g.dims != self.dims || g.resolution != self.resolution || g.origin != self.origin {
            return Err(SdfError::GridMismatch);
        }
        Ok(())
    }

    fn voxel_index(&self, v: Voxel) -> Option<u32> {
        if v.x < 0
            || v.y < 0
            || v.z < 0
            || v.x as usize >= self.dims[0]
            || v.y as usize >= self.dims[1]
            || v.z as usize >= self.dims[2]
        {
            return None;
        }
        Some(((v.z as usize * self.dims[1] + v.y as usize) * self.dims[0] + v.x as usize) as u32)
    }

    fn index_at(&self, x: i32, y: i32, z: i32) -> Option<u32> {
        if x < 0
            || y < 0
            || z < 0
            || x as usize >= self.dims[0]
            || y as usize >= self.dims[1]
            || z as usize >= self.dims[2]
        {
            return None;
        }
        Some(((z as usize * self.dims[1] + y as usize) * self.dims[0] + x as usize) as u32)
    }

    fn coords(&self, idx: u32) -> (i32, i32, i32) {
        let idx = idx as usize;
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        (x as i32, y as i32, z as i32)
    }

    fn voxel_of(&self, idx: u32) -> Voxel {
        let (x, y, z) = self.coords(idx);
        Voxel::new(x, y, z)
    }

    /// Trilinearly interpolated signed distance at a world point. Points
    /// between the outermost voxel centers and the grid faces reuse the edge
    /// cells. Outside the grid box entirely is an error; how to price such
    /// points is the caller's policy.
    pub fn signed_distance_at(
        &self,
        grid: &OccupancyGrid,
        p: &Vector3<f64>,
    ) -> Result<f64, SdfError> {
        self.check_geometry(grid)?;
        let (corners, weights) = self.stencil(p)?;
        let mut value = 0.0;
        for k in 0..8 {
            value += weights[k] * self.cell_signed(grid, corners[k]);
        }
        Ok(value)
    }

    /// Central-difference gradient of [`signed_distance_at`] with a probe
    /// offset of half a cell per axis. Probes that would leave the grid fall
    /// back to a one-sided difference; the flag reports that this happened.
    pub fn gradient_at(
        &self,
        grid: &OccupancyGrid,
        p: &Vector3<f64>,
    ) -> Result<(Vector3<f64>, bool), SdfError> {
        self.check_geometry(grid)?;
        let h = self.resolution * 0.5;
        let bounds = grid.config().world_bounds();
        if !bounds.contains(p) {
            return Err(SdfError::OutOfBounds([p.x, p.y, p.z]));
        }
        let mut g = Vector3::zeros();
        let mut clamped = false;
        for axis in 0..3 {
            let mut hi = *p;
            let mut lo = *p;
            hi[axis] += h;
            lo[axis] -= h;
            let hi_in = bounds.contains(&hi);
            let lo_in = bounds.contains(&lo);
            g[axis] = match (hi_in, lo_in) {
                (true, true) => {
                    (self.signed_distance_at(grid, &hi)? - self.signed_distance_at(grid, &lo)?)
                        / (2.0 * h)
                }
                (true, false) => {
                    clamped = true;
                    (self.signed_distance_at(grid, &hi)? - self.signed_distance_at(grid, p)?) / h
                }
                (false, true) => {
                    clamped = true;
                    (self.signed_distance_at(grid, p)? - self.signed_distance_at(grid, &lo)?) / h
                }
                (false, false) => {
                    clamped = true;
                    0.0
                }
            };
        }
        Ok((g, clamped))
    }

    /// Interpolated value together with the exact gradient of the
    /// interpolant itself. This is what cost functions differentiate
    /// through: their analytic gradients must match finite differences of
    /// the actual interpolated values, not a smoothed surrogate.
    pub fn value_and_gradient(
        &self,
        grid: &OccupancyGrid,
        p: &Vector3<f64>,
    ) -> Result<(f64, Vector3<f64>), SdfError> {
        self.check_geometry(grid)?;
        let (corners, _weights, i0, frac) = self.stencil_raw(p)?;
        let mut s = [0.0f64; 8];
        for k in 0..8 {
            s[k] = self.cell_signed(grid, corners[k]);
        }
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        // corner order: bit 0 = x, bit 1 = y, bit 2 = z
        let c00 = lerp(s[0], s[1], fx);
        let c10 = lerp(s[2], s[3], fx);
        let c01 = lerp(s[4], s[5], fx);
        let c11 = lerp(s[6], s[7], fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        let value = lerp(c0, c1, fz);

        let r = self.resolution;
        // d/dx: difference along x, collapsed over y then z. Clamped stencil
        // corners repeat a cell, which correctly zeroes that axis.
        let dx00 = s[1] - s[0];
        let dx10 = s[3] - s[2];
        let dx01 = s[5] - s[4];
        let dx11 = s[7] - s[6];
        let gx = lerp(lerp(dx00, dx10, fy), lerp(dx01, dx11, fy), fz) / r;
        let dy0 = c10 - c00;
        let dy1 = c11 - c01;
        let gy = lerp(dy0, dy1, fz) / r;
        let gz = c1 - c0;
        let gz = gz / r;
        let _ = i0;
        Ok((value, Vector3::new(gx, gy, gz)))
    }

    fn stencil(&self, p: &Vector3<f64>) -> Result<([usize; 8], [f64; 8]), SdfError> {
        let (corners, weights, _, _) = self.stencil_raw(p)?;
        Ok((corners, weights))
    }

    #[allow(clippy::type_complexity)]
    fn stencil_raw(
        &self,
        p: &Vector3<f64>,
    ) -> Result<([usize; 8], [f64; 8], [i64; 3], [f64; 3]), SdfError> {
        // reject points outside the grid box
        for a in 0..3 {
            let lo = self.origin[a];
            let hi = self.origin[a] + self.dims[a] as f64 * self.resolution;
            if !(p[a] >= lo && p[a] <= hi) {
                return Err(SdfError::OutOfBounds([p.x, p.y, p.z]));
            }
        }
        let mut i0 = [0i64; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let u = (p[a] - self.origin[a]) / self.resolution - 0.5;
            let fl = u.floor();
            i0[a] = fl as i64;
            frac[a] = u - fl;
        }
        let clamp = |i: i64, a: usize| i.clamp(0, self.dims[a] as i64 - 1) as usize;
        let mut corners = [0usize; 8];
        let mut weights = [0f64; 8];
        for k in 0..8 {
            let bx = k & 1;
            let by = (k >> 1) & 1;
            let bz = (k >> 2) & 1;
            let x = clamp(i0[0] + bx as i64, 0);
            let y = clamp(i0[1] + by as i64, 1);
            let z = clamp(i0[2] + bz as i64, 2);
            corners[k] = (z * self.dims[1] + y) * self.dims[0] + x;
            let wx = if bx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if by == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if bz == 1 { frac[2] } else { 1.0 - frac[2] };
            weights[k] = wx * wy * wz;
        }
        Ok((corners, weights, i0, frac))
    }

    /// Same binary layout as the grid snapshot (32-byte header + cells) with
    /// cells as little-endian f32 signed distances, plus a JSON sidecar.
    pub fn save_field<P: AsRef<Path>>(
        &self,
        grid: &OccupancyGrid,
        path: P,
    ) -> Result<(), SdfError> {
        self.check_geometry(grid)?;
        let path = path.as_ref();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&crate::grid::header_bytes(
            FIELD_MAGIC,
            self.dims,
            self.resolution,
            self.origin,
        ))?;
        let mut buf = Vec::with_capacity(self.d2.len() * 4);
        for idx in 0..self.d2.len() {
            buf.extend_from_slice(&(self.cell_signed(grid, idx) as f32).to_le_bytes());
        }
        f.write_all(&buf)?;
        let sidecar = serde_json::json!({
            "truncation": self.cfg.truncation,
            "connectivity": self.cfg.connectivity,
            "dims": self.dims,
            "resolution": self.resolution,
            "origin": self.origin,
        });
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        std::fs::write(std::path::PathBuf::from(side), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Structural equality of the distance data: same squared distances and
    /// same border set. Anchor choices may legitimately differ between
    /// routes when two borders tie.
    pub fn same_distances(&self, other: &DistanceField) -> bool {
        self.dims == other.dims
            && self.max_d2 == other.max_d2
            && self.d2 == other.d2
            && self.border == other.border
    }
}
