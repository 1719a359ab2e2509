//! Small geometric primitives shared across the stack.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Integer voxel coordinate. Always refers to a cell of a concrete grid; the
/// grid owns the mapping to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Voxel {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Voxel {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Voxel { x, y, z }
    }

    /// The six face-adjacent neighbors.
    pub fn neighbors6(self) -> [Voxel; 6] {
        let Voxel { x, y, z } = self;
        [
            Voxel::new(x - 1, y, z),
            Voxel::new(x + 1, y, z),
            Voxel::new(x, y - 1, z),
            Voxel::new(x, y + 1, z),
            Voxel::new(x, y, z - 1),
            Voxel::new(x, y, z + 1),
        ]
    }
}

/// Axis-aligned box, used both as world obstacle and as bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn contains_strict(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    pub fn contains_aabb(&self, other: &Aabb) -> bool {
        (0..3).all(|a| other.min[a] >= self.min[a] && other.max[a] <= self.max[a])
    }

    /// Clips the segment `a + t (b - a)`, `t` in `[0, 1]`, against the box.
    /// Returns the `t` interval of the intersection, or `None` when the
    /// segment misses the box entirely.
    pub fn clip_segment(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> Option<(f64, f64)> {
        let d = b - a;
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for axis in 0..3 {
            if d[axis] == 0.0 {
                if a[axis] < self.min[axis] || a[axis] > self.max[axis] {
                    return None;
                }
            } else {
                let inv = 1.0 / d[axis];
                let mut ta = (self.min[axis] - a[axis]) * inv;
                let mut tb = (self.max[axis] - a[axis]) * inv;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_keeps_inside_segment_whole() {
        let b = Aabb::new([0.0; 3], [10.0; 3]);
        let (t0, t1) = b
            .clip_segment(&Vector3::new(1.0, 1.0, 1.0), &Vector3::new(9.0, 2.0, 3.0))
            .unwrap();
        assert_eq!((t0, t1), (0.0, 1.0));
    }

    #[test]
    fn clip_rejects_disjoint_segment() {
        let b = Aabb::new([0.0; 3], [10.0; 3]);
        assert!(b
            .clip_segment(&Vector3::new(-5.0, -5.0, 0.0), &Vector3::new(-1.0, -5.0, 0.0))
            .is_none());
    }

    #[test]
    fn clip_trims_entry_and_exit() {
        let b = Aabb::new([0.0; 3], [10.0; 3]);
        let (t0, t1) = b
            .clip_segment(&Vector3::new(-10.0, 5.0, 5.0), &Vector3::new(30.0, 5.0, 5.0))
            .unwrap();
        assert!((t0 - 0.25).abs() < 1e-12);
        assert!((t1 - 0.5).abs() < 1e-12);
    }
}
