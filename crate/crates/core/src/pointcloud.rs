//! Colored point clouds on an integer voxel grid.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// A colored point cloud with `depth`-bit coordinates: every position
/// component lies in `[0, 2^depth)` voxel units. Colors are RGB in `[0, 1]`.
/// Normals, when present, are unit vectors and exist for every point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub depth: u32,
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f32>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(depth: u32) -> Self {
        PointCloud {
            depth,
            positions: Vec::new(),
            colors: Vec::new(),
            normals: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// Grid extent `2^depth` in voxel units.
    pub fn grid_size(&self) -> f64 {
        (1u64 << self.depth) as f64
    }

    /// Checks the type invariants: positions inside the grid, normals unit.
    pub fn validate(&self) -> Result<()> {
        let size = self.grid_size();
        if self.colors.len() != self.positions.len() {
            return Err(Error::Precondition(format!(
                "color count {} != position count {}",
                self.colors.len(),
                self.positions.len()
            )));
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !p.iter().all(|c| *c >= 0.0 && *c < size) {
                return Err(Error::Precondition(format!(
                    "point {i} position {p:?} outside [0, {size})"
                )));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.positions.len() {
                return Err(Error::Precondition(format!(
                    "normal count {} != position count {}",
                    normals.len(),
                    self.positions.len()
                )));
            }
            for (i, n) in normals.iter().enumerate() {
                if (n.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::Precondition(format!(
                        "normal {i} has norm {} (must be unit)",
                        n.norm()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Voxel coordinates of point `i` (positions floored to the grid).
    #[inline]
    pub fn voxel(&self, i: usize) -> [u32; 3] {
        let p = &self.positions[i];
        [p.x as u32, p.y as u32, p.z as u32]
    }
}
