//! Surfel octree domain types.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::morton;

/// An axis-aligned octree cube at `level` of a `depth`-bit grid.
///
/// The anchor `A` is the minimum corner in voxel units, the width is
/// `b = 2^(depth - level)`. Surfel offsets are expressed relative to `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OctreeCube {
    pub level: u32,
    pub coords: [u32; 3],
    pub depth: u32,
}

impl OctreeCube {
    pub fn new(level: u32, coords: [u32; 3], depth: u32) -> Result<Self> {
        if level > depth || coords.iter().any(|&c| (c as u64) >= (1u64 << level)) {
            return Err(Error::CoordsOutOfRange { coords, level });
        }
        Ok(OctreeCube {
            level,
            coords,
            depth,
        })
    }

    /// Cube width `b` in voxel units.
    #[inline]
    pub fn width(&self) -> f64 {
        (1u64 << (self.depth - self.level)) as f64
    }

    /// Minimum corner in voxel units.
    #[inline]
    pub fn anchor(&self) -> Vector3<f64> {
        let w = self.width();
        Vector3::new(
            self.coords[0] as f64 * w,
            self.coords[1] as f64 * w,
            self.coords[2] as f64 * w,
        )
    }

    #[inline]
    pub fn morton(&self) -> u64 {
        morton::morton_encode_unchecked(self.coords)
    }

    /// Child cube for digit `(x<<2 | y<<1 | z)`.
    pub fn child(&self, digit: u8) -> OctreeCube {
        debug_assert!(digit < 8 && self.level < self.depth);
        OctreeCube {
            level: self.level + 1,
            coords: [
                self.coords[0] * 2 + ((digit >> 2) & 1) as u32,
                self.coords[1] * 2 + ((digit >> 1) & 1) as u32,
                self.coords[2] * 2 + (digit & 1) as u32,
            ],
            depth: self.depth,
        }
    }

    pub fn parent(&self) -> OctreeCube {
        debug_assert!(self.level > 0);
        OctreeCube {
            level: self.level - 1,
            coords: [
                self.coords[0] / 2,
                self.coords[1] / 2,
                self.coords[2] / 2,
            ],
            depth: self.depth,
        }
    }

    /// Which child digit of its parent this cube is.
    #[inline]
    pub fn child_digit(&self) -> u8 {
        (((self.coords[0] & 1) << 2) | ((self.coords[1] & 1) << 1) | (self.coords[2] & 1)) as u8
    }

    /// Descendant cube of this cube at `level >= self.level` whose subtree
    /// contains `local_morton` (Morton index relative to this cube).
    pub fn descendant(&self, level: u32, local_morton: u64) -> OctreeCube {
        debug_assert!(level >= self.level);
        let shift = level - self.level;
        let local = morton::morton_decode_unchecked(local_morton);
        OctreeCube {
            level,
            coords: [
                (self.coords[0] << shift) + local[0],
                (self.coords[1] << shift) + local[1],
                (self.coords[2] << shift) + local[2],
            ],
            depth: self.depth,
        }
    }

    /// True if the point lies inside the half-open cube `[A, A + b)^3`.
    #[inline]
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let a = self.anchor();
        let b = self.width();
        (0..3).all(|i| p[i] >= a[i] && p[i] < a[i] + b)
    }

    /// Euclidean distance from `p` to the (closed) cube.
    pub fn distance_to_point(&self, p: &Vector3<f64>) -> f64 {
        let a = self.anchor();
        let b = self.width();
        let mut d2 = 0.0;
        for i in 0..3 {
            let lo = a[i];
            let hi = a[i] + b;
            let d = if p[i] < lo {
                lo - p[i]
            } else if p[i] > hi {
                p[i] - hi
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2.sqrt()
    }
}

/// A planar surface element bounded by its owning cube.
///
/// `offset` is the surfel center relative to the cube anchor, each component
/// in `[0, b)`; `normal` is unit; `radius` lies in `(0, (sqrt(3)/2) * b]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel {
    pub offset: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
}

impl Surfel {
    /// Surfel center `P = A + offset` in voxel units.
    #[inline]
    pub fn center(&self, cube: &OctreeCube) -> Vector3<f64> {
        cube.anchor() + self.offset
    }

    pub fn validate(&self, cube: &OctreeCube) -> Result<()> {
        let b = cube.width();
        if !(0..3).all(|i| self.offset[i] >= 0.0 && self.offset[i] < b) {
            return Err(Error::Precondition(format!(
                "offset {:?} outside [0, {b}) for level {}",
                self.offset, cube.level
            )));
        }
        if (self.normal.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Precondition(format!(
                "surfel normal norm {} != 1",
                self.normal.norm()
            )));
        }
        let rmax = 3f64.sqrt() / 2.0 * b;
        // Dequantized radii may overshoot the bound by up to half a step.
        if self.radius <= 0.0 || self.radius > rmax + 1e-9 {
            return Err(Error::Precondition(format!(
                "radius {} outside (0, {rmax}]",
                self.radius
            )));
        }
        Ok(())
    }
}

/// An `M x M` RGB grid covering the surfel tangent square `[-r, r]^2`.
/// Pixel `(i, j)` is stored at `pixels[j * m + i]` with `i` along the
/// tangent `u` axis and `j` along `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturePatch {
    pub m: u32,
    pub pixels: Vec<Vector3<f32>>,
}

impl TexturePatch {
    pub fn constant(m: u32, color: Vector3<f32>) -> Self {
        TexturePatch {
            m,
            pixels: vec![color; (m * m) as usize],
        }
    }

    #[inline]
    pub fn pixel(&self, i: u32, j: u32) -> Vector3<f32> {
        self.pixels[(j * self.m + i) as usize]
    }

    #[inline]
    pub fn set_pixel(&mut self, i: u32, j: u32, c: Vector3<f32>) {
        self.pixels[(j * self.m + i) as usize] = c;
    }

    pub fn mean_color(&self) -> Vector3<f32> {
        let mut sum = Vector3::zeros();
        for p in &self.pixels {
            sum += p;
        }
        sum / self.pixels.len() as f32
    }
}

/// Leaf levels and per-level patch sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelsConfig {
    /// Sorted ascending; leaves may only appear at these levels.
    pub leaf_levels: Vec<u32>,
    /// Patch side `M` for each entry of `leaf_levels`.
    pub patch_sizes: Vec<u32>,
}

impl LevelsConfig {
    /// Reference configuration for a 10-bit grid: levels {6, 7, 8} with
    /// M = (12, 8, 4). For other depths M defaults to `min(b, 12)`.
    pub fn default_for_depth(depth: u32) -> Self {
        let leaf_levels: Vec<u32> = if depth >= 4 {
            vec![depth - 4, depth - 3, depth - 2]
        } else {
            vec![depth]
        };
        Self::with_default_patch_sizes(depth, leaf_levels)
    }

    pub fn with_default_patch_sizes(depth: u32, leaf_levels: Vec<u32>) -> Self {
        let patch_sizes = leaf_levels
            .iter()
            .map(|&l| (1u64 << (depth - l)).min(12) as u32)
            .collect();
        LevelsConfig {
            leaf_levels,
            patch_sizes,
        }
    }

    pub fn l_min(&self) -> u32 {
        self.leaf_levels[0]
    }

    pub fn l_max(&self) -> u32 {
        *self.leaf_levels.last().unwrap()
    }

    pub fn is_leaf_level(&self, level: u32) -> bool {
        self.leaf_levels.contains(&level)
    }

    pub fn patch_size(&self, level: u32) -> Option<u32> {
        self.leaf_levels
            .iter()
            .position(|&l| l == level)
            .map(|i| self.patch_sizes[i])
    }

    pub fn validate(&self, depth: u32) -> Result<()> {
        if self.leaf_levels.is_empty() || self.leaf_levels.len() != self.patch_sizes.len() {
            return Err(Error::Precondition(
                "leaf level and patch size lists must be non-empty and equal length".into(),
            ));
        }
        if !self.leaf_levels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Precondition(
                "leaf levels must be sorted strictly ascending".into(),
            ));
        }
        if self.l_max() > depth {
            return Err(Error::Precondition(format!(
                "l_max {} exceeds depth {depth}",
                self.l_max()
            )));
        }
        if self.patch_sizes.iter().any(|&m| m == 0) {
            return Err(Error::Precondition("patch size must be positive".into()));
        }
        Ok(())
    }
}

/// State of an occupied octree node.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Occupied, subdivided further.
    Split,
    /// Terminal node carrying a surfel and (once sampled) a texture patch.
    Leaf {
        surfel: Surfel,
        patch: Option<TexturePatch>,
    },
}

/// The textured surfel octree.
///
/// Nodes are stored per level keyed by Morton index, so iteration per level
/// is always in Morton order. Ancestors of every occupied node exist and are
/// `Split`; leaves appear only at configured leaf levels and everything
/// occupied at `l_max` is a leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfelOctree {
    pub depth: u32,
    pub config: LevelsConfig,
    /// Split threshold (dB) the tree was built with; informational.
    pub tau_db: f64,
    levels: Vec<BTreeMap<u64, Node>>,
}

impl SurfelOctree {
    pub fn new(depth: u32, config: LevelsConfig, tau_db: f64) -> Result<Self> {
        config.validate(depth)?;
        let levels = (0..=config.l_max()).map(|_| BTreeMap::new()).collect();
        Ok(SurfelOctree {
            depth,
            config,
            tau_db,
            levels,
        })
    }

    /// Soft-blend scale: the width of the smallest bounding cube.
    #[inline]
    pub fn sigma(&self) -> f64 {
        (1u64 << (self.depth - self.config.l_max())) as f64
    }

    pub fn cube(&self, level: u32, morton: u64) -> OctreeCube {
        OctreeCube {
            level,
            coords: morton::morton_decode_unchecked(morton),
            depth: self.depth,
        }
    }

    pub fn node(&self, level: u32, morton: u64) -> Option<&Node> {
        self.levels.get(level as usize)?.get(&morton)
    }

    pub fn level_nodes(&self, level: u32) -> impl Iterator<Item = (u64, &Node)> {
        self.levels
            .get(level as usize)
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, v)| (*k, v)))
    }

    /// Morton-ordered leaves of one level.
    pub fn leaves_at(&self, level: u32) -> impl Iterator<Item = (u64, &Surfel, Option<&TexturePatch>)> {
        self.level_nodes(level).filter_map(|(k, n)| match n {
            Node::Leaf { surfel, patch } => Some((k, surfel, patch.as_ref())),
            Node::Split => None,
        })
    }

    /// All leaves, coarse levels first, Morton order within a level.
    pub fn leaves(&self) -> impl Iterator<Item = (u32, u64, &Surfel, Option<&TexturePatch>)> {
        self.config
            .leaf_levels
            .iter()
            .flat_map(move |&l| self.leaves_at(l).map(move |(k, s, p)| (l, k, s, p)))
    }

    pub fn leaf_count(&self) -> usize {
        self.config
            .leaf_levels
            .iter()
            .map(|&l| self.leaves_at(l).count())
            .sum()
    }

    pub fn leaf_count_at(&self, level: u32) -> usize {
        self.leaves_at(level).count()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(|m| m.is_empty())
    }

    /// Inserts a leaf and marks all its ancestors as split.
    pub fn insert_leaf(&mut self, level: u32, morton: u64, surfel: Surfel) -> Result<()> {
        if !self.config.is_leaf_level(level) {
            return Err(Error::Precondition(format!(
                "level {level} is not a configured leaf level"
            )));
        }
        let prev = self.levels[level as usize].insert(
            morton,
            Node::Leaf {
                surfel,
                patch: None,
            },
        );
        if prev.is_some() {
            return Err(Error::Internal(format!(
                "node (level {level}, morton {morton}) inserted twice"
            )));
        }
        let mut m = morton;
        for l in (0..level).rev() {
            m >>= 3;
            match self.levels[l as usize].insert(m, Node::Split) {
                None => {}
                // All ancestors above an already-split node are marked too.
                Some(Node::Split) => break,
                Some(leaf) => {
                    return Err(Error::Internal(format!(
                        "leaf at level {l} overlaps new leaf below it; had {leaf:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn set_patch(&mut self, level: u32, morton: u64, new_patch: TexturePatch) -> Result<()> {
        match self.levels[level as usize].get_mut(&morton) {
            Some(Node::Leaf { patch, .. }) => {
                *patch = Some(new_patch);
                Ok(())
            }
            _ => Err(Error::Internal(format!(
                "no leaf at (level {level}, morton {morton})"
            ))),
        }
    }

    pub fn surfel_mut(&mut self, level: u32, morton: u64) -> Option<&mut Surfel> {
        match self.levels[level as usize].get_mut(&morton) {
            Some(Node::Leaf { surfel, .. }) => Some(surfel),
            _ => None,
        }
    }

    /// Checks the structural invariants of the tree.
    pub fn validate(&self) -> Result<()> {
        self.config.validate(self.depth)?;
        let l_max = self.config.l_max();
        for (l, nodes) in self.levels.iter().enumerate() {
            let l = l as u32;
            for (&m, node) in nodes.iter() {
                if l > 0 {
                    match self.node(l - 1, m >> 3) {
                        Some(Node::Split) => {}
                        other => {
                            return Err(Error::Precondition(format!(
                                "node (level {l}, morton {m}) parent is {other:?}, expected Split"
                            )));
                        }
                    }
                }
                match node {
                    Node::Leaf { surfel, .. } => {
                        if !self.config.is_leaf_level(l) {
                            return Err(Error::Precondition(format!(
                                "leaf at non-leaf level {l}"
                            )));
                        }
                        surfel.validate(&self.cube(l, m))?;
                    }
                    Node::Split => {
                        if l >= l_max {
                            return Err(Error::Precondition(format!(
                                "split node at l_max level {l}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Structure-and-geometry equality ignoring texture patches.
    pub fn geometry_eq(&self, other: &SurfelOctree) -> bool {
        if self.depth != other.depth || self.config != other.config {
            return false;
        }
        if self.levels.len() != other.levels.len() {
            return false;
        }
        for (a, b) in self.levels.iter().zip(&other.levels) {
            if a.len() != b.len() {
                return false;
            }
            for ((ka, na), (kb, nb)) in a.iter().zip(b.iter()) {
                if ka != kb {
                    return false;
                }
                match (na, nb) {
                    (Node::Split, Node::Split) => {}
                    (Node::Leaf { surfel: sa, .. }, Node::Leaf { surfel: sb, .. }) => {
                        if sa != sb {
                            return false;
                        }
                    }
                    _ => return false,
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_surfel(b: f64) -> Surfel {
        Surfel {
            offset: Vector3::new(b / 2.0, b / 2.0, b / 2.0),
            normal: Vector3::new(0.0, 0.0, 1.0),
            radius: b / 4.0,
        }
    }

    #[test]
    fn cube_geometry() {
        let c = OctreeCube::new(2, [1, 2, 3], 10).unwrap();
        assert_eq!(c.width(), 256.0);
        assert_eq!(c.anchor(), Vector3::new(256.0, 512.0, 768.0));
        assert!(c.contains(&Vector3::new(256.0, 512.0, 768.0)));
        assert!(!c.contains(&Vector3::new(512.0, 512.0, 768.0)));
        assert_eq!(c.child(0b101).coords, [3, 4, 7]);
        assert_eq!(c.child(0b101).parent().coords, c.coords);
    }

    #[test]
    fn cube_distance() {
        let c = OctreeCube::new(1, [0, 0, 0], 3).unwrap();
        assert_eq!(c.distance_to_point(&Vector3::new(2.0, 2.0, 2.0)), 0.0);
        assert_eq!(c.distance_to_point(&Vector3::new(6.0, 2.0, 2.0)), 2.0);
        let d = c.distance_to_point(&Vector3::new(7.0, 7.0, 2.0));
        assert!((d - (9.0f64 + 9.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn insert_leaf_marks_ancestors() {
        let cfg = LevelsConfig::with_default_patch_sizes(10, vec![6, 7, 8]);
        let mut t = SurfelOctree::new(10, cfg, 66.0).unwrap();
        let b = 8.0;
        t.insert_leaf(7, 0o1234567, unit_surfel(b)).unwrap();
        assert!(matches!(t.node(6, 0o123456), Some(Node::Split)));
        assert!(matches!(t.node(0, 0), Some(Node::Split)));
        t.validate().unwrap();
        assert_eq!(t.leaf_count(), 1);
    }

    #[test]
    fn sigma_is_finest_cube_width() {
        let cfg = LevelsConfig::with_default_patch_sizes(10, vec![6, 7, 8]);
        let t = SurfelOctree::new(10, cfg, 66.0).unwrap();
        assert_eq!(t.sigma(), 4.0);
    }

    #[test]
    fn default_levels_reference_configuration() {
        let cfg = LevelsConfig::default_for_depth(10);
        assert_eq!(cfg.leaf_levels, vec![6, 7, 8]);
        assert_eq!(cfg.patch_sizes, vec![12, 8, 4]);
    }
}
