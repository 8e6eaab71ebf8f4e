//! Texture patches: tangent frames, patch sampling from the point cloud,
//! and Morton-order packing into per-level images.
//!
//! Patches are sampled after geometry quantization so the decoder can
//! re-derive every frame and the pack layout from decoded geometry alone.

use std::collections::HashMap;

use nalgebra::{UnitQuaternion, Unit, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::PointGrid;
use crate::image_buf::ImageRgb;
use crate::morton;
use crate::octree::{OctreeCube, Surfel, SurfelOctree, TexturePatch};
use crate::pointcloud::PointCloud;

/// K nearest neighbors per pixel.
pub const DEFAULT_K: usize = 3;
/// Additive epsilon in the inverse-distance weights, in voxels.
pub const WEIGHT_EPSILON: f64 = 1e-6;

/// Default plane-distance filter: half the finest-level cube width (1 voxel
/// cubes at the bottom of the octree), which rejects points from an opposing
/// surface one voxel away while tolerating quantization noise.
pub const DEFAULT_D_THRESH: f64 = 0.5;

/// Orthonormal surfel-local frame. A pure function of the normal, so the
/// decoder reconstructs identical frames from decoded geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentFrame {
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub n: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    /// Rotation angle arccos(n·z).
    pub theta: f64,
    /// Rotation axis, normalize(z × n); +x for the degenerate n = ±z.
    pub axis: Vector3<f64>,
}

/// Frame whose rotation takes the world z-axis onto `n`.
pub fn tangent_frame(n: &Vector3<f64>) -> Result<TangentFrame> {
    if (n.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::Precondition(format!(
            "tangent_frame needs a unit normal, got norm {}",
            n.norm()
        )));
    }
    let z = Vector3::z();
    let theta = n.z.clamp(-1.0, 1.0).acos();
    let (q, axis) = if n.z >= 1.0 - 1e-12 {
        (UnitQuaternion::identity(), Vector3::x())
    } else if n.z <= -1.0 + 1e-12 {
        (
            UnitQuaternion::from_axis_angle(&Unit::new_unchecked(Vector3::x()), std::f64::consts::PI),
            Vector3::x(),
        )
    } else {
        let axis = z.cross(n).normalize();
        (
            UnitQuaternion::from_axis_angle(&Unit::new_unchecked(axis), theta),
            axis,
        )
    };
    Ok(TangentFrame {
        u: q * Vector3::x(),
        v: q * Vector3::y(),
        n: *n,
        q,
        theta,
        axis,
    })
}

/// 3D center of patch pixel `(i, j)` for a surfel at `p`.
#[inline]
pub fn pixel_center(
    p: &Vector3<f64>,
    frame: &TangentFrame,
    r: f64,
    m: u32,
    i: u32,
    j: u32,
) -> Vector3<f64> {
    let step = 2.0 * r / m as f64;
    p + frame.u * (-r + (i as f64 + 0.5) * step) + frame.v * (-r + (j as f64 + 0.5) * step)
}

/// Samples one `m x m` patch from candidate points (position, color) pairs
/// gathered from the surfel's cube and its 26 neighbors.
pub fn sample_patch(
    surfel: &Surfel,
    cube: &OctreeCube,
    candidates: &[(Vector3<f64>, Vector3<f32>)],
    m: u32,
    k: usize,
    d_thresh: f64,
) -> Result<TexturePatch> {
    if candidates.is_empty() {
        return Err(Error::Internal(format!(
            "no candidate points around leaf at level {}, coords {:?}",
            cube.level, cube.coords
        )));
    }
    let frame = tangent_frame(&surfel.normal)?;
    let p = surfel.center(cube);

    let mut kept_pos: Vec<Vector3<f64>> = Vec::new();
    let mut kept_color: Vec<Vector3<f32>> = Vec::new();
    for (pos, color) in candidates {
        if (pos - p).dot(&surfel.normal).abs() <= d_thresh {
            kept_pos.push(*pos);
            kept_color.push(*color);
        }
    }
    let use_fallback = kept_pos.is_empty();
    let (positions, colors): (&[Vector3<f64>], &[Vector3<f32>]) = if use_fallback {
        // No point survives the plane filter; take colors from the nearest
        // unfiltered neighborhood points instead.
        kept_pos = candidates.iter().map(|c| c.0).collect();
        kept_color = candidates.iter().map(|c| c.1).collect();
        (&kept_pos, &kept_color)
    } else {
        (&kept_pos, &kept_color)
    };
    let grid = PointGrid::build(positions, 2.0);

    let mut patch = TexturePatch::constant(m, Vector3::zeros());
    for j in 0..m {
        for i in 0..m {
            let center = pixel_center(&p, &frame, surfel.radius, m, i, j);
            let neighbors = if use_fallback {
                grid.k_nearest(&center, 1)
            } else {
                grid.k_nearest(&center, k)
            };
            let color = if neighbors[0].1 < WEIGHT_EPSILON {
                colors[neighbors[0].0]
            } else {
                let mut wsum = 0.0f64;
                let mut acc = Vector3::<f64>::zeros();
                for &(idx, d) in &neighbors {
                    let w = 1.0 / (WEIGHT_EPSILON + d);
                    wsum += w;
                    acc += colors[idx].cast::<f64>() * w;
                }
                (acc / wsum).cast::<f32>()
            };
            patch.set_pixel(i, j, color);
        }
    }
    Ok(patch)
}

/// Point indices grouped by containing cube, per leaf level.
struct CubeBuckets {
    level: u32,
    map: HashMap<u64, Vec<u32>>,
}

impl CubeBuckets {
    fn build(cloud: &PointCloud, level: u32) -> Self {
        let shift = cloud.depth - level;
        let mut map: HashMap<u64, Vec<u32>> = HashMap::new();
        for i in 0..cloud.len() {
            let v = cloud.voxel(i);
            let key =
                morton::morton_encode_unchecked([v[0] >> shift, v[1] >> shift, v[2] >> shift]);
            map.entry(key).or_default().push(i as u32);
        }
        CubeBuckets { level, map }
    }

    /// Point indices in the 3x3x3 block of cubes around `coords`.
    fn neighborhood(&self, coords: [u32; 3]) -> Vec<u32> {
        let side = 1i64 << self.level;
        let mut out = Vec::new();
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    let c = [
                        coords[0] as i64 + dx,
                        coords[1] as i64 + dy,
                        coords[2] as i64 + dz,
                    ];
                    if c.iter().any(|&x| x < 0 || x >= side) {
                        continue;
                    }
                    let key = morton::morton_encode_unchecked([
                        c[0] as u32,
                        c[1] as u32,
                        c[2] as u32,
                    ]);
                    if let Some(idxs) = self.map.get(&key) {
                        out.extend_from_slice(idxs);
                    }
                }
            }
        }
        out
    }
}

/// Samples a patch for every leaf in the tree, in parallel, deterministically.
pub fn sample_patches(
    tree: &mut SurfelOctree,
    cloud: &PointCloud,
    k: usize,
    d_thresh: f64,
) -> Result<()> {
    for li in 0..tree.config.leaf_levels.len() {
        let level = tree.config.leaf_levels[li];
        let m = tree.config.patch_sizes[li];
        let buckets = CubeBuckets::build(cloud, level);
        let leaves: Vec<u64> = tree.leaves_at(level).map(|(key, _, _)| key).collect();
        let patches: Vec<Result<TexturePatch>> = leaves
            .par_iter()
            .map(|&key| {
                let cube = tree.cube(level, key);
                let surfel = match tree.node(level, key) {
                    Some(crate::octree::Node::Leaf { surfel, .. }) => *surfel,
                    _ => unreachable!("leaf key came from leaves_at"),
                };
                let candidates: Vec<(Vector3<f64>, Vector3<f32>)> = buckets
                    .neighborhood(cube.coords)
                    .iter()
                    .map(|&i| (cloud.positions[i as usize], cloud.colors[i as usize]))
                    .collect();
                sample_patch(&surfel, &cube, &candidates, m, k, d_thresh)
            })
            .collect();
        for (key, patch) in leaves.into_iter().zip(patches) {
            tree.set_patch(level, key, patch?)?;
        }
    }
    Ok(())
}

/// Per-level texture atlas: Morton-rank slot layout on a power-of-two grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTextureImage {
    pub level: u32,
    pub m: u32,
    pub grid_side: u32,
    pub leaf_count: usize,
    pub image: ImageRgb,
}

/// Smallest power-of-two slot grid holding `count` patches.
pub fn slot_grid_side(count: usize) -> u32 {
    let mut side = 1u32;
    while (side as usize) * (side as usize) < count {
        side *= 2;
    }
    side
}

pub fn pack_patches(tree: &SurfelOctree, level: u32) -> Result<PackedTextureImage> {
    let m = tree.config.patch_size(level).ok_or_else(|| {
        Error::Precondition(format!("level {level} carries no patches"))
    })?;
    let mut patches: Vec<&TexturePatch> = Vec::new();
    for (key, _, patch) in tree.leaves_at(level) {
        let patch = patch.ok_or_else(|| {
            Error::Precondition(format!("leaf {key:#o} at level {level} has no patch"))
        })?;
        if patch.m != m {
            return Err(Error::Internal(format!(
                "patch side {} != configured {m} at level {level}",
                patch.m
            )));
        }
        patches.push(patch);
    }
    let count = patches.len();
    let side = slot_grid_side(count);
    let mut image = ImageRgb::filled(side * m, side * m, mean_color(&patches));
    for (rank, patch) in patches.iter().enumerate() {
        let (col, row) = morton::morton2_decode(rank as u32);
        for j in 0..m {
            for i in 0..m {
                image.set_pixel(col * m + i, row * m + j, patch.pixel(i, j));
            }
        }
    }
    Ok(PackedTextureImage {
        level,
        m,
        grid_side: side,
        leaf_count: count,
        image,
    })
}

fn mean_color(patches: &[&TexturePatch]) -> Vector3<f32> {
    let mut acc = Vector3::<f64>::zeros();
    let mut n = 0usize;
    for p in patches {
        for px in &p.pixels {
            acc += px.cast::<f64>();
            n += 1;
        }
    }
    if n == 0 {
        Vector3::zeros()
    } else {
        (acc / n as f64).cast::<f32>()
    }
}

/// Writes patches back onto the tree's leaves at `image.level`, in Morton
/// order. The layout is derived from geometry alone, so this works on a
/// freshly decoded tree.
pub fn unpack_patches(tree: &mut SurfelOctree, image: &PackedTextureImage) -> Result<()> {
    let level = image.level;
    let m = image.m;
    let keys: Vec<u64> = tree.leaves_at(level).map(|(k, _, _)| k).collect();
    if keys.len() != image.leaf_count {
        return Err(Error::Format(format!(
            "atlas for level {level} holds {} patches but tree has {} leaves",
            image.leaf_count,
            keys.len()
        )));
    }
    if slot_grid_side(keys.len()) != image.grid_side
        || image.image.width != image.grid_side * m
        || image.image.height != image.grid_side * m
    {
        return Err(Error::Format(format!(
            "atlas geometry mismatch at level {level}"
        )));
    }
    for (rank, key) in keys.into_iter().enumerate() {
        let (col, row) = morton::morton2_decode(rank as u32);
        let mut patch = TexturePatch::constant(m, Vector3::zeros());
        for j in 0..m {
            for i in 0..m {
                patch.set_pixel(i, j, image.image.pixel(col * m + i, row * m + j));
            }
        }
        tree.set_patch(level, key, patch)?;
    }
    Ok(())
}

/// Exports one PNG atlas per leaf level plus a text manifest with lines
/// `level M grid_side leaf_count`.
pub fn export_atlases(tree: &SurfelOctree, dir: &std::path::Path) -> Result<()> {
    let mut images = Vec::new();
    for &level in &tree.config.leaf_levels {
        images.push(pack_patches(tree, level)?);
    }
    crate::texcodec::export_external(&images, dir)
}

/// Rasterizes every patch pixel to a colored 3D point (pixel centers on the
/// surfel plane), producing the colored-cloud form used when handing texture
/// to an external point-cloud coder.
pub fn rasterize_to_cloud(tree: &SurfelOctree) -> Result<PointCloud> {
    let size = (1u64 << tree.depth) as f64;
    let mut cloud = PointCloud::new(tree.depth);
    let mut normals = Vec::new();
    for (level, key, surfel, patch) in tree.leaves() {
        let patch = patch.ok_or_else(|| {
            Error::Precondition(format!("leaf {key:#o} at level {level} has no patch"))
        })?;
        let cube = tree.cube(level, key);
        let frame = tangent_frame(&surfel.normal)?;
        let p = surfel.center(&cube);
        for j in 0..patch.m {
            for i in 0..patch.m {
                let mut pos = pixel_center(&p, &frame, surfel.radius, patch.m, i, j);
                for a in 0..3 {
                    pos[a] = pos[a].clamp(0.0, size - 1e-6);
                }
                cloud.positions.push(pos);
                cloud.colors.push(patch.pixel(i, j));
                normals.push(surfel.normal);
            }
        }
    }
    cloud.normals = Some(normals);
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_unit(rng: &mut StdRng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn frame_identity_for_z() {
        let f = tangent_frame(&Vector3::z()).unwrap();
        assert_eq!(f.q, UnitQuaternion::identity());
        assert_eq!(f.u, Vector3::x());
        assert_eq!(f.v, Vector3::y());
    }

    #[test]
    fn frame_for_minus_z_flips_v() {
        let f = tangent_frame(&-Vector3::z()).unwrap();
        let q = f.q.quaternion();
        assert!((q.w - 0.0).abs() < 1e-12 && (q.i - 1.0).abs() < 1e-12);
        assert!((f.u - Vector3::x()).norm() < 1e-12);
        assert!((f.v + Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn frame_for_x_axis() {
        let f = tangent_frame(&Vector3::x()).unwrap();
        let q = f.q.quaternion();
        let s = 2f64.sqrt() / 2.0;
        assert!((q.w - s).abs() < 1e-12);
        assert!((q.j - s).abs() < 1e-12);
        assert!((f.q * Vector3::z() - Vector3::x()).norm() < 1e-12);
    }

    #[test]
    fn frames_orthonormal_and_right_handed() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..2000 {
            let n = rand_unit(&mut rng);
            let f = tangent_frame(&n).unwrap();
            assert!(f.u.dot(&f.v).abs() < 1e-6);
            assert!(f.u.dot(&f.n).abs() < 1e-6);
            assert!(f.v.dot(&f.n).abs() < 1e-6);
            assert!((f.u.norm() - 1.0).abs() < 1e-6);
            assert!((f.u.cross(&f.v).dot(&f.n) - 1.0).abs() < 1e-6);
            assert!((f.q * Vector3::z() - n).norm() < 1e-6);
            // pure function of n
            assert_eq!(f, tangent_frame(&n).unwrap());
        }
    }

    #[test]
    fn rejects_non_unit_normal() {
        assert!(tangent_frame(&Vector3::new(0.0, 0.0, 2.0)).is_err());
    }

    fn flat_candidates(color: impl Fn(f64, f64) -> Vector3<f32>) -> Vec<(Vector3<f64>, Vector3<f32>)> {
        let mut out = Vec::new();
        for x in 0..16 {
            for y in 0..16 {
                out.push((
                    Vector3::new(x as f64, y as f64, 8.0),
                    color(x as f64, y as f64),
                ));
            }
        }
        out
    }

    fn flat_surfel() -> (Surfel, OctreeCube) {
        let cube = OctreeCube::new(6, [0, 0, 0], 10).unwrap();
        (
            Surfel {
                offset: Vector3::new(7.5, 7.5, 8.0),
                normal: Vector3::z(),
                radius: 7.0,
            },
            cube,
        )
    }

    #[test]
    fn constant_color_patch() {
        let c = Vector3::new(0.25, 0.5, 0.75);
        let cands = flat_candidates(|_, _| c);
        let (s, cube) = flat_surfel();
        let patch = sample_patch(&s, &cube, &cands, 8, DEFAULT_K, DEFAULT_D_THRESH).unwrap();
        for px in &patch.pixels {
            assert!((px - c).norm() < 1e-6);
        }
    }

    #[test]
    fn single_point_patch() {
        let cands = vec![(Vector3::new(3.0, 3.0, 8.0), Vector3::new(1.0, 0.0, 0.0))];
        let (s, cube) = flat_surfel();
        let patch = sample_patch(&s, &cube, &cands, 4, DEFAULT_K, DEFAULT_D_THRESH).unwrap();
        for px in &patch.pixels {
            assert_eq!(*px, Vector3::new(1.0, 0.0, 0.0));
        }
    }

    #[test]
    fn ramp_matches_direct_interpolation() {
        let cands = flat_candidates(|x, _| Vector3::new(x as f32 / 16.0, 0.5, 0.5));
        let (s, cube) = flat_surfel();
        let m = 8;
        let patch = sample_patch(&s, &cube, &cands, m, DEFAULT_K, DEFAULT_D_THRESH).unwrap();
        let frame = tangent_frame(&s.normal).unwrap();
        let p = s.center(&cube);
        for j in 0..m {
            for i in 0..m {
                let center = pixel_center(&p, &frame, s.radius, m, i, j);
                // brute-force 3 nearest with inverse-distance weights
                let mut by_d: Vec<(f64, usize)> = cands
                    .iter()
                    .enumerate()
                    .map(|(idx, (pos, _))| ((pos - center).norm(), idx))
                    .collect();
                by_d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut wsum = 0.0;
                let mut acc = Vector3::<f64>::zeros();
                for &(d, idx) in by_d.iter().take(3) {
                    let w = 1.0 / (WEIGHT_EPSILON + d);
                    wsum += w;
                    acc += cands[idx].1.cast::<f64>() * w;
                }
                let want = (acc / wsum).cast::<f32>();
                assert!(
                    (patch.pixel(i, j) - want).norm() <= 1.0 / 255.0,
                    "pixel ({i},{j}): {:?} vs {want:?}",
                    patch.pixel(i, j)
                );
            }
        }
    }

    #[test]
    fn plane_filter_fallback_uses_nearest() {
        // all candidates 3 voxels off the plane: filter drops everything
        let cands = vec![
            (Vector3::new(4.0, 4.0, 11.0), Vector3::new(0.9, 0.1, 0.1)),
            (Vector3::new(12.0, 12.0, 11.0), Vector3::new(0.1, 0.9, 0.1)),
        ];
        let (s, cube) = flat_surfel();
        let patch = sample_patch(&s, &cube, &cands, 2, DEFAULT_K, DEFAULT_D_THRESH).unwrap();
        // pixel (0,0) is nearer the first point, (1,1) nearer the second
        assert_eq!(patch.pixel(0, 0), Vector3::new(0.9, 0.1, 0.1));
        assert_eq!(patch.pixel(1, 1), Vector3::new(0.1, 0.9, 0.1));
    }

    fn tree_with_patches(n_leaves: usize, m: u32) -> SurfelOctree {
        use crate::octree::LevelsConfig;
        let cfg = LevelsConfig {
            leaf_levels: vec![8],
            patch_sizes: vec![m],
        };
        let mut tree = SurfelOctree::new(10, cfg, 66.0).unwrap();
        let mut rng = StdRng::seed_from_u64(41);
        let mut placed = 0u64;
        while (placed as usize) < n_leaves {
            let key = placed * 7; // spread out, strictly increasing
            let s = Surfel {
                offset: Vector3::new(2.0, 2.0, 2.0),
                normal: rand_unit(&mut rng),
                radius: 1.5,
            };
            tree.insert_leaf(8, key, s).unwrap();
            let mut patch = TexturePatch::constant(m, Vector3::zeros());
            for px in patch.pixels.iter_mut() {
                *px = Vector3::new(rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>());
            }
            tree.set_patch(8, key, patch).unwrap();
            placed += 1;
        }
        tree
    }

    #[test]
    fn pack_single_patch() {
        let tree = tree_with_patches(1, 4);
        let packed = pack_patches(&tree, 8).unwrap();
        assert_eq!(packed.grid_side, 1);
        assert_eq!(packed.image.width, 4);
    }

    #[test]
    fn pack_four_patches_slot3_at_1_1() {
        let mut tree = tree_with_patches(4, 4);
        let packed = pack_patches(&tree, 8).unwrap();
        assert_eq!(packed.grid_side, 2);
        assert_eq!(packed.image.width, 8);
        // slot 3 de-interleaves to (col,row) = (1,1); its top-left image
        // pixel must equal pixel (0,0) of the 4th patch in Morton order
        let keys: Vec<u64> = tree.leaves_at(8).map(|(k, _, _)| k).collect();
        let fourth = match tree.node(8, keys[3]).unwrap() {
            crate::octree::Node::Leaf { patch, .. } => patch.clone().unwrap(),
            _ => unreachable!(),
        };
        assert_eq!(packed.image.pixel(4, 4), fourth.pixel(0, 0));
        // round trip
        let before: Vec<TexturePatch> = keys
            .iter()
            .map(|&k| match tree.node(8, k).unwrap() {
                crate::octree::Node::Leaf { patch, .. } => patch.clone().unwrap(),
                _ => unreachable!(),
            })
            .collect();
        unpack_patches(&mut tree, &packed).unwrap();
        for (k, want) in keys.iter().zip(before) {
            match tree.node(8, *k).unwrap() {
                crate::octree::Node::Leaf { patch, .. } => {
                    assert_eq!(patch.as_ref().unwrap(), &want)
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn pack_roundtrip_100_patches() {
        let mut tree = tree_with_patches(100, 6);
        let packed = pack_patches(&tree, 8).unwrap();
        assert_eq!(packed.grid_side, 16);
        let before: Vec<TexturePatch> = tree
            .leaves_at(8)
            .map(|(_, _, p)| p.unwrap().clone())
            .collect();
        unpack_patches(&mut tree, &packed).unwrap();
        let after: Vec<TexturePatch> = tree
            .leaves_at(8)
            .map(|(_, _, p)| p.unwrap().clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn unused_slots_hold_mean_color() {
        let tree = tree_with_patches(3, 4);
        let packed = pack_patches(&tree, 8).unwrap();
        let mean = {
            let mut acc = Vector3::<f64>::zeros();
            let mut n = 0;
            for (_, _, p) in tree.leaves_at(8) {
                for px in &p.unwrap().pixels {
                    acc += px.cast::<f64>();
                    n += 1;
                }
            }
            (acc / n as f64).cast::<f32>()
        };
        // slot 3 (col 1, row 1) is unused
        assert_eq!(packed.image.pixel(7, 7), mean);
    }
}
