//! Surfel octree construction: normal estimation, per-cube surfel fitting,
//! and the D1-PSNR split decision, processed level by level.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval;
use crate::grid::PointGrid;
use crate::morton;
use crate::octree::{LevelsConfig, OctreeCube, Surfel, SurfelOctree};
use crate::pointcloud::PointCloud;
use crate::texture::tangent_frame;

/// Default neighbor count for normal estimation.
pub const DEFAULT_K_NORMALS: usize = 16;

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub levels: LevelsConfig,
    /// D1-PSNR acceptance threshold in dB.
    pub tau_db: f64,
    /// Neighbor count for `estimate_normals`.
    pub k_normals: usize,
    /// Spacing unit of the decision sample grid: the finest-level cube width
    /// in voxels. Also sets the minimum radius clamp at half this value.
    pub grid_unit: f64,
}

impl BuildConfig {
    pub fn new(depth: u32, tau_db: f64) -> Self {
        BuildConfig {
            levels: LevelsConfig::default_for_depth(depth),
            tau_db,
            k_normals: DEFAULT_K_NORMALS,
            grid_unit: 1.0,
        }
    }

    pub fn validate(&self, depth: u32) -> Result<()> {
        self.levels.validate(depth)?;
        if !self.tau_db.is_finite() || self.tau_db <= 0.0 {
            return Err(Error::Precondition(format!(
                "tau must be positive and finite, got {}",
                self.tau_db
            )));
        }
        if !self.grid_unit.is_finite() || self.grid_unit <= 0.0 {
            return Err(Error::Precondition(format!(
                "grid unit must be positive, got {}",
                self.grid_unit
            )));
        }
        Ok(())
    }
}

/// Covariance of a neighborhood and its smallest-eigenvalue eigenvector.
/// Returns `None` when the two smallest eigenvalues are both (near) zero,
/// leaving the minimizing direction undefined.
fn covariance_normal(points: &[Vector3<f64>], idxs: &[(usize, f64)]) -> Option<Vector3<f64>> {
    let n = idxs.len() as f64;
    let mut mean = Vector3::zeros();
    for &(i, _) in idxs {
        mean += points[i];
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for &(i, _) in idxs {
        let d = points[i] - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    smallest_eigenvector(&cov)
}

fn smallest_eigenvector(cov: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    // rank < 2 means every direction in a whole plane minimizes the quadratic
    if eig.eigenvalues[order[1]].abs() < 1e-9 {
        return None;
    }
    let v = eig.eigenvectors.column(order[0]).into_owned();
    Some(v.normalize())
}

/// Flips `v` so its first nonzero component among (z, y, x) is positive.
fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let lead = if v.z != 0.0 {
        v.z
    } else if v.y != 0.0 {
        v.y
    } else {
        v.x
    };
    if lead < 0.0 {
        -v
    } else {
        v
    }
}

/// Estimates a unit normal per point from the k-NN covariance, then makes
/// signs consistent by greedy propagation along a minimum spanning tree of
/// the k-NN graph (edge weight 1 - |n_i . n_j|), seeded per component from
/// the highest point with its normal turned to satisfy n . z >= 0.
///
/// Returns the number of degenerate neighborhoods that fell back to (0,0,1).
pub fn estimate_normals(cloud: &mut PointCloud, k: usize) -> Result<usize> {
    let n = cloud.len();
    if k == 0 || n < k + 1 {
        return Err(Error::Precondition(format!(
            "normal estimation with k={k} needs at least {} points, cloud has {n}",
            k + 1
        )));
    }
    let grid = PointGrid::build(&cloud.positions, 2.0);
    let positions = &cloud.positions;
    let neighborhoods: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| grid.k_nearest(&positions[i], k + 1))
        .collect();
    let raw: Vec<Option<Vector3<f64>>> = neighborhoods
        .par_iter()
        .map(|nb| covariance_normal(positions, nb))
        .collect();
    let mut warnings = 0usize;
    let mut normals: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for opt in raw {
        match opt {
            Some(v) => normals.push(v),
            None => {
                warnings += 1;
                normals.push(Vector3::z());
            }
        }
    }

    // symmetric k-NN adjacency with MST weights
    let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for (i, nb) in neighborhoods.iter().enumerate() {
        for &(j, _) in nb {
            if j == i {
                continue;
            }
            let w = (1.0 - normals[i].dot(&normals[j]).abs()).max(0.0);
            adj[i].push((j as u32, w));
            adj[j].push((i as u32, w));
        }
    }

    // component seeds in order of decreasing z, ties by index
    let mut by_z: Vec<u32> = (0..n as u32).collect();
    by_z.sort_by(|&a, &b| {
        positions[b as usize]
            .z
            .partial_cmp(&positions[a as usize].z)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut visited = vec![false; n];
    let mut heap: BinaryHeap<Reverse<(u64, u32, u32)>> = BinaryHeap::new();
    for seed in by_z {
        let seed = seed as usize;
        if visited[seed] {
            continue;
        }
        if normals[seed].z < 0.0 {
            normals[seed] = -normals[seed];
        }
        visited[seed] = true;
        for &(j, w) in &adj[seed] {
            heap.push(Reverse((w.to_bits(), j, seed as u32)));
        }
        while let Some(Reverse((_, j, parent))) = heap.pop() {
            let j = j as usize;
            if visited[j] {
                continue;
            }
            visited[j] = true;
            if normals[j].dot(&normals[parent as usize]) < 0.0 {
                normals[j] = -normals[j];
            }
            for &(t, w) in &adj[j] {
                if !visited[t as usize] {
                    heap.push(Reverse((w.to_bits(), t, j as u32)));
                }
            }
        }
    }
    cloud.normals = Some(normals);
    Ok(warnings)
}

/// Fits the least-committal surfel to the points of one cube: centroid
/// position, normalized mean normal, and a radius covering every point.
pub fn fit_surfel(
    positions: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    cube: &OctreeCube,
    grid_unit: f64,
) -> Result<Surfel> {
    if positions.is_empty() || positions.len() != normals.len() {
        return Err(Error::Precondition(format!(
            "surfel fit needs matching non-empty point/normal sets, got {}/{}",
            positions.len(),
            normals.len()
        )));
    }
    let n = positions.len() as f64;
    let p = positions.iter().fold(Vector3::zeros(), |a, q| a + q) / n;
    let mean_normal = normals.iter().fold(Vector3::zeros(), |a, q| a + q) / n;
    let normal = if mean_normal.norm() < 1e-3 {
        // antiparallel normals cancel; fall back to the surface the positions
        // themselves suggest
        let all: Vec<(usize, f64)> = (0..positions.len()).map(|i| (i, 0.0)).collect();
        match covariance_normal(positions, &all) {
            Some(v) => canonical_sign(v),
            None => Vector3::z(),
        }
    } else {
        mean_normal.normalize()
    };
    let r_min = grid_unit / 2.0;
    let r_max = 3f64.sqrt() / 2.0 * cube.width();
    let radius = positions
        .iter()
        .map(|q| (q - p).norm())
        .fold(0.0f64, f64::max)
        .clamp(r_min, r_max);
    Ok(Surfel {
        offset: p - cube.anchor(),
        normal,
        radius,
    })
}

/// Cell-centered G x G sample grid on the surfel disk, G = 2 ceil(r / unit)
/// with a floor of 2; samples outside the disk radius are dropped.
pub fn surfel_grid_samples(surfel: &Surfel, cube: &OctreeCube, grid_unit: f64) -> Vec<Vector3<f64>> {
    let frame = tangent_frame(&surfel.normal).expect("surfel normals are unit");
    let p = surfel.center(cube);
    let r = surfel.radius;
    let g = (2 * (r / grid_unit).ceil() as u32).max(2);
    let step = 2.0 * r / g as f64;
    let mut out = Vec::with_capacity((g * g) as usize);
    for i in 0..g {
        let a = -r + (i as f64 + 0.5) * step;
        for j in 0..g {
            let b = -r + (j as f64 + 0.5) * step;
            if a * a + b * b > r * r {
                continue;
            }
            out.push(p + frame.u * a + frame.v * b);
        }
    }
    out
}

/// Accepts the surfel when the symmetric D1-PSNR between its sample grid and
/// the cube's points clears `tau_db`. Peak is the grid diagonal coordinate
/// maximum, 2^depth - 1.
pub fn split_decision(
    positions: &[Vector3<f64>],
    surfel: &Surfel,
    cube: &OctreeCube,
    tau_db: f64,
    grid_unit: f64,
) -> Result<bool> {
    let samples = surfel_grid_samples(surfel, cube, grid_unit);
    let peak = ((1u64 << cube.depth) - 1) as f64;
    Ok(eval::d1_psnr(&samples, positions, peak)? >= tau_db)
}

/// Builds the surfel octree: walk the leaf levels coarse to fine, fit a
/// surfel to every cube still holding unvisited points, keep it as a leaf if
/// the split decision accepts (the last level accepts unconditionally), and
/// mark its points visited.
///
/// Patches are left empty; sampling happens after geometry quantization.
pub fn build_teso(cloud: &PointCloud, config: &BuildConfig) -> Result<SurfelOctree> {
    config.validate(cloud.depth)?;
    let mut tree = SurfelOctree::new(cloud.depth, config.levels.clone(), config.tau_db)?;
    if cloud.is_empty() {
        return Ok(tree);
    }
    let normals = cloud
        .normals
        .as_ref()
        .ok_or_else(|| Error::Precondition("build needs normals; run estimate_normals".into()))?;
    let depth = cloud.depth;
    let mut unvisited: Vec<u32> = (0..cloud.len() as u32).collect();
    let n_levels = config.levels.leaf_levels.len();
    for (li, &level) in config.levels.leaf_levels.iter().enumerate() {
        let last = li + 1 == n_levels;
        let shift = depth - level;
        let mut groups: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
        for &i in &unvisited {
            let v = cloud.voxel(i as usize);
            let key =
                morton::morton_encode_unchecked([v[0] >> shift, v[1] >> shift, v[2] >> shift]);
            groups.entry(key).or_default().push(i);
        }
        let entries: Vec<(u64, Vec<u32>)> = groups.into_iter().collect();
        let fitted: Vec<Result<(Surfel, bool)>> = entries
            .par_iter()
            .map(|(key, idxs)| {
                let cube = OctreeCube::new(level, morton::morton_decode_unchecked(*key), depth)?;
                let pos: Vec<Vector3<f64>> =
                    idxs.iter().map(|&i| cloud.positions[i as usize]).collect();
                let nrm: Vec<Vector3<f64>> =
                    idxs.iter().map(|&i| normals[i as usize]).collect();
                let surfel = fit_surfel(&pos, &nrm, &cube, config.grid_unit)?;
                let accept = last
                    || split_decision(&pos, &surfel, &cube, config.tau_db, config.grid_unit)?;
                Ok((surfel, accept))
            })
            .collect();
        let mut rest = Vec::new();
        for ((key, idxs), res) in entries.iter().zip(fitted) {
            let (surfel, accept) = res?;
            if accept {
                tree.insert_leaf(level, *key, surfel)?;
            } else {
                rest.extend_from_slice(idxs);
            }
        }
        unvisited = rest;
    }
    debug_assert!(unvisited.is_empty(), "last level must absorb all points");
    Ok(tree)
}
