//! CPU renderer for surfel octrees.
//!
//! Per pixel, candidate surfels are gathered by projecting their bounding
//! spheres onto screen tiles, sorted front to back by distance to the
//! surfel center, and composited: soft boundary hits blend with
//! `alpha = exp(-d^2 / sigma^2)`, the first solid hit terminates the ray.
//! Also provides the orbit trajectory generator and its text file format.

use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image_buf::ImageRgb;
use crate::octree::{OctreeCube, Surfel, SurfelOctree, TexturePatch};
use crate::texture::tangent_frame;

/// Declared world scale: 1024 voxels span 1.8 meters.
pub const METERS_PER_1024_VOXELS: f64 = 1.8;

pub fn voxels_per_meter() -> f64 {
    1024.0 / METERS_PER_1024_VOXELS
}

/// Orbit trajectory defaults: circle radius and per-frame radial perturbation
/// in meters, vertical field of view in degrees.
pub const TRAJECTORY_RADIUS_M: f64 = 2.75;
pub const TRAJECTORY_PERTURB_M: f64 = 1.0;
pub const TRAJECTORY_FOV_DEG: f64 = 45.0;

const PARALLEL_EPS: f64 = 1e-9;
const TILE: u32 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vector3<f64>,
    pub look_at: Vector3<f64>,
    pub up: Vector3<f64>,
    /// Vertical field of view, degrees.
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
}

struct Basis {
    forward: Vector3<f64>,
    right: Vector3<f64>,
    up: Vector3<f64>,
    tan_half: f64,
}

impl Camera {
    pub fn new(
        position: Vector3<f64>,
        look_at: Vector3<f64>,
        up: Vector3<f64>,
        fov_deg: f64,
        width: u32,
        height: u32,
    ) -> Result<Camera> {
        let cam = Camera {
            position,
            look_at,
            up,
            fov_deg,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Precondition(format!(
                "field of view {} outside (0, 180)",
                self.fov_deg
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Precondition("zero image dimension".into()));
        }
        let forward = self.look_at - self.position;
        if forward.norm() == 0.0 {
            return Err(Error::Precondition("camera looks at its own position".into()));
        }
        if forward.normalize().cross(&self.up).norm() < 1e-9 {
            return Err(Error::Precondition("up vector parallel to view direction".into()));
        }
        Ok(())
    }

    fn basis(&self) -> Basis {
        let forward = (self.look_at - self.position).normalize();
        let right = forward.cross(&self.up).normalize();
        let up = right.cross(&forward);
        Basis {
            forward,
            right,
            up,
            tan_half: (self.fov_deg.to_radians() / 2.0).tan(),
        }
    }

    /// Unit ray direction through continuous image coordinates, sx in
    /// [0, width], sy in [0, height], pixel centers at half-integers.
    pub fn ray_at(&self, sx: f64, sy: f64) -> Vector3<f64> {
        let b = self.basis();
        let aspect = self.width as f64 / self.height as f64;
        let ndc_x = sx / self.width as f64 * 2.0 - 1.0;
        let ndc_y = 1.0 - sy / self.height as f64 * 2.0;
        (b.forward + b.right * (ndc_x * b.tan_half * aspect) + b.up * (ndc_y * b.tan_half))
            .normalize()
    }

    /// Ray through the center of pixel (x, y).
    pub fn ray(&self, x: u32, y: u32) -> Vector3<f64> {
        self.ray_at(x as f64 + 0.5, y as f64 + 0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HitRecord {
    /// Inside the bounding cube and within the surfel radius; terminates.
    Solid {
        t: f64,
        p_hit: Vector3<f64>,
        st: (f64, f64),
    },
    /// Outside the cube but within the soft extension; blends.
    Soft {
        t: f64,
        p_hit: Vector3<f64>,
        st: (f64, f64),
        alpha: f64,
    },
    Miss,
}

#[allow(clippy::too_many_arguments)]
fn intersect_with_frame(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    p: &Vector3<f64>,
    n: &Vector3<f64>,
    u: &Vector3<f64>,
    v: &Vector3<f64>,
    r: f64,
    cube: &OctreeCube,
    sigma: f64,
    soft_extent: f64,
) -> HitRecord {
    let denom = n.dot(dir);
    if denom.abs() < PARALLEL_EPS {
        return HitRecord::Miss;
    }
    let t = n.dot(&(p - origin)) / denom;
    if t <= 0.0 {
        return HitRecord::Miss;
    }
    let p_hit = origin + dir * t;
    let w = p_hit - p;
    let su = w.dot(u);
    let sv = w.dot(v);
    let rho2 = su * su + sv * sv;
    let st = ((su + r) / (2.0 * r), (sv + r) / (2.0 * r));
    let a = cube.anchor();
    let b = cube.width();
    let inside = (0..3).all(|i| p_hit[i] >= a[i] && p_hit[i] <= a[i] + b);
    if inside {
        if rho2 <= r * r {
            return HitRecord::Solid { t, p_hit, st };
        }
        return HitRecord::Miss;
    }
    let d = cube.distance_to_point(&p_hit);
    let reach = r + soft_extent;
    if d <= soft_extent && rho2 <= reach * reach {
        let alpha = (-d * d / (sigma * sigma)).exp();
        if alpha < 1.0 {
            return HitRecord::Soft { t, p_hit, st, alpha };
        }
    }
    HitRecord::Miss
}

/// Ray-surfel intersection: solid inside the cube, soft within
/// `soft_extent` of it, miss otherwise. `dir` must be unit length.
pub fn intersect(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    surfel: &Surfel,
    cube: &OctreeCube,
    sigma: f64,
    soft_extent: f64,
) -> HitRecord {
    let Ok(frame) = tangent_frame(&surfel.normal) else {
        return HitRecord::Miss;
    };
    let p = cube.anchor() + surfel.offset;
    intersect_with_frame(
        origin,
        dir,
        &p,
        &surfel.normal,
        &frame.u,
        &frame.v,
        surfel.radius,
        cube,
        sigma,
        soft_extent,
    )
}

/// Bilinear lookup over pixel centers; (s, t) outside the center lattice
/// clamps to the edge pixels.
pub fn shade(patch: &TexturePatch, s: f64, t: f64) -> Vector3<f32> {
    let m = patch.m;
    let last = (m - 1) as f64;
    let x = (s * m as f64 - 0.5).clamp(0.0, last);
    let y = (t * m as f64 - 0.5).clamp(0.0, last);
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(m - 1);
    let y1 = (y0 + 1).min(m - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let top = patch.pixel(x0, y0) * (1.0 - fx) + patch.pixel(x1, y0) * fx;
    let bottom = patch.pixel(x0, y1) * (1.0 - fx) + patch.pixel(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

struct Candidate<'a> {
    p: Vector3<f64>,
    n: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    r: f64,
    cube: OctreeCube,
    level: u32,
    key: u64,
    dist: f64,
    patch: &'a TexturePatch,
}

enum Footprint {
    None,
    Everywhere,
    /// Inclusive pixel rectangle.
    Rect(u32, u32, u32, u32),
}

/// Conservative pixel rectangle covering the projection of a sphere.
fn project_sphere(camera: &Camera, basis: &Basis, center: &Vector3<f64>, radius: f64) -> Footprint {
    let rel = center - camera.position;
    let z = rel.dot(&basis.forward);
    if z + radius <= 0.0 {
        return Footprint::None;
    }
    if z - radius <= 0.0 {
        // crosses the image plane; no finite bound
        return Footprint::Everywhere;
    }
    let focal = camera.height as f64 / 2.0 / basis.tan_half;
    let lat_x = rel.dot(&basis.right);
    let lat_y = rel.dot(&basis.up);
    let extremes = |lat: f64| -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for l in [lat - radius, lat + radius] {
            for zz in [z - radius, z + radius] {
                let ratio = l / zz;
                lo = lo.min(ratio);
                hi = hi.max(ratio);
            }
        }
        (lo, hi)
    };
    let (x_lo, x_hi) = extremes(lat_x);
    let (y_lo, y_hi) = extremes(lat_y);
    let margin = 1.0;
    let px_min = camera.width as f64 / 2.0 + focal * x_lo - margin;
    let px_max = camera.width as f64 / 2.0 + focal * x_hi + margin;
    // screen y grows downward
    let py_min = camera.height as f64 / 2.0 - focal * y_hi - margin;
    let py_max = camera.height as f64 / 2.0 - focal * y_lo + margin;
    if px_max < 0.0 || py_max < 0.0 || px_min >= camera.width as f64 || py_min >= camera.height as f64
    {
        return Footprint::None;
    }
    Footprint::Rect(
        px_min.max(0.0) as u32,
        py_min.max(0.0) as u32,
        (px_max as u32).min(camera.width - 1),
        (py_max as u32).min(camera.height - 1),
    )
}

/// Renders the tree. Every leaf must carry a texture patch.
pub fn render(
    tree: &SurfelOctree,
    camera: &Camera,
    background: Vector3<f32>,
) -> Result<ImageRgb> {
    camera.validate()?;
    let sigma = tree.sigma();
    let soft_extent = 3.0 * sigma;
    let basis = camera.basis();

    let mut candidates = Vec::with_capacity(tree.leaf_count());
    for (level, key, surfel, patch) in tree.leaves() {
        let patch = patch.ok_or_else(|| {
            Error::Precondition(format!("leaf {key:#x} at level {level} has no texture patch"))
        })?;
        let cube = tree.cube(level, key);
        let p = cube.anchor() + surfel.offset;
        let frame = tangent_frame(&surfel.normal)?;
        candidates.push(Candidate {
            p,
            n: surfel.normal,
            u: frame.u,
            v: frame.v,
            r: surfel.radius,
            cube,
            level,
            key,
            dist: (p - camera.position).norm(),
            patch,
        });
    }

    let tiles_x = camera.width.div_ceil(TILE);
    let tiles_y = camera.height.div_ceil(TILE);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (i, c) in candidates.iter().enumerate() {
        match project_sphere(camera, &basis, &c.p, c.r + soft_extent) {
            Footprint::None => {}
            Footprint::Everywhere => {
                for list in &mut tile_lists {
                    list.push(i as u32);
                }
            }
            Footprint::Rect(x0, y0, x1, y1) => {
                for ty in y0 / TILE..=y1 / TILE {
                    for tx in x0 / TILE..=x1 / TILE {
                        tile_lists[(ty * tiles_x + tx) as usize].push(i as u32);
                    }
                }
            }
        }
    }

    // global front-to-back order, deterministic under distance ties
    let order_key = |i: u32| {
        let c = &candidates[i as usize];
        (c.dist, c.level, c.key)
    };
    tile_lists.par_iter_mut().for_each(|list| {
        list.sort_unstable_by(|&a, &b| {
            let (da, la, ka) = order_key(a);
            let (db, lb, kb) = order_key(b);
            da.total_cmp(&db).then(la.cmp(&lb)).then(ka.cmp(&kb))
        });
    });

    let tile_pixels: Vec<Vec<Vector3<f32>>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            let x_end = ((tx + 1) * TILE).min(camera.width);
            let y_end = ((ty + 1) * TILE).min(camera.height);
            let list = &tile_lists[tile as usize];
            let mut out =
                Vec::with_capacity(((x_end - tx * TILE) * (y_end - ty * TILE)) as usize);
            for y in ty * TILE..y_end {
                for x in tx * TILE..x_end {
                    let dir = camera.ray(x, y);
                    let mut color = Vector3::zeros();
                    let mut transmit = 1.0f32;
                    for &ci in list {
                        let c = &candidates[ci as usize];
                        match intersect_with_frame(
                            &camera.position,
                            &dir,
                            &c.p,
                            &c.n,
                            &c.u,
                            &c.v,
                            c.r,
                            &c.cube,
                            sigma,
                            soft_extent,
                        ) {
                            HitRecord::Solid { st, .. } => {
                                color += shade(c.patch, st.0, st.1) * transmit;
                                transmit = 0.0;
                                break;
                            }
                            HitRecord::Soft { st, alpha, .. } => {
                                let a = alpha as f32;
                                color += shade(c.patch, st.0, st.1) * (transmit * a);
                                transmit *= 1.0 - a;
                                debug_assert!((0.0..=1.0).contains(&transmit));
                            }
                            HitRecord::Miss => {}
                        }
                    }
                    color += background * transmit;
                    out.push(color);
                }
            }
            out
        })
        .collect();

    let mut image = ImageRgb::new(camera.width, camera.height);
    for (tile, pixels) in tile_pixels.into_iter().enumerate() {
        let tx = tile as u32 % tiles_x;
        let ty = tile as u32 / tiles_x;
        let x_end = ((tx + 1) * TILE).min(camera.width);
        let mut it = pixels.into_iter();
        for y in ty * TILE..((ty + 1) * TILE).min(camera.height) {
            for x in tx * TILE..x_end {
                image.set_pixel(x, y, it.next().expect("tile pixel count"));
            }
        }
    }
    Ok(image)
}

/// Cameras on a horizontal circle around `center`, equally spaced angles,
/// radial distance perturbed per frame from `seed`, always facing `center`.
pub fn make_trajectory(
    n_frames: usize,
    center: Vector3<f64>,
    seed: u64,
    width: u32,
    height: u32,
) -> Result<Vec<Camera>> {
    if n_frames == 0 {
        return Err(Error::Precondition("trajectory needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cameras = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let theta = std::f64::consts::TAU * i as f64 / n_frames as f64;
        let radius_m = TRAJECTORY_RADIUS_M + TRAJECTORY_PERTURB_M * rng.random_range(-1.0..=1.0);
        let radius = radius_m * voxels_per_meter();
        let position = center + Vector3::new(theta.cos(), theta.sin(), 0.0) * radius;
        cameras.push(Camera::new(
            position,
            center,
            Vector3::z(),
            TRAJECTORY_FOV_DEG,
            width,
            height,
        )?);
    }
    Ok(cameras)
}

/// Writes one camera per line: frame index, position, look-at, up, fov.
pub fn write_trajectory(cameras: &[Camera], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, c) in cameras.iter().enumerate() {
        out.push_str(&format!(
            "{i} {} {} {} {} {} {} {} {} {} {}\n",
            c.position.x,
            c.position.y,
            c.position.z,
            c.look_at.x,
            c.look_at.y,
            c.look_at.z,
            c.up.x,
            c.up.y,
            c.up.z,
            c.fov_deg,
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a trajectory file; image dimensions come from the caller since the
/// format stores only poses.
pub fn read_trajectory(path: &Path, width: u32, height: u32) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path)?;
    let mut cameras = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 11 {
            return Err(Error::Format(format!(
                "trajectory line {}: expected 11 fields, got {}",
                ln + 1,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| {
                Error::Format(format!("trajectory line {}: bad number {:?}", ln + 1, fields[i]))
            })
        };
        let frame = num(0)? as usize;
        if frame != cameras.len() {
            return Err(Error::Format(format!(
                "trajectory line {}: frame index {frame} out of order",
                ln + 1
            )));
        }
        cameras.push(Camera::new(
            Vector3::new(num(1)?, num(2)?, num(3)?),
            Vector3::new(num(4)?, num(5)?, num(6)?),
            Vector3::new(num(7)?, num(8)?, num(9)?),
            num(10)?,
            width,
            height,
        )?);
    }
    Ok(cameras)
}
