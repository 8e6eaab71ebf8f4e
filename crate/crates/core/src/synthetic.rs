//! Deterministic synthetic point clouds for tests and benchmarks.
//!
//! All generators emit dense voxel shells: one point per integer voxel the
//! surface passes through, in a fixed scan order, with analytic normals and
//! a smooth deterministic color pattern. They mimic the character of
//! voxelized scan datasets so split decisions and texture sampling behave
//! as they would on real data.

use nalgebra::Vector3;

use crate::pointcloud::PointCloud;

/// Smooth position-dependent color, quantized to the 8-bit lattice like a
/// PLY source file would be.
pub fn color_at(p: &Vector3<f64>) -> Vector3<f32> {
    let tau = std::f64::consts::TAU;
    let r = 0.5 + 0.45 * (tau * (p.x + 0.7 * p.y) / 61.0).sin();
    let g = 0.5 + 0.45 * (tau * (p.y + 0.3 * p.z) / 43.0).sin();
    let b = 0.5 + 0.45 * (tau * (p.z + 0.5 * p.x) / 83.0).cos();
    Vector3::new(quant8(r), quant8(g), quant8(b))
}

fn quant8(c: f64) -> f32 {
    (c.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Axis-aligned plane `z = 2^(depth-1)` covering a centered `side x side`
/// voxel square. `side = 316` gives just under 100k points.
pub fn plane_cloud(depth: u32, side: u32) -> PointCloud {
    let size = 1u32 << depth;
    assert!(side <= size);
    let start = (size - side) / 2;
    let z = (size / 2) as f64;
    let mut cloud = PointCloud::new(depth);
    let mut normals = Vec::new();
    for x in start..start + side {
        for y in start..start + side {
            let p = Vector3::new(x as f64, y as f64, z);
            cloud.colors.push(color_at(&p));
            cloud.positions.push(p);
            normals.push(Vector3::new(0.0, 0.0, 1.0));
        }
    }
    cloud.normals = Some(normals);
    cloud
}

/// Sphere of `radius` voxels centered in the grid.
pub fn sphere_cloud(depth: u32, radius: f64) -> PointCloud {
    displaced_sphere(depth, radius, 0.0, 1.0)
}

/// Sphere with a smooth radial displacement field: bump amplitude `amp`
/// voxels, surface wavelength roughly `wavelength` voxels. `amp = 0` is a
/// plain sphere. Useful when split decisions should spread across several
/// quality bands instead of all landing at one level.
pub fn bumpy_sphere_cloud(depth: u32, radius: f64, amp: f64, wavelength: f64) -> PointCloud {
    displaced_sphere(depth, radius, amp, wavelength)
}

fn displacement(dir: &Vector3<f64>, radius: f64, amp: f64, wavelength: f64) -> f64 {
    if amp == 0.0 {
        return 0.0;
    }
    let k = std::f64::consts::TAU * radius / wavelength;
    amp * (k * dir.x).sin() * (k * dir.y).sin() * (k * dir.z).sin()
}

fn displaced_sphere(depth: u32, radius: f64, amp: f64, wavelength: f64) -> PointCloud {
    let size = 1u64 << depth;
    let c = Vector3::repeat(size as f64 / 2.0);
    let surface = |p: &Vector3<f64>| -> f64 {
        let d = p - c;
        let len = d.norm();
        len - radius - displacement(&(d / len), radius, amp, wavelength)
    };
    let mut cloud = PointCloud::new(depth);
    let mut normals = Vec::new();
    // Scan only the z-band each (x, y) column can intersect.
    let reach = radius + amp + 0.87;
    let inner = (radius - amp - 0.87).max(0.0);
    let x_lo = (c.x - reach).floor().max(0.0) as i64;
    let x_hi = (c.x + reach).ceil().min(size as f64 - 1.0) as i64;
    for x in x_lo..=x_hi {
        for y in x_lo..=x_hi {
            let dx = x as f64 - c.x;
            let dy = y as f64 - c.y;
            let rho2 = dx * dx + dy * dy;
            if rho2 > reach * reach {
                continue;
            }
            let z_outer = (reach * reach - rho2).sqrt();
            let z_inner = if rho2 < inner * inner {
                (inner * inner - rho2).sqrt()
            } else {
                0.0
            };
            let mut push = |z: i64| {
                if z < 0 || z as u64 >= size {
                    return;
                }
                let p = Vector3::new(x as f64, y as f64, z as f64);
                if surface(&p).abs() < 0.5 {
                    cloud.colors.push(color_at(&p));
                    let n = if amp == 0.0 {
                        (p - c).normalize()
                    } else {
                        gradient_normal(&surface, &p)
                    };
                    normals.push(n);
                    cloud.positions.push(p);
                }
            };
            if z_inner == 0.0 {
                for z in (c.z - z_outer).floor() as i64..=(c.z + z_outer).ceil() as i64 {
                    push(z);
                }
            } else {
                for z in (c.z - z_outer).floor() as i64..=(c.z - z_inner).ceil() as i64 {
                    push(z);
                }
                for z in (c.z + z_inner).floor() as i64..=(c.z + z_outer).ceil() as i64 {
                    push(z);
                }
            }
        }
    }
    cloud.normals = Some(normals);
    cloud
}

/// Unit normal from central differences of a signed surface function.
fn gradient_normal(f: &impl Fn(&Vector3<f64>) -> f64, p: &Vector3<f64>) -> Vector3<f64> {
    let h = 0.05;
    let mut g = Vector3::zeros();
    for i in 0..3 {
        let mut a = *p;
        let mut b = *p;
        a[i] += h;
        b[i] -= h;
        g[i] = f(&a) - f(&b);
    }
    g.normalize()
}

/// Torus with ring radius `ring` and tube radius `tube`, centered in the
/// grid with the ring in the x-y plane. `ring = 100, tube = 25` gives
/// roughly 100k points.
pub fn torus_cloud(depth: u32, ring: f64, tube: f64) -> PointCloud {
    let size = 1u64 << depth;
    let c = Vector3::repeat(size as f64 / 2.0);
    let mut cloud = PointCloud::new(depth);
    let mut normals = Vec::new();
    let reach = ring + tube + 0.87;
    let x_lo = (c.x - reach).floor().max(0.0) as i64;
    let x_hi = (c.x + reach).ceil().min(size as f64 - 1.0) as i64;
    for x in x_lo..=x_hi {
        for y in x_lo..=x_hi {
            let dx = x as f64 - c.x;
            let dy = y as f64 - c.y;
            let rho = (dx * dx + dy * dy).sqrt();
            let a = rho - ring;
            let span2 = (tube + 0.87) * (tube + 0.87) - a * a;
            if span2 <= 0.0 {
                continue;
            }
            let span = span2.sqrt();
            for z in (c.z - span).floor() as i64..=(c.z + span).ceil() as i64 {
                if z < 0 || z as u64 >= size {
                    continue;
                }
                let dz = z as f64 - c.z;
                let d = (a * a + dz * dz).sqrt() - tube;
                if d.abs() < 0.5 {
                    // Nearest point on the ring circle; normal points away
                    // from it. Degenerate rho=0 cannot occur on the shell.
                    let ring_pt = c + Vector3::new(dx / rho * ring, dy / rho * ring, 0.0);
                    let p = Vector3::new(x as f64, y as f64, z as f64);
                    cloud.colors.push(color_at(&p));
                    normals.push((p - ring_pt).normalize());
                    cloud.positions.push(p);
                }
            }
        }
    }
    cloud.normals = Some(normals);
    cloud
}
