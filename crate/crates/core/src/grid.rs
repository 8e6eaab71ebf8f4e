//! Uniform hash grid for nearest-neighbor queries over point sets.

use std::collections::HashMap;

use nalgebra::Vector3;

/// Spatial index over a borrowed position slice. Queries are deterministic:
/// ties on distance break toward the smaller point index.
pub struct PointGrid<'a> {
    positions: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    cell_min: [i64; 3],
    cell_max: [i64; 3],
}

impl<'a> PointGrid<'a> {
    /// `cell` should be on the order of the typical query distance; a few
    /// voxels for dense voxelized clouds.
    pub fn build(positions: &'a [Vector3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut cell_min = [i64::MAX; 3];
        let mut cell_max = [i64::MIN; 3];
        for (i, p) in positions.iter().enumerate() {
            let c = cell_of(p, cell);
            for a in 0..3 {
                cell_min[a] = cell_min[a].min(c[a]);
                cell_max[a] = cell_max[a].max(c[a]);
            }
            cells.entry(c).or_default().push(i as u32);
        }
        PointGrid {
            positions,
            cell,
            cells,
            cell_min,
            cell_max,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Index and distance of the closest point to `q`.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.ring_search(q, |ring, items| {
            for &(i, d) in items {
                match best {
                    Some((bi, bd)) if (d, i) < (bd, bi) => best = Some((i, d)),
                    None => best = Some((i, d)),
                    _ => {}
                }
            }
            // The next ring cannot contain anything closer than `ring` cells.
            match best {
                Some((_, d)) => d > ring as f64 * self.cell,
                None => true,
            }
        });
        best
    }

    /// The `k` closest points to `q`, sorted by `(distance, index)`.
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut found: Vec<(usize, f64)> = Vec::new();
        self.ring_search(q, |ring, items| {
            found.extend_from_slice(items);
            if found.len() < k {
                return true;
            }
            found.sort_by(cmp_dist_idx);
            found.truncate(k);
            found[k - 1].1 > ring as f64 * self.cell
        });
        found.sort_by(cmp_dist_idx);
        found.truncate(k);
        found
    }

    /// All points within `radius` of `q`, sorted by index.
    pub fn within(&self, q: &Vector3<f64>, radius: f64) -> Vec<(usize, f64)> {
        let lo = cell_of(&(q - Vector3::repeat(radius)), self.cell);
        let hi = cell_of(&(q + Vector3::repeat(radius)), self.cell);
        let mut out = Vec::new();
        for cx in lo[0]..=hi[0] {
            for cy in lo[1]..=hi[1] {
                for cz in lo[2]..=hi[2] {
                    if let Some(idxs) = self.cells.get(&[cx, cy, cz]) {
                        for &i in idxs {
                            let d = (self.positions[i as usize] - q).norm();
                            if d <= radius {
                                out.push((i as usize, d));
                            }
                        }
                    }
                }
            }
        }
        out.sort_by_key(|&(i, _)| i);
        out
    }

    /// Visits cells in expanding Chebyshev rings around `q`'s cell. After
    /// each ring, `step(ring, hits)` decides whether to widen the search.
    fn ring_search(&self, q: &Vector3<f64>, mut step: impl FnMut(i64, &[(usize, f64)]) -> bool) {
        if self.positions.is_empty() {
            return;
        }
        let center = cell_of(q, self.cell);
        // Upper bound on useful ring count: the grid's occupied extent.
        let max_ring = self.max_ring(center);
        let mut buf: Vec<(usize, f64)> = Vec::new();
        for ring in 0..=max_ring {
            buf.clear();
            self.visit_ring(center, ring, |cell| {
                if let Some(idxs) = self.cells.get(&cell) {
                    for &i in idxs {
                        let d = (self.positions[i as usize] - q).norm();
                        buf.push((i as usize, d));
                    }
                }
            });
            if !step(ring, &buf) {
                return;
            }
        }
    }

    fn max_ring(&self, center: [i64; 3]) -> i64 {
        (0..3)
            .map(|i| {
                (self.cell_min[i] - center[i])
                    .abs()
                    .max((self.cell_max[i] - center[i]).abs())
            })
            .max()
            .unwrap()
    }

    fn visit_ring(&self, center: [i64; 3], ring: i64, mut f: impl FnMut([i64; 3])) {
        if ring == 0 {
            f(center);
            return;
        }
        let (r, c) = (ring, center);
        for dx in -r..=r {
            for dy in -r..=r {
                if dx.abs() == r || dy.abs() == r {
                    // Full faces perpendicular to z are covered below; here
                    // only the side walls.
                    for dz in -r..=r {
                        if dz.abs() != r {
                            f([c[0] + dx, c[1] + dy, c[2] + dz]);
                        }
                    }
                }
                f([c[0] + dx, c[1] + dy, c[2] - r]);
                f([c[0] + dx, c[1] + dy, c[2] + r]);
            }
        }
    }
}

fn cmp_dist_idx(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    a.1.partial_cmp(&b.1)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

#[inline]
fn cell_of(p: &Vector3<f64>, cell: f64) -> [i64; 3] {
    [
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    ]
}
