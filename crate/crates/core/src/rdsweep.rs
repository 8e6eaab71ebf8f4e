//! Rate-distortion sweep over the (tau, Qt) grid.
//!
//! Each grid point runs the full pipeline (build, quantize, encode, decode,
//! render the trajectory) and scores the decoded renders against a common
//! reference: the tree built at the largest tau in the sweep with its
//! uncompressed sampled patches. Distortion is 1 - SSIM; PSNR is reported
//! alongside. The hull is the lower-left Pareto staircase in (bpp,
//! distortion).

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::builder::build_teso;
use crate::error::{Error, Result};
use crate::eval::{image_psnr, image_ssim};
use crate::image_buf::ImageRgb;
use crate::pipeline::{decode_bytes, encode_cloud, PipelineConfig};
use crate::pointcloud::PointCloud;
use crate::quant::quantize_tree;
use crate::render::{render, Camera};
use crate::texture::sample_patches;

#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub depth: u32,
    pub tau_set: Vec<f64>,
    pub qt_set: Vec<u8>,
    pub cameras: Vec<Camera>,
    pub background: Vector3<f32>,
}

#[derive(Debug, Clone)]
pub struct RDPoint {
    pub tau_db: f64,
    pub qt: u8,
    /// Texture route label, "dct" for the embedded codec.
    pub codec: &'static str,
    pub geometry_bits: u64,
    pub texture_bits: u64,
    pub total_bits: u64,
    /// Total bits over original point count.
    pub bpp: f64,
    /// Mean image PSNR over the trajectory against the reference renders.
    pub psnr_db: f64,
    /// Mean SSIM over the trajectory.
    pub ssim: f64,
}

impl RDPoint {
    pub fn distortion(&self) -> f64 {
        1.0 - self.ssim
    }
}

/// Reference renders: highest-tau build, quantized, patches straight from
/// sampling (no texture codec).
pub fn reference_renders(
    cloud: &PointCloud,
    settings: &SweepSettings,
) -> Result<Vec<ImageRgb>> {
    let tau_ref = settings
        .tau_set
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let cfg = PipelineConfig::new(settings.depth, tau_ref, 0);
    let mut tree = build_teso(cloud, &cfg.build)?;
    quantize_tree(&mut tree)?;
    sample_patches(&mut tree, cloud, cfg.k_texture, cfg.d_thresh)?;
    settings
        .cameras
        .iter()
        .map(|cam| render(&tree, cam, settings.background))
        .collect()
}

pub fn rd_sweep(cloud: &PointCloud, settings: &SweepSettings) -> Result<Vec<RDPoint>> {
    if cloud.positions.is_empty() {
        return Err(Error::Precondition("sweep needs a non-empty cloud".into()));
    }
    if settings.tau_set.is_empty() || settings.qt_set.is_empty() {
        return Err(Error::Precondition("sweep needs non-empty tau and Qt sets".into()));
    }
    if settings.cameras.is_empty() {
        return Err(Error::Precondition("sweep needs at least one camera".into()));
    }
    if settings.qt_set.contains(&0) {
        return Err(Error::Precondition(
            "sweep requires the embedded texture route (Qt >= 1)".into(),
        ));
    }
    let reference = reference_renders(cloud, settings)?;
    let mut grid = Vec::new();
    for &tau in &settings.tau_set {
        for &qt in &settings.qt_set {
            grid.push((tau, qt));
        }
    }
    let n_points = cloud.positions.len() as f64;
    grid.par_iter()
        .map(|&(tau, qt)| {
            let cfg = PipelineConfig::new(settings.depth, tau, qt);
            let (summary, _) = encode_cloud(cloud, &cfg)?;
            let decoded = decode_bytes(&summary.bytes)?;
            let mut psnr_acc = 0.0;
            let mut ssim_acc = 0.0;
            for (cam, ref_img) in settings.cameras.iter().zip(&reference) {
                let img = render(&decoded.tree, cam, settings.background)?;
                psnr_acc += image_psnr(&img, ref_img)?;
                ssim_acc += image_ssim(&img, ref_img)?;
            }
            let n_views = settings.cameras.len() as f64;
            Ok(RDPoint {
                tau_db: tau,
                qt,
                codec: "dct",
                geometry_bits: summary.geometry_bits,
                texture_bits: summary.texture_bits,
                total_bits: summary.total_bits(),
                bpp: summary.total_bits() as f64 / n_points,
                psnr_db: psnr_acc / n_views,
                ssim: ssim_acc / n_views,
            })
        })
        .collect()
}

/// Lower-left Pareto staircase: sorted by bpp, strictly improving in
/// distortion. Among equal-bpp points only the best survives.
pub fn pareto_hull(points: &[RDPoint]) -> Vec<RDPoint> {
    let mut sorted: Vec<&RDPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.bpp
            .total_cmp(&b.bpp)
            .then(a.distortion().total_cmp(&b.distortion()))
    });
    let mut hull: Vec<RDPoint> = Vec::new();
    for p in sorted {
        let improves = hull
            .last()
            .is_none_or(|h| p.distortion() < h.distortion() && p.bpp > h.bpp);
        if improves {
            hull.push(p.clone());
        } else if let Some(h) = hull.last() {
            // equal-bpp duplicates: keep the better one, already first in sort order
            debug_assert!(p.bpp > h.bpp || p.distortion() >= h.distortion());
        }
    }
    hull
}

pub const CSV_HEADER: &str = "tau,qt,codec,geometry_bits,texture_bits,bpp,psnr_db,ssim";

pub fn csv_string(points: &[RDPoint]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.4},{:.6}\n",
            p.tau_db, p.qt, p.codec, p.geometry_bits, p.texture_bits, p.bpp, p.psnr_db, p.ssim
        ));
    }
    out
}

pub fn write_csv(points: &[RDPoint], path: &Path) -> Result<()> {
    std::fs::write(path, csv_string(points))?;
    Ok(())
}
