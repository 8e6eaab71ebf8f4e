//! Distortion metrics: point-to-point (D1) PSNR and image PSNR/SSIM.
//!
//! The rate-distortion sweep harness lives in `rdsweep` and builds on these.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::grid::PointGrid;
use crate::image_buf::ImageRgb;

/// Mean over `from` of the squared distance to the nearest point of `to`.
pub fn d1_mse_directional(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> f64 {
    let grid = PointGrid::build(to, 2.0);
    let mut acc = 0.0;
    for p in from {
        let (_, d) = grid.nearest(p).expect("`to` set checked non-empty");
        acc += d * d;
    }
    acc / from.len() as f64
}

/// Symmetric D1 MSE: the worse of the two directional means.
pub fn symmetric_d1_mse(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition(
            "d1 metric needs two non-empty point sets".into(),
        ));
    }
    Ok(d1_mse_directional(a, b).max(d1_mse_directional(b, a)))
}

/// Symmetric D1-PSNR in dB; identical sets give +infinity.
pub fn d1_psnr(a: &[Vector3<f64>], b: &[Vector3<f64>], peak: f64) -> Result<f64> {
    let mse = symmetric_d1_mse(a, b)?;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (peak * peak / mse).log10())
    }
}

/// PSNR over RGB with peak 1.0; identical images give +infinity.
pub fn image_psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Precondition(format!(
            "image size mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut acc = 0.0f64;
    for (pa, pb) in a.pixels.iter().zip(&b.pixels) {
        let d = pa.cast::<f64>() - pb.cast::<f64>();
        acc += d.norm_squared();
    }
    let mse = acc / (a.pixels.len() as f64 * 3.0);
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean SSIM over the valid region (no padding), 11x11 Gaussian window with
/// sigma 1.5, averaged over the three channels. Result lies in [-1, 1].
pub fn image_ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Precondition(format!(
            "image size mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a.pixels.iter().map(|p| p[ch] as f64).collect();
        let pb: Vec<f64> = b.pixels.iter().map(|p| p[ch] as f64).collect();
        total += ssim_channel(&pa, &pb, w, h, &win);
    }
    Ok(total / 3.0)
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> f64 {
    // separable Gaussian filtering of a, b, a^2, b^2, ab over the valid region
    let filt = |src: &dyn Fn(usize) -> f64| -> Vec<f64> {
        // horizontal pass: rows keep height, width shrinks to w - 10
        let vw = w - SSIM_WINDOW + 1;
        let mut tmp = vec![0.0; vw * h];
        for y in 0..h {
            for x in 0..vw {
                let mut s = 0.0;
                for (k, wk) in win.iter().enumerate() {
                    s += wk * src(y * w + x + k);
                }
                tmp[y * vw + x] = s;
            }
        }
        // vertical pass
        let vh = h - SSIM_WINDOW + 1;
        let mut out = vec![0.0; vw * vh];
        for y in 0..vh {
            for x in 0..vw {
                let mut s = 0.0;
                for (k, wk) in win.iter().enumerate() {
                    s += wk * tmp[(y + k) * vw + x];
                }
                out[y * vw + x] = s;
            }
        }
        out
    };
    let mu_a = filt(&|i| a[i]);
    let mu_b = filt(&|i| b[i]);
    let m_aa = filt(&|i| a[i] * a[i]);
    let m_bb = filt(&|i| b[i] * b[i]);
    let m_ab = filt(&|i| a[i] * b[i]);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    acc / mu_a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::plane_cloud;

    #[test]
    fn identical_clouds_are_infinite() {
        let c = plane_cloud(8, 40);
        assert_eq!(d1_psnr(&c.positions, &c.positions, 255.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn rejects_empty_input() {
        let c = plane_cloud(8, 10);
        assert!(d1_psnr(&[], &c.positions, 255.0).is_err());
        assert!(d1_psnr(&c.positions, &[], 255.0).is_err());
    }

    #[test]
    fn unit_shift_peak_1023() {
        let c = plane_cloud(10, 50);
        let shifted: Vec<_> = c
            .positions
            .iter()
            .map(|p| p + nalgebra::Vector3::new(0.0, 0.0, 1.0))
            .collect();
        let psnr = d1_psnr(&c.positions, &shifted, 1023.0).unwrap();
        assert!((psnr - 60.20).abs() < 0.01, "got {psnr}");
        // symmetric by construction
        assert_eq!(psnr, d1_psnr(&shifted, &c.positions, 1023.0).unwrap());
    }

    #[test]
    fn two_voxel_shift() {
        let c = plane_cloud(10, 50);
        let shifted: Vec<_> = c
            .positions
            .iter()
            .map(|p| p + nalgebra::Vector3::new(0.0, 0.0, 2.0))
            .collect();
        let psnr = d1_psnr(&c.positions, &shifted, 1023.0).unwrap();
        assert!((psnr - 54.18).abs() < 0.01, "got {psnr}");
    }

    #[test]
    fn monotone_in_displacement() {
        let c = plane_cloud(10, 30);
        let mut prev = f64::INFINITY;
        for shift in [0.5, 1.0, 1.5, 2.5, 4.0] {
            let moved: Vec<_> = c
                .positions
                .iter()
                .map(|p| p + nalgebra::Vector3::new(0.0, 0.0, shift))
                .collect();
            let psnr = d1_psnr(&c.positions, &moved, 1023.0).unwrap();
            assert!(psnr < prev, "psnr {psnr} not below {prev} at shift {shift}");
            prev = psnr;
        }
    }

    fn noise_image(w: u32, h: u32, seed: u64) -> ImageRgb {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut img = ImageRgb::new(w, h);
        for px in img.pixels.iter_mut() {
            *px = nalgebra::Vector3::new(rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>());
        }
        img
    }

    #[test]
    fn identical_images() {
        let a = noise_image(32, 24, 5);
        assert_eq!(image_psnr(&a, &a).unwrap(), f64::INFINITY);
        let s = image_ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim {s}");
    }

    #[test]
    fn size_mismatch_rejected() {
        let a = noise_image(32, 24, 5);
        let b = noise_image(24, 32, 5);
        assert!(image_psnr(&a, &b).is_err());
        assert!(image_ssim(&a, &b).is_err());
    }

    #[test]
    fn uniform_offset_psnr() {
        let a = noise_image(64, 64, 9);
        let mut b = a.clone();
        for px in b.pixels.iter_mut() {
            // keep the offset exact: 0.25 + 1/255 is representable noise-free
            *px = nalgebra::Vector3::from_element(0.25);
        }
        let mut a2 = a.clone();
        for px in a2.pixels.iter_mut() {
            *px = nalgebra::Vector3::from_element(0.25 + 1.0 / 255.0);
        }
        let psnr = image_psnr(&a2, &b).unwrap();
        assert!((psnr - 48.13).abs() < 0.01, "got {psnr}");
    }

    #[test]
    fn negated_binary_ssim_nonpositive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(23);
        let mut a = ImageRgb::new(32, 32);
        for px in a.pixels.iter_mut() {
            let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            *px = nalgebra::Vector3::from_element(v);
        }
        let mut b = a.clone();
        for px in b.pixels.iter_mut() {
            *px = nalgebra::Vector3::from_element(1.0) - *px;
        }
        let s = image_ssim(&a, &b).unwrap();
        assert!(s <= 0.0, "ssim {s}");
    }
}
