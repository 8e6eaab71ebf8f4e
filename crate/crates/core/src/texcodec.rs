//! Texture coding of packed patch atlases.
//!
//! Internal route: YCbCr 4:4:4 (BT.601 full range), 8x8 orthonormal DCT per
//! channel, flat uniform quantizer scaled by Qt, zigzag scan, DC prediction
//! across blocks, and (run, level) symbols on the shared range coder. One
//! section per leaf level.
//!
//! External route: lossless PNG atlases plus a text manifest, for recoding
//! with any off-the-shelf image or video codec, and a rasterized colored
//! point list for coders that work on point clouds directly.

use std::path::Path;
use std::sync::LazyLock;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::container::{section_id, Section, SectionStats, KIND_TEXTURE};
use crate::error::{Error, Result};
use crate::geocodec::models::{AdaptiveModel, StaticModel, SymbolDecoder, SymbolEncoder};
use crate::image_buf::ImageRgb;
use crate::texture::{slot_grid_side, PackedTextureImage};

/// Valid quantizer scales; the uniform step is `qt / 128`.
pub const QT_MIN: u8 = 1;
pub const QT_MAX: u8 = 63;

/// Alphabet of the magnitude-category models: category k carries k extra
/// raw bits, so 16 categories cover any value the 8x8 transform of a [0,1]
/// image can produce, with a wide safety margin.
const CATEGORY_ALPHABET: usize = 16;
/// Run alphabet: symbol 0 is end-of-block, 1 + run codes a zero run of
/// 0..=62 before the next nonzero coefficient.
const RUN_ALPHABET: usize = 64;
const EOB: u32 = 0;

pub fn quant_step(qt: u8) -> f64 {
    qt as f64 / 128.0
}

fn check_qt(qt: u8) -> Result<()> {
    if !(QT_MIN..=QT_MAX).contains(&qt) {
        return Err(Error::Precondition(format!(
            "texture quantizer {qt} outside {QT_MIN}..={QT_MAX}"
        )));
    }
    Ok(())
}

// BT.601 full-range coefficients.
const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

/// RGB to full-range YCbCr, channels in [0,1], Cb/Cr centered at 0.5.
pub fn rgb_to_ycbcr(image: &ImageRgb) -> ImageRgb {
    let mut out = image.clone();
    for p in &mut out.pixels {
        let r = (p.x as f64).clamp(0.0, 1.0);
        let g = (p.y as f64).clamp(0.0, 1.0);
        let b = (p.z as f64).clamp(0.0, 1.0);
        let y = KR * r + KG * g + KB * b;
        let cb = 0.5 + 0.5 * (b - y) / (1.0 - KB);
        let cr = 0.5 + 0.5 * (r - y) / (1.0 - KR);
        *p = Vector3::new(y as f32, cb as f32, cr as f32);
    }
    out
}

/// Inverse of [`rgb_to_ycbcr`]; output clamped to [0,1].
pub fn ycbcr_to_rgb(image: &ImageRgb) -> ImageRgb {
    let mut out = image.clone();
    for p in &mut out.pixels {
        let y = p.x as f64;
        let cb = p.y as f64 - 0.5;
        let cr = p.z as f64 - 0.5;
        let r = y + 2.0 * (1.0 - KR) * cr;
        let b = y + 2.0 * (1.0 - KB) * cb;
        let g = (y - KR * r - KB * b) / KG;
        *p = Vector3::new(
            r.clamp(0.0, 1.0) as f32,
            g.clamp(0.0, 1.0) as f32,
            b.clamp(0.0, 1.0) as f32,
        );
    }
    out
}

/// Orthonormal DCT-II basis: BASIS[u][x] = c(u) cos((2x+1) u pi / 16).
static BASIS: LazyLock<[[f64; 8]; 8]> = LazyLock::new(|| {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = c * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
});

/// Zigzag scan order of an 8x8 block, generated by the diagonal walk.
static ZIGZAG: LazyLock<[usize; 64]> = LazyLock::new(|| {
    let mut order = [0usize; 64];
    let mut idx = 0;
    for s in 0..15 {
        // walk each anti-diagonal, alternating direction (JPEG convention:
        // odd diagonals start at the top row and head down-left)
        let cols: Vec<usize> = (0..8).filter(|&x| s >= x && s - x < 8).collect();
        let diag: Vec<usize> = if s % 2 == 0 {
            cols.iter().map(|&x| (s - x) * 8 + x).collect()
        } else {
            cols.iter().rev().map(|&x| (s - x) * 8 + x).collect()
        };
        for cell in diag {
            order[idx] = cell;
            idx += 1;
        }
    }
    order
});

fn dct2d(block: &[f64; 64]) -> [f64; 64] {
    let b = &*BASIS;
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| block[y * 8 + x] * b[u][x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| tmp[y * 8 + u] * b[v][y]).sum();
        }
    }
    out
}

fn idct2d(coefs: &[f64; 64]) -> [f64; 64] {
    let b = &*BASIS;
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| coefs[v * 8 + u] * b[u][x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| tmp[v * 8 + x] * b[v][y]).sum();
        }
    }
    out
}

/// One channel plane padded to block multiples by edge replication.
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn from_image(image: &ImageRgb, channel: usize) -> Plane {
        let w = (image.width as usize).div_ceil(8) * 8;
        let h = (image.height as usize).div_ceil(8) * 8;
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            let sy = y.min(image.height as usize - 1) as u32;
            for x in 0..w {
                let sx = x.min(image.width as usize - 1) as u32;
                data[y * w + x] = image.pixel(sx, sy)[channel] as f64;
            }
        }
        Plane { w, h, data }
    }

    fn block(&self, bx: usize, by: usize) -> [f64; 64] {
        let mut out = [0.0; 64];
        for y in 0..8 {
            let row = (by * 8 + y) * self.w + bx * 8;
            out[y * 8..y * 8 + 8].copy_from_slice(&self.data[row..row + 8]);
        }
        out
    }

    fn set_block(&mut self, bx: usize, by: usize, block: &[f64; 64]) {
        for y in 0..8 {
            let row = (by * 8 + y) * self.w + bx * 8;
            self.data[row..row + 8].copy_from_slice(&block[y * 8..y * 8 + 8]);
        }
    }
}

/// Transform + quantize one block: shift to zero mean, DCT, round to the
/// flat step, zigzag order out.
fn quantize_block(block: &[f64; 64], step: f64) -> [i32; 64] {
    let mut shifted = [0.0; 64];
    for (d, s) in shifted.iter_mut().zip(block) {
        *d = s - 0.5;
    }
    let coefs = dct2d(&shifted);
    let mut q = [0i32; 64];
    for (i, slot) in q.iter_mut().enumerate() {
        *slot = (coefs[ZIGZAG[i]] / step).round() as i32;
    }
    q
}

/// Inverse of [`quantize_block`] without the final clamp.
fn dequantize_block(q: &[i32; 64], step: f64) -> [f64; 64] {
    let mut coefs = [0.0; 64];
    for (i, &v) in q.iter().enumerate() {
        coefs[ZIGZAG[i]] = v as f64 * step;
    }
    let spatial = idct2d(&coefs);
    let mut out = [0.0; 64];
    for (d, s) in out.iter_mut().zip(&spatial) {
        *d = s + 0.5;
    }
    out
}

/// Zigzag-folds an integer onto the non-negative line.
fn fold_signed(v: i32) -> u32 {
    if v >= 0 {
        2 * v as u32
    } else {
        (2 * (-(v as i64)) - 1) as u32
    }
}

fn unfold_signed(m: u32) -> i32 {
    if m % 2 == 0 {
        (m / 2) as i32
    } else {
        -(((m + 1) / 2) as i32)
    }
}

/// Nonzero levels fold with the sign in the low bit: 1,-1,2,-2 -> 0,1,2,3.
fn fold_level(v: i32) -> u32 {
    debug_assert!(v != 0);
    if v > 0 {
        2 * (v as u32 - 1)
    } else {
        2 * (-v) as u32 - 1
    }
}

fn unfold_level(m: u32) -> i32 {
    if m % 2 == 0 {
        (m / 2 + 1) as i32
    } else {
        -(((m + 1) / 2) as i32)
    }
}

/// Per-channel adaptive models for one section's entropy pass.
struct ChannelModels {
    run: AdaptiveModel,
    dc_cat: AdaptiveModel,
    ac_cat: AdaptiveModel,
}

impl ChannelModels {
    fn new() -> Self {
        ChannelModels {
            run: AdaptiveModel::new(RUN_ALPHABET),
            dc_cat: AdaptiveModel::new(CATEGORY_ALPHABET),
            ac_cat: AdaptiveModel::new(CATEGORY_ALPHABET),
        }
    }
}

fn encode_magnitude(
    enc: &mut SymbolEncoder,
    cat_model: &mut AdaptiveModel,
    bypass: &mut StaticModel,
    m: u32,
) -> Result<()> {
    let k = 31 - (m + 1).leading_zeros();
    if k as usize >= CATEGORY_ALPHABET {
        return Err(Error::Internal(format!("coefficient magnitude {m} out of range")));
    }
    enc.encode(cat_model, k);
    let rem = (m + 1) - (1 << k);
    for bit in (0..k).rev() {
        enc.encode_bit(bypass, rem >> bit & 1 == 1);
    }
    Ok(())
}

fn decode_magnitude(
    dec: &mut SymbolDecoder,
    cat_model: &mut AdaptiveModel,
    bypass: &mut StaticModel,
) -> Result<u32> {
    let k = dec.decode(cat_model)?;
    let mut rem = 0u32;
    for _ in 0..k {
        rem = rem << 1 | dec.decode_bit(bypass)? as u32;
    }
    Ok((1 << k) + rem - 1)
}

/// Entropy streams for all leaf levels plus their accounting.
#[derive(Debug, Clone)]
pub struct TextureStream {
    pub sections: Vec<Section>,
    pub stats: Vec<SectionStats>,
}

/// Atlas geometry of one leaf level, derivable from decoded geometry alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedLayout {
    pub level: u32,
    pub m: u32,
    pub grid_side: u32,
    pub leaf_count: usize,
}

impl PackedLayout {
    pub fn for_level(level: u32, m: u32, leaf_count: usize) -> PackedLayout {
        PackedLayout {
            level,
            m,
            grid_side: slot_grid_side(leaf_count),
            leaf_count,
        }
    }

    fn image_side(&self) -> u32 {
        self.grid_side * self.m
    }
}

fn encode_level(packed: &PackedTextureImage, qt: u8) -> Result<(Section, SectionStats)> {
    let step = quant_step(qt);
    let ycc = rgb_to_ycbcr(&packed.image);
    let planes: Vec<Plane> = (0..3).map(|c| Plane::from_image(&ycc, c)).collect();
    let bw = planes[0].w / 8;
    let bh = planes[0].h / 8;

    let mut enc = SymbolEncoder::new();
    let mut bypass = StaticModel::uniform(2);
    for plane in &planes {
        let blocks: Vec<[i32; 64]> = (0..bw * bh)
            .into_par_iter()
            .map(|i| quantize_block(&plane.block(i % bw, i / bw), step))
            .collect();
        let mut models = ChannelModels::new();
        let mut pred_dc = 0i32;
        for q in &blocks {
            encode_magnitude(
                &mut enc,
                &mut models.dc_cat,
                &mut bypass,
                fold_signed(q[0] - pred_dc),
            )?;
            pred_dc = q[0];
            let mut pos = 1;
            while pos < 64 {
                match q[pos..].iter().position(|&v| v != 0) {
                    None => {
                        enc.encode(&mut models.run, EOB);
                        break;
                    }
                    Some(run) => {
                        enc.encode(&mut models.run, 1 + run as u32);
                        encode_magnitude(
                            &mut enc,
                            &mut models.ac_cat,
                            &mut bypass,
                            fold_level(q[pos + run]),
                        )?;
                        pos += run + 1;
                    }
                }
            }
        }
    }

    let id = section_id(KIND_TEXTURE, packed.level);
    let symbols = enc.n_symbols;
    let estimate_bits = enc.est_bits;
    let bytes = enc.finish();
    let stats = SectionStats {
        id,
        bytes: bytes.len(),
        symbols,
        estimate_bits,
    };
    Ok((Section { id, bytes }, stats))
}

fn decode_level(section: &Section, qt: u8, layout: &PackedLayout) -> Result<PackedTextureImage> {
    let step = quant_step(qt);
    let side = layout.image_side() as usize;
    let padded = side.div_ceil(8) * 8;
    let bw = padded / 8;
    let bh = bw;

    let mut planes: Vec<Plane> = (0..3)
        .map(|_| Plane {
            w: padded,
            h: padded,
            data: vec![0.0; padded * padded],
        })
        .collect();

    let mut dec = SymbolDecoder::new(&section.bytes)?;
    let mut bypass = StaticModel::uniform(2);
    for plane in &mut planes {
        let mut models = ChannelModels::new();
        let mut pred_dc = 0i32;
        let mut blocks: Vec<[i32; 64]> = Vec::with_capacity(bw * bh);
        for _ in 0..bw * bh {
            let mut q = [0i32; 64];
            let d = unfold_signed(decode_magnitude(&mut dec, &mut models.dc_cat, &mut bypass)?);
            q[0] = pred_dc + d;
            pred_dc = q[0];
            let mut pos = 1;
            while pos < 64 {
                let sym = dec.decode(&mut models.run)?;
                if sym == EOB {
                    break;
                }
                pos += (sym - 1) as usize;
                if pos >= 64 {
                    return Err(Error::Stream(format!("zero run overflows block at {pos}")));
                }
                q[pos] =
                    unfold_level(decode_magnitude(&mut dec, &mut models.ac_cat, &mut bypass)?);
                pos += 1;
            }
            blocks.push(q);
        }
        let spatial: Vec<[f64; 64]> = blocks
            .par_iter()
            .map(|q| dequantize_block(q, step))
            .collect();
        for (i, block) in spatial.iter().enumerate() {
            plane.set_block(i % bw, i / bw, block);
        }
    }

    let mut ycc = ImageRgb::new(side as u32, side as u32);
    for y in 0..side {
        for x in 0..side {
            ycc.set_pixel(
                x as u32,
                y as u32,
                Vector3::new(
                    planes[0].data[y * padded + x] as f32,
                    planes[1].data[y * padded + x] as f32,
                    planes[2].data[y * padded + x] as f32,
                ),
            );
        }
    }
    Ok(PackedTextureImage {
        level: layout.level,
        m: layout.m,
        grid_side: layout.grid_side,
        leaf_count: layout.leaf_count,
        image: ycbcr_to_rgb(&ycc),
    })
}

/// Encodes one packed atlas per leaf level into texture sections.
pub fn encode_texture(images: &[PackedTextureImage], qt: u8) -> Result<TextureStream> {
    check_qt(qt)?;
    let mut sections = Vec::new();
    let mut stats = Vec::new();
    for packed in images {
        let (s, st) = encode_level(packed, qt)?;
        sections.push(s);
        stats.push(st);
    }
    Ok(TextureStream { sections, stats })
}

/// Decodes texture sections back to packed atlases, one per layout.
pub fn decode_texture(
    sections: &[Section],
    qt: u8,
    layouts: &[PackedLayout],
) -> Result<Vec<PackedTextureImage>> {
    check_qt(qt)?;
    let mut out = Vec::new();
    for layout in layouts {
        let id = section_id(KIND_TEXTURE, layout.level);
        let section = sections
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Format(format!("missing texture section for level {}", layout.level)))?;
        out.push(decode_level(section, qt, layout)?);
    }
    Ok(out)
}

/// Writes one lossless PNG per atlas plus `manifest.txt` (one line per
/// level: level, patch side, grid side, leaf count).
pub fn export_external(images: &[PackedTextureImage], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for packed in images {
        packed
            .image
            .save_png(&dir.join(format!("texture_l{}.png", packed.level)))?;
        manifest.push_str(&format!(
            "{} {} {} {}\n",
            packed.level, packed.m, packed.grid_side, packed.leaf_count
        ));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reads externally (re)coded atlases back, validating the manifest and
/// image dimensions against the layouts implied by decoded geometry.
pub fn import_external(dir: &Path, layouts: &[PackedLayout]) -> Result<Vec<PackedTextureImage>> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", manifest_path.display())))?;
    let mut listed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!("manifest line {} malformed: {line:?}", i + 1)));
        }
        let parse = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Format(format!("manifest line {}: bad number {s:?}", i + 1)))
        };
        listed.push(PackedLayout {
            level: parse(fields[0])? as u32,
            m: parse(fields[1])? as u32,
            grid_side: parse(fields[2])? as u32,
            leaf_count: parse(fields[3])? as usize,
        });
    }
    if listed != layouts {
        return Err(Error::Format(format!(
            "manifest layouts {listed:?} disagree with geometry {layouts:?}"
        )));
    }
    let mut out = Vec::new();
    for layout in layouts {
        let path = dir.join(format!("texture_l{}.png", layout.level));
        let image = ImageRgb::load_png(&path)?;
        let side = layout.image_side();
        if image.width != side || image.height != side {
            return Err(Error::Format(format!(
                "{}: {}x{} but geometry implies {side}x{side}",
                path.display(),
                image.width,
                image.height
            )));
        }
        out.push(PackedTextureImage {
            level: layout.level,
            m: layout.m,
            grid_side: layout.grid_side,
            leaf_count: layout.leaf_count,
            image,
        });
    }
    Ok(out)
}
