//! Morton (z-order) indexing for octree coordinates and 2D patch packing.
//!
//! The per-level child digit is `(x_bit << 2) | (y_bit << 1) | z_bit`, with
//! the most significant octree level first. Sibling children are therefore
//! ascending in the child digit, and sorting nodes of one level by Morton
//! index yields the traversal order used throughout the codec.

use crate::error::{Error, Result};

/// Maximum supported tree depth; 3 * 21 = 63 bits fit a `u64` index.
pub const MAX_LEVEL: u32 = 21;

/// Spread the low 21 bits of `x` so bit `k` lands at bit `3k`.
#[inline]
fn spread(x: u64) -> u64 {
    let mut x = x & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f00000000ffff;
    x = (x | (x << 16)) & 0x1f0000ff0000ff;
    x = (x | (x << 8)) & 0x100f00f00f00f00f;
    x = (x | (x << 4)) & 0x10c30c30c30c30c3;
    x = (x | (x << 2)) & 0x1249249249249249;
    x
}

#[inline]
fn compact(x: u64) -> u32 {
    let mut x = x & 0x1249249249249249;
    x = (x | (x >> 2)) & 0x10c30c30c30c30c3;
    x = (x | (x >> 4)) & 0x100f00f00f00f00f;
    x = (x | (x >> 8)) & 0x1f0000ff0000ff;
    x = (x | (x >> 16)) & 0x1f00000000ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x as u32
}

/// Encode octree coordinates at `level` into a Morton index.
pub fn morton_encode(coords: [u32; 3], level: u32) -> Result<u64> {
    if level > MAX_LEVEL || coords.iter().any(|&c| (c as u64) >= (1u64 << level)) {
        return Err(Error::CoordsOutOfRange { coords, level });
    }
    Ok(morton_encode_unchecked(coords))
}

/// Interleave without range validation; callers guarantee coords fit.
#[inline]
pub fn morton_encode_unchecked(coords: [u32; 3]) -> u64 {
    (spread(coords[0] as u64) << 2) | (spread(coords[1] as u64) << 1) | spread(coords[2] as u64)
}

/// Decode a Morton index back to coordinates at `level`.
pub fn morton_decode(index: u64, level: u32) -> Result<[u32; 3]> {
    if level > MAX_LEVEL || (level < MAX_LEVEL && index >= (1u64 << (3 * level))) {
        return Err(Error::CoordsOutOfRange {
            coords: [u32::MAX; 3],
            level,
        });
    }
    Ok(morton_decode_unchecked(index))
}

#[inline]
pub fn morton_decode_unchecked(index: u64) -> [u32; 3] {
    [compact(index >> 2), compact(index >> 1), compact(index)]
}

/// De-interleave a 2D Morton rank into `(col, row)`; `col` takes the even
/// bits. Used to place patch slot `k` inside a packed texture image.
#[inline]
pub fn morton2_decode(rank: u32) -> (u32, u32) {
    #[inline]
    fn compact2(mut x: u32) -> u32 {
        x &= 0x5555_5555;
        x = (x | (x >> 1)) & 0x3333_3333;
        x = (x | (x >> 2)) & 0x0f0f_0f0f;
        x = (x | (x >> 4)) & 0x00ff_00ff;
        x = (x | (x >> 8)) & 0x0000_ffff;
        x
    }
    (compact2(rank), compact2(rank >> 1))
}

/// Inverse of [`morton2_decode`].
#[inline]
pub fn morton2_encode(col: u32, row: u32) -> u32 {
    #[inline]
    fn spread2(mut x: u32) -> u32 {
        x &= 0x0000_ffff;
        x = (x | (x << 8)) & 0x00ff_00ff;
        x = (x | (x << 4)) & 0x0f0f_0f0f;
        x = (x | (x << 2)) & 0x3333_3333;
        x = (x | (x << 1)) & 0x5555_5555;
        x
    }
    spread2(col) | (spread2(row) << 1)
}
