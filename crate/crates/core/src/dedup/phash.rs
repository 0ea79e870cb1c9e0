//! Reference 64-bit perceptual hash.
//!
//! The recipe is fixed, down to f64 evaluation order, so that independent
//! implementations agree bit-for-bit:
//!
//! 1. convert 8-bit RGB to luma, `0.299 R + 0.587 G + 0.114 B`, in f64;
//! 2. resize to 32x32 by exact area averaging: each output cell is the
//!    overlap-weighted sum of covered pixels (accumulated in row-major
//!    pixel order) divided by the cell area;
//! 3. orthonormal 2-D DCT-II evaluated separably, ascending-index
//!    accumulation: `B[x][v] = sum_y A[x][y] * T[v][y]` then
//!    `C[u][v] = sum_x T[u][x] * B[x][v]`, with
//!    `T[k][n] = s(k) * cos(PI * (2n + 1) * k / (2N))`, `s(0) = sqrt(1/N)`,
//!    `s(k>0) = sqrt(2/N)`;
//! 4. select 64 coefficients: row 0 columns 1..=8 (the DC term is excluded
//!    and the row extends one column to compensate), then rows 1..=7
//!    columns 0..=7, scanned row-major;
//! 5. bit `k` of the hash is 1 iff coefficient `k` is strictly greater than
//!    the median of the 64 (mean of the two middle order statistics).

use std::f64::consts::PI;
use std::path::Path;

use image::{DynamicImage, RgbImage};
use thiserror::Error;

const GRID: usize = 32;

/// 64-bit perceptual image fingerprint, compared by Hamming distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PHash64(pub u64);

impl PHash64 {
    /// Number of differing bits between two hashes.
    pub fn hamming(self, other: PHash64) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

#[derive(Debug, Error)]
pub enum PHashError {
    #[error("image has zero dimension ({width}x{height})")]
    ZeroDimension { width: u32, height: u32 },
    #[error("pixel buffer length {len} does not match {width}x{height} RGB")]
    BufferMismatch { len: usize, width: u32, height: u32 },
    #[error("failed to decode image {uri}: {source}")]
    Undecodable {
        uri: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to read image {uri}: {source}")]
    Unreadable {
        uri: String,
        #[source]
        source: std::io::Error,
    },
}

/// Hash a raw 8-bit RGB buffer laid out row-major.
pub fn phash_rgb8(pixels: &[u8], width: u32, height: u32) -> Result<PHash64, PHashError> {
    if width == 0 || height == 0 {
        return Err(PHashError::ZeroDimension { width, height });
    }
    let expected = width as usize * height as usize * 3;
    if pixels.len() != expected {
        return Err(PHashError::BufferMismatch { len: pixels.len(), width, height });
    }
    let luma = to_luma(pixels, width as usize, height as usize);
    let small = area_resize(&luma, width as usize, height as usize);
    let coeffs = dct2d(&small);
    Ok(hash_from_coefficients(&selected_coefficients(&coeffs)))
}

/// Hash a decoded image.
pub fn phash_image(img: &DynamicImage) -> Result<PHash64, PHashError> {
    let rgb: RgbImage = img.to_rgb8();
    phash_rgb8(rgb.as_raw(), rgb.width(), rgb.height())
}

/// Decode and hash an image file (PNG, JPEG, or WebP).
pub fn phash_path(path: impl AsRef<Path>) -> Result<PHash64, PHashError> {
    let path = path.as_ref();
    let uri = path.display().to_string();
    let bytes = std::fs::read(path)
        .map_err(|source| PHashError::Unreadable { uri: uri.clone(), source })?;
    let img = image::load_from_memory(&bytes)
        .map_err(|source| PHashError::Undecodable { uri, source })?;
    phash_image(&img)
}

fn to_luma(pixels: &[u8], width: usize, height: usize) -> Vec<f64> {
    let mut luma = Vec::with_capacity(width * height);
    for px in pixels.chunks_exact(3) {
        luma.push(0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2]));
    }
    debug_assert_eq!(luma.len(), width * height);
    luma
}

/// Exact box-filter resize to GRID x GRID: each output cell averages the
/// input pixels it covers, weighting partially-covered pixels by overlap.
fn area_resize(luma: &[f64], width: usize, height: usize) -> Vec<f64> {
    let sx = width as f64 / GRID as f64;
    let sy = height as f64 / GRID as f64;
    let mut out = vec![0.0; GRID * GRID];
    for oy in 0..GRID {
        let y0 = oy as f64 * sy;
        let y1 = y0 + sy;
        let iy_start = y0.floor() as usize;
        let iy_end = (y1.ceil() as usize).min(height);
        for ox in 0..GRID {
            let x0 = ox as f64 * sx;
            let x1 = x0 + sx;
            let ix_start = x0.floor() as usize;
            let ix_end = (x1.ceil() as usize).min(width);
            let mut acc = 0.0;
            for iy in iy_start..iy_end {
                let wy = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                if wy == 0.0 {
                    continue;
                }
                let row = &luma[iy * width..(iy + 1) * width];
                for (ix, &value) in row.iter().enumerate().take(ix_end).skip(ix_start) {
                    let wx = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                    acc += value * wx * wy;
                }
            }
            out[oy * GRID + ox] = acc / (sx * sy);
        }
    }
    out
}

/// Orthonormal DCT-II basis matrix: T[k][n] = s(k) cos(pi (2n+1) k / (2N)).
fn dct_matrix() -> Vec<f64> {
    let n = GRID as f64;
    let mut t = vec![0.0; GRID * GRID];
    for k in 0..GRID {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for j in 0..GRID {
            t[k * GRID + j] =
                scale * ((PI * (2.0 * j as f64 + 1.0) * k as f64) / (2.0 * n)).cos();
        }
    }
    t
}

/// Separable 2-D DCT-II: C = T * A * T^t.
fn dct2d(a: &[f64]) -> Vec<f64> {
    let t = dct_matrix();
    // B[x][v] = sum_y A[x][y] * T[v][y]
    let mut b = vec![0.0; GRID * GRID];
    for x in 0..GRID {
        for v in 0..GRID {
            let mut acc = 0.0;
            for y in 0..GRID {
                acc += a[x * GRID + y] * t[v * GRID + y];
            }
            b[x * GRID + v] = acc;
        }
    }
    // C[u][v] = sum_x T[u][x] * B[x][v]
    let mut c = vec![0.0; GRID * GRID];
    for u in 0..GRID {
        for v in 0..GRID {
            let mut acc = 0.0;
            for x in 0..GRID {
                acc += t[u * GRID + x] * b[x * GRID + v];
            }
            c[u * GRID + v] = acc;
        }
    }
    c
}

fn selected_coefficients(c: &[f64]) -> [f64; 64] {
    let mut out = [0.0; 64];
    let mut k = 0;
    for col in 1..=8 {
        out[k] = c[col];
        k += 1;
    }
    for row in 1..=7 {
        for col in 0..=7 {
            out[k] = c[row * GRID + col];
            k += 1;
        }
    }
    debug_assert_eq!(k, 64);
    out
}

fn hash_from_coefficients(coeffs: &[f64; 64]) -> PHash64 {
    let mut sorted = *coeffs;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("DCT coefficients are finite"));
    let median = (sorted[31] + sorted[32]) / 2.0;
    let mut bits = 0u64;
    for (k, &coeff) in coeffs.iter().enumerate() {
        if coeff > median {
            bits |= 1 << k;
        }
    }
    PHash64(bits)
}
