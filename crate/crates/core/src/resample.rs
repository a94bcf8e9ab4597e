//! Bilinear upsampling with half-pixel sample centers.
//!
//! Output pixel `p` samples source coordinate `(p + 0.5) * src / dst - 0.5`,
//! clamped to `[0, src - 1]`. Every output value is a convex combination of
//! at most four source values, so the output range never exceeds the input's.

use crate::error::{Error, Result};

/// Precomputed sampling position along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let last = (src - 1) as f64;
    (0..dst)
        .map(|p| {
            let coord = ((p as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, last);
            let lo = coord.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: coord - lo as f64,
            }
        })
        .collect()
}

#[inline(always)]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Interpolates one source row pair into `row` (length `src_w`), the vertical
/// half of the separable filter.
#[inline]
pub(crate) fn blend_rows<T: Copy + Into<f64>>(map: &[T], src_w: usize, ty: Tap, row: &mut [f64]) {
    let top = &map[ty.lo * src_w..(ty.lo + 1) * src_w];
    let bottom = &map[ty.hi * src_w..(ty.hi + 1) * src_w];
    for ((out, &a), &b) in row.iter_mut().zip(top).zip(bottom) {
        *out = lerp(a.into(), b.into(), ty.frac);
    }
}

#[inline(always)]
pub(crate) fn sample_row(row: &[f64], tx: Tap) -> f64 {
    lerp(row[tx.lo], row[tx.hi], tx.frac)
}

/// Resizes a row-major `src_h x src_w` map to `dst_h x dst_w`.
/// Both target dimensions must be at least the source's.
pub fn upsample_bilinear_rect(
    map: &[f32],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Result<Vec<f32>> {
    if src_w == 0 || src_h == 0 {
        return Err(Error::InvalidArgument("empty source map".into()));
    }
    if map.len() != src_w * src_h {
        return Err(Error::DimensionMismatch(format!(
            "map has {} values, expected {src_w}x{src_h}",
            map.len()
        )));
    }
    if dst_w < src_w || dst_h < src_h {
        return Err(Error::InvalidArgument(format!(
            "target {dst_w}x{dst_h} is smaller than source {src_w}x{src_h}"
        )));
    }
    let mut out = vec![0.0f32; dst_w * dst_h];
    upsample_into(map, src_w, src_h, dst_w, dst_h, &mut out);
    Ok(out)
}

/// Square convenience wrapper: `w x w` to `target x target`.
pub fn upsample_bilinear(map: &[f32], w: usize, target: usize) -> Result<Vec<f32>> {
    upsample_bilinear_rect(map, w, w, target, target)
}

/// Unchecked core shared by the public wrappers and the aggregation loop.
pub(crate) fn upsample_into(
    map: &[f32],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
    out: &mut [f32],
) {
    let ys = taps(src_h, dst_h);
    let xs = taps(src_w, dst_w);
    let mut row = vec![0.0f64; src_w];
    for (ty, out_row) in ys.iter().zip(out.chunks_exact_mut(dst_w)) {
        blend_rows(map, src_w, *ty, &mut row);
        for (tx, o) in xs.iter().zip(out_row.iter_mut()) {
            *o = sample_row(&row, *tx) as f32;
        }
    }
}
