//! Label masks from proposals, point-based region selection, and overlays.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::merge::ProposalList;
use crate::resample::{blend_rows, sample_row, taps};

/// Integer-labeled segmentation, row-major, labels in `0..num_labels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    num_labels: u32,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u32>, num_labels: u32) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a {width}x{height} mask",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_labels) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} not below num_labels {num_labels}"
            )));
        }
        Ok(LabelMask {
            width,
            height,
            labels,
            num_labels,
        })
    }

    /// Wraps a raster, taking `num_labels` as one past the largest value.
    pub fn from_labels(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        let num_labels = labels.iter().max().map_or(0, |&m| m + 1);
        Self::new(width, height, labels, num_labels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_labels(&self) -> u32 {
        self.num_labels
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel counts per label value.
    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.num_labels as usize];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Pixels carrying `label`.
    pub fn region(&self, label: u32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| l == label).collect(),
        }
    }

    /// Swaps rows and columns.
    pub fn transposed(&self) -> LabelMask {
        let mut labels = vec![0; self.labels.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                labels[x * self.height + y] = self.get(x, y);
            }
        }
        LabelMask {
            width: self.height,
            height: self.width,
            labels,
            num_labels: self.num_labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn transposed(&self) -> BinaryMask {
        let mut bits = vec![false; self.bits.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                bits[x * self.height + y] = self.get(x, y);
            }
        }
        BinaryMask {
            width: self.height,
            height: self.width,
            bits,
        }
    }
}

/// Upsamples every proposal to `out_width x out_height` and labels each pixel
/// with the index of the largest value; ties go to the lowest index.
pub fn nms_mask(
    proposals: &ProposalList,
    out_width: usize,
    out_height: usize,
) -> Result<LabelMask> {
    if proposals.is_empty() {
        return Err(Error::Empty {
            what: "proposal list",
        });
    }
    let t = proposals.resolution();
    if out_width < t || out_height < t {
        return Err(Error::InvalidArgument(format!(
            "output {out_width}x{out_height} is smaller than proposal resolution {t}"
        )));
    }
    let ys = taps(t, out_height);
    let xs = taps(t, out_width);
    let mut labels = vec![0u32; out_width * out_height];
    labels
        .par_chunks_mut(out_width)
        .zip(ys.par_iter())
        .for_each(|(out, ty)| {
            let mut best = vec![f32::NEG_INFINITY; out_width];
            let mut row = vec![0.0f64; t];
            for (k, map) in proposals.maps().enumerate() {
                blend_rows(map, t, *ty, &mut row);
                for ((b, o), tx) in best.iter_mut().zip(out.iter_mut()).zip(&xs) {
                    let v = sample_row(&row, *tx) as f32;
                    if v > *b {
                        *b = v;
                        *o = k as u32;
                    }
                }
            }
        });
    LabelMask::new(out_width, out_height, labels, proposals.len() as u32)
}

/// All pixels sharing the label found at `(x, y)`.
pub fn select_region(mask: &LabelMask, point: (usize, usize)) -> Result<BinaryMask> {
    let (x, y) = point;
    if x >= mask.width || y >= mask.height {
        return Err(Error::InvalidArgument(format!(
            "point ({x}, {y}) outside {}x{} mask",
            mask.width, mask.height
        )));
    }
    Ok(mask.region(mask.get(x, y)))
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

pub const PREDICTED_BOUNDARY: [u8; 3] = [0, 255, 0];
pub const TRUTH_BOUNDARY: [u8; 3] = [255, 0, 0];

const PALETTE: [[u8; 3]; 12] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [174, 199, 232],
    [255, 187, 120],
];

/// Fill color for a label, cycling through a fixed palette.
pub fn palette_color(label: u32) -> [u8; 3] {
    PALETTE[label as usize % PALETTE.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayStyle {
    /// Opacity of the per-label fill, 0 disables fills.
    pub fill_opacity: f32,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle { fill_opacity: 0.0 }
    }
}

/// A pixel is on a boundary when its right or lower neighbour differs, which
/// yields one-pixel lines.
fn boundary<T: PartialEq>(
    width: usize,
    height: usize,
    at: impl Fn(usize, usize) -> T,
) -> Vec<bool> {
    let mut out = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let here = at(x, y);
            let right = x + 1 < width && at(x + 1, y) != here;
            let down = y + 1 < height && at(x, y + 1) != here;
            out[y * width + x] = right || down;
        }
    }
    out
}

/// Draws region boundaries of `mask` in green over `image`, and the boundary
/// of `truth` (when given) in red underneath them.
pub fn render_overlay(
    image: &RgbImage,
    mask: &LabelMask,
    truth: Option<&BinaryMask>,
    style: &OverlayStyle,
) -> Result<RgbImage> {
    let (w, h) = (mask.width(), mask.height());
    if image.width != w || image.height != h {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs mask {w}x{h}",
            image.width, image.height
        )));
    }
    if let Some(t) = truth {
        if t.width() != w || t.height() != h {
            return Err(Error::DimensionMismatch(format!(
                "truth {}x{} vs mask {w}x{h}",
                t.width(),
                t.height()
            )));
        }
    }
    if !(0.0..=1.0).contains(&style.fill_opacity) {
        return Err(Error::InvalidArgument(format!(
            "fill opacity {} outside [0, 1]",
            style.fill_opacity
        )));
    }

    let mut out = image.clone();
    if style.fill_opacity > 0.0 {
        let a = style.fill_opacity;
        for y in 0..h {
            for x in 0..w {
                let c = palette_color(mask.get(x, y));
                let p = out.pixel(x, y);
                let mut blended = [0u8; 3];
                for ch in 0..3 {
                    blended[ch] = ((1.0 - a) * p[ch] as f32 + a * c[ch] as f32).round() as u8;
                }
                out.put(x, y, blended);
            }
        }
    }
    if let Some(t) = truth {
        for (i, _) in boundary(w, h, |x, y| t.get(x, y))
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
        {
            out.put(i % w, i / w, TRUTH_BOUNDARY);
        }
    }
    for (i, _) in boundary(w, h, |x, y| mask.get(x, y))
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
    {
        out.put(i % w, i / w, PREDICTED_BOUNDARY);
    }
    Ok(out)
}
