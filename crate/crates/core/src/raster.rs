//! Raster encodings: label masks as PGM or raw u16 grids, RGB images as PNG
//! (PPM and PGM are accepted as inputs too).

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, LabelMask, RgbImage};

/// Size of the raw u16 mask header: width u32, height u32, little-endian.
pub const U16_HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskFormat {
    /// 8-bit binary PGM (`P5`), used while labels fit in a byte.
    Pgm,
    /// Raw little-endian u16 grid behind an 8-byte dimension header.
    U16,
}

impl MaskFormat {
    pub fn for_labels(num_labels: u32) -> Result<Self> {
        match num_labels {
            0..=255 => Ok(MaskFormat::Pgm),
            256..=65536 => Ok(MaskFormat::U16),
            n => Err(Error::Raster(format!("{n} labels do not fit in 16 bits"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            MaskFormat::Pgm => "pgm",
            MaskFormat::U16 => "u16",
        }
    }
}

/// Encodes `mask` in the smallest format that holds its labels.
pub fn encode_label_mask(mask: &LabelMask) -> Result<(MaskFormat, Vec<u8>)> {
    let format = MaskFormat::for_labels(mask.num_labels())?;
    let (w, h) = (mask.width(), mask.height());
    let bytes = match format {
        MaskFormat::Pgm => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend(mask.labels().iter().map(|&l| l as u8));
            out
        }
        MaskFormat::U16 => {
            let mut out = Vec::with_capacity(U16_HEADER_LEN + 2 * w * h);
            out.extend_from_slice(&(w as u32).to_le_bytes());
            out.extend_from_slice(&(h as u32).to_le_bytes());
            for &l in mask.labels() {
                out.extend_from_slice(&(l as u16).to_le_bytes());
            }
            out
        }
    };
    Ok((format, bytes))
}

/// Binary mask as an 8-bit PGM with members at 255.
pub fn encode_binary_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Decodes a PGM (8- or 16-bit) or raw u16 label grid. `num_labels` is one
/// past the largest label present.
pub fn decode_label_mask(bytes: &[u8]) -> Result<LabelMask> {
    if bytes.starts_with(b"P5") {
        let (w, h, values) = decode_pgm(bytes)?;
        return LabelMask::from_labels(w, h, values);
    }
    if bytes.len() < U16_HEADER_LEN {
        return Err(Error::Raster(format!(
            "{} bytes is too short for a label mask",
            bytes.len()
        )));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[U16_HEADER_LEN..];
    if w == 0 || h == 0 || body.len() != 2 * w * h {
        return Err(Error::Raster(format!(
            "raw u16 mask header says {w}x{h} but carries {} payload bytes",
            body.len()
        )));
    }
    let labels = body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
        .collect();
    LabelMask::from_labels(w, h, labels)
}

pub fn read_label_mask(path: &Path) -> Result<LabelMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode_label_mask(&bytes).map_err(|e| e.in_file(path))
}

/// Header fields of a binary PNM file plus the offset of its payload.
struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader> {
    if bytes.len() < 2 {
        return Err(Error::Raster("missing PNM magic".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Raster(format!("malformed PNM header at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Raster(format!("malformed PNM header at byte {pos}")));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Raster(format!(
            "unsupported PNM geometry {width}x{height} maxval {maxval}"
        )));
    }
    Ok(PnmHeader {
        magic,
        width,
        height,
        maxval: maxval as u32,
        data_offset: pos + 1,
    })
}

/// Samples of a PNM payload; 16-bit samples are big-endian.
fn pnm_samples(bytes: &[u8], header: &PnmHeader, channels: usize) -> Result<Vec<u32>> {
    let count = header.width * header.height * channels;
    let wide = header.maxval > 255;
    let needed = count * if wide { 2 } else { 1 };
    let body = &bytes[header.data_offset..];
    if body.len() < needed {
        return Err(Error::Raster(format!(
            "PNM payload has {} bytes, expected {needed}",
            body.len()
        )));
    }
    Ok(if wide {
        body[..needed]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    } else {
        body[..needed].iter().map(|&b| b as u32).collect()
    })
}

fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u32>)> {
    let header = parse_pnm_header(bytes)?;
    if &header.magic != b"P5" {
        return Err(Error::Raster("not a binary PGM".into()));
    }
    let values = pnm_samples(bytes, &header, 1)?;
    Ok((header.width, header.height, values))
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(&image.data)
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        png::ColorType::Indexed => {
            return Err(Error::Png("indexed colour was not expanded".into()))
        }
    };
    RgbImage::new(w, h, data)
}

fn scale_to_byte(v: u32, maxval: u32) -> u8 {
    ((v.min(maxval) * 255 + maxval / 2) / maxval) as u8
}

/// Decodes PNG, binary PPM (`P6`) or binary PGM (`P5`, expanded to grey RGB).
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.starts_with(b"\x89PNG") {
        return decode_png(bytes);
    }
    if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        let header = parse_pnm_header(bytes)?;
        let channels = if &header.magic == b"P6" { 3 } else { 1 };
        let samples = pnm_samples(bytes, &header, channels)?;
        let data = samples
            .iter()
            .flat_map(|&v| std::iter::repeat_n(scale_to_byte(v, header.maxval), 4 - channels))
            .collect();
        return RgbImage::new(header.width, header.height, data);
    }
    Err(Error::Raster(
        "unrecognized image format (expected PNG, PPM or PGM)".into(),
    ))
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode_image(&bytes).map_err(|e| e.in_file(path))
}

/// Greyscale rendition of a label mask, useful as a backdrop when no source
/// image is at hand.
pub fn label_backdrop(mask: &LabelMask) -> RgbImage {
    let data = mask
        .labels()
        .iter()
        .flat_map(|&l| {
            let g = 64 + ((l * 37) % 128) as u8;
            [g, g, g]
        })
        .collect();
    RgbImage::new(mask.width(), mask.height(), data).expect("dimensions come from a valid mask")
}
