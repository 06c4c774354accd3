//! Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};

/// Decoded 8-bit image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Validation(format!("unsupported channel count {}", channels)));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Validation(format!(
                "{}x{}x{} image wants {} bytes, got {}",
                width,
                height,
                channels,
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(RawImage { width, height, channels, pixels })
    }
}

/// Read a binary PGM/PPM file; max value must be 255.
pub fn read_pnm(path: &Path) -> Result<RawImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::Decode { path: path.to_path_buf(), msg: msg.to_string() };
    if bytes.len() < 2 {
        return Err(fail("file too short for a PNM header"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(fail("not a binary PGM (P5) or PPM (P6) file")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = parse_header_int(&bytes, &mut pos).ok_or_else(|| fail("truncated header"))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(fail(&format!("unsupported max value {}", maxval)));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail("missing raster separator")),
    }
    let expected = width * height * channels;
    let raster = bytes
        .get(pos..pos + expected)
        .ok_or_else(|| fail("truncated raster data"))?;
    RawImage::new(width, height, channels, raster.to_vec())
}

/// Skip whitespace and `#` comments, then parse one decimal integer.
fn parse_header_int(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        match bytes.get(*pos)? {
            b if b.is_ascii_whitespace() => *pos += 1,
            b'#' => {
                while *bytes.get(*pos)? != b'\n' {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

pub fn write_pnm(path: &Path, image: &RawImage) -> Result<()> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Validation(format!("cannot encode {} channels as PNM", c))),
    };
    let mut out = format!("{}\n{} {}\n255\n", magic, image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
