//! Binary PPM (P6) and PGM (P5) encoding for frames and masks.

use std::fs;
use std::path::Path;

use crate::error::{MocError, Result};
use crate::geometry::Frame;

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.data().iter().map(|&v| to_byte(v)));
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Frame> {
    let (magic, width, height, body) = parse_header(bytes, path)?;
    if magic != "P6" {
        return Err(parse_err(path, format!("expected P6, found {magic}")));
    }
    if body.len() != width * height * 3 {
        return Err(parse_err(
            path,
            format!("expected {} pixel bytes, found {}", width * height * 3, body.len()),
        ));
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Frame::new(height, width, data)
}

pub fn write_ppm(path: &Path, frame: &Frame) -> Result<()> {
    fs::write(path, encode_ppm(frame)).map_err(|e| MocError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| MocError::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// Writes a binary mask as P5 with 0 / 255 intensities.
pub fn write_pgm_mask(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    fs::write(path, out).map_err(|e| MocError::io(path, e))
}

pub fn read_pgm_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = fs::read(path).map_err(|e| MocError::io(path, e))?;
    let (magic, width, height, body) = parse_header(&bytes, path)?;
    if magic != "P5" || body.len() != width * height {
        return Err(parse_err(path, "malformed P5 mask".into()));
    }
    Ok((height, width, body.iter().map(|&b| b > 127).collect()))
}

#[inline]
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_err(path: &Path, msg: String) -> MocError {
    MocError::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg,
    }
}

/// Splits a netpbm header into (magic, width, height, pixel bytes).
fn parse_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(String, usize, usize, &'a [u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, "truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(path, format!("bad header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(parse_err(path, format!("unsupported maxval {maxval}")));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    Ok((fields[0].clone(), w, h, body))
}
