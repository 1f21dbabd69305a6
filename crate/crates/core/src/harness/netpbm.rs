//! Binary PGM (P5) and PPM (P6) with 8- or 16-bit samples; 16-bit samples
//! are big-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Row-major, channels interleaved.
    pub samples: Vec<u16>,
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        for &s in &img.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(img.samples.iter().map(|&s| s as u8));
    }
    out
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

/// 16-bit grayscale image.
pub fn gray16(width: usize, height: usize, samples: Vec<u16>) -> Image {
    Image {
        width,
        height,
        channels: 1,
        maxval: u16::MAX,
        samples,
    }
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}

fn header_token(bytes: &[u8], pos: &mut usize) -> std::result::Result<String, String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err("truncated header".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic `{other}`")),
    };
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        let tok = header_token(bytes, &mut pos)?;
        tok.parse().map_err(|_| format!("bad {what} `{tok}`"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("invalid header {width}×{height}, maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let n = width * height * channels;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() < need {
        return Err(format!("payload has {} bytes, expected {need}", payload.len()));
    }
    let samples = if wide {
        payload[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        payload[..need].iter().map(|&b| b as u16).collect()
    };
    Ok(Image {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

/// Maps depth linearly from `[min, max]` onto `[0, 65535]`, clamping outside.
pub fn normalize_depth(values: &[f64], min: f64, max: f64) -> Vec<u16> {
    values
        .iter()
        .map(|&d| {
            let t = ((d - min) / (max - min)).clamp(0.0, 1.0);
            (t * 65535.0).round() as u16
        })
        .collect()
}
