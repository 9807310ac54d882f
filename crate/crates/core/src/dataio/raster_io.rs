//! PFM float maps, binary PPM and per-view buffer directories.

use std::path::Path;

use crate::campose::PoseSet;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Camera file of a views directory.
pub const CAMERAS_FILE: &str = "cameras.json";

/// Float image with 1 (`Pf`) or 3 (`PF`) channels, rows top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("PFM needs 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height}x{channels} map",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn from_f64(width: usize, height: usize, channels: usize, data: &[f64]) -> Result<Self> {
        Self::new(width, height, channels, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Little-endian PFM (scale −1), rows stored bottom to top.
pub fn write_pfm(map: &FloatMap, path: &Path) -> Result<()> {
    let tag = if map.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    let row = map.width * map.channels;
    for y in (0..map.height).rev() {
        for v in &map.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Splits the whitespace-separated header tokens off the front of `bytes`.
/// Returns the tokens and the offset of the raster. `#` comments are
/// skipped; exactly one whitespace byte ends the last token.
fn header_tokens(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(path, format!("byte {i}"), "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::parse(path, format!("byte {i}"), "missing raster"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str, offset: usize, path: &Path) -> Result<usize> {
    tok.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::parse(path, format!("byte {offset}"), format!("bad dimension '{tok}'")))
}

pub fn read_pfm(path: &Path) -> Result<FloatMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tok, start) = header_tokens(&bytes, 4, path)?;
    let channels = match tok[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::parse(path, "byte 0", format!("bad magic '{other}'"))),
    };
    let width = parse_dim(&tok[1], 3, path)?;
    let height = parse_dim(&tok[2], 3, path)?;
    let scale: f64 = tok[3]
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| Error::parse(path, "header", format!("bad scale '{}'", tok[3])))?;
    let n = width * height * channels;
    let body = &bytes[start..];
    if body.len() != 4 * n {
        return Err(Error::parse(
            path,
            format!("byte {}", start + body.len().min(4 * n)),
            format!("expected {} raster bytes, found {}", 4 * n, body.len()),
        ));
    }
    let little = scale < 0.0;
    let row = width * channels;
    let mut data = vec![0.0f32; n];
    for (k, c) in body.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (k / row, k % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    FloatMap::new(width, height, channels, data)
}

/// Binary P6, each value mapped to `round(255·clamp(v, 0, 1))`.
pub fn write_ppm(img: &ImageBuffer, path: &Path) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.rgb.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a P6 file into the rgb channel (value/maxval); mask is zero and
/// the geometric channels absent.
pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tok, start) = header_tokens(&bytes, 4, path)?;
    if tok[0] != "P6" {
        return Err(Error::parse(path, "byte 0", format!("bad magic '{}'", tok[0])));
    }
    let width = parse_dim(&tok[1], 3, path)?;
    let height = parse_dim(&tok[2], 3, path)?;
    let maxval = parse_dim(&tok[3], 3, path)?;
    if maxval > 255 {
        return Err(Error::parse(path, "header", format!("16-bit maxval {maxval} unsupported")));
    }
    let n = 3 * width * height;
    let body = &bytes[start..];
    if body.len() != n {
        return Err(Error::parse(
            path,
            format!("byte {}", start + body.len().min(n)),
            format!("expected {n} raster bytes, found {}", body.len()),
        ));
    }
    let mut img = ImageBuffer::filled(width, height, [0.0; 3]);
    for (d, &b) in img.rgb.iter_mut().zip(body) {
        *d = b as f64 / maxval as f64;
    }
    Ok(img)
}

/// Writes `<stem>.ppm`, `<stem>_mask.pfm` and, when present,
/// `<stem>_depth.pfm` and `<stem>_normal.pfm` into `dir`.
pub fn write_view(img: &ImageBuffer, dir: &Path, stem: &str) -> Result<()> {
    let (w, h) = (img.width, img.height);
    write_ppm(img, &dir.join(format!("{stem}.ppm")))?;
    write_pfm(&FloatMap::from_f64(w, h, 1, &img.mask)?, &dir.join(format!("{stem}_mask.pfm")))?;
    if let Some(d) = &img.depth {
        write_pfm(&FloatMap::from_f64(w, h, 1, d)?, &dir.join(format!("{stem}_depth.pfm")))?;
    }
    if let Some(n) = &img.normal {
        write_pfm(&FloatMap::from_f64(w, h, 3, n)?, &dir.join(format!("{stem}_normal.pfm")))?;
    }
    Ok(())
}

/// Reads what [`write_view`] wrote; depth and normals are optional.
pub fn read_view(dir: &Path, stem: &str) -> Result<ImageBuffer> {
    let mut img = read_ppm(&dir.join(format!("{stem}.ppm")))?;
    let load = |suffix: &str, channels: usize| -> Result<Option<Vec<f64>>> {
        let p = dir.join(format!("{stem}_{suffix}.pfm"));
        if !p.exists() {
            return Ok(None);
        }
        let m = read_pfm(&p)?;
        if m.width != img.width || m.height != img.height || m.channels != channels {
            return Err(Error::DimensionMismatch(format!("{} does not match {stem}.ppm", p.display())));
        }
        Ok(Some(m.to_f64()))
    };
    img.mask = load("mask", 1)?.ok_or(Error::MissingChannel("mask"))?;
    img.depth = load("depth", 1)?;
    img.normal = load("normal", 3)?;
    Ok(img)
}

pub fn view_stem(i: usize) -> String {
    format!("view_{i:03}")
}

/// Writes `cameras.json` and one set of buffers per view into `dir`.
pub fn write_views_dir(dir: &Path, poses: &PoseSet, images: &[ImageBuffer]) -> Result<()> {
    if poses.len() != images.len() {
        return Err(Error::DimensionMismatch(format!("{} poses vs {} images", poses.len(), images.len())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cams = dir.join(CAMERAS_FILE);
    std::fs::write(&cams, serde_json::to_string_pretty(poses)?).map_err(|e| Error::io(&cams, e))?;
    for (i, img) in images.iter().enumerate() {
        write_view(img, dir, &view_stem(i))?;
    }
    Ok(())
}

/// Reads a directory written by [`write_views_dir`].
pub fn read_views_dir(dir: &Path) -> Result<(PoseSet, Vec<ImageBuffer>)> {
    let poses = read_poses(&dir.join(CAMERAS_FILE))?;
    let images = (0..poses.len())
        .map(|i| read_view(dir, &view_stem(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((poses, images))
}

pub fn read_poses(path: &Path) -> Result<PoseSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, format!("line {}", e.line()), e.to_string()))
}
