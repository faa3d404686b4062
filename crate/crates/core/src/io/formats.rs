//! The raw latent container and the 8-bit netpbm codecs.
//!
//! Latent files are `LOMOE1\n`, an ASCII `H W C\n` line, then `H·W·C`
//! little-endian `f32` values in row-major order. Values are stored as
//! single precision, so saving rounds each entry to the nearest `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::LatentGrid;

pub const LATENT_MAGIC: &[u8] = b"LOMOE1\n";

/// Largest dimension accepted from a header; guards huge allocations from
/// corrupt files.
const MAX_DIM: usize = 1 << 16;
const MAX_ENTRIES: usize = 1 << 28;

fn fmt_err(path: &str, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_string(),
        offset,
        message: message.into(),
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_latent(g: &LatentGrid) -> Vec<u8> {
    let (h, w, c) = g.shape();
    let mut out = Vec::with_capacity(LATENT_MAGIC.len() + 16 + 4 * g.len());
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(format!("{h} {w} {c}\n").as_bytes());
    for &v in g.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses a latent container. `path` is only used in diagnostics.
pub fn decode_latent(bytes: &[u8], path: &str) -> Result<LatentGrid> {
    if !bytes.starts_with(LATENT_MAGIC) {
        let at = bytes.iter().zip(LATENT_MAGIC).take_while(|(a, b)| a == b).count();
        return Err(fmt_err(path, at, "bad magic, expected \"LOMOE1\\n\""));
    }
    let start = LATENT_MAGIC.len();
    let end = bytes[start..]
        .iter()
        .take(64)
        .position(|&b| b == b'\n')
        .map(|p| start + p)
        .ok_or_else(|| fmt_err(path, start, "unterminated dimension line"))?;
    let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| fmt_err(path, start, "dimension line is not ASCII"))?;
    let mut dims = [0usize; 3];
    let mut fields = line.split(' ');
    let mut at = start;
    for (i, name) in ["height", "width", "channels"].iter().enumerate() {
        let f = fields
            .next()
            .ok_or_else(|| fmt_err(path, at, format!("missing {name}")))?;
        let v: usize = f
            .parse()
            .ok()
            .filter(|&v: &usize| f.bytes().all(|b| b.is_ascii_digit()) && v > 0 && v <= MAX_DIM)
            .ok_or_else(|| fmt_err(path, at, format!("bad {name} {f:?}")))?;
        dims[i] = v;
        at += f.len() + 1;
    }
    if fields.next().is_some() {
        return Err(fmt_err(path, at.min(end), "extra fields on the dimension line"));
    }
    let [h, w, c] = dims;
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .filter(|&n| n <= MAX_ENTRIES)
        .ok_or_else(|| fmt_err(path, start, "dimensions too large"))?;
    let payload = &bytes[end + 1..];
    if payload.len() < 4 * n {
        return Err(fmt_err(
            path,
            bytes.len(),
            format!("truncated payload: {} of {} bytes", payload.len(), 4 * n),
        ));
    }
    if payload.len() > 4 * n {
        return Err(fmt_err(path, end + 1 + 4 * n, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(n);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(fmt_err(path, end + 1 + 4 * i, "non-finite value"));
        }
        data.push(v as f64);
    }
    LatentGrid::from_vec(h, w, c, data)
}

pub fn save_latent(path: &Path, g: &LatentGrid) -> Result<()> {
    write_file(path, &encode_latent(g))
}

pub fn load_latent(path: &Path) -> Result<LatentGrid> {
    decode_latent(&read_file(path)?, &path.display().to_string())
}

struct Netpbm<'a> {
    width: usize,
    height: usize,
    data: &'a [u8],
}

/// Reads a binary netpbm header with `maxval` 255; comments are allowed
/// between header fields.
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8; 2], depth: usize, path: &str) -> Result<Netpbm<'a>> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fmt_err(
            path,
            0,
            format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap_or("?")),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let begin = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() && pos - begin < 8 {
            pos += 1;
        }
        if pos == begin {
            return Err(fmt_err(path, begin, format!("expected {name}")));
        }
        let v: usize = std::str::from_utf8(&bytes[begin..pos])
            .expect("ascii digits")
            .parse()
            .expect("at most 8 digits");
        if v == 0 || v > MAX_DIM {
            return Err(fmt_err(path, begin, format!("{name} {v} out of range")));
        }
        fields[i] = v;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fmt_err(path, pos, format!("maxval {maxval} unsupported, expected 255")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fmt_err(path, pos, "expected one whitespace byte before the raster")),
    }
    let need = width * height * depth;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(fmt_err(
            path,
            bytes.len(),
            format!("truncated raster: {} of {need} bytes", data.len()),
        ));
    }
    if data.len() > need {
        return Err(fmt_err(path, pos + need, "trailing bytes after raster"));
    }
    Ok(Netpbm {
        width,
        height,
        data,
    })
}

/// P6 bytes to a 3-channel latent, mapping `[0, 255]` onto `[−1, 1]`.
pub fn decode_ppm(bytes: &[u8], path: &str) -> Result<LatentGrid> {
    let img = parse_netpbm(bytes, b"P6", 3, path)?;
    let data = img.data.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
    LatentGrid::from_vec(img.height, img.width, 3, data)
}

/// Quantizes a 3-channel latent to P6, clamping to `[−1, 1]`.
pub fn encode_ppm(g: &LatentGrid) -> Result<Vec<u8>> {
    if g.channels() != 3 {
        return Err(Error::invalid(format!("PPM needs 3 channels, grid has {}", g.channels())));
    }
    let mut out = format!("P6\n{} {}\n255\n", g.width(), g.height()).into_bytes();
    out.extend(g.as_slice().iter().map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8));
    Ok(out)
}

/// P5 bytes to a binary mask: 128 and above is inside.
pub fn decode_pgm_mask(bytes: &[u8], path: &str) -> Result<LatentGrid> {
    let img = parse_netpbm(bytes, b"P5", 1, path)?;
    let data = img.data.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    LatentGrid::from_vec(img.height, img.width, 1, data)
}

pub fn encode_pgm_mask(mask: &LatentGrid) -> Result<Vec<u8>> {
    if mask.channels() != 1 {
        return Err(Error::invalid("mask must have one channel"));
    }
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.as_slice().iter().map(|&v| if v >= 0.5 { 255u8 } else { 0 }));
    Ok(out)
}

pub fn load_image_ppm(path: &Path) -> Result<LatentGrid> {
    decode_ppm(&read_file(path)?, &path.display().to_string())
}

pub fn save_image_ppm(path: &Path, g: &LatentGrid) -> Result<()> {
    write_file(path, &encode_ppm(g)?)
}

pub fn load_mask_pgm(path: &Path) -> Result<LatentGrid> {
    decode_pgm_mask(&read_file(path)?, &path.display().to_string())
}

pub fn save_mask_pgm(path: &Path, mask: &LatentGrid) -> Result<()> {
    write_file(path, &encode_pgm_mask(mask)?)
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Loads an image as a latent: `.ppm` is decoded, anything else is read as
/// a latent container.
pub fn load_image_any(path: &Path) -> Result<LatentGrid> {
    match extension(path).as_str() {
        "ppm" => load_image_ppm(path),
        _ => load_latent(path),
    }
}

/// Loads a mask from `.pgm` or a single-channel latent container.
pub fn load_mask_any(path: &Path) -> Result<LatentGrid> {
    let m = match extension(path).as_str() {
        "pgm" => load_mask_pgm(path)?,
        _ => load_latent(path)?,
    };
    if m.channels() != 1 || m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(fmt_err(
            &path.display().to_string(),
            0,
            "mask must be a single-channel 0/1 grid",
        ));
    }
    Ok(m)
}
