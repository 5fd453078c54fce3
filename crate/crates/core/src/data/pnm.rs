//! Binary PGM (P5) and PPM (P6) with maxval 255, plus the bilinear resize
//! and center crop applied at load time.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Decodes a binary P5/P6 file into an [h, w, c] tensor in [-1, 1].
pub fn read_pnm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::Data(format!(
                "unsupported format signature '{other}' (want P5 or P6)"
            )))
        }
    };
    let width: usize = parse_token(bytes, &mut pos, "width")?;
    let height: usize = parse_token(bytes, &mut pos, "height")?;
    let maxval: usize = parse_token(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Data(format!("maxval {maxval} unsupported, want 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Data(format!("raster truncated: need {need} bytes")))?;
    let data: Vec<f32> = raster.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
    Tensor::new(vec![height, width, channels], data)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // skip whitespace and '#' comment lines
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Data("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_token(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    next_token(bytes, pos)?
        .parse()
        .map_err(|_| Error::Data(format!("bad {what} in header")))
}

/// Writes [h, w, c] data in [-1, 1] as binary P5 (c = 1) or P6 (c = 3).
pub fn write_pnm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let magic = match c {
        1 => "P5",
        3 => "P6",
        other => return Err(Error::Data(format!("{other} channels unsupported"))),
    };
    let mut bytes = Vec::with_capacity(h * w * c + 32);
    bytes.extend_from_slice(format!("{magic}\n{w} {h}\n255\n").as_bytes());
    for &v in image.data() {
        bytes.push(((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Bilinear resize with half-pixel sample centers.
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut data = vec![0.0f32; out_h * out_w * c];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (sy - y0 as f64) as f32;
        for ox in 0..out_w {
            let sx =
                ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (sx - x0 as f64) as f32;
            for ch in 0..c {
                let v00 = src[(y0 * w + x0) * c + ch];
                let v01 = src[(y0 * w + x1) * c + ch];
                let v10 = src[(y1 * w + x0) * c + ch];
                let v11 = src[(y1 * w + x1) * c + ch];
                data[(oy * out_w + ox) * c + ch] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                    + wy * ((1.0 - wx) * v10 + wx * v11);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], data).unwrap()
}

/// Scales so the short side becomes `short`, preserving aspect ratio.
pub fn resize_short_side(image: &Tensor<f32>, short: usize) -> Tensor<f32> {
    let s = image.shape();
    let (h, w) = (s[0], s[1]);
    let (out_h, out_w) = if h <= w {
        (short, (w as f64 * short as f64 / h as f64).round() as usize)
    } else {
        ((h as f64 * short as f64 / w as f64).round() as usize, short)
    };
    resize_bilinear(image, out_h.max(1), out_w.max(1))
}

pub fn center_crop(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    if size > h || size > w {
        return Err(Error::Data(format!(
            "cannot center-crop {h}x{w} to {size}x{size}"
        )));
    }
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    let src = image.data();
    let mut data = Vec::with_capacity(size * size * c);
    for y in 0..size {
        let base = ((y + oy) * w + ox) * c;
        data.extend_from_slice(&src[base..base + size * c]);
    }
    Tensor::new(vec![size, size, c], data)
}
