use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// 8-bit binary PGM (P5) bytes; `[0, 1]` maps linearly to `[0, 255]`,
/// values outside are clamped.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image.dims2()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

/// Decodes what [`encode_pgm`] writes, as values `k / 255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = || Error::Format("malformed PGM".into());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos).ok_or_else(bad)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos).ok_or_else(bad)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || num(fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let pixels = bytes.get(pos..).filter(|p| p.len() == w * h).ok_or_else(bad)?;
    Tensor::new(vec![h, w], pixels.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Tiles equally sized images on a grid with `gap` white pixels between them.
pub fn montage(rows: &[Vec<&Tensor>], gap: usize) -> Result<Tensor> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| Error::invalid("empty montage"))?;
    let (h, w) = first.dims2()?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (th, tw) = (rows.len() * (h + gap) - gap, cols * (w + gap) - gap);
    let mut out = Tensor::new(vec![th, tw], vec![1.0; th * tw])?;
    for (i, row) in rows.iter().enumerate() {
        for (j, img) in row.iter().enumerate() {
            img.ensure_shape("montage tile", &[h, w])?;
            for r in 0..h {
                for c in 0..w {
                    out.set2(i * (h + gap) + r, j * (w + gap) + c, img.at2(r, c));
                }
            }
        }
    }
    Ok(out)
}
