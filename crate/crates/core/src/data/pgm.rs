//! Binary greymap (`P5`, maxval 255) encoding of `1×H×W` images in `[0,1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes with `round(v·255)`; values are clamped to `[0,1]` first.
pub fn write_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::dim(format!("greymap needs a 1×H×W or H×W tensor, got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes to a `1×H×W` tensor of `byte / maxval`.
pub fn read_pgm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "expected magic \"P5\""));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        let start = skip_space(bytes, pos)?;
        if start == pos {
            return Err(Error::format(pos, "expected whitespace in header"));
        }
        let end = start + bytes[start..].iter().take_while(|b| b.is_ascii_digit()).count();
        if end == start {
            return Err(Error::format(start, format!("expected header field {}", ["width", "height", "maxval"][i])));
        }
        let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
        *field = text.parse().map_err(|_| Error::format(start, format!("header value {text} out of range")))?;
        pos = end;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::format(pos, "zero image dimension"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::format(pos, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "expected single whitespace before payload")),
    }
    let n = w.checked_mul(h).ok_or_else(|| Error::format(pos, "image dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(Error::format(bytes.len(), format!("payload truncated: {} of {n} bytes", payload.len())));
    }
    if payload.len() > n {
        return Err(Error::format(pos + n, "trailing bytes after payload"));
    }
    let scale = maxval as f32;
    Tensor::new([1, h, w], payload.iter().map(|&b| b as f32 / scale).collect())
}

/// Skips whitespace and `#` comments; returns the next offset.
fn skip_space(bytes: &[u8], mut pos: usize) -> Result<usize> {
    loop {
        match bytes.get(pos) {
            Some(b'#') => {
                while !matches!(bytes.get(pos), Some(b'\n') | None) {
                    pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(_) => return Ok(pos),
            None => return Err(Error::format(pos, "header truncated")),
        }
    }
}
