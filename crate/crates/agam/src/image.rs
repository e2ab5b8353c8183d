//! Netpbm import and attention-map export.

use std::fs;
use std::path::Path;

use agam_core::Tensor;

use crate::error::{Error, Result};

/// Mid-gray used for constant maps.
pub const PGM_CONSTANT: u8 = 128;

fn header_tokens<'a>(bytes: &'a [u8], count: usize, path: &Path) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated netpbm header"));
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::format(path, "non-ASCII header"))?;
        tokens.push(tok);
    }
    Ok((tokens, i))
}

/// Decodes a binary (`P6`) or ASCII (`P3`) PPM into a `3×H×W` tensor with
/// values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (tok, end) = header_tokens(bytes, 4, path)?;
    let magic = tok[0];
    if magic != "P6" && magic != "P3" {
        return Err(Error::format(path, format!("expected a P6 or P3 PPM, found `{magic}`")));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::format(path, format!("bad {what} `{s}`")))
    };
    let (w, h, maxval) = (num(tok[1], "width")?, num(tok[2], "height")?, num(tok[3], "maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("unsupported PPM geometry {w}×{h} maxval {maxval}")));
    }
    let n = w * h * 3;
    let samples: Vec<usize> = if magic == "P6" {
        let body = &bytes[(end + 1).min(bytes.len())..];
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if body.len() < need {
            return Err(Error::format(path, format!("PPM payload has {} bytes, expected {need}", body.len())));
        }
        if wide {
            body[..need].chunks(2).map(|c| (c[0] as usize) << 8 | c[1] as usize).collect()
        } else {
            body[..n].iter().map(|&b| b as usize).collect()
        }
    } else {
        let text = std::str::from_utf8(&bytes[end..]).map_err(|_| Error::format(path, "non-ASCII P3 payload"))?;
        let vals: Vec<usize> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|s| num(s, "sample"))
            .collect::<Result<_>>()?;
        if vals.len() < n {
            return Err(Error::format(path, format!("P3 payload has {} samples, expected {n}", vals.len())));
        }
        vals
    };
    if let Some(v) = samples.iter().find(|&&v| v > maxval) {
        return Err(Error::format(path, format!("sample {v} exceeds maxval {maxval}")));
    }
    // Interleaved RGB to planar channels.
    let scale = maxval as f64;
    let t = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        samples[p * 3 + c] as f64 / scale
    });
    Ok(t)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// Min-max scales a map to 8-bit gray; a constant map becomes all 128.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![PGM_CONSTANT; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Binary PGM (`P5 W H 255`) of an `H×W` map (leading unit axes allowed).
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    let (h, w) = match s.len() {
        0 => (1, 1),
        1 => (1, s[0]),
        r => (s[r - 2], s[r - 1]),
    };
    if h * w != map.len() {
        return Err(Error::Config(format!("cannot write a {s:?} tensor as a grayscale image")));
    }
    let mut out = format!("P5 {w} {h} 255\n").into_bytes();
    out.extend(to_gray(map.data()));
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))
}

/// `index,value` rows under a header; values print in shortest round-trip
/// form.
pub fn encode_csv_vector(values: &[f64]) -> String {
    let mut s = String::from("index,value\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}

pub fn write_csv_vector(path: &Path, values: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_csv_vector(values)).map_err(|e| Error::io(path, e))
}

/// Parses a PGM written by [`encode_pgm`] into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (tok, end) = header_tokens(bytes, 4, path)?;
    if tok[0] != "P5" || tok[3] != "255" {
        return Err(Error::format(path, "expected an 8-bit P5 PGM"));
    }
    let w: usize = tok[1].parse().map_err(|_| Error::format(path, "bad width"))?;
    let h: usize = tok[2].parse().map_err(|_| Error::format(path, "bad height"))?;
    let body = &bytes[(end + 1).min(bytes.len())..];
    if body.len() != w * h {
        return Err(Error::format(path, format!("PGM payload has {} bytes, expected {}", body.len(), w * h)));
    }
    Ok((w, h, body.to_vec()))
}
