//! Binary portable any-maps: `P6` pixmaps and `P5` graymaps, 8 or 16 bits.
//! Tensors are `(1,C,H,W)` with values in `[0,1]`; writing quantizes to
//! 8 bits with round-half-up after clamping.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Largest accepted width·height, to bound allocations on hostile headers.
pub const MAX_PIXELS: usize = 1 << 26;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// `P6` for 3-channel and `P5` for 1-channel single-image tensors.
pub fn encode_pnm<S: Scalar>(img: &Tensor<S>) -> Result<Vec<u8>> {
    let s = img.shape();
    let magic = match (s.n, s.c) {
        (1, 3) => "P6",
        (1, 1) => "P5",
        _ => return Err(shape_err!("encode_pnm: expected (1,3,H,W) or (1,1,H,W), got {s}")),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.plane();
    let data = img.data();
    out.reserve(plane * s.c);
    for p in 0..plane {
        for c in 0..s.c {
            out.push(quantize(data[c * plane + p].as_f64()));
        }
    }
    Ok(out)
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    body: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let err = |off: usize, msg: &str| Error::format("pnm", off, msg);
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(err(0, "missing P5/P6 magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(err(1, "only binary P5 and P6 are supported")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        let mut v: usize = 0;
        while let Some(d) = bytes.get(pos).filter(|b| b.is_ascii_digit()) {
            v = v
                .checked_mul(10)
                .and_then(|v| v.checked_add((d - b'0') as usize))
                .ok_or_else(|| err(start, "header number overflows"))?;
            pos += 1;
        }
        if pos == start {
            return Err(err(pos, "expected a decimal number"));
        }
        *field = v;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(err(pos, "expected one whitespace byte before pixel data"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(pos, "zero image dimension"));
    }
    if width.checked_mul(height).is_none_or(|p| p > MAX_PIXELS) {
        return Err(err(pos, "image too large"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(err(pos, "maxval must be in 1..=65535"));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        body: pos + 1,
    })
}

pub fn decode_pnm<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let h = parse_header(bytes)?;
    let wide = h.maxval > 255;
    let bps = if wide { 2 } else { 1 };
    let plane = h.width * h.height;
    let need = plane * h.channels * bps;
    let body = &bytes[h.body..];
    if body.len() < need {
        return Err(Error::format(
            "pnm",
            bytes.len(),
            format!("pixel data truncated: expected {need} bytes, found {}", body.len()),
        ));
    }
    let scale = 1.0 / h.maxval as f64;
    let mut data = vec![S::zero(); plane * h.channels];
    for p in 0..plane {
        for c in 0..h.channels {
            let k = (p * h.channels + c) * bps;
            let raw = if wide {
                u16::from_be_bytes([body[k], body[k + 1]]) as usize
            } else {
                body[k] as usize
            };
            data[c * plane + p] = S::from_f64(raw.min(h.maxval) as f64 * scale);
        }
    }
    Tensor::from_vec([1, h.channels, h.height, h.width], data)
}

pub fn write_pnm<S: Scalar>(path: &Path, img: &Tensor<S>) -> Result<()> {
    let bytes = encode_pnm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a pixmap or graymap; graymaps are replicated to 3 channels.
pub fn read_rgb<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = decode_pnm::<S>(&bytes).map_err(|e| match e {
        Error::Format { what, offset, msg } => Error::Format {
            what,
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })?;
    if img.shape().c == 1 {
        img.expand_channels(3)
    } else {
        Ok(img)
    }
}

/// Side-by-side concatenation of equally tall single images.
pub fn hstack<S: Scalar>(images: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = images.first().ok_or_else(|| shape_err!("hstack: no images"))?.shape();
    let total_w: usize = images.iter().map(|t| t.shape().w).sum();
    for t in images {
        let s = t.shape();
        if s.n != 1 || s.c != first.c || s.h != first.h {
            return Err(shape_err!("hstack: {s} does not match {first}"));
        }
    }
    let mut data = vec![S::zero(); first.c * first.h * total_w];
    let mut x0 = 0;
    for t in images {
        let s = t.shape();
        for c in 0..s.c {
            for y in 0..s.h {
                let src = &t.data()[(c * s.h + y) * s.w..][..s.w];
                data[(c * s.h + y) * total_w + x0..][..s.w].copy_from_slice(src);
            }
        }
        x0 += s.w;
    }
    Tensor::from_vec([1, first.c, first.h, total_w], data)
}

/// Reflect-pads a batch on the bottom and right up to multiples of
/// `multiple`; returns the padded tensor and the original height and width.
pub fn pad_reflect<S: Scalar>(img: &Tensor<S>, multiple: usize) -> Result<(Tensor<S>, usize, usize)> {
    let s = img.shape();
    let up = |d: usize| d.div_ceil(multiple) * multiple;
    let (h, w) = (up(s.h), up(s.w));
    if h == s.h && w == s.w {
        return Ok((img.detach(), s.h, s.w));
    }
    if (h - s.h >= s.h && s.h > 1) || (w - s.w >= s.w && s.w > 1) {
        return Err(shape_err!("pad_reflect: {s} is too small to reflect-pad to {h}x{w}"));
    }
    let mirror = |i: usize, n: usize| {
        if i < n {
            i
        } else if n == 1 {
            0
        } else {
            2 * (n - 1) - i
        }
    };
    let mut data = Vec::with_capacity(s.n * s.c * h * w);
    for p in 0..s.n * s.c {
        let plane = &img.data()[p * s.plane()..(p + 1) * s.plane()];
        for y in 0..h {
            let row = mirror(y, s.h) * s.w;
            data.extend((0..w).map(|x| plane[row + mirror(x, s.w)]));
        }
    }
    Ok((Tensor::from_vec([s.n, s.c, h, w], data)?, s.h, s.w))
}

/// Top-left `h × w` window of every plane.
pub fn crop<S: Scalar>(img: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let s = img.shape();
    if h > s.h || w > s.w {
        return Err(shape_err!("crop: {h}x{w} exceeds {s}"));
    }
    let mut data = Vec::with_capacity(s.n * s.c * h * w);
    for p in 0..s.n * s.c {
        for y in 0..h {
            data.extend_from_slice(&img.data()[p * s.plane() + y * s.w..][..w]);
        }
    }
    Tensor::from_vec([s.n, s.c, h, w], data)
}
