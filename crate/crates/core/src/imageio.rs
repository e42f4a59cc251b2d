//! Image files: a raw little-endian tensor format and binary PPM.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RAW_MAGIC: &[u8; 4] = b"IMHD";

/// `"IMHD"`, u8 rank, u32 dims, f32 values, all little-endian.
pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(RAW_MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated raw image header".into()))?;
    if &magic != RAW_MAGIC {
        return Err(Error::Format("not a raw IMHD tensor".into()));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank).map_err(|_| Error::Format("truncated raw image header".into()))?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut d = [0u8; 4];
        r.read_exact(&mut d).map_err(|_| Error::Format("truncated raw image dims".into()))?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    if r.len() != 4 * n {
        return Err(Error::Format(format!("raw image payload is {} bytes, expected {}", r.len(), 4 * n)));
    }
    let data = r.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

/// Binary PPM of a `[3, h, w]` image; values are clamped to `[0, 1]`.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = img.shape()[..] else {
        return Err(Error::Shape(format!("PPM needs a [3, h, w] image, got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            let v = img.data()[c * plane + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut r = BufReader::new(bytes);
    let mut fields = Vec::new();
    while fields.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PPM header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        fields.extend(line.split_whitespace().map(str::to_string));
    }
    if fields[0] != "P6" || fields.len() != 4 {
        return Err(Error::Format("only single-line-field binary P6 PPM is supported".into()));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(Error::Format("PPM must be 8-bit with positive size".into()));
    }
    let mut px = Vec::new();
    r.read_to_end(&mut px)?;
    if px.len() != 3 * w * h {
        return Err(Error::Format(format!("PPM payload is {} bytes, expected {}", px.len(), 3 * w * h)));
    }
    let plane = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| f64::from(px[(i % plane) * 3 + i / plane]) / 255.0))
}

/// Reads either format, chosen by the file's magic bytes.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(&bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else {
        Err(Error::Format(format!("{}: unrecognized image format", path.display())))
    }
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_at_f32() {
        let t = Tensor::from_fn(&[3, 2, 5], |i| i as f64 * 0.1);
        let back = decode_raw(&encode_raw(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }

    #[test]
    fn raw_truncated_is_format_error() {
        let bytes = encode_raw(&Tensor::zeros(&[2, 2]));
        assert!(matches!(decode_raw(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn ppm_round_trip_on_byte_grid() {
        let t = Tensor::from_fn(&[3, 4, 3], |i| ((i * 37) % 256) as f64 / 255.0);
        let back = decode_ppm(&encode_ppm(&t).unwrap()).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-12);
    }
}
