//! Small on-disk formats: binary PGM (P5) and the raw tensor file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{LabelMap, Tensor};

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != width * height {
        return Err(Error::shape(&[height, width], &[pixels.len()]));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, pixels)`; only `maxval ≤ 255` is accepted.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let err = |offset: usize, m: &str| Error::Format {
        offset: offset as u64,
        message: m.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err(0, "not a binary PGM (P5)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, "bad header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(err(pos, "unsupported maxval"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| err(bytes.len(), "truncated raster"))?;
    Ok((width, height, raster.to_vec()))
}

pub fn write_label_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_pgm(path, labels.width(), labels.height(), labels.data())
}

pub fn read_label_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (w, h, px) = read_pgm(path)?;
    LabelMap::from_vec(h, w, px)
}

/// Quantizes an `H×W` image in `[0, 1]` to 8 bits.
pub fn write_image_pgm(path: impl AsRef<Path>, image: &Tensor<f64>) -> Result<()> {
    let &[h, w] = image.shape() else {
        return Err(Error::InvalidArgument(format!(
            "image must be H×W, got {:?}",
            image.shape()
        )));
    };
    let px: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm(path, w, h, &px)
}

pub fn read_image_pgm(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let (w, h, px) = read_pgm(path)?;
    Tensor::from_vec(&[h, w], px.iter().map(|&v| f64::from(v) / 255.0).collect())
}

/// Raw tensor file: `u32` rank, `u32` dims, then little-endian `f64` data.
pub fn encode_tensor(t: &Tensor<f64>, out: &mut Vec<u8>) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one tensor starting at `*pos`, advancing it.
pub fn decode_tensor(bytes: &[u8], pos: &mut usize) -> Result<Tensor<f64>> {
    let err = |at: usize, m: &str| Error::Format {
        offset: at as u64,
        message: m.to_string(),
    };
    let u32_at = |p: &mut usize| -> Result<u32> {
        let b = bytes
            .get(*p..*p + 4)
            .ok_or_else(|| err(*p, "truncated tensor header"))?;
        *p += 4;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    let rank = u32_at(pos)? as usize;
    if rank > 8 {
        return Err(err(*pos - 4, "implausible tensor rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32_at(pos)? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = bytes
        .get(*pos..*pos + 8 * n)
        .ok_or_else(|| err(*pos, "truncated tensor data"))?;
    *pos += 8 * n;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    decode_tensor(&bytes, &mut pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        let labels = LabelMap::from_vec(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        write_label_pgm(&p, &labels).unwrap();
        assert_eq!(read_label_pgm(&p).unwrap(), labels);

        let (w, h, px) = parse_pgm(b"P5\n# hi\n2 1\n255\n\x07\x09").unwrap();
        assert_eq!((w, h, px), (2, 1, vec![7, 9]));
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n3 3\n255\n\x00").is_err());
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let t = Tensor::from_vec(&[2, 1, 3], vec![1.0, -2.5, 0.0, 3.25, f64::MIN_POSITIVE, 7.0])
            .unwrap();
        write_tensor_file(&p, &t).unwrap();
        assert_eq!(read_tensor_file(&p).unwrap(), t);
    }
}
