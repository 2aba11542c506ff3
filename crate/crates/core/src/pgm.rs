//! Binary PGM (P5) with an 8-bit sample depth.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{}x{} image needs {} samples, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Quantizes unit-range values with `round(v * 255)`.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        Self::new(width, height, values.iter().map(|&v| quantize(v)).collect())
    }

    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&b| f32::from(b) / 255.0).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::format("PGM", "missing P5 magic"));
        }
        let width = parse_uint(next_token(bytes, &mut pos)?)?;
        let height = parse_uint(next_token(bytes, &mut pos)?)?;
        let maxval = parse_uint(next_token(bytes, &mut pos)?)?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::format("PGM", format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::format("PGM", "truncated header"));
        }
        pos += 1;
        let n = width * height;
        if bytes.len() - pos < n {
            return Err(Error::format(
                "PGM",
                format!("expected {n} raster bytes, found {}", bytes.len() - pos),
            ));
        }
        let mut data = bytes[pos..pos + n].to_vec();
        if maxval != 255 {
            for v in &mut data {
                *v = ((u32::from(*v).min(maxval as u32) * 255 + maxval as u32 / 2) / maxval as u32)
                    as u8;
            }
        }
        Self::new(width, height, data)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("PGM", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_uint(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("PGM", format!("bad header field {:?}", String::from_utf8_lossy(tok))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let bytes = img.encode();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 1, 2, 253, 254, 255]);
    }

    #[test]
    fn comments_and_low_maxval() {
        let mut bytes = b"P5 # comment\n2 # w\n1\n15\n".to_vec();
        bytes.extend_from_slice(&[0, 15]);
        let img = GrayImage::decode(&bytes).unwrap();
        assert_eq!(img.data, vec![0, 255]);
    }

    #[test]
    fn rejects_truncated_raster() {
        let bytes = b"P5\n4 4\n255\n\x00\x01".to_vec();
        assert!(GrayImage::decode(&bytes).is_err());
        assert!(GrayImage::decode(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-3.0), 0);
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
            let data: Vec<u8> = (0..w * h).map(|i| (crate::seed::mix(seed ^ i as u64) & 0xff) as u8).collect();
            let img = GrayImage::new(w, h, data).unwrap();
            prop_assert_eq!(GrayImage::decode(&img.encode()).unwrap(), img);
        }
    }
}
