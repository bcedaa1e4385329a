//! Binary PGM (`P5`, maxval 255) images.

use std::io::Write;
use std::path::Path;

use crate::dataset::quantize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Quantize a `[H, W]` or `[1, H, W]` tensor with values in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (height, width) = match *t.shape() {
            [h, w] | [1, h, w] => (h, w),
            _ => return Err(Error::shape("GrayImage::from_tensor", &[1, 0, 0], t.shape())),
        };
        Ok(GrayImage {
            width,
            height,
            pixels: t.data().iter().map(|&v| quantize(v)).collect(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.encode())?;
        Ok(())
    }

    /// Decode a `P5` file with maxval 255 (comments allowed in the header).
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("truncated PGM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("non-ASCII PGM header"))?);
        }
        if fields[0] != "P5" {
            return Err(Error::format(format!("not a binary PGM: magic {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(format!("bad PGM field {s:?}")));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(Error::format(format!("unsupported PGM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = bytes.get(pos..).unwrap_or_default();
        if raster.len() != width * height {
            return Err(Error::format(format!(
                "PGM raster has {} bytes, expected {}",
                raster.len(),
                width * height
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels: raster.to_vec(),
        })
    }
}
