//! IDX files as used by MNIST: big-endian header, `u8` payload.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.pos, format!("truncated while reading {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("four bytes")))
    }

    fn payload(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::format(
                self.bytes.len(),
                format!("truncated {what}: expected {len} bytes, found {available}"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("magic number")?;
        if found != expected {
            return Err(Error::format(0, format!("bad magic 0x{found:08x}, expected 0x{expected:08x}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Parse an image file into `[N, 1, rows, cols]` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or_else(|| Error::format(4, "image dimensions overflow"))?;
    let pixels = r.payload(len, "pixel data")?;
    r.finish()?;
    let data = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    Tensor::new(&[count, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32("label count")? as usize;
    let labels = r.payload(count, "label data")?;
    r.finish()?;
    Ok(labels.iter().map(|&l| usize::from(l)).collect())
}

/// Parse an image/label pair into a dataset; labels define the class count
/// (at least 10, the MNIST digits).
pub fn parse_idx_pair(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let images = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", images.shape()[0], labels.len()),
        ));
    }
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(images, labels, classes, "idx")
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    parse_idx_pair(&images, &labels).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{} / {}: {message}", images_path.as_ref().display(), labels_path.as_ref().display()),
        },
        other => other,
    })
}

/// Encode `[N, 1, rows, cols]` (or `[N, rows, cols]`) images, rounding each
/// pixel to the nearest of 256 levels.
pub fn write_idx_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = images.shape();
    let (rows, cols) = match *s {
        [_, 1, r, c] | [_, r, c] => (r, c),
        _ => return Err(Error::dim(format!("cannot store shape {s:?} as IDX images"))),
    };
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, s[0] as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::contract(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}
