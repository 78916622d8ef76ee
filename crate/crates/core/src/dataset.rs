//! IDX image/label containers (big-endian u32 header fields).

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::image_input;
use crate::tensor::FloatTensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// `count` grayscale images of `height x width` pixels with their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().unwrap())),
        None => Err(Error::TruncatedFile { offset: bytes.len(), needed: offset + 4 - bytes.len() }),
    }
}

fn body(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    let end = header.checked_add(len).ok_or(Error::InvalidArgument("IDX extents overflow".into()))?;
    if bytes.len() < end {
        return Err(Error::TruncatedFile { offset: bytes.len(), needed: end - bytes.len() });
    }
    if bytes.len() > end {
        return Err(Error::PayloadLengthMismatch(format!("{} trailing bytes", bytes.len() - end)));
    }
    Ok(&bytes[header..end])
}

impl Dataset {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() % (height * width) != 0 {
            return Err(Error::Shape(format!("{} pixels do not form {height}x{width} images", pixels.len())));
        }
        let images = pixels.len() / (height * width);
        if images != labels.len() {
            return Err(Error::CountMismatch { images, labels: labels.len() });
        }
        Ok(Self { height, width, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Network input for image `i`.
    pub fn input(&self, i: usize) -> FloatTensor {
        image_input(self.image(i), self.height, self.width).expect("image extents are positive")
    }

    /// The first `n` records (all of them when `n` is larger).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self { height: self.height, width: self.width, pixels: self.pixels[..n * self.height * self.width].to_vec(), labels: self.labels[..n].to_vec() }
    }
}

/// Pairs an IDX image file with an IDX label file.
pub fn load_idx_dataset(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    if be_u32(image_bytes, 0)? != IMAGE_MAGIC || be_u32(label_bytes, 0)? != LABEL_MAGIC {
        return Err(Error::BadMagic);
    }
    let n = be_u32(image_bytes, 4)? as usize;
    let h = be_u32(image_bytes, 8)? as usize;
    let w = be_u32(image_bytes, 12)? as usize;
    let labels_n = be_u32(label_bytes, 4)? as usize;
    if n != labels_n {
        return Err(Error::CountMismatch { images: n, labels: labels_n });
    }
    let size = n.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or(Error::InvalidArgument("IDX extents overflow".into()))?;
    let pixels = body(image_bytes, 16, size)?.to_vec();
    let labels = body(label_bytes, 8, n)?.to_vec();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    Dataset::new(h, w, pixels, labels)
}

pub fn load_idx_files(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_dataset(&std::fs::read(images)?, &std::fs::read(labels)?)
}

/// Encodes `(images, labels)` as IDX byte streams.
pub fn encode_idx(data: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + data.pixels.len());
    for v in [IMAGE_MAGIC, data.len() as u32, data.height as u32, data.width as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(&data.pixels);
    let mut labels = Vec::with_capacity(8 + data.len());
    for v in [LABEL_MAGIC, data.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend_from_slice(&data.labels);
    (images, labels)
}
