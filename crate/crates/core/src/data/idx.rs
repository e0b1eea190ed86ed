//! Big-endian IDX files, optionally gzip-compressed.
//!
//! Supported payloads are unsigned bytes: labels (rank 1, magic 2049),
//! grayscale images (rank 3, magic 2051) and interleaved RGB images
//! (rank 4 with a trailing dimension of 3, magic 2052), which are converted
//! to luminance.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{resize_to_28, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const RGB_IMAGE_MAGIC: u32 = 0x0000_0804;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

fn format_err(path: &Path, msg: String) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg,
    }
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound {
            what: "dataset file",
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| format_err(path, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

struct Header {
    magic: u32,
    dims: Vec<usize>,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path, allowed: &[u32]) -> Result<Header> {
    if bytes.len() < 4 {
        return Err(format_err(
            path,
            format!("truncated header: expected at least 4 bytes, got {}", bytes.len()),
        ));
    }
    let magic = be_u32(bytes, 0);
    if !allowed.contains(&magic) {
        let want: Vec<String> = allowed.iter().map(|m| m.to_string()).collect();
        return Err(format_err(
            path,
            format!("bad magic {magic}, expected {}", want.join(" or ")),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let header_len = 4 + 4 * rank;
    if bytes.len() < header_len {
        return Err(format_err(
            path,
            format!(
                "truncated header: expected {header_len} bytes, got {}",
                bytes.len()
            ),
        ));
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header_len + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes, got {}", bytes.len()),
        ));
    }
    Ok(Header {
        magic,
        dims,
        payload_offset: header_len,
    })
}

/// Decodes an image file into `N×1×H×W` with pixels scaled by 1/255.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read_maybe_gz(path)?;
    let h = parse_header(&bytes, path, &[IMAGE_MAGIC, RGB_IMAGE_MAGIC])?;
    let payload = &bytes[h.payload_offset..];
    let (n, rows, cols) = (h.dims[0], h.dims[1], h.dims[2]);
    if n == 0 || rows == 0 || cols == 0 {
        return Err(format_err(path, format!("empty image set {:?}", h.dims)));
    }
    let data: Vec<f32> = if h.magic == IMAGE_MAGIC {
        payload.iter().map(|&b| b as f32 / 255.0).collect()
    } else {
        if h.dims[3] != 3 {
            return Err(format_err(
                path,
                format!("rank-4 images need 3 channels, got {}", h.dims[3]),
            ));
        }
        payload
            .chunks_exact(3)
            .map(|px| {
                let y = 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32;
                (y / 255.0).clamp(0.0, 1.0)
            })
            .collect()
    };
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_maybe_gz(path)?;
    let h = parse_header(&bytes, path, &[LABEL_MAGIC])?;
    Ok(bytes[h.payload_offset..].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label pair, resizing images to 28×28 when needed.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.shape()[0] != labels.len() {
        return Err(format_err(
            labels_path,
            format!(
                "label count {} does not match image count {}",
                labels.len(),
                images.shape()[0]
            ),
        ));
    }
    let images = resize_to_28(&images)?;
    let k = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledDataset::new(name, images, labels, k)
}

fn header(magic: u32, dims: &[usize]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out
}

/// Encodes `N×1×H×W` images in [0,1] as uncompressed IDX bytes, rounding to
/// the nearest of 256 levels.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::dim(format!("expected N×1×H×W images, got {s:?}")));
    }
    let mut out = header(IMAGE_MAGIC, &[s[0], s[2], s[3]]);
    out.extend(
        images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = header(LABEL_MAGIC, &[labels.len()]);
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::contract(format!("label {l} does not fit a byte")))?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_idx(dataset: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    crate::util::write_atomic(images_path, &encode_idx_images(dataset.images())?)?;
    crate::util::write_atomic(labels_path, &encode_idx_labels(dataset.labels())?)
}
