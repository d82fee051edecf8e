//! Artifact serialization: the versioned binary container for checkpoints
//! and image batches, 8-bit PGM for single images, PNG contact sheets, and
//! the parameter checksum used by the freeze contract.
//!
//! Container layout: magic `SALT`, u32 LE format version, u32 LE header
//! length, a UTF-8 JSON header describing the payload (kind, dtype, named
//! array shapes, free-form metadata), then the arrays concatenated in header
//! order as row-major little-endian floats.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::img::Image;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SALT";
const FORMAT_VERSION: u32 = 1;

/// Element type of the container payload. Arrays are always `Vec<f64>` in
/// memory; `F32` narrows on write (used for bulk image batches).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContainerHeader {
    version: u32,
    kind: String,
    dtype: Dtype,
    arrays: Vec<ArrayHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A named array with its logical shape; `data.len()` equals the shape
/// product.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::contract(format!(
                "array data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(NamedArray { name: name.into(), shape, data })
    }
}

/// An on-disk artifact: a kind tag, a dtype, named arrays, and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub dtype: Dtype,
    pub arrays: Vec<NamedArray>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn new(kind: impl Into<String>, dtype: Dtype) -> Self {
        Container {
            kind: kind.into(),
            dtype,
            arrays: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.arrays.push(NamedArray::new(name, shape, data)?);
        Ok(())
    }

    /// Find an array by name.
    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::contract(format!("container has no array named {name:?}")))
    }

    /// Find an array and check its shape.
    pub fn array_as(&self, name: &str, shape: &[usize]) -> Result<&NamedArray> {
        let a = self.array(name)?;
        if a.shape != shape {
            return Err(Error::contract(format!(
                "array {name:?} has shape {:?}, expected {shape:?}",
                a.shape
            )));
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ContainerHeader {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            dtype: self.dtype,
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayHeader { name: a.name.clone(), shape: a.shape.clone() })
                .collect(),
            meta: self.meta.clone(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let payload_len: usize =
            self.arrays.iter().map(|a| a.data.len() * self.dtype.size()).sum();
        let mut out = Vec::with_capacity(12 + header_json.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for a in &self.arrays {
            match self.dtype {
                Dtype::F64 => {
                    for &v in &a.data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Dtype::F32 => {
                    for &v in &a.data {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |msg: &str| Error::contract(format!("{}: {msg}", path.display()));
        if bytes.len() < 12 || &bytes[0..4] != MAGIC {
            return Err(bad("not a container file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported container version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body_start = 12 + header_len;
        if bytes.len() < body_start {
            return Err(bad("truncated header"));
        }
        let header: ContainerHeader = serde_json::from_slice(&bytes[12..body_start])
            .map_err(|e| bad(&format!("bad header JSON: {e}")))?;

        let elem = header.dtype.size();
        let total: usize = header
            .arrays
            .iter()
            .map(|a| a.shape.iter().product::<usize>())
            .sum();
        if bytes.len() != body_start + total * elem {
            return Err(bad(&format!(
                "payload length {} does not match header ({} elements of {} bytes)",
                bytes.len() - body_start,
                total,
                elem
            )));
        }

        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut off = body_start;
        for ah in &header.arrays {
            let n: usize = ah.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            match header.dtype {
                Dtype::F64 => {
                    for i in 0..n {
                        let s = off + i * 8;
                        data.push(f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()));
                    }
                }
                Dtype::F32 => {
                    for i in 0..n {
                        let s = off + i * 4;
                        data.push(f64::from(f32::from_le_bytes(
                            bytes[s..s + 4].try_into().unwrap(),
                        )));
                    }
                }
            }
            off += n * elem;
            arrays.push(NamedArray { name: ah.name.clone(), shape: ah.shape.clone(), data });
        }
        Ok(Container { kind: header.kind, dtype: header.dtype, arrays, meta: header.meta })
    }
}

/// SHA-256 over the little-endian f64 bytes of a parameter vector; the
/// identity that the freeze contract compares.
pub fn checksum_f64(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for &v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Write an image as binary 8-bit PGM (P5), mapping [0,1] to 0..=255.
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut out = Vec::with_capacity(32 + img.pixels().len());
    write!(out, "P5\n{} {}\n255\n", img.width(), img.height())?;
    for &v in img.pixels() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a binary 8-bit PGM (P5) into a [0,1] image. Comment lines in the
/// header are tolerated; the max value must be 255.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::contract(format!("{}: {msg}", path.display()));

    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(bad("truncated PGM header"));
        }
        if bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    pos += 1; // single whitespace byte after maxval

    if fields[0] != b"P5" {
        return Err(bad("not a binary PGM (expected P5)"));
    }
    let parse = |f: &[u8], what: &str| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(&format!("bad {what} field")))
    };
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval} (expected 255)")));
    }
    if bytes.len() < pos + width * height {
        return Err(bad("truncated PGM payload"));
    }
    let data = bytes[pos..pos + width * height]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Image::from_vec(width, height, data)
}

/// Save a batch of equally sized images as an f32 container with shape
/// `[n, height, width]` under the array name `images`.
pub fn write_image_batch(path: &Path, images: &[Image], meta: serde_json::Value) -> Result<()> {
    if images.is_empty() {
        return Err(Error::contract("image batch must be nonempty"));
    }
    let (w, h) = (images[0].width(), images[0].height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        images[0].check_same_shape(img, "image batch")?;
        data.extend_from_slice(img.pixels());
    }
    let mut c = Container::new("image_batch", Dtype::F32);
    c.meta = meta;
    c.push("images", vec![images.len(), h, w], data)?;
    c.save(path)
}

/// Load a batch written by [`write_image_batch`].
pub fn read_image_batch(path: &Path) -> Result<Vec<Image>> {
    let c = Container::load(path)?;
    if c.kind != "image_batch" {
        return Err(Error::contract(format!(
            "{}: container kind {:?} is not an image batch",
            path.display(),
            c.kind
        )));
    }
    let a = c.array("images")?;
    if a.shape.len() != 3 {
        return Err(Error::contract(format!(
            "image batch shape {:?} is not [n, height, width]",
            a.shape
        )));
    }
    let (n, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(Image::from_vec(w, h, a.data[i * w * h..(i + 1) * w * h].to_vec())?);
    }
    Ok(out)
}

/// Export images as a grayscale PNG contact sheet with `cols` images per row
/// and a 2-pixel gutter.
pub fn write_png_grid(path: &Path, images: &[Image], cols: usize) -> Result<()> {
    if images.is_empty() || cols == 0 {
        return Err(Error::contract("PNG grid needs images and cols >= 1"));
    }
    let (w, h) = (images[0].width(), images[0].height());
    for img in images {
        images[0].check_same_shape(img, "image batch")?;
    }
    let rows = images.len().div_ceil(cols);
    let gutter = 2usize;
    let sheet_w = cols * w + (cols - 1) * gutter;
    let sheet_h = rows * h + (rows - 1) * gutter;
    let mut sheet = image::GrayImage::from_pixel(
        sheet_w as u32,
        sheet_h as u32,
        image::Luma([32u8]),
    );
    for (i, img) in images.iter().enumerate() {
        let ox = (i % cols) * (w + gutter);
        let oy = (i / cols) * (h + gutter);
        for y in 0..h {
            for x in 0..w {
                let v = (img.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
                sheet.put_pixel((ox + x) as u32, (oy + y) as u32, image::Luma([v]));
            }
        }
    }
    sheet
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::contract(format!("{}: PNG encode failed: {e}", path.display())))?;
    Ok(())
}
