//! Image ingestion: IDX containers (MNIST layout), binary PGM, and the
//! canonical grayscale [`Image`] raster every other module consumes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

/// Row-major grayscale raster.
///
/// Content images hold intensities in `[0, 1]`. Perturbations share the same
/// type but carry signed values.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Builds a raster without a range check (perturbations are signed).
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Shape(format!(
                "image must be at least 2x2, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Range("non-finite pixel".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds a content image; every pixel must lie in `[0, 1]`.
    pub fn content(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        let img = Self::new(width, height, pixels)?;
        if !img.is_content() {
            return Err(Error::Range("content pixel outside [0, 1]".into()));
        }
        Ok(img)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width >= 2 && height >= 2, "image must be at least 2x2");
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    /// Pixel at column `x`, row `y`.
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_content(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    /// Entrywise sum; panics on shape mismatch.
    pub fn add(&self, other: &Image) -> Image {
        assert!(self.same_shape(other), "shape mismatch in Image::add");
        Image {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .zip(&other.pixels)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Entrywise difference; panics on shape mismatch.
    pub fn sub(&self, other: &Image) -> Image {
        assert!(self.same_shape(other), "shape mismatch in Image::sub");
        Image {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .zip(&other.pixels)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.pixels.iter().fold(0.0, |m, p| m.max(p.abs()))
    }

    /// Root-mean-square difference to `other`.
    pub fn rmse(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "shape mismatch in Image::rmse");
        let sq: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (sq / self.pixels.len() as f64).sqrt()
    }

    /// 8-bit encoding used by the IDX and PGM writers.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    fn from_bytes(width: usize, height: usize, bytes: &[u8], maxval: f64) -> Self {
        Self {
            width,
            height,
            pixels: bytes.iter().map(|&b| b as f64 / maxval).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

/// Ordered collection of equally sized, labeled images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    num_classes: usize,
    examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        if let Some(first) = examples.first() {
            if let Some(bad) = examples.iter().find(|e| !e.image.same_shape(&first.image)) {
                return Err(Error::Consistency(format!(
                    "mixed image sizes: {}x{} and {}x{}",
                    first.image.width, first.image.height, bad.image.width, bad.image.height
                )));
            }
        }
        if let Some(bad) = examples.iter().find(|e| e.label >= num_classes) {
            return Err(Error::Consistency(format!(
                "label {} not below class count {num_classes}",
                bad.label
            )));
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            examples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `(width, height)` of the member images, if any.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.examples
            .first()
            .map(|e| (e.image.width, e.image.height))
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.examples.iter().map(|e| &e.image)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncation(format!("{what}: header ends at byte {}", bytes.len())))
}

/// Parses an IDX3 unsigned-byte image container.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: magic {magic}, expected {IDX_IMAGES_MAGIC}"
        )));
    }
    let count = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    if rows < 2 || cols < 2 {
        return Err(Error::Format(format!(
            "idx images: {cols}x{rows} is below the 2x2 minimum"
        )));
    }
    let stride = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < count * stride {
        return Err(Error::Truncation(format!(
            "idx images: {} payload bytes for {count} images of {cols}x{rows}",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(stride)
        .take(count)
        .map(|chunk| Image::from_bytes(cols, rows, chunk, 255.0))
        .collect())
}

/// Parses an IDX1 unsigned-byte label container.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: magic {magic}, expected {IDX_LABELS_MAGIC}"
        )));
    }
    let count = be_u32(bytes, 4, "idx labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Truncation(format!(
            "idx labels: {} payload bytes for {count} labels",
            payload.len()
        )));
    }
    Ok(payload[..count].iter().map(|&b| b as usize).collect())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    parse_idx_images(&read_file(path.as_ref())?)
}

/// Loads an MNIST-style image/label file pair into a [`Dataset`].
pub fn load_idx_pair(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path.as_ref())?;

    // Header-level count check first so a mismatch is reported as such even
    // when one of the payloads is also short.
    if be_u32(&image_bytes, 0, "idx images")? == IDX_IMAGES_MAGIC
        && be_u32(&label_bytes, 0, "idx labels")? == IDX_LABELS_MAGIC
    {
        let n_img = be_u32(&image_bytes, 4, "idx images")?;
        let n_lab = be_u32(&label_bytes, 4, "idx labels")?;
        if n_img != n_lab {
            return Err(Error::Consistency(format!(
                "{n_img} images but {n_lab} labels"
            )));
        }
    }
    let images = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(
        name,
        num_classes,
        images
            .into_iter()
            .zip(labels)
            .map(|(image, label)| LabeledExample { image, label })
            .collect(),
    )
}

pub fn encode_idx_images(images: &[Image]) -> Result<Vec<u8>> {
    let (w, h) = match images.first() {
        Some(img) => (img.width, img.height),
        None => (0, 0),
    };
    if images.iter().any(|i| i.width != w || i.height != h) {
        return Err(Error::Consistency("mixed image sizes".into()));
    }
    let mut out = Vec::with_capacity(16 + images.len() * w * h);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    for img in images {
        out.extend(img.to_bytes());
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l)
            .map_err(|_| Error::Range(format!("label {l} does not fit in a byte")))?;
        out.push(b);
    }
    Ok(out)
}

/// Writes `dataset` as an IDX image/label pair. Pixels are quantized to 8 bits.
pub fn write_idx_pair(
    dataset: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let images: Vec<Image> = dataset.images().cloned().collect();
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    fs::write(images_path, encode_idx_images(&images)?).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, encode_idx_labels(&dataset.labels())?)
        .map_err(|e| Error::io(labels_path, e))
}

/// Parses a binary ("P5") PGM with an 8-bit payload.
pub fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (expected P5)".into()));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments may separate header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Truncation("pgm header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("pgm header field is not a number".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("pgm header field overflows".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Range(format!("pgm maxval {maxval} not in 1..=255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("pgm header not terminated by whitespace".into()));
    }
    pos += 1;
    let (width, height) = (width as usize, height as usize);
    let payload = &bytes[pos..];
    if payload.len() < width * height {
        return Err(Error::Truncation(format!(
            "pgm payload has {} bytes for {width}x{height}",
            payload.len()
        )));
    }
    if width < 2 || height < 2 {
        return Err(Error::Format(format!(
            "pgm {width}x{height} is below the 2x2 minimum"
        )));
    }
    Ok(Image::from_bytes(
        width,
        height,
        &payload[..width * height],
        maxval as f64,
    ))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image> {
    parse_pgm(&read_file(path.as_ref())?)
}

pub fn write_pgm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_bytes());
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

/// ITU-R BT.601 luma.
pub fn rgb_to_gray(r: f64, g: f64, b: f64) -> Result<f64> {
    for (name, c) in [("r", r), ("g", g), ("b", b)] {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Range(format!("channel {name} = {c} outside [0, 1]")));
        }
    }
    Ok((0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0))
}
