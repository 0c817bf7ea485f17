//! Dataset decoding: IDX (MNIST) and the line-oriented USPS text format.
//!
//! # IDX layout
//! ```text
//! bytes 0-3:  magic, big-endian (0x00000801 labels, 0x00000803 images)
//! bytes 4-..: one big-endian u32 per dimension (1 for labels, 3 for images)
//! payload:    unsigned bytes, row-major, exactly prod(dims) of them
//! ```
//!
//! # USPS text layout
//! One sample per line: a label followed by 256 pixel values in `[-1, 1]`,
//! whitespace separated. Labels are either `0..=9` or `1..=10` with `10`
//! standing for digit zero; the convention is detected from the label range.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

pub const USPS_SIDE: usize = 16;
const USPS_PIXEL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => f.write_str("source"),
            Domain::Target => f.write_str("target"),
        }
    }
}

/// An `H × W × C` image stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} pixels do not fill a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Range(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Builds an image from values already known to lie in `[0, 1]`.
    pub(crate) fn from_unit_pixels(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(pixels.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            pixels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_count: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Validates the shared-domain, shared-shape and label-range invariants.
    pub fn new(name: impl Into<String>, class_count: usize, samples: Vec<Sample>) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        if let Some(first) = samples.first() {
            let shape = first.image.shape();
            for s in &samples {
                if s.domain != first.domain {
                    return Err(Error::Format("dataset mixes domains".into()));
                }
                if s.image.shape() != shape {
                    return Err(Error::Shape(format!(
                        "image shape {:?} differs from {:?}",
                        s.image.shape(),
                        shape
                    )));
                }
                if s.label >= class_count {
                    return Err(Error::Label {
                        label: s.label,
                        classes: class_count,
                    });
                }
            }
        }
        Ok(Self {
            name: name.into(),
            class_count,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|s| s.image.shape())
    }

    pub fn domain(&self) -> Option<Domain> {
        self.samples.first().map(|s| s.domain)
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| s.label)
    }

    /// Number of samples per class, indexed by label.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Self {
        Self {
            name: name.into(),
            class_count: self.class_count,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        for s in &mut self.samples {
            s.domain = domain;
        }
        self
    }

    /// Resizes every image that does not already have the requested shape.
    pub fn resized(mut self, height: usize, width: usize) -> Result<Self> {
        for s in &mut self.samples {
            if (s.image.height, s.image.width) != (height, width) {
                s.image = resize_bilinear(&s.image, height, width)?;
            }
        }
        Ok(self)
    }

    /// Appends `other`, which must agree in class count, domain and shape.
    pub fn concat(mut self, other: Dataset) -> Result<Self> {
        if other.class_count != self.class_count {
            return Err(Error::Format(format!(
                "cannot concatenate datasets with {} and {} classes",
                self.class_count, other.class_count
            )));
        }
        self.samples.extend(other.samples);
        Dataset::new(self.name, self.class_count, self.samples)
    }
}

/// Decoded contents of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    Labels(Vec<u8>),
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        /// `count × rows × cols` values in `[0, 1]`.
        pixels: Vec<f32>,
    },
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_idx(&bytes)
}

pub fn decode_idx(bytes: &[u8]) -> Result<IdxData> {
    let word = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| Error::Format("truncated IDX header".into()))
    };
    let magic = word(0)? as u32;
    let ndims = match magic {
        IDX_LABEL_MAGIC => 1,
        IDX_IMAGE_MAGIC => 3,
        other => return Err(Error::Format(format!("bad IDX magic 0x{other:08x}"))),
    };
    let dims = (0..ndims)
        .map(|i| word(4 + 4 * i))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Length {
            expected,
            found: payload.len(),
        });
    }
    Ok(match magic {
        IDX_LABEL_MAGIC => IdxData::Labels(payload.to_vec()),
        _ => IdxData::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: payload.iter().map(|&b| f32::from(b) / 255.0).collect(),
        },
    })
}

/// Loads an MNIST-style image/label IDX pair as a ten-class dataset.
pub fn load_mnist(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    domain: Domain,
    name: impl Into<String>,
) -> Result<Dataset> {
    let (count, rows, cols, pixels) = match load_idx(images)? {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => (count, rows, cols, pixels),
        IdxData::Labels(_) => return Err(Error::Format("expected an IDX image file".into())),
    };
    let labels = match load_idx(labels)? {
        IdxData::Labels(l) => l,
        IdxData::Images { .. } => return Err(Error::Format("expected an IDX label file".into())),
    };
    if labels.len() != count {
        return Err(Error::Format(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format("IDX images have a zero dimension".into()));
    }
    let per = rows * cols;
    let samples = labels
        .iter()
        .zip(pixels.chunks_exact(per))
        .map(|(&label, px)| {
            if label > 9 {
                return Err(Error::Label {
                    label: label as usize,
                    classes: 10,
                });
            }
            Ok(Sample {
                image: Image::from_unit_pixels(rows, cols, 1, px.to_vec()),
                label: label as usize,
                domain,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(name, 10, samples)
}

pub fn load_usps(path: impl AsRef<Path>, domain: Domain, name: impl Into<String>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_usps(&text, domain, name)
}

pub fn parse_usps(text: &str, domain: Domain, name: impl Into<String>) -> Result<Dataset> {
    const FIELDS: usize = USPS_SIDE * USPS_SIDE + 1;
    let mut raw = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != FIELDS {
            return Err(Error::Format(format!(
                "line {}: expected {FIELDS} fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let number = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("line {}: bad number {s:?}", lineno + 1)))
        };
        let label_value = number(fields[0])?;
        if label_value.fract() != 0.0 || !(0.0..=10.0).contains(&label_value) {
            return Err(Error::Range(format!(
                "line {}: label {label_value} is not a digit class",
                lineno + 1
            )));
        }
        let mut pixels = Vec::with_capacity(FIELDS - 1);
        for f in &fields[1..] {
            let v = number(f)?;
            if !(-1.0 - USPS_PIXEL_TOLERANCE..=1.0 + USPS_PIXEL_TOLERANCE).contains(&v) {
                return Err(Error::Range(format!(
                    "line {}: pixel {v} outside [-1, 1]",
                    lineno + 1
                )));
            }
            pixels.push(((v.clamp(-1.0, 1.0) + 1.0) / 2.0) as f32);
        }
        raw.push((label_value as usize, pixels));
    }
    let one_based = raw.iter().any(|(l, _)| *l == 10);
    let samples = raw
        .into_iter()
        .map(|(label, pixels)| Sample {
            image: Image::from_unit_pixels(USPS_SIDE, USPS_SIDE, 1, pixels),
            label: if one_based && label == 10 { 0 } else { label },
            domain,
        })
        .collect();
    Dataset::new(name, 10, samples)
}

/// Corner-aligned bilinear resize: output corners sample input corners exactly.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "resize target {out_h}x{out_w} must be positive"
        )));
    }
    let (h, w, c) = img.shape();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            for ch in 0..c {
                let p = |y, x| f64::from(img.at(y, x, ch));
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(Image::from_unit_pixels(out_h, out_w, c, out))
}
