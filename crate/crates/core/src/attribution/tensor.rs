use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ReferenceMode, Scheme};
use crate::data::{BBox, Span};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row and column axes of an interaction tensor. Rows are always the first
/// input's positions (patches in row-major order for images).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    ImageText { height: usize, width: usize, tokens: usize },
    TextText { left: usize, right: usize },
    ImageImage { height: usize, width: usize },
}

impl Layout {
    pub fn shape(&self) -> Vec<usize> {
        match *self {
            Layout::ImageText { height, width, tokens } => vec![height, width, tokens],
            Layout::TextText { left, right } => vec![left, right],
            Layout::ImageImage { height, width } => vec![height * width, height * width],
        }
    }

    pub fn rows(&self) -> usize {
        match *self {
            Layout::ImageText { height, width, .. } | Layout::ImageImage { height, width } => height * width,
            Layout::TextText { left, .. } => left,
        }
    }

    pub fn cols(&self) -> usize {
        match *self {
            Layout::ImageText { tokens, .. } => tokens,
            Layout::TextText { right, .. } => right,
            Layout::ImageImage { height, width } => height * width,
        }
    }
}

/// Scores at the four corners of the integration rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub f_ab: f64,
    pub f_ra_b: f64,
    pub f_a_rb: f64,
    pub f_ra_rb: f64,
}

impl Corners {
    /// `f(a,b) - f(r_a,b) - f(a,r_b) + f(r_a,r_b)`.
    pub fn four_term(&self) -> f64 {
        self.f_ab - self.f_ra_b - self.f_a_rb + self.f_ra_rb
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub model_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceMode>,
}

impl Provenance {
    pub fn new(method: &str, model_digest: &str) -> Self {
        Self {
            method: method.to_string(),
            model_digest: model_digest.to_string(),
            steps: None,
            scheme: None,
            tap: None,
            reference: None,
        }
    }
}

/// Pairwise attribution values between the positions of two inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionTensor {
    layout: Layout,
    values: Vec<f64>,
    corners: Option<Corners>,
    provenance: Provenance,
}

impl InteractionTensor {
    pub fn new(layout: Layout, values: Vec<f64>, corners: Option<Corners>, provenance: Provenance) -> Result<Self> {
        let n = layout.rows() * layout.cols();
        if values.len() != n {
            return Err(Error::shape("interaction tensor", &[n], &[values.len()]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("interaction tensor entry {i}")));
        }
        Ok(Self {
            layout,
            values,
            corners,
            provenance,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn shape(&self) -> Vec<usize> {
        self.layout.shape()
    }

    /// Row-major values; row `p` holds the first input's position `p`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn corners(&self) -> Option<&Corners> {
        self.corners.as_ref()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.layout.cols() + col]
    }

    /// `[rows, cols]` view.
    pub fn matrix(&self) -> Tensor {
        Tensor::from_parts_unchecked(vec![self.layout.rows(), self.layout.cols()], self.values.clone())
    }

    /// Sum of all entries in row-major order.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = JsonDoc {
            header: self.header(),
            values: self.values.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: JsonDoc = serde_json::from_str(text).map_err(|e| Error::Format(format!("tensor json: {e}")))?;
        doc.header.check_version()?;
        Self::new(doc.header.layout, doc.values, doc.header.corners, doc.header.provenance)
    }

    fn header(&self) -> Header {
        Header {
            version: TENSOR_VERSION,
            shape: self.shape(),
            layout: self.layout,
            corners: self.corners,
            provenance: self.provenance.clone(),
        }
    }

    /// Binary form: `IATTRTNS`, a `u64` header length, a UTF-8 JSON header,
    /// then the values as little-endian `f64`.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        out.write_all(TENSOR_MAGIC)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Format("tensor file truncated".into());
        if bytes.len() < 16 || &bytes[..8] != TENSOR_MAGIC {
            return Err(Error::Format("not an interaction tensor file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(truncated());
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::Format(format!("tensor header: {e}")))?;
        header.check_version()?;
        let payload = &body[len..];
        let n = header.layout.rows() * header.layout.cols();
        if payload.len() != n * 8 {
            return Err(truncated());
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(header.layout, values, header.corners, header.provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(self.values.len() * 8 + 512);
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const TENSOR_MAGIC: &[u8; 8] = b"IATTRTNS";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    shape: Vec<usize>,
    layout: Layout,
    #[serde(default)]
    corners: Option<Corners>,
    provenance: Provenance,
}

impl Header {
    fn check_version(&self) -> Result<()> {
        if self.version != TENSOR_VERSION {
            return Err(Error::Version {
                expected: TENSOR_VERSION,
                found: self.version,
            });
        }
        if self.shape != self.layout.shape() {
            return Err(Error::shape("tensor header", &self.layout.shape(), &self.shape));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct JsonDoc {
    #[serde(flatten)]
    header: Header,
    values: Vec<f64>,
}

/// `sum(A) - four_term`, from the stored corner scores.
pub fn completeness_residual(t: &InteractionTensor) -> Result<f64> {
    let corners = t
        .corners()
        .ok_or_else(|| Error::InvalidInput(format!("`{}` tensor carries no corner scores", t.provenance.method)))?;
    Ok(t.total() - corners.four_term())
}

/// A caption token span or an image patch box, both half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[serde(with = "span_array")]
    Span(Span),
    #[serde(with = "bbox_array")]
    Bbox(BBox),
}

mod span_array {
    use super::Span;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(s: &Span, ser: S) -> Result<S::Ok, S::Error> {
        [s.start, s.end].serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Span, D::Error> {
        let [a, b] = <[usize; 2]>::deserialize(de)?;
        Ok(Span::new(a, b))
    }
}

mod bbox_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, ser: S) -> Result<S::Ok, S::Error> {
        [b.row0, b.col0, b.row1, b.col1].serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<BBox, D::Error> {
        let [r0, c0, r1, c1] = <[usize; 4]>::deserialize(de)?;
        Ok(BBox::new(r0, c0, r1, c1))
    }
}

/// Sums the tensor over the selected positions.
///
/// For image-text tensors a span yields an `[height, width]` map and a box a
/// `[tokens]` vector. Text-text tensors accept spans over the second caption
/// (yielding a vector over the first); image-image tensors accept boxes over
/// the first image (yielding a map over the second).
pub fn slice_project(t: &InteractionTensor, sel: &Selection) -> Result<Tensor> {
    let layout = t.layout();
    let (rows, cols) = (layout.rows(), layout.cols());
    match (layout, sel) {
        (Layout::ImageText { .. } | Layout::TextText { .. }, Selection::Span(span)) => {
            check_span(span, cols)?;
            let out: Vec<f64> = (0..rows)
                .map(|p| t.values[p * cols + span.start..p * cols + span.end].iter().sum())
                .collect();
            let shape = match layout {
                Layout::ImageText { height, width, .. } => vec![height, width],
                _ => vec![rows],
            };
            Ok(Tensor::from_parts_unchecked(shape, out))
        }
        (
            Layout::ImageText { height, width, .. } | Layout::ImageImage { height, width },
            Selection::Bbox(b),
        ) => {
            if b.row0 >= b.row1 || b.col0 >= b.col1 {
                return Err(Error::InvalidInput("empty box selection".into()));
            }
            if !b.fits(height, width) {
                return Err(Error::InvalidInput(format!(
                    "box ({}, {}, {}, {}) outside {height}x{width} grid",
                    b.row0, b.col0, b.row1, b.col1
                )));
            }
            let mut out = vec![0.0; cols];
            for p in b.patches(width) {
                for (o, v) in out.iter_mut().zip(&t.values[p * cols..(p + 1) * cols]) {
                    *o += v;
                }
            }
            let shape = match layout {
                Layout::ImageImage { .. } => vec![height, width],
                _ => vec![cols],
            };
            Ok(Tensor::from_parts_unchecked(shape, out))
        }
        _ => Err(Error::InvalidInput(format!(
            "selection {sel:?} does not apply to a {layout:?} tensor"
        ))),
    }
}

fn check_span(span: &Span, len: usize) -> Result<()> {
    if span.is_empty() {
        return Err(Error::InvalidInput("empty span selection".into()));
    }
    if span.end > len {
        return Err(Error::InvalidInput(format!(
            "span [{}, {}) outside {len} tokens",
            span.start, span.end
        )));
    }
    Ok(())
}
