use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Image as an `height x width` grid of patches, each a feature vector with
/// values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInput {
    height: usize,
    width: usize,
    features: usize,
    data: Vec<f64>,
}

impl ImageInput {
    pub fn new(height: usize, width: usize, features: usize, data: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 || features == 0 {
            return Err(Error::InvalidInput(format!(
                "image grid {height}x{width}x{features} too small"
            )));
        }
        if data.len() != height * width * features {
            return Err(Error::shape(
                "image data",
                &[height * width * features],
                &[data.len()],
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            features,
            data,
        })
    }

    /// The all-zero reference image.
    pub fn black(height: usize, width: usize, features: usize) -> Self {
        Self {
            height,
            width,
            features,
            data: vec![0.0; height * width * features],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        &self.data[p * self.features..(p + 1) * self.features]
    }

    pub(crate) fn set_patch(&mut self, p: usize, values: &[f64]) {
        self.data[p * self.features..(p + 1) * self.features].copy_from_slice(values);
    }

    /// Mean over all patches of this image.
    pub fn mean_patch(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.features];
        for p in 0..self.num_patches() {
            for (m, v) in mean.iter_mut().zip(self.patch(p)) {
                *m += v;
            }
        }
        let n = self.num_patches() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Copy with the given patches replaced by `fill`.
    pub fn with_patches_filled(&self, patches: impl IntoIterator<Item = usize>, fill: &[f64]) -> Self {
        let mut out = self.clone();
        for p in patches {
            out.set_patch(p, fill);
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts_unchecked(vec![self.num_patches(), self.features], self.data.clone())
    }

    /// Row-major patch index of grid cell `(row, col)`.
    pub fn patch_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}

/// Token-id sequence. Validation against a vocabulary happens in the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInput {
    ids: Vec<usize>,
}

impl TextInput {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        Ok(Self { ids })
    }

    /// All-padding sequence of the given length, the text reference.
    pub fn padding(len: usize, pad_id: usize) -> Self {
        Self {
            ids: vec![pad_id; len],
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_tokens_replaced(&self, positions: impl IntoIterator<Item = usize>, id: usize) -> Self {
        let mut out = self.clone();
        for p in positions {
            out.ids[p] = id;
        }
        out
    }

    pub(crate) fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.ids.iter().map(|&i| i as f64).collect())
    }
}
