//! Two-tower transformer encoders over patch grids and token sequences.
//!
//! Both towers share one layout: an input embedding (`hidden0`), `blocks`
//! pre-norm transformer blocks each exposing its output as tap
//! `hidden{t+1}`, a final layer norm, and attention pooling with a learned
//! query followed by a linear projection. The per-position projections of
//! the last layer are exposed as the `tokens` output.

mod arch;
mod checkpoint;
mod input;
mod train;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use input::{ImageInput, TextInput};
pub use train::{info_nce, loss_and_gradients, train, train_with, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::tensor::{dot, Feed, Forward, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    pub patch_features: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub mlp_width: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    /// Token id of the padding word; the text reference is all padding.
    #[serde(default)]
    pub pad_id: usize,
    /// L2-normalise the pooled embedding inside each encoder.
    pub normalize: bool,
    /// Softmax temperature of the contrastive loss. Scores used for
    /// attribution are raw dot products.
    pub temperature: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_height: 8,
            grid_width: 8,
            patch_features: 12,
            vocab_size: 64,
            max_len: 16,
            width: 32,
            mlp_width: 64,
            blocks: 2,
            embed_dim: 16,
            pad_id: 0,
            normalize: true,
            temperature: 0.1,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("grid_height", self.grid_height),
            ("grid_width", self.grid_width),
            ("patch_features", self.patch_features),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("width", self.width),
            ("mlp_width", self.mlp_width),
            ("blocks", self.blocks),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.pad_id >= self.vocab_size {
            return Err(Error::InvalidConfig("pad_id outside vocabulary".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// The second-to-last hidden layer, where attributions are taken by default.
    pub fn default_tap(&self) -> String {
        format!("hidden{}", self.blocks.saturating_sub(1))
    }

    pub fn tap_names(&self) -> Vec<String> {
        (0..=self.blocks).map(|t| format!("hidden{t}")).collect()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One encoder bound to a concrete input. Forward passes may replace tap
/// values through overrides; the named output is the pooled embedding
/// unless stated otherwise.
pub struct Encoding<'m> {
    graph: &'m Graph,
    params: &'m Feed,
    data: Feed,
    output: String,
}

impl<'m> Encoding<'m> {
    pub fn new(graph: &'m Graph, params: &'m Feed, data: Feed, output: &str) -> Result<Self> {
        graph.output_shape(output)?;
        Ok(Self {
            graph,
            params,
            data,
            output: output.to_string(),
        })
    }

    pub fn graph(&self) -> &'m Graph {
        self.graph
    }

    pub fn output_name(&self) -> &str {
        &self.output
    }

    pub fn output_dim(&self) -> usize {
        self.graph
            .output_shape(&self.output)
            .map(|s| s.iter().product())
            .unwrap_or(0)
    }

    pub fn forward(&self, overrides: &Feed) -> Result<Forward<'m>> {
        self.graph.forward_layered(&[self.params, &self.data], overrides)
    }

    /// Output vector with no overrides.
    pub fn embed(&self) -> Result<Vec<f64>> {
        Ok(self.forward(&Feed::new())?.output(&self.output)?.data().to_vec())
    }

    /// Output vector with one tap replaced.
    pub fn embed_from(&self, tap: &str, value: &Tensor) -> Result<Vec<f64>> {
        let overrides = Feed::from([(tap.to_string(), value.clone())]);
        Ok(self.forward(&overrides)?.output(&self.output)?.data().to_vec())
    }

    pub fn tap_value(&self, tap: &str) -> Result<Tensor> {
        self.graph.tap_id(tap)?;
        Ok(self.forward(&Feed::new())?.tap(tap)?.clone())
    }
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    config: ModelConfig,
    params: Feed,
    image_graph: Graph,
    text_graphs: Vec<OnceLock<Graph>>,
}

impl PartialEq for DualEncoder {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl DualEncoder {
    /// Fresh model with weights drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = arch::init_params(&config);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: Feed) -> Result<Self> {
        config.validate()?;
        let expected = arch::param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} weight tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::MissingInput(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("weight `{name}`"), shape, t.shape()));
            }
        }
        let image_graph = arch::image_graph(&config)?;
        let text_graphs = (0..=config.max_len).map(|_| OnceLock::new()).collect();
        Ok(Self {
            config,
            params,
            image_graph,
            text_graphs,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Feed {
        &self.params
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut Feed {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Hex SHA-256 over the configuration and every weight, in name order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn image_graph(&self) -> &Graph {
        &self.image_graph
    }

    pub fn text_graph(&self, len: usize) -> Result<&Graph> {
        if len == 0 || len > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "caption length {len} outside 1..={}",
                self.config.max_len
            )));
        }
        if let Some(g) = self.text_graphs[len].get() {
            return Ok(g);
        }
        let g = arch::text_graph(&self.config, len)?;
        Ok(self.text_graphs[len].get_or_init(|| g))
    }

    pub fn check_image(&self, image: &ImageInput) -> Result<()> {
        let c = &self.config;
        let found = [image.height(), image.width(), image.features()];
        let expected = [c.grid_height, c.grid_width, c.patch_features];
        if found != expected {
            return Err(Error::shape("image grid", &expected, &found));
        }
        Ok(())
    }

    pub fn check_text(&self, text: &TextInput) -> Result<()> {
        if let Some(&bad) = text.ids().iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        self.text_graph(text.len()).map(|_| ())
    }

    fn image_feed(&self, image: &ImageInput) -> Result<Feed> {
        self.check_image(image)?;
        Ok(Feed::from([("patches".to_string(), image.to_tensor())]))
    }

    fn text_feed(&self, text: &TextInput) -> Result<Feed> {
        self.check_text(text)?;
        let positions = Tensor::vector((0..text.len()).map(|i| i as f64).collect());
        Ok(Feed::from([
            ("ids".to_string(), text.to_tensor()),
            ("positions".to_string(), positions),
        ]))
    }

    pub fn image_encoder(&self, image: &ImageInput) -> Result<Encoding<'_>> {
        Encoding::new(&self.image_graph, &self.params, self.image_feed(image)?, "embedding")
    }

    pub fn text_encoder(&self, text: &TextInput) -> Result<Encoding<'_>> {
        let graph = self.text_graph(text.len())?;
        Encoding::new(graph, &self.params, self.text_feed(text)?, "embedding")
    }

    pub fn encode_image(&self, image: &ImageInput) -> Result<Vec<f64>> {
        self.image_encoder(image)?.embed()
    }

    pub fn encode_text(&self, text: &TextInput) -> Result<Vec<f64>> {
        self.text_encoder(text)?.embed()
    }

    /// Raw dot product of the two embeddings.
    pub fn similarity(&self, image: &ImageInput, text: &TextInput) -> Result<f64> {
        Ok(dot(&self.encode_image(image)?, &self.encode_text(text)?))
    }

    /// Every tap plus the `tokens` output of one encoder pass.
    pub fn image_states(&self, image: &ImageInput) -> Result<BTreeMap<String, Tensor>> {
        states(&self.image_encoder(image)?)
    }

    pub fn text_states(&self, text: &TextInput) -> Result<BTreeMap<String, Tensor>> {
        states(&self.text_encoder(text)?)
    }
}

fn states(enc: &Encoding<'_>) -> Result<BTreeMap<String, Tensor>> {
    let fwd = enc.forward(&Feed::new())?;
    let mut out = fwd.taps();
    out.insert("tokens".into(), fwd.output("tokens")?.clone());
    out.insert("embedding".into(), fwd.output("embedding")?.clone());
    Ok(out)
}

/// Anything scoring (image, caption) pairs by a dot product of embeddings.
pub trait EmbeddingModel {
    fn embed_image(&self, image: &ImageInput) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &TextInput) -> Result<Vec<f64>>;
    fn pad_id(&self) -> usize;

    fn score(&self, image: &ImageInput, text: &TextInput) -> Result<f64> {
        Ok(dot(&self.embed_image(image)?, &self.embed_text(text)?))
    }
}

impl EmbeddingModel for DualEncoder {
    fn embed_image(&self, image: &ImageInput) -> Result<Vec<f64>> {
        self.encode_image(image)
    }

    fn embed_text(&self, text: &TextInput) -> Result<Vec<f64>> {
        self.encode_text(text)
    }

    fn pad_id(&self) -> usize {
        self.config.pad_id
    }
}
