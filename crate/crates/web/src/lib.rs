//! Browser demo: the bundled checkpoint and the test split of the demo
//! corpus, with three operations exposed to JavaScript. Attribute a pair,
//! slice the tensor along a caption span (patch heatmap) or a patch box
//! (token scores).

use interattr::attribution::{
    completeness_residual, slice_project, AttributionConfig, Corners, IntegrationConfig, InteractionTensor, ReferenceMode,
    Scheme, Selection,
};
use interattr::data::{generate_corpus, Annotation, BBox, CorpusConfig, GroundedPair, Span, Split};
use interattr::encoders::{read_checkpoint, DualEncoder};
use interattr::method::{attribute, Method};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const CHECKPOINT: &[u8] = include_bytes!("../../../demo/model.ckpt");

/// Settings that reproduce `demo/corpus.json`.
pub fn demo_corpus_config() -> CorpusConfig {
    CorpusConfig {
        train_size: 300,
        test_size: 30,
        ..CorpusConfig::primary_domain(1)
    }
}

#[derive(Debug, Serialize)]
pub struct PairView {
    pub id: String,
    pub tokens: Vec<String>,
    pub height: usize,
    pub width: usize,
    /// Mean feature value per patch, row-major, for drawing the image.
    pub intensity: Vec<f64>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub method: Method,
    pub shape: Vec<usize>,
    pub total: f64,
    pub corners: Option<Corners>,
    pub completeness_residual: Option<f64>,
}

/// Everything behind the JavaScript bindings, usable natively.
pub struct Explorer {
    model: DualEncoder,
    pairs: Vec<GroundedPair>,
    current: Option<InteractionTensor>,
}

impl Explorer {
    pub fn new() -> interattr::Result<Self> {
        let model = read_checkpoint(CHECKPOINT, None)?.model;
        let corpus = generate_corpus(&demo_corpus_config())?;
        let pairs = corpus.split(Split::Test).cloned().collect();
        Ok(Self { model, pairs, current: None })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, index: usize) -> interattr::Result<PairView> {
        let p = self.get(index)?;
        let img = &p.image;
        Ok(PairView {
            id: p.id.clone(),
            tokens: p.tokens.clone(),
            height: img.height(),
            width: img.width(),
            intensity: (0..img.num_patches())
                .map(|i| img.patch(i).iter().sum::<f64>() / img.features() as f64)
                .collect(),
            annotations: p.annotations.clone(),
        })
    }

    fn get(&self, index: usize) -> interattr::Result<&GroundedPair> {
        self.pairs
            .get(index)
            .ok_or_else(|| interattr::Error::InvalidInput(format!("pair index {index} out of range")))
    }

    pub fn attribute(&mut self, index: usize, method: &str, steps: usize, zero_ref: bool) -> interattr::Result<Summary> {
        let method: Method = method.parse()?;
        let cfg = AttributionConfig {
            integration: IntegrationConfig::new(steps, Scheme::Right),
            tap: None,
            reference: if zero_ref { ReferenceMode::ZeroAtTap } else { ReferenceMode::Inputs },
        };
        cfg.integration.validate()?;
        let p = self.get(index)?;
        let t = attribute(&self.model, &p.image, &p.caption, method, &cfg, 0)?;
        let summary = Summary {
            method,
            shape: t.shape(),
            total: t.total(),
            corners: t.corners().copied(),
            completeness_residual: completeness_residual(&t).ok(),
        };
        self.current = Some(t);
        Ok(summary)
    }

    fn slice(&self, sel: Selection) -> interattr::Result<Vec<f64>> {
        let t = self
            .current
            .as_ref()
            .ok_or_else(|| interattr::Error::InvalidInput("attribute a pair first".into()))?;
        Ok(slice_project(t, &sel)?.data().to_vec())
    }

    /// `[height * width]` heatmap for caption tokens `[start, end)`.
    pub fn slice_span(&self, start: usize, end: usize) -> interattr::Result<Vec<f64>> {
        self.slice(Selection::Span(Span::new(start, end)))
    }

    /// Per-token scores for the patch box `[row0, row1) x [col0, col1)`.
    pub fn slice_box(&self, row0: usize, col0: usize, row1: usize, col1: usize) -> interattr::Result<Vec<f64>> {
        self.slice(Selection::Bbox(BBox::new(row0, col0, row1, col1)))
    }
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Explorer);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsError> {
        Explorer::new().map(Demo).map_err(js)
    }

    #[wasm_bindgen(js_name = pairCount)]
    pub fn pair_count(&self) -> usize {
        self.0.len()
    }

    /// JSON [`PairView`].
    pub fn pair(&self, index: usize) -> Result<String, JsError> {
        serde_json::to_string(&self.0.pair(index).map_err(js)?).map_err(js)
    }

    /// Computes and keeps the tensor for later slices; returns a JSON
    /// [`Summary`].
    pub fn attribute(&mut self, index: usize, method: &str, steps: usize, zero_ref: bool) -> Result<String, JsError> {
        serde_json::to_string(&self.0.attribute(index, method, steps, zero_ref).map_err(js)?).map_err(js)
    }

    #[wasm_bindgen(js_name = sliceSpan)]
    pub fn slice_span(&self, start: usize, end: usize) -> Result<Vec<f64>, JsError> {
        self.0.slice_span(start, end).map_err(js)
    }

    #[wasm_bindgen(js_name = sliceBox)]
    pub fn slice_box(&self, row0: usize, col0: usize, row1: usize, col1: usize) -> Result<Vec<f64>, JsError> {
        self.0.slice_box(row0, col0, row1, col1).map_err(js)
    }
}
