use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{InteractionTensor, Layout, Provenance};
use crate::encoders::{EmbeddingModel, ImageInput, TextInput};
use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub samples: usize,
    /// Probability of dropping each patch.
    pub drop_image: f64,
    /// Probability of dropping each token.
    pub drop_text: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Divide image latents by `sqrt(H*W)`.
    pub scale_image: bool,
    /// Divide text latents by `sqrt(S)`.
    pub scale_text: bool,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            drop_image: 0.3,
            drop_text: 0.3,
            lr: 1e-2,
            weight_decay: 1e-3,
            epochs: 5,
            seed: 0,
            scale_image: true,
            scale_text: true,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("samples and epochs must be positive".into()));
        }
        for p in [self.drop_image, self.drop_text] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidConfig(format!("drop probability {p} outside (0, 1)")));
            }
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("lr must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// One perturbation: binary keep masks, the model score and the sample weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSample {
    pub image_mask: Vec<bool>,
    pub text_mask: Vec<bool>,
    pub target: f64,
    pub weight: f64,
}

/// `phi(z_a, z_b) = z_a^T W z_b + c` over binary keep masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilinearSurrogate {
    pub w: Tensor,
    pub c: f64,
}

impl BilinearSurrogate {
    pub fn predict(&self, image_mask: &[bool], text_mask: &[bool]) -> f64 {
        let mut s = self.c;
        for (p, &keep) in image_mask.iter().enumerate() {
            if keep {
                for (t, &k2) in text_mask.iter().enumerate() {
                    if k2 {
                        s += self.w.get(p, t);
                    }
                }
            }
        }
        s
    }

    /// `W` as an image-text interaction tensor over a `height x width` grid.
    pub fn to_tensor(&self, height: usize, width: usize, model_digest: &str) -> Result<InteractionTensor> {
        let layout = Layout::ImageText {
            height,
            width,
            tokens: self.w.cols(),
        };
        InteractionTensor::new(layout, self.w.data().to_vec(), None, Provenance::new("ilime", model_digest))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFit {
    pub surrogate: BilinearSurrogate,
    /// Weighted mean squared error after each epoch.
    pub epoch_mse: Vec<f64>,
}

impl SurrogateFit {
    pub fn final_mse(&self) -> f64 {
        *self.epoch_mse.last().expect("at least one epoch")
    }
}

fn latent(mask: &[bool], scaled: bool) -> Vec<f64> {
    let v = if scaled { 1.0 / (mask.len() as f64).sqrt() } else { 1.0 };
    mask.iter().map(|&k| if k { v } else { 0.0 }).collect()
}

/// Fits the surrogate by per-sample SGD on `weight * (phi - target)^2`,
/// with weight decay added to the gradient of `W` and `c`.
pub fn fit_bilinear_surrogate(samples: &[SurrogateSample], cfg: &SurrogateConfig) -> Result<SurrogateFit> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| Error::Empty("surrogate samples".into()))?;
    let (p, s) = (first.image_mask.len(), first.text_mask.len());
    if samples.iter().any(|x| x.image_mask.len() != p || x.text_mask.len() != s) {
        return Err(Error::InvalidInput("surrogate samples differ in mask length".into()));
    }
    let za: Vec<Vec<f64>> = samples.iter().map(|x| latent(&x.image_mask, cfg.scale_image)).collect();
    let zb: Vec<Vec<f64>> = samples.iter().map(|x| latent(&x.text_mask, cfg.scale_text)).collect();
    let mut w = vec![0.0; p * s];
    let mut c = 0.0;
    let phi = |w: &[f64], c: f64, a: &[f64], b: &[f64]| {
        let mut out = c;
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0.0 {
                out += ai * dot(&w[i * s..(i + 1) * s], b);
            }
        }
        out
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let total_weight: f64 = samples.iter().map(|x| x.weight).sum();
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &n in &order {
            let (a, b) = (&za[n], &zb[n]);
            let r = phi(&w, c, a, b) - samples[n].target;
            let g = 2.0 * samples[n].weight * r;
            for (i, &ai) in a.iter().enumerate() {
                let row = &mut w[i * s..(i + 1) * s];
                for (wij, &bj) in row.iter_mut().zip(b) {
                    *wij -= cfg.lr * (g * ai * bj + cfg.weight_decay * *wij);
                }
            }
            c -= cfg.lr * (g + cfg.weight_decay * c);
        }
        let sse: f64 = samples
            .iter()
            .enumerate()
            .map(|(n, x)| x.weight * (phi(&w, c, &za[n], &zb[n]) - x.target).powi(2))
            .sum();
        let mse = sse / total_weight.max(f64::MIN_POSITIVE);
        if !mse.is_finite() {
            return Err(Error::NonConvergence(mse));
        }
        epoch_mse.push(mse);
    }
    let (sa, sb) = (
        if cfg.scale_image { 1.0 / (p as f64).sqrt() } else { 1.0 },
        if cfg.scale_text { 1.0 / (s as f64).sqrt() } else { 1.0 },
    );
    let w = w.into_iter().map(|v| v * sa * sb).collect();
    Ok(SurrogateFit {
        surrogate: BilinearSurrogate {
            w: Tensor::matrix(p, s, w)?,
            c,
        },
        epoch_mse,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Draws perturbations of the pair and fits a bilinear surrogate to the
/// model's scores. Dropped patches take the image's mean patch and dropped
/// tokens the padding id; each sample is weighted by the mean of the image
/// and text embedding cosine similarities to the unperturbed pair, clamped
/// at zero.
pub fn interaction_lime(
    model: &impl EmbeddingModel,
    image: &ImageInput,
    text: &TextInput,
    cfg: &SurrogateConfig,
) -> Result<SurrogateFit> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_11de);
    let ea = model.embed_image(image)?;
    let eb = model.embed_text(text)?;
    let fill = image.mean_patch();
    let pad = model.pad_id();
    let mut samples = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let image_mask: Vec<bool> = (0..image.num_patches()).map(|_| rng.random_bool(1.0 - cfg.drop_image)).collect();
        let text_mask: Vec<bool> = (0..text.len()).map(|_| rng.random_bool(1.0 - cfg.drop_text)).collect();
        let img = image.with_patches_filled(
            image_mask.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i),
            &fill,
        );
        let txt = text.with_tokens_replaced(
            text_mask.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i),
            pad,
        );
        let (ga, hb) = (model.embed_image(&img)?, model.embed_text(&txt)?);
        let weight = (0.5 * (cosine(&ga, &ea) + cosine(&hb, &eb))).max(0.0);
        samples.push(SurrogateSample {
            image_mask,
            text_mask,
            target: dot(&ga, &hb),
            weight,
        });
    }
    fit_bilinear_surrogate(&samples, cfg)
}
