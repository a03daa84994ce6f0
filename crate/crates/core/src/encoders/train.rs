use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DualEncoder, ImageInput, TextInput};
use crate::error::{Error, Result};
use crate::tensor::{dot, Feed, Tensor};

/// AdamW with decoupled weight decay and an exponential learning-rate
/// schedule from `lr_start` (first step) to `lr_end` (last step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_start: 3e-3,
            lr_end: 3e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::InvalidConfig("need epochs >= 1 and batch_size >= 2".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        Ok(())
    }

    fn lr(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr_start;
        }
        let t = step as f64 / (total - 1) as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(t)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Symmetric InfoNCE over a batch of embeddings with logits `e_i . t_j / tau`.
/// Returns the loss and its gradients with respect to each embedding.
pub fn info_nce(
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    tau: f64,
) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let b = images.len();
    let logits: Vec<Vec<f64>> = images
        .iter()
        .map(|e| texts.iter().map(|t| dot(e, t) / tau).collect())
        .collect();
    let softmax = |xs: Vec<f64>| {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        (m + z.ln(), ex.into_iter().map(|v| v / z).collect::<Vec<_>>())
    };
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; b]; b];
    let scale = 0.5 / b as f64;
    for i in 0..b {
        let (lse, p) = softmax(logits[i].clone());
        loss += lse - logits[i][i];
        for j in 0..b {
            grad[i][j] += scale * (p[j] - f64::from(i == j));
        }
    }
    for j in 0..b {
        let (lse, p) = softmax((0..b).map(|i| logits[i][j]).collect());
        loss += lse - logits[j][j];
        for i in 0..b {
            grad[i][j] += scale * (p[i] - f64::from(i == j));
        }
    }
    let dim = images.first().map_or(0, Vec::len);
    let mut d_img = vec![vec![0.0; dim]; b];
    let mut d_txt = vec![vec![0.0; dim]; b];
    for i in 0..b {
        for j in 0..b {
            let g = grad[i][j] / tau;
            for k in 0..dim {
                d_img[i][k] += g * texts[j][k];
                d_txt[j][k] += g * images[i][k];
            }
        }
    }
    (loss * scale, d_img, d_txt)
}

fn accumulate(into: &mut Feed, grads: std::collections::BTreeMap<String, Tensor>) {
    for (name, g) in grads {
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}

/// Contrastive loss of one batch and its gradient for every weight.
pub fn loss_and_gradients(model: &DualEncoder, batch: &[(&ImageInput, &TextInput)]) -> Result<(f64, Feed)> {
    if batch.len() < 2 {
        return Err(Error::InvalidInput("contrastive batch needs at least two pairs".into()));
    }
    let image_names: Vec<&str> = model
        .params
        .keys()
        .filter(|k| k.starts_with("image."))
        .map(String::as_str)
        .collect();
    let text_names: Vec<&str> = model
        .params
        .keys()
        .filter(|k| k.starts_with("text."))
        .map(String::as_str)
        .collect();

    let encoders_img = batch
        .iter()
        .map(|(img, _)| model.image_encoder(img))
        .collect::<Result<Vec<_>>>()?;
    let encoders_txt = batch
        .iter()
        .map(|(_, txt)| model.text_encoder(txt))
        .collect::<Result<Vec<_>>>()?;
    let fwd_img = encoders_img
        .iter()
        .map(|e| e.forward(&Feed::new()))
        .collect::<Result<Vec<_>>>()?;
    let fwd_txt = encoders_txt
        .iter()
        .map(|e| e.forward(&Feed::new()))
        .collect::<Result<Vec<_>>>()?;
    let emb = |f: &crate::tensor::Forward<'_>| f.output("embedding").map(|t| t.data().to_vec());
    let e: Vec<Vec<f64>> = fwd_img.iter().map(emb).collect::<Result<_>>()?;
    let t: Vec<Vec<f64>> = fwd_txt.iter().map(emb).collect::<Result<_>>()?;

    let (loss, d_img, d_txt) = info_nce(&e, &t, model.config.temperature);
    let mut grads = Feed::new();
    let k = model.config.embed_dim;
    for (fwd, d) in fwd_img.iter().zip(d_img) {
        let seed = Tensor::from_parts_unchecked(vec![1, k], d);
        accumulate(&mut grads, fwd.vjp(&[("embedding", &seed)], &image_names)?);
    }
    for (fwd, d) in fwd_txt.iter().zip(d_txt) {
        let seed = Tensor::from_parts_unchecked(vec![1, k], d);
        accumulate(&mut grads, fwd.vjp(&[("embedding", &seed)], &text_names)?);
    }
    Ok((loss, grads))
}

pub fn train(model: &mut DualEncoder, pairs: &[(ImageInput, TextInput)], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, pairs, cfg, |_, _| {})
}

/// Trains in place, calling `on_epoch(epoch, mean_loss)` after each epoch.
/// A non-finite loss aborts with [`Error::Divergence`] and leaves the model
/// at its last finite state.
pub fn train_with(
    model: &mut DualEncoder,
    pairs: &[(ImageInput, TextInput)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.len() < 2 {
        return Err(Error::Empty("training set needs at least two pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut m: Feed = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect();
    let mut v = m.clone();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut counted = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<(&ImageInput, &TextInput)> =
                chunk.iter().map(|&i| (&pairs[i].0, &pairs[i].1)).collect();
            let diverged = |loss| Error::Divergence {
                epoch,
                step: report.steps,
                loss,
            };
            let (loss, grads) = match loss_and_gradients(model, &batch) {
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                other => other?,
            };
            if !loss.is_finite() || grads.values().any(|g| g.data().iter().any(|x| !x.is_finite())) {
                return Err(diverged(loss));
            }
            let lr = cfg.lr(report.steps, total);
            report.steps += 1;
            let t = report.steps as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for (name, w) in model.params.iter_mut() {
                let g = &grads[name];
                let mm = m.get_mut(name).expect("moment present").data_mut();
                let vv = v.get_mut(name).expect("moment present").data_mut();
                for (((wi, gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(mm).zip(vv) {
                    *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                    *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                    let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
                    *wi -= lr * (update + cfg.weight_decay * *wi);
                }
            }
            epoch_loss += loss;
            counted += 1;
        }
        let mean = epoch_loss / counted.max(1) as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(report)
}
