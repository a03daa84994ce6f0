//! Integrated-Jacobian interaction attributions.
//!
//! For encoders `g`, `h` with tap values `a`, `b` and references `r_a`,
//! `r_b`, the integrated Jacobian of `g` is the average of `dg/dx` over `N`
//! points on the straight line from `r_a` to `a`. The attribution between
//! tap features `i` and `j` is
//! `(a - r_a)_i * sum_k J^a_ki J^b_kj * (b - r_b)_j`, and summing over the
//! feature dimension of each position gives one value per (patch, token).

mod tensor;

use serde::{Deserialize, Serialize};

pub use tensor::{
    completeness_residual, slice_project, Corners, InteractionTensor, Layout, Provenance, Selection, TENSOR_VERSION,
};

use crate::encoders::{DualEncoder, Encoding, ImageInput, TextInput};
use crate::error::{Error, Result};
use crate::tensor::{dot, Feed, Tensor};

/// Placement of the integration points `alpha_n`, `n = 1..=N`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// `alpha_n = n / N`.
    #[default]
    Right,
    /// `alpha_n = (n - 1/2) / N`.
    Midpoint,
}

impl Scheme {
    pub fn alpha(self, n: usize, steps: usize) -> f64 {
        match self {
            Scheme::Right => n as f64 / steps as f64,
            Scheme::Midpoint => (n as f64 - 0.5) / steps as f64,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "right" => Ok(Scheme::Right),
            "midpoint" => Ok(Scheme::Midpoint),
            other => Err(Error::InvalidConfig(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub steps: usize,
    pub scheme: Scheme,
    /// Threads evaluating integration steps. Results do not depend on it.
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            scheme: Scheme::Right,
            workers: 1,
        }
    }
}

impl IntegrationConfig {
    pub fn new(steps: usize, scheme: Scheme) -> Self {
        Self {
            steps,
            scheme,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("integration needs at least one step".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// How the reference tap values are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Tap values of the black image and of the all-padding caption of the
    /// same length.
    #[default]
    Inputs,
    /// Zero tensors at the tap.
    ZeroAtTap,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionConfig {
    #[serde(flatten)]
    pub integration: IntegrationConfig,
    /// Layer to attribute to; the model's default tap when `None`.
    #[serde(default)]
    pub tap: Option<String>,
    #[serde(default)]
    pub reference: ReferenceMode,
}

/// Averaged Jacobian `[K, L*D]` of one encoder along the path from
/// `reference` to `input` (both tap values of shape `[L, D]`).
#[derive(Clone, Debug, PartialEq)]
pub struct IntegratedJacobian {
    pub jacobian: Tensor,
    pub input: Tensor,
    pub reference: Tensor,
}

impl IntegratedJacobian {
    pub fn delta(&self) -> Tensor {
        self.input.sub(&self.reference).expect("endpoints share a shape")
    }

    /// `U[k, l] = sum_d (x - r)_{l,d} J_{k,(l,d)}`, shape `[K, L]`.
    pub fn position_contributions(&self) -> Tensor {
        let (l, d) = (self.input.rows(), self.input.cols());
        let k = self.jacobian.rows();
        let delta = self.delta();
        let mut out = vec![0.0; k * l];
        for kk in 0..k {
            let row = self.jacobian.row(kk);
            for p in 0..l {
                let mut s = 0.0;
                for dd in 0..d {
                    s += delta.data()[p * d + dd] * row[p * d + dd];
                }
                out[kk * l + p] = s;
            }
        }
        Tensor::from_parts_unchecked(vec![k, l], out)
    }
}

fn basis_seeds(shape: &[usize]) -> Vec<Tensor> {
    let n: usize = shape.iter().product();
    (0..n)
        .map(|k| {
            let mut e = Tensor::zeros(shape);
            e.data_mut()[k] = 1.0;
            e
        })
        .collect()
}

/// Jacobian `[K, L*D]` of the encoder output with the tap set to `x`, from
/// one override forward and a `K`-seed reverse sweep.
pub(crate) fn jacobian_at(encoder: &Encoding<'_>, tap: &str, x: Tensor, seeds: &[Tensor]) -> Result<Tensor> {
    let overrides = Feed::from([(tap.to_string(), x)]);
    let fwd = encoder.forward(&overrides)?;
    let mut grads = fwd.vjp_batch(encoder.output_name(), seeds, &[tap])?;
    Ok(grads.remove(tap).expect("requested gradient present"))
}

/// Integrated Jacobian of `encoder` at `tap`, from `reference` to the
/// encoder's own tap value. Per-step Jacobians are accumulated in ascending
/// step order whatever the number of workers.
pub fn integrated_jacobian(
    encoder: &Encoding<'_>,
    reference: &Tensor,
    cfg: &IntegrationConfig,
    tap: &str,
) -> Result<IntegratedJacobian> {
    cfg.validate()?;
    let input = encoder.tap_value(tap)?;
    if input.shape() != reference.shape() {
        return Err(Error::shape(format!("reference at `{tap}`"), input.shape(), reference.shape()));
    }
    let out_shape = encoder.graph().output_shape(encoder.output_name())?.to_vec();
    let seeds = basis_seeds(&out_shape);
    let point = |n: usize| reference.lerp(&input, cfg.scheme.alpha(n, cfg.steps));

    let mut acc: Option<Vec<f64>> = None;
    let mut add = |j: Tensor| match acc.as_mut() {
        None => acc = Some(j.into_data()),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(j.data()) {
                *x += y;
            }
        }
    };
    let steps: Vec<usize> = (1..=cfg.steps).collect();
    if cfg.workers <= 1 {
        for &n in &steps {
            add(jacobian_at(encoder, tap, point(n)?, &seeds)?);
        }
    } else {
        for window in steps.chunks(cfg.workers) {
            let results: Vec<Result<Tensor>> = std::thread::scope(|s| {
                let handles: Vec<_> = window
                    .iter()
                    .map(|&n| {
                        let seeds = &seeds;
                        let point = &point;
                        s.spawn(move || jacobian_at(encoder, tap, point(n)?, seeds))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("integration worker panicked"))
                    .collect()
            });
            for r in results {
                add(r?);
            }
        }
    }
    let n = cfg.steps as f64;
    let mut data = acc.expect("at least one step");
    for v in &mut data {
        *v /= n;
    }
    let k = seeds.len();
    let cols = input.numel();
    Ok(IntegratedJacobian {
        jacobian: Tensor::from_parts_unchecked(vec![k, cols], data),
        input,
        reference: reference.clone(),
    })
}

/// Unreduced attribution matrix `[L_a*D_a, L_b*D_b]`.
pub fn full_attribution_matrix(ja: &IntegratedJacobian, jb: &IntegratedJacobian) -> Result<Tensor> {
    if ja.jacobian.rows() != jb.jacobian.rows() {
        return Err(Error::shape("embedding dimension", &[ja.jacobian.rows()], &[jb.jacobian.rows()]));
    }
    let (da, db) = (ja.delta(), jb.delta());
    let (m, n, k) = (da.numel(), db.numel(), ja.jacobian.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for kk in 0..k {
                s += ja.jacobian.get(kk, i) * jb.jacobian.get(kk, j);
            }
            out[i * n + j] = da.data()[i] * s * db.data()[j];
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// `A[p, t] = sum_k U_a[k, p] U_b[k, t]`, in ascending `k`.
pub(crate) fn contract(ua: &Tensor, ub: &Tensor) -> Vec<f64> {
    let (k, la, lb) = (ua.rows(), ua.cols(), ub.cols());
    let mut out = vec![0.0; la * lb];
    for p in 0..la {
        for t in 0..lb {
            let mut s = 0.0;
            for kk in 0..k {
                s += ua.get(kk, p) * ub.get(kk, t);
            }
            out[p * lb + t] = s;
        }
    }
    out
}

pub(crate) fn corners(
    a: &Encoding<'_>,
    ref_a: &Tensor,
    tap_a: &str,
    b: &Encoding<'_>,
    ref_b: &Tensor,
    tap_b: &str,
) -> Result<Corners> {
    let ga = a.embed()?;
    let gr = a.embed_from(tap_a, ref_a)?;
    let hb = b.embed()?;
    let hr = b.embed_from(tap_b, ref_b)?;
    Ok(Corners {
        f_ab: dot(&ga, &hb),
        f_ra_b: dot(&gr, &hb),
        f_a_rb: dot(&ga, &hr),
        f_ra_rb: dot(&gr, &hr),
    })
}

/// Position-level attribution matrix `[L_a, L_b]` between two encodings and
/// the four corner scores.
pub fn pair_attributions(
    a: &Encoding<'_>,
    ref_a: &Tensor,
    b: &Encoding<'_>,
    ref_b: &Tensor,
    tap: &str,
    cfg: &IntegrationConfig,
) -> Result<(Vec<f64>, Corners)> {
    if a.output_dim() != b.output_dim() {
        return Err(Error::shape("embedding dimension", &[a.output_dim()], &[b.output_dim()]));
    }
    let ja = integrated_jacobian(a, ref_a, cfg, tap)?;
    let jb = integrated_jacobian(b, ref_b, cfg, tap)?;
    let values = contract(&ja.position_contributions(), &jb.position_contributions());
    Ok((values, corners(a, ref_a, tap, b, ref_b, tap)?))
}

fn resolve_tap(model: &DualEncoder, tap: &Option<String>) -> Result<String> {
    let tap = tap.clone().unwrap_or_else(|| model.config().default_tap());
    model.image_graph().tap_id(&tap)?;
    Ok(tap)
}

fn reference_for(enc: &Encoding<'_>, reference_input: Encoding<'_>, mode: ReferenceMode, tap: &str) -> Result<Tensor> {
    match mode {
        ReferenceMode::Inputs => reference_input.tap_value(tap),
        ReferenceMode::ZeroAtTap => Ok(Tensor::zeros(enc.graph().tap_shape(tap)?)),
    }
}

fn provenance(model: &DualEncoder, method: &str, tap: &str, cfg: &AttributionConfig) -> Provenance {
    Provenance {
        steps: Some(cfg.integration.steps),
        scheme: Some(cfg.integration.scheme),
        tap: Some(tap.to_string()),
        reference: Some(cfg.reference),
        ..Provenance::new(method, &model.digest())
    }
}

/// Attribution tensor `[H, W, S]` between image patches and caption tokens.
pub fn interaction_attributions(
    model: &DualEncoder,
    image: &ImageInput,
    text: &TextInput,
    cfg: &AttributionConfig,
) -> Result<InteractionTensor> {
    let tap = resolve_tap(model, &cfg.tap)?;
    let c = model.config();
    let a = model.image_encoder(image)?;
    let b = model.text_encoder(text)?;
    let black = ImageInput::black(c.grid_height, c.grid_width, c.patch_features);
    let pad = TextInput::padding(text.len(), c.pad_id);
    let ref_a = reference_for(&a, model.image_encoder(&black)?, cfg.reference, &tap)?;
    let ref_b = reference_for(&b, model.text_encoder(&pad)?, cfg.reference, &tap)?;
    let (values, corners) = pair_attributions(&a, &ref_a, &b, &ref_b, &tap, &cfg.integration)?;
    let layout = Layout::ImageText {
        height: c.grid_height,
        width: c.grid_width,
        tokens: text.len(),
    };
    InteractionTensor::new(layout, values, Some(corners), provenance(model, "ours", &tap, cfg))
}

/// Either modality, for intra-modal attributions.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Image(&'a ImageInput),
    Text(&'a TextInput),
}

/// Attributions between two inputs of the same modality, both passed
/// through that modality's encoder.
pub fn intra_modal_attributions(
    model: &DualEncoder,
    x1: Input<'_>,
    x2: Input<'_>,
    cfg: &AttributionConfig,
) -> Result<InteractionTensor> {
    let tap = resolve_tap(model, &cfg.tap)?;
    let c = model.config();
    let (e1, e2, r1, r2, layout) = match (x1, x2) {
        (Input::Text(t1), Input::Text(t2)) => (
            model.text_encoder(t1)?,
            model.text_encoder(t2)?,
            model.text_encoder(&TextInput::padding(t1.len(), c.pad_id))?,
            model.text_encoder(&TextInput::padding(t2.len(), c.pad_id))?,
            Layout::TextText {
                left: t1.len(),
                right: t2.len(),
            },
        ),
        (Input::Image(i1), Input::Image(i2)) => {
            let black = ImageInput::black(c.grid_height, c.grid_width, c.patch_features);
            (
                model.image_encoder(i1)?,
                model.image_encoder(i2)?,
                model.image_encoder(&black)?,
                model.image_encoder(&black)?,
                Layout::ImageImage {
                    height: c.grid_height,
                    width: c.grid_width,
                },
            )
        }
        _ => return Err(Error::InvalidInput("intra-modal inputs must share a modality".into())),
    };
    let ref1 = reference_for(&e1, r1, cfg.reference, &tap)?;
    let ref2 = reference_for(&e2, r2, cfg.reference, &tap)?;
    let (values, corners) = pair_attributions(&e1, &ref1, &e2, &ref2, &tap, &cfg.integration)?;
    InteractionTensor::new(layout, values, Some(corners), provenance(model, "ours", &tap, cfg))
}
