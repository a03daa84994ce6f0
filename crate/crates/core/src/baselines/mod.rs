//! Comparison methods: InteractionCAM, ITSM and InteractionLIME.

mod lime;

use serde::{Deserialize, Serialize};

pub use lime::{
    fit_bilinear_surrogate, interaction_lime, BilinearSurrogate, SurrogateConfig, SurrogateFit, SurrogateSample,
};

use crate::attribution::{jacobian_at, Corners, InteractionTensor, Layout, Provenance, ReferenceMode, Scheme};
use crate::encoders::{DualEncoder, Encoding, ImageInput, TextInput};
use crate::error::{Error, Result};
use crate::tensor::{dot, Feed, Tensor};

/// `a_i (dg_k/da_i)(dh_k/db_j) b_j` at the tap, summed over `k` and over the
/// feature dimension of each position. Computed directly from the
/// Jacobians at the actual tap values; returns the `[L_a, L_b]` values and
/// the corner scores for zero references.
pub fn cam_pair(ea: &Encoding<'_>, eb: &Encoding<'_>, tap: &str) -> Result<(Vec<f64>, Corners)> {
    if ea.output_dim() != eb.output_dim() {
        return Err(Error::shape("embedding dimension", &[ea.output_dim()], &[eb.output_dim()]));
    }
    let a = ea.tap_value(tap)?;
    let b = eb.tap_value(tap)?;
    let out_shape = ea.graph().output_shape(ea.output_name())?.to_vec();
    let k = ea.output_dim();
    let seeds: Vec<Tensor> = (0..k)
        .map(|i| {
            let mut e = Tensor::zeros(&out_shape);
            e.data_mut()[i] = 1.0;
            e
        })
        .collect();
    let ja = jacobian_at(ea, tap, a.clone(), &seeds)?;
    let jb = jacobian_at(eb, tap, b.clone(), &seeds)?;

    let per_position = |x: &Tensor, j: &Tensor| {
        let (l, d) = (x.rows(), x.cols());
        let mut u = vec![0.0; k * l];
        for kk in 0..k {
            for p in 0..l {
                let mut s = 0.0;
                for dd in 0..d {
                    s += x.get(p, dd) * j.get(kk, p * d + dd);
                }
                u[kk * l + p] = s;
            }
        }
        (l, u)
    };
    let (la, ua) = per_position(&a, &ja);
    let (lb, ub) = per_position(&b, &jb);
    let mut values = vec![0.0; la * lb];
    for p in 0..la {
        for t in 0..lb {
            let mut s = 0.0;
            for kk in 0..k {
                s += ua[kk * la + p] * ub[kk * lb + t];
            }
            values[p * lb + t] = s;
        }
    }

    let (ga, gr) = (ea.embed()?, ea.embed_from(tap, &Tensor::zeros(a.shape()))?);
    let (hb, hr) = (eb.embed()?, eb.embed_from(tap, &Tensor::zeros(b.shape()))?);
    let corners = Corners {
        f_ab: dot(&ga, &hb),
        f_ra_b: dot(&gr, &hb),
        f_a_rb: dot(&ga, &hr),
        f_ra_rb: dot(&gr, &hr),
    };
    Ok((values, corners))
}

/// InteractionCAM tensor `[H, W, S]` at `tap` (the model default when `None`).
pub fn interaction_cam(
    model: &DualEncoder,
    image: &ImageInput,
    text: &TextInput,
    tap: Option<&str>,
) -> Result<InteractionTensor> {
    let tap = tap.map_or_else(|| model.config().default_tap(), str::to_string);
    let (values, corners) = cam_pair(&model.image_encoder(image)?, &model.text_encoder(text)?, &tap)?;
    let c = model.config();
    let layout = Layout::ImageText {
        height: c.grid_height,
        width: c.grid_width,
        tokens: text.len(),
    };
    let provenance = Provenance {
        steps: Some(1),
        scheme: Some(Scheme::Right),
        tap: Some(tap),
        reference: Some(ReferenceMode::ZeroAtTap),
        ..Provenance::new("icam", &model.digest())
    };
    InteractionTensor::new(layout, values, Some(corners), provenance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItsmVariant {
    /// Per-position features after the final projection.
    Out,
    /// Per-position features at the attribution tap.
    Hidden,
}

/// `map[p, t] = <img[p], txt[t]>` for per-position feature matrices.
pub fn itsm_from_features(image: &Tensor, text: &Tensor) -> Result<Vec<f64>> {
    if image.shape().len() != 2 || text.shape().len() != 2 || image.cols() != text.cols() {
        return Err(Error::shape("itsm features", image.shape(), text.shape()));
    }
    let mut out = Vec::with_capacity(image.rows() * text.rows());
    for p in 0..image.rows() {
        for t in 0..text.rows() {
            out.push(dot(image.row(p), text.row(t)));
        }
    }
    Ok(out)
}

/// Pairwise dot products of patch and token representations.
pub fn itsm(model: &DualEncoder, image: &ImageInput, text: &TextInput, variant: ItsmVariant) -> Result<InteractionTensor> {
    let tap = model.config().default_tap();
    let name = match variant {
        ItsmVariant::Out => "tokens",
        ItsmVariant::Hidden => tap.as_str(),
    };
    let fa = model.image_encoder(image)?.forward(&Feed::new())?;
    let fb = model.text_encoder(text)?.forward(&Feed::new())?;
    let (a, b) = match variant {
        ItsmVariant::Out => (fa.output(name)?, fb.output(name)?),
        ItsmVariant::Hidden => (fa.tap(name)?, fb.tap(name)?),
    };
    let values = itsm_from_features(a, b)?;
    let c = model.config();
    let layout = Layout::ImageText {
        height: c.grid_height,
        width: c.grid_width,
        tokens: text.len(),
    };
    let method = match variant {
        ItsmVariant::Out => "itsm_out",
        ItsmVariant::Hidden => "itsm_hidden",
    };
    let provenance = Provenance {
        tap: (variant == ItsmVariant::Hidden).then(|| tap.clone()),
        ..Provenance::new(method, &model.digest())
    };
    InteractionTensor::new(layout, values, None, provenance)
}
