use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingModel, ImageInput, Modality, TextInput};
use crate::error::{Error, Result};

/// Conditional perturbation protocols: one input is perturbed while the other
/// stays intact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PerturbationMode {
    /// Image patch deletion.
    #[serde(rename = "CID")]
    Cid,
    /// Image patch insertion.
    #[serde(rename = "CII")]
    Cii,
    /// Text token deletion.
    #[serde(rename = "CTD")]
    Ctd,
    /// Text token insertion.
    #[serde(rename = "CTI")]
    Cti,
}

impl PerturbationMode {
    pub const ALL: [PerturbationMode; 4] = [Self::Cid, Self::Cii, Self::Ctd, Self::Cti];

    pub fn side(self) -> Modality {
        match self {
            Self::Cid | Self::Cii => Modality::Image,
            Self::Ctd | Self::Cti => Modality::Text,
        }
    }

    pub fn is_deletion(self) -> bool {
        matches!(self, Self::Cid | Self::Ctd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cid => "CID",
            Self::Cii => "CII",
            Self::Ctd => "CTD",
            Self::Cti => "CTI",
        }
    }
}

impl fmt::Display for PerturbationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown perturbation mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub mode: PerturbationMode,
    /// Fraction of features removed (deletion) or inserted (insertion).
    pub fractions: Vec<f64>,
    pub scores: Vec<f64>,
}

impl PerturbationCurve {
    pub fn auc(&self) -> Result<f64> {
        auc(&self.fractions, &self.scores)
    }
}

/// Feature indices by descending score; equal scores keep ascending index.
pub fn ranking_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order
}

/// Feature counts at which the score is evaluated: every count up to 64
/// features, otherwise 65 evenly spaced counts from 0 to `n`.
pub fn step_counts(n: usize) -> Vec<usize> {
    if n <= 64 {
        (0..=n).collect()
    } else {
        (0..=64).map(|i| i * n / 64).collect()
    }
}

/// Re-scores the pair while removing (or inserting) features in ranking
/// order. Removed patches take the image's mean patch and removed tokens the
/// padding id.
pub fn perturbation_curve(
    model: &impl EmbeddingModel,
    image: &ImageInput,
    text: &TextInput,
    ranking: &[f64],
    mode: PerturbationMode,
) -> Result<PerturbationCurve> {
    let n = match mode.side() {
        Modality::Image => image.num_patches(),
        Modality::Text => text.len(),
    };
    if ranking.len() != n {
        return Err(Error::InvalidInput(format!(
            "{mode} ranks {} features but the {:?} side has {n}",
            ranking.len(),
            mode.side()
        )));
    }
    if n == 0 {
        return Err(Error::Empty("perturbed input".into()));
    }
    if ranking.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("perturbation ranking".into()));
    }
    let order = ranking_order(ranking);
    let fill = image.mean_patch();
    let pad = model.pad_id();
    let counts = step_counts(n);
    let mut scores = Vec::with_capacity(counts.len());
    for &k in &counts {
        let removed = if mode.is_deletion() { &order[..k] } else { &order[k..] };
        let score = match mode.side() {
            Modality::Image => model.score(&image.with_patches_filled(removed.iter().copied(), &fill), text)?,
            Modality::Text => model.score(image, &text.with_tokens_replaced(removed.iter().copied(), pad))?,
        };
        scores.push(score);
    }
    Ok(PerturbationCurve {
        mode,
        fractions: counts.iter().map(|&k| k as f64 / n as f64).collect(),
        scores,
    })
}

/// Trapezoidal area under `y(x)`; `x` must be strictly increasing.
pub fn auc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("curve", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("a curve needs at least two points".into()));
    }
    if x.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("curve points are not sorted by fraction".into()));
    }
    Ok(x.windows(2).zip(y.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum())
}
