//! Name-based dispatch over the attribution method and its baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::{interaction_attributions, AttributionConfig, InteractionTensor};
use crate::baselines::{interaction_cam, interaction_lime, itsm, ItsmVariant, SurrogateConfig};
use crate::encoders::{DualEncoder, ImageInput, TextInput};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ours,
    Icam,
    ItsmOut,
    ItsmHidden,
    Ilime,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ours, Method::Icam, Method::ItsmOut, Method::ItsmHidden, Method::Ilime];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Icam => "icam",
            Method::ItsmOut => "itsm-out",
            Method::ItsmHidden => "itsm-hidden",
            Method::Ilime => "ilime",
        }
    }

    /// Whether the integration settings change the result.
    pub fn integrates(self) -> bool {
        self == Method::Ours
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Image-caption tensor from the named method. `cfg` matters for `ours`
/// (and its tap for `icam`); `seed` only for the sampled surrogate.
pub fn attribute(
    model: &DualEncoder,
    image: &ImageInput,
    text: &TextInput,
    method: Method,
    cfg: &AttributionConfig,
    seed: u64,
) -> Result<InteractionTensor> {
    match method {
        Method::Ours => interaction_attributions(model, image, text, cfg),
        Method::Icam => interaction_cam(model, image, text, cfg.tap.as_deref()),
        Method::ItsmOut => itsm(model, image, text, ItsmVariant::Out),
        Method::ItsmHidden => itsm(model, image, text, ItsmVariant::Hidden),
        Method::Ilime => {
            let fit = interaction_lime(model, image, text, &SurrogateConfig { seed, ..SurrogateConfig::default() })?;
            let c = model.config();
            fit.surrogate.to_tensor(c.grid_height, c.grid_width, &model.digest())
        }
    }
}
