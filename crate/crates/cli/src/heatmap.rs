//! Signed heatmaps as 8-bit PGM: zero maps to mid-grey, the largest
//! magnitude to black (negative) or white (positive).

use std::path::Path;

use interattr::{Result, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub pair_id: String,
    pub class: String,
    pub span: [usize; 2],
    pub shape: Vec<usize>,
    /// Magnitude mapped to the extremes of the grey scale.
    pub scale: f64,
    pub values: Vec<f64>,
}

pub fn symmetric_scale(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn grey_level(v: f64, scale: f64) -> u8 {
    if scale == 0.0 {
        return 128;
    }
    (128.0 + 127.0 * (v / scale)).round().clamp(0.0, 255.0) as u8
}

/// Binary (P5) PGM of an `[H, W]` map.
pub fn encode_pgm(map: &Tensor) -> Vec<u8> {
    let (h, w) = (map.rows(), map.cols());
    let scale = symmetric_scale(map.data());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| grey_level(v, scale)));
    out
}

pub fn write_heatmap(dir: &Path, stem: &str, map: &Tensor, sidecar: &Sidecar) -> Result<()> {
    std::fs::write(dir.join(format!("{stem}.pgm")), encode_pgm(map))?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}
