use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointGameResult {
    pub pga_hit: bool,
    pub pge: f64,
}

/// Scores a `[H, W]` heatmap against a patch box. The hit test uses the first
/// maximum in row-major order; energy is the positive mass inside the box over
/// all positive mass, or 0 when there is none.
pub fn point_game(heatmap: &Tensor, bbox: &BBox) -> Result<PointGameResult> {
    let &[h, w] = heatmap.shape() else {
        return Err(Error::InvalidInput(format!("heatmap must be 2-d, got shape {:?}", heatmap.shape())));
    };
    if bbox.area() == 0 {
        return Err(Error::InvalidInput("empty bounding box".into()));
    }
    if !bbox.fits(h, w) {
        return Err(Error::InvalidInput(format!("bounding box outside the {h}x{w} heatmap")));
    }
    let values = heatmap.data();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap".into()));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let (mut inside, mut total) = (0.0, 0.0);
    for (i, &v) in values.iter().enumerate() {
        if v > 0.0 {
            total += v;
            if bbox.contains(i / w, i % w) {
                inside += v;
            }
        }
    }
    Ok(PointGameResult {
        pga_hit: bbox.contains(best / w, best % w),
        pge: if total > 0.0 { inside / total } else { 0.0 },
    })
}

/// Point Game aggregates in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointGameSummary {
    #[serde(rename = "mPGE")]
    pub mpge: f64,
    #[serde(rename = "PGE>0.8")]
    pub pge_above_08: f64,
    #[serde(rename = "PGA")]
    pub pga: f64,
    pub count: usize,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn aggregate_pg(results: &[PointGameResult]) -> Result<PointGameSummary> {
    if results.is_empty() {
        return Err(Error::Empty("point game results".into()));
    }
    let n = results.len() as f64;
    let pges: Vec<f64> = results.iter().map(|r| r.pge).collect();
    Ok(PointGameSummary {
        mpge: 100.0 * median(&pges).unwrap(),
        pge_above_08: 100.0 * results.iter().filter(|r| r.pge > 0.8).count() as f64 / n,
        pga: 100.0 * results.iter().filter(|r| r.pga_hit).count() as f64 / n,
        count: results.len(),
    })
}
