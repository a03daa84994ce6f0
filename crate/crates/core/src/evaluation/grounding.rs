use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pointgame::{aggregate_pg, point_game, PointGameResult, PointGameSummary};
use crate::attribution::{slice_project, InteractionTensor, Layout, Selection};
use crate::data::{BBox, GroundedPair, Span};
use crate::error::{Error, Result};

/// Attribution mass between a caption span and an image box.
pub fn region_mass(t: &InteractionTensor, span: Span, bbox: &BBox) -> Result<f64> {
    let Layout::ImageText { width, .. } = t.layout() else {
        return Err(Error::InvalidInput("region mass needs an image-text tensor".into()));
    };
    let map = slice_project(t, &Selection::Span(span))?;
    if !bbox.fits(t.layout().rows() / width, width) {
        return Err(Error::InvalidInput("bounding box outside the attribution grid".into()));
    }
    Ok(bbox.patches(width).into_iter().map(|p| map.data()[p]).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointGameRecord {
    pub pair_id: String,
    pub annotation: usize,
    pub class: String,
    pub pga_hit: bool,
    pub pge: f64,
}

impl PointGameRecord {
    pub fn result(&self) -> PointGameResult {
        PointGameResult {
            pga_hit: self.pga_hit,
            pge: self.pge,
        }
    }
}

/// Runs the Point Game for every single-instance annotation: the tensor is
/// sliced along the mention's span and the resulting heatmap is scored
/// against the object's box. Items are attributed in parallel; records come
/// back in item order.
pub fn point_game_records<F>(items: &[GroundedPair], attribute: F) -> Result<Vec<PointGameRecord>>
where
    F: Fn(&GroundedPair) -> Result<InteractionTensor> + Sync,
{
    let per_item: Vec<Vec<PointGameRecord>> = items
        .par_iter()
        .map(|pair| {
            let t = attribute(pair)?;
            pair.annotations
                .iter()
                .enumerate()
                .filter(|(_, a)| a.single_instance)
                .map(|(i, a)| {
                    let r = point_game(&slice_project(&t, &Selection::Span(a.span))?, &a.bbox)?;
                    Ok(PointGameRecord {
                        pair_id: pair.id.clone(),
                        annotation: i,
                        class: a.class_name.clone(),
                        pga_hit: r.pga_hit,
                        pge: r.pge,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_item.into_iter().flatten().collect())
}

pub fn summarize(records: &[PointGameRecord]) -> Result<PointGameSummary> {
    aggregate_pg(&records.iter().map(PointGameRecord::result).collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationRecord {
    pub pair_id: String,
    /// Mass between the first object's mention and its own box.
    pub same: f64,
    /// Mass between the first object's mention and the second object's box.
    pub cross: f64,
}

/// Sign statistics in percent over the qualifying items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectDiscrimination {
    pub items: usize,
    pub same_positive: f64,
    pub cross_positive: f64,
    pub cross_negative: f64,
    pub records: Vec<DiscriminationRecord>,
}

/// For items with at least two single-instance objects of distinct classes,
/// compares the first mention's attribution to its own box with that to the
/// second object's box.
pub fn cross_attribution_signs<F>(items: &[GroundedPair], attribute: F) -> Result<ObjectDiscrimination>
where
    F: Fn(&GroundedPair) -> Result<InteractionTensor> + Sync,
{
    let qualifying: Vec<(&GroundedPair, usize, usize)> = items
        .iter()
        .filter_map(|p| {
            let single: Vec<usize> = (0..p.annotations.len()).filter(|&i| p.annotations[i].single_instance).collect();
            let first = *single.first()?;
            let second = single[1..]
                .iter()
                .copied()
                .find(|&i| p.annotations[i].class != p.annotations[first].class)?;
            Some((p, first, second))
        })
        .collect();
    if qualifying.is_empty() {
        return Err(Error::Empty("no items with two distinct single-instance objects".into()));
    }
    let records: Vec<DiscriminationRecord> = qualifying
        .par_iter()
        .map(|&(pair, i, j)| {
            let t = attribute(pair)?;
            let (a1, a2) = (&pair.annotations[i], &pair.annotations[j]);
            Ok(DiscriminationRecord {
                pair_id: pair.id.clone(),
                same: region_mass(&t, a1.span, &a1.bbox)?,
                cross: region_mass(&t, a1.span, &a2.bbox)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = records.len() as f64;
    let pct = |f: &dyn Fn(&DiscriminationRecord) -> bool| 100.0 * records.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(ObjectDiscrimination {
        items: records.len(),
        same_positive: pct(&|r| r.same > 0.0),
        cross_positive: pct(&|r| r.cross > 0.0),
        cross_negative: pct(&|r| r.cross < 0.0),
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() || bins == 0 {
        return Histogram {
            edges: Vec::new(),
            counts: Vec::new(),
        };
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0; bins];
    for &v in values {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    Histogram {
        edges: (0..=bins).map(|i| lo + i as f64 * width).collect(),
        counts,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardNegativeDelta {
    pub pair_id: String,
    /// `score(negative) - score(positive)`.
    pub delta_s: f64,
    /// Replaced-span-to-box mass of the negative minus that of the positive.
    pub delta_a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardNegativeSummary {
    pub deltas: Vec<HardNegativeDelta>,
    /// Fraction of pairs with `delta_s < 0`.
    pub score_negative: f64,
    /// Fraction of pairs with `delta_a < 0`.
    pub attribution_negative: f64,
    pub histogram_s: Histogram,
    pub histogram_a: Histogram,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Checks that `negative` is `positive` with exactly the recorded span
/// replaced, and returns the replaced spans and the object's box.
fn replaced_region(positive: &GroundedPair, negative: &GroundedPair) -> Result<(Span, Span, BBox)> {
    let mismatch = |why: &str| Err(Error::InvalidInput(format!("{} / {}: {why}", positive.id, negative.id)));
    let Some(r) = &negative.replacement else {
        return mismatch("negative carries no replacement record");
    };
    let (o, n) = (r.original_span, r.replacement_span);
    let Some(ann) = positive.annotations.get(r.annotation) else {
        return mismatch("replacement refers to a missing annotation");
    };
    if ann.span != o || o.is_empty() || n.is_empty() || o.start != n.start {
        return mismatch("replacement spans do not match the annotation");
    }
    if o.end > positive.tokens.len() || n.end > negative.tokens.len() {
        return mismatch("replacement span outside the caption");
    }
    if positive.tokens[..o.start] != negative.tokens[..n.start] || positive.tokens[o.end..] != negative.tokens[n.end..] {
        return mismatch("captions differ outside the replaced span");
    }
    Ok((o, n, ann.bbox))
}

/// Score and attribution changes from positive captions to their hard
/// negatives.
pub fn hard_negative_deltas<S, F>(pairs: &[(GroundedPair, GroundedPair)], score: S, attribute: F) -> Result<HardNegativeSummary>
where
    S: Fn(&GroundedPair) -> Result<f64> + Sync,
    F: Fn(&GroundedPair) -> Result<InteractionTensor> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::Empty("hard negative pairs".into()));
    }
    let deltas: Vec<HardNegativeDelta> = pairs
        .par_iter()
        .map(|(pos, neg)| {
            let (o, n, bbox) = replaced_region(pos, neg)?;
            let (tp, tn) = (attribute(pos)?, attribute(neg)?);
            Ok(HardNegativeDelta {
                pair_id: pos.id.clone(),
                delta_s: score(neg)? - score(pos)?,
                delta_a: region_mass(&tn, n, &bbox)? - region_mass(&tp, o, &bbox)?,
            })
        })
        .collect::<Result<_>>()?;
    let k = deltas.len() as f64;
    let ds: Vec<f64> = deltas.iter().map(|d| d.delta_s).collect();
    let da: Vec<f64> = deltas.iter().map(|d| d.delta_a).collect();
    Ok(HardNegativeSummary {
        score_negative: ds.iter().filter(|&&v| v < 0.0).count() as f64 / k,
        attribution_negative: da.iter().filter(|&&v| v < 0.0).count() as f64 / k,
        histogram_s: histogram(&ds, HISTOGRAM_BINS),
        histogram_a: histogram(&da, HISTOGRAM_BINS),
        deltas,
    })
}
