//! Point Game localisation, conditional perturbation curves, object
//! discrimination, hard-negative deltas and the almost-stochastic-order test.

mod aso;
mod grounding;
mod perturb;
mod pointgame;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use aso::{aso_test, violation_ratio, AsoConfig, Dominance, DominanceVerdict, MIN_SAMPLE};
pub use grounding::{
    cross_attribution_signs, hard_negative_deltas, histogram, point_game_records, region_mass, summarize,
    DiscriminationRecord, HardNegativeDelta, HardNegativeSummary, Histogram, ObjectDiscrimination,
    PointGameRecord, HISTOGRAM_BINS,
};
pub use perturb::{auc, perturbation_curve, ranking_order, step_counts, PerturbationCurve, PerturbationMode};
pub use pointgame::{aggregate_pg, median, point_game, PointGameResult, PointGameSummary};

use crate::error::Result;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub point_game: PointGameSummary,
    pub records: Vec<PointGameRecord>,
    /// Mean AUC per perturbation mode, when curves were computed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub auc: BTreeMap<PerturbationMode, f64>,
}

impl MethodReport {
    pub fn new(method: &str, records: Vec<PointGameRecord>) -> Result<Self> {
        Ok(Self {
            method: method.to_string(),
            point_game: summarize(&records)?,
            records,
            auc: BTreeMap::new(),
        })
    }

    pub fn pge_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.pge).collect()
    }
}

/// Dominance test between the PGE distributions of two runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub verdict: DominanceVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub model_digest: String,
    pub methods: Vec<MethodReport>,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_discrimination: Option<ObjectDiscrimination>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_negatives: Option<HardNegativeSummary>,
}

impl EvalReport {
    pub fn new(model_digest: &str) -> Self {
        Self {
            version: REPORT_VERSION,
            model_digest: model_digest.to_string(),
            methods: Vec::new(),
            comparisons: Vec::new(),
            object_discrimination: None,
            hard_negatives: None,
        }
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per method: `method, mPGE, PGE>0.8, PGA, CID, CII, CTD, CTI`,
    /// with empty cells for modes that were not run.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string(), "mPGE".into(), "PGE>0.8".into(), "PGA".into()];
        header.extend(PerturbationMode::ALL.iter().map(|m| m.to_string()));
        w.write_record(&header).map_err(csv_error)?;
        for m in &self.methods {
            let pg = &m.point_game;
            let mut row = vec![m.method.clone(), fmt(pg.mpge), fmt(pg.pge_above_08), fmt(pg.pga)];
            row.extend(PerturbationMode::ALL.iter().map(|mode| m.auc.get(mode).map_or_else(String::new, |v| fmt(*v))));
            w.write_record(&row).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }

    pub fn save(&self, json: impl AsRef<Path>, csv: Option<&Path>) -> Result<()> {
        std::fs::write(json, self.to_json()?)?;
        if let Some(path) = csv {
            std::fs::write(path, self.to_csv()?)?;
        }
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn csv_error(e: csv::Error) -> crate::Error {
    crate::Error::Format(format!("csv: {e}"))
}
