//! Span overlap metrics: IoU, recall at IoU thresholds and mean IoU.

use serde::{Deserialize, Serialize};

use crate::head::Span;
use crate::{HeroError, Result};

pub const THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Inclusive-frame IoU.
pub fn iou(a: Span, b: Span) -> Result<f64> {
    for sp in [a, b] {
        if sp.s > sp.e {
            return Err(HeroError::Contract(format!("invalid span ({}, {})", sp.s, sp.e)));
        }
    }
    let lo = a.s.max(b.s);
    let hi = a.e.min(b.e);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r1_03: f64,
    pub r1_05: f64,
    pub r1_07: f64,
    pub miou: f64,
    pub n: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "split,r1_03,r1_05,r1_07,miou,n";

    pub fn csv_row(&self, split: &str) -> String {
        format!(
            "{split},{:.6},{:.6},{:.6},{:.6},{}",
            self.r1_03, self.r1_05, self.r1_07, self.miou, self.n
        )
    }

    pub fn r1(&self, threshold: f64) -> Option<f64> {
        THRESHOLDS
            .iter()
            .position(|&t| t == threshold)
            .map(|i| [self.r1_03, self.r1_05, self.r1_07][i])
    }
}

/// Whether a hit needs `iou >= m` (default) or `iou > m`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitRule {
    #[default]
    AtLeast,
    Strict,
}

impl HitRule {
    fn hit(self, iou: f64, m: f64) -> bool {
        match self {
            HitRule::AtLeast => iou >= m,
            HitRule::Strict => iou > m,
        }
    }
}

/// Per-sample IoUs and hit counts; reduced as integer counts plus one sum
/// so the result does not depend on sample order beyond float summation.
pub fn evaluate(preds: &[Span], gts: &[Span], rule: HitRule) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(HeroError::Contract(format!(
            "{} predictions for {} ground-truth spans",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(HeroError::Contract("cannot evaluate an empty split".into()));
    }
    let mut ious = preds
        .iter()
        .zip(gts)
        .map(|(&p, &g)| iou(p, g))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = [0usize; 3];
    for &v in &ious {
        for (h, &m) in hits.iter_mut().zip(&THRESHOLDS) {
            if rule.hit(v, m) {
                *h += 1;
            }
        }
    }
    // sorted summation makes the mean independent of sample order
    ious.sort_by(f64::total_cmp);
    let n = preds.len();
    Ok(MetricsReport {
        r1_03: hits[0] as f64 / n as f64,
        r1_05: hits[1] as f64 / n as f64,
        r1_07: hits[2] as f64 / n as f64,
        miou: ious.iter().sum::<f64>() / n as f64,
        n,
    })
}
