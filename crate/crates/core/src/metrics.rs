//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::{Error, Result};

/// Predictions paired with ground truth, optionally with a predictive
/// variance per pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub truths: Vec<f64>,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<f64>>,
}

impl PredictionSet {
    pub fn new(truths: Vec<f64>, scores: Vec<f64>) -> Self {
        assert_eq!(truths.len(), scores.len(), "one score per truth");
        PredictionSet {
            truths,
            scores,
            variances: None,
        }
    }

    pub fn with_variances(mut self, variances: Vec<f64>) -> Self {
        assert_eq!(variances.len(), self.truths.len(), "one variance per truth");
        self.variances = Some(variances);
        self
    }

    pub fn push(&mut self, truth: f64, score: f64, variance: Option<f64>) {
        self.truths.push(truth);
        self.scores.push(score);
        match (&mut self.variances, variance) {
            (Some(vs), Some(v)) => vs.push(v),
            (None, Some(v)) if self.truths.len() == 1 => self.variances = Some(vec![v]),
            (None, None) => {}
            _ => panic!("variances must be given for all pairs or none"),
        }
    }

    pub fn len(&self) -> usize {
        self.truths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truths.is_empty()
    }

    fn nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::Empty("prediction set"))
        } else {
            Ok(())
        }
    }
}

/// Inclusive range predictions are clamped to before scoring RMSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clamp {
    pub min: f64,
    pub max: f64,
}

/// MovieLens star range.
pub const RATING_RANGE: Clamp = Clamp { min: 1.0, max: 5.0 };

pub fn rmse(preds: &PredictionSet, clamp: Option<Clamp>) -> Result<f64> {
    preds.nonempty()?;
    let sum: f64 = preds
        .truths
        .iter()
        .zip(&preds.scores)
        .map(|(&y, &s)| {
            let s = clamp.map_or(s, |c| s.clamp(c.min, c.max));
            (y - s) * (y - s)
        })
        .sum();
    Ok((sum / preds.len() as f64).sqrt())
}

/// Fraction of pairs where `score >= threshold` agrees with a truth of 1.
pub fn accuracy(preds: &PredictionSet, threshold: f64) -> Result<f64> {
    preds.nonempty()?;
    let hits = preds
        .truths
        .iter()
        .zip(&preds.scores)
        .filter(|(&y, &s)| (s >= threshold) == (y > 0.5))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Indices sorted by descending score, ties in input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Area under the ROC curve as the Mann–Whitney statistic; tied
/// positive/negative pairs count ½.
pub fn auc(preds: &PredictionSet) -> Result<f64> {
    preds.nonempty()?;
    let mut pairs: Vec<(f64, bool)> = preds
        .scores
        .iter()
        .zip(&preds.truths)
        .map(|(&s, &y)| (s, y > 0.5))
        .collect();
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let mut pos_rank_sum = 0.0;
    let mut n_pos = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let positives = pairs[i..j].iter().filter(|p| p.1).count();
        pos_rank_sum += mid_rank * positives as f64;
        n_pos += positives;
        i = j;
    }
    let n_neg = preds.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes"));
    }
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean average precision: `Σ_n (R_n − R_{n−1}) P_n` over thresholds at each
/// distinct score, from the highest down.
pub fn map(preds: &PredictionSet) -> Result<f64> {
    preds.nonempty()?;
    let n_pos = preds.truths.iter().filter(|&&y| y > 0.5).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("MAP needs at least one positive"));
    }
    let order = descending(&preds.scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut total = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = preds.scores[order[i]];
        while i < order.len() && preds.scores[order[i]] == score {
            if preds.truths[order[i]] > 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        total += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(total)
}

pub fn mean_predictive_variance(preds: &PredictionSet) -> Result<f64> {
    preds.nonempty()?;
    let vars = preds
        .variances
        .as_ref()
        .ok_or(Error::UndefinedMetric("no predictive variances recorded"))?;
    Ok(vars.iter().sum::<f64>() / vars.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_variance: Option<f64>,
}

impl MetricsReport {
    /// RMSE for regression. For classification the scores are probabilities:
    /// ACC, AUC, MAP and the RMSE of the probabilities against the 0/1
    /// labels. AUC/MAP are left out when undefined on this set.
    pub fn compute(task: Task, preds: &PredictionSet, clamp: Option<Clamp>) -> Result<Self> {
        preds.nonempty()?;
        let mut report = MetricsReport {
            count: preds.len(),
            mean_variance: mean_predictive_variance(preds).ok(),
            ..Default::default()
        };
        match task {
            Task::Regression => report.rmse = Some(rmse(preds, clamp)?),
            Task::Classification => {
                report.rmse = Some(rmse(preds, None)?);
                report.acc = Some(accuracy(preds, 0.5)?);
                report.auc = auc(preds).ok();
                report.map = map(preds).ok();
            }
        }
        Ok(report)
    }

    /// RMSE for regression (lower is better), AUC for classification.
    pub fn primary(&self, task: Task) -> Option<f64> {
        match task {
            Task::Regression => self.rmse,
            Task::Classification => self.auc,
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<14}{:>10}\n", "metric", "value");
        let rows = [
            ("rmse", self.rmse),
            ("acc", self.acc),
            ("auc", self.auc),
            ("map", self.map),
            ("mean_variance", self.mean_variance),
        ];
        for (name, v) in rows {
            if let Some(v) = v {
                out.push_str(&format!("{name:<14}{v:>10.4}\n"));
            }
        }
        out.push_str(&format!("{:<14}{:>10}\n", "count", self.count));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(truths: &[f64], scores: &[f64]) -> PredictionSet {
        PredictionSet::new(truths.to_vec(), scores.to_vec())
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&set(&[1.0, 4.0], &[1.0, 4.0]), None).unwrap(), 0.0);
        assert!((rmse(&set(&[1.0, 5.0], &[2.0, 4.0]), None).unwrap() - 1.0).abs() < 1e-15);
        assert!((rmse(&set(&[3.0], &[3.5]), None).unwrap() - 0.5).abs() < 1e-15);
        // 6.0 clamps to 5.0
        assert_eq!(rmse(&set(&[5.0], &[6.0]), Some(RATING_RANGE)).unwrap(), 0.0);
        assert!(rmse(&set(&[], &[]), None).is_err());
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&set(&[1.0, 0.0], &[0.9, 0.1]), 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&set(&[1.0, 1.0], &[0.6, 0.4]), 0.5).unwrap(), 0.5);
        assert_eq!(accuracy(&set(&[1.0], &[0.5]), 0.5).unwrap(), 1.0);
        assert!(accuracy(&set(&[], &[]), 0.5).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&set(&[0.0, 0.0, 1.0, 1.0], &[0.1, 0.2, 0.3, 0.9])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.0, 1.0, 1.0, 0.0], &[0.5; 4])).unwrap(), 0.5);
        assert!(auc(&set(&[1.0, 1.0], &[0.1, 0.2])).is_err());
    }

    #[test]
    fn map_cases() {
        assert_eq!(map(&set(&[1.0, 1.0, 0.0], &[0.9, 0.8, 0.1])).unwrap(), 1.0);
        assert!((map(&set(&[1.0, 0.0, 1.0], &[0.9, 0.5, 0.1])).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        let n = 7;
        let mut truths = vec![0.0; n];
        truths[n - 1] = 1.0;
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        assert!((map(&set(&truths, &scores)).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        assert!(map(&set(&[0.0], &[0.3])).is_err());
    }

    #[test]
    fn variance_cases() {
        let p = set(&[1.0, 0.0], &[0.3, 0.2]);
        assert!(mean_predictive_variance(&p).is_err());
        assert_eq!(
            mean_predictive_variance(&p.clone().with_variances(vec![1.0, 3.0])).unwrap(),
            2.0
        );
        assert_eq!(
            mean_predictive_variance(&p.with_variances(vec![0.0, 0.0])).unwrap(),
            0.0
        );
    }

    #[test]
    fn report_for_classification() {
        let r = MetricsReport::compute(Task::Classification, &set(&[1.0, 0.0, 1.0], &[0.9, 0.5, 0.1]), None).unwrap();
        assert!(r.acc.is_some() && r.auc.is_some() && r.map.is_some());
        // (0.01 + 0.25 + 0.81) / 3
        assert!((r.rmse.unwrap() - (1.07f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(r.to_table().contains("auc"));
    }
}
