//! Metrics, label-distribution analysis, PCA, significance testing,
//! ablations and zero-shot evaluation.

mod ablation;
mod pca;
mod report;
mod stats;
mod zero_shot;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use ablation::{ablation_csv, canonical_ablation_configs, run_ablation_suite, AblationConfig, AblationRow};
pub use pca::{pca_project, PcaResult};
pub use report::{
    label_distribution_svg, pca_scatter_svg, predictions_jsonl, write_evaluation_bundle, EvaluationBundle,
    PredictionRecord,
};
pub use stats::{paired_ttest, TTest};
pub use zero_shot::{parse_label, zero_shot_eval, ZeroShotOutcome, ZeroShotReport};

use crate::corpus::EmotionLabelSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// Recall of the class.
    pub accuracy: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: IndexMap<String, ClassMetrics>,
    pub overall_accuracy: f64,
    pub weighted_f1: f64,
    pub n_examples: usize,
    pub config_id: String,
    /// Predictions that named no label; counted as errors, excluded from per-class F1.
    #[serde(default)]
    pub invalid: usize,
}

impl MetricsReport {
    pub fn with_config_id(mut self, id: impl Into<String>) -> Self {
        self.config_id = id.into();
        self
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,accuracy,f1,support\n");
        for (label, m) in &self.per_class {
            out.push_str(&format!("{label},{:.6},{:.6},{}\n", m.accuracy, m.f1, m.support));
        }
        out.push_str(&format!("overall,{:.6},{:.6},{}\n", self.overall_accuracy, self.weighted_f1, self.n_examples));
        out
    }
}

fn indices(labels: &[String], set: &EmotionLabelSet, what: &str) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            set.index_of(l)
                .ok_or_else(|| Error::Input(format!("{what} label {l:?} is not in the label set")))
        })
        .collect()
}

pub fn per_class_metrics(gold: &[String], pred: &[String], labels: &EmotionLabelSet) -> Result<MetricsReport> {
    if gold.len() != pred.len() {
        return Err(Error::Input(format!("{} gold labels but {} predictions", gold.len(), pred.len())));
    }
    let g = indices(gold, labels, "gold")?;
    let p = indices(pred, labels, "predicted")?;
    metrics_from_indices(&g, &p.into_iter().map(Some).collect::<Vec<_>>(), labels)
}

/// Metrics where `pred[i] == None` marks an invalid answer.
pub(crate) fn metrics_from_indices(gold: &[usize], pred: &[Option<usize>], labels: &EmotionLabelSet) -> Result<MetricsReport> {
    if gold.is_empty() {
        return Err(Error::Input("metrics need at least one example".into()));
    }
    let k = labels.len();
    let n = gold.len();
    let mut tp = vec![0usize; k];
    let mut support = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut invalid = 0;
    for (&g, &p) in gold.iter().zip(pred) {
        support[g] += 1;
        match p {
            Some(p) => {
                predicted[p] += 1;
                if p == g {
                    tp[g] += 1;
                }
            }
            None => invalid += 1,
        }
    }
    let mut per_class = IndexMap::new();
    let mut weighted_f1 = 0.0;
    for c in 0..k {
        let recall = if support[c] == 0 { 0.0 } else { tp[c] as f64 / support[c] as f64 };
        let precision = if predicted[c] == 0 { 0.0 } else { tp[c] as f64 / predicted[c] as f64 };
        let f1 = if support[c] == 0 || precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted_f1 += support[c] as f64 / n as f64 * f1;
        per_class.insert(labels.labels()[c].clone(), ClassMetrics { accuracy: recall, f1, support: support[c] });
    }
    Ok(MetricsReport {
        per_class,
        overall_accuracy: tp.iter().sum::<usize>() as f64 / n as f64,
        weighted_f1,
        n_examples: n,
        config_id: String::new(),
        invalid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionSource {
    Gold,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub counts: IndexMap<String, usize>,
    pub source: DistributionSource,
}

impl LabelDistribution {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Per-label `self - other`, over the labels of `self`.
    pub fn delta(&self, other: &LabelDistribution) -> IndexMap<String, i64> {
        self.counts
            .iter()
            .map(|(l, &c)| (l.clone(), c as i64 - other.counts.get(l).copied().unwrap_or(0) as i64))
            .collect()
    }
}

pub fn label_distribution(labels: &[String], set: &EmotionLabelSet, source: DistributionSource) -> Result<LabelDistribution> {
    let mut counts: IndexMap<String, usize> = set.labels().iter().map(|l| (l.clone(), 0)).collect();
    for l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::Input(format!("label {l:?} is not in the label set")))? += 1;
    }
    Ok(LabelDistribution { counts, source })
}
