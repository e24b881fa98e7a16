use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::MetricsReport;
use crate::error::{Error, Result};
use crate::prompting::BehaviorFlags;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub id: String,
    /// Row name in the results table.
    pub row: String,
    pub flags: BehaviorFlags,
}

/// All behaviors, each single behavior, and none (the text-and-media baseline).
pub fn canonical_ablation_configs() -> Vec<AblationConfig> {
    [
        ("all", "all behaviors", BehaviorFlags::ALL),
        ("facial", "w/o B+P", BehaviorFlags::FACIAL),
        ("body", "w/o P+F", BehaviorFlags::BODY),
        ("posture", "w/o B+F", BehaviorFlags::POSTURE),
        ("none", "w/o F+B+P", BehaviorFlags::NONE),
    ]
    .into_iter()
    .map(|(id, row, flags)| AblationConfig { id: id.into(), row: row.into(), flags })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: AblationConfig,
    pub report: MetricsReport,
}

/// Runs `pipeline` once per config, in order.
pub fn run_ablation_suite<F>(configs: &[AblationConfig], mut pipeline: F) -> Result<Vec<AblationRow>>
where
    F: FnMut(&AblationConfig) -> Result<MetricsReport>,
{
    let mut seen = HashSet::new();
    for c in configs {
        if !seen.insert(c.id.as_str()) {
            return Err(Error::Config(format!("duplicate ablation config id {:?}", c.id)));
        }
    }
    let mut rows = Vec::with_capacity(configs.len());
    for c in configs {
        log::info!("ablation: running {} ({})", c.id, c.row);
        let report = pipeline(c)?.with_config_id(c.id.clone());
        if let Some(first) = rows.first().map(|r: &AblationRow| r.report.n_examples) {
            if report.n_examples != first {
                return Err(Error::Validation(format!(
                    "ablation {} evaluated {} examples, expected {first}",
                    c.id, report.n_examples
                )));
            }
        }
        rows.push(AblationRow { config: c.clone(), report });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config_id,row,facial,body,posture,accuracy,weighted_f1,n_examples\n");
    for r in rows {
        let f = r.config.flags;
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{}\n",
            r.config.id, r.config.row, f.facial, f.body, f.posture, r.report.overall_accuracy, r.report.weighted_f1, r.report.n_examples
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;

    fn report(n: usize, acc: f64) -> MetricsReport {
        MetricsReport {
            per_class: IndexMap::new(),
            overall_accuracy: acc,
            weighted_f1: acc,
            n_examples: n,
            config_id: String::new(),
            invalid: 0,
        }
    }

    #[test]
    fn five_configs_five_rows() {
        let configs = canonical_ablation_configs();
        let rows = run_ablation_suite(&configs, |c| Ok(report(10, if c.flags.any() { 0.9 } else { 0.5 }))).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.report.n_examples == 10 && r.report.config_id == r.config.id));
        let none = rows.iter().find(|r| r.config.id == "none").unwrap();
        assert_eq!(none.config.flags, BehaviorFlags::NONE);
        assert_eq!(ablation_csv(&rows).lines().count(), 6);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut configs = canonical_ablation_configs();
        configs[1].id = "all".into();
        assert!(matches!(run_ablation_suite(&configs, |_| Ok(report(1, 1.0))), Err(Error::Config(_))));
    }
}
