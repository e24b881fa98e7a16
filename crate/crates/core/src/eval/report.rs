use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{label_distribution, pca_project, DistributionSource, LabelDistribution, MetricsReport, PcaResult};
use crate::corpus::EmotionLabelSet;
use crate::error::{Error, Result};
use crate::tuning::Prediction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub utterance_id: String,
    pub gold: String,
    pub pred: String,
    pub distribution: Vec<f64>,
    /// Row of the embedding in `embeddings.csv`.
    pub embedding_ref: String,
}

pub fn predictions_jsonl(gold: &[String], predictions: &[Prediction]) -> Result<String> {
    let mut out = String::new();
    for (i, (g, p)) in gold.iter().zip(predictions).enumerate() {
        let rec = PredictionRecord {
            utterance_id: p.utterance_id.clone(),
            gold: g.clone(),
            pred: p.predicted_label.clone(),
            distribution: p.label_distribution.clone(),
            embedding_ref: format!("embeddings.csv#row={}", i + 1),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart, one group per label and one bar per distribution.
pub fn label_distribution_svg(series: &[(&str, &LabelDistribution)]) -> String {
    let labels: Vec<&String> = series.first().map(|(_, d)| d.counts.keys().collect()).unwrap_or_default();
    let max = series.iter().flat_map(|(_, d)| d.counts.values()).copied().max().unwrap_or(0).max(1) as f64;
    let (w, h, left, bottom, top) = (120.0 * labels.len().max(1) as f64 + 80.0, 320.0, 50.0, 40.0, 30.0);
    let plot_h = h - bottom - top;
    let group_w = (w - left - 20.0) / labels.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = write!(svg, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - bottom, w - 10.0, h - bottom);
    let _ = write!(svg, r#"<text x="{left}" y="{}">max {}</text>"#, top - 10.0, max as usize);
    for (gi, label) in labels.iter().enumerate() {
        let gx = left + gi as f64 * group_w + group_w * 0.1;
        for (si, (_, dist)) in series.iter().enumerate() {
            let c = dist.counts.get(*label).copied().unwrap_or(0) as f64;
            let bh = plot_h * c / max;
            let _ = write!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{}</title></rect>"#,
                gx + si as f64 * bar_w,
                h - bottom - bh,
                bar_w,
                bh,
                PALETTE[si % PALETTE.len()],
                c
            );
        }
        let _ = write!(svg, r#"<text x="{:.1}" y="{}">{}</text>"#, gx, h - bottom + 16.0, xml_escape(label));
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let y = top + 14.0 * si as f64;
        let _ = write!(svg, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, w - 140.0, y - 9.0, PALETTE[si % PALETTE.len()]);
        let _ = write!(svg, r#"<text x="{}" y="{}">{}</text>"#, w - 125.0, y, xml_escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}

/// First two principal coordinates, colored by gold label.
pub fn pca_scatter_svg(pca: &PcaResult, gold: &[String], labels: &EmotionLabelSet) -> String {
    let (w, h, pad) = (480.0, 480.0, 40.0);
    let xs: Vec<f64> = pca.projection.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = pca.projection.iter().map(|p| p.get(1).copied().unwrap_or(0.0)).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let ((x0, xr), (y0, yr)) = (range(&xs), range(&ys));
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    for (i, (x, y)) in xs.iter().zip(&ys).enumerate() {
        let color = labels.index_of(&gold[i]).map(|k| PALETTE[k % PALETTE.len()]).unwrap_or("gray");
        let cx = pad + (x - x0) / xr * (w - 2.0 * pad);
        let cy = h - pad - (y - y0) / yr * (h - 2.0 * pad);
        let _ = write!(svg, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="{color}" fill-opacity="0.8"/>"#);
    }
    for (k, l) in labels.labels().iter().enumerate() {
        let _ = write!(svg, r#"<rect x="10" y="{}" width="10" height="10" fill="{}"/>"#, 10 + 14 * k, PALETTE[k % PALETTE.len()]);
        let _ = write!(svg, r#"<text x="25" y="{}">{}</text>"#, 19 + 14 * k, xml_escape(l));
    }
    let ratio = |i: usize| pca.explained_variance_ratio.get(i).copied().unwrap_or(0.0);
    let _ = write!(svg, r#"<text x="{}" y="{}">PC1 {:.1}% / PC2 {:.1}%</text>"#, w - 200.0, h - 10.0, 100.0 * ratio(0), 100.0 * ratio(1));
    svg.push_str("</svg>\n");
    svg
}

/// Everything an evaluation writes to disk.
pub struct EvaluationBundle<'a> {
    pub report: &'a MetricsReport,
    pub labels: &'a EmotionLabelSet,
    pub gold: &'a [String],
    pub predictions: &'a [Prediction],
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| Error::storage(&p, e))?;
    Ok(p)
}

/// Writes predictions, embeddings, reports and plots into `dir`; returns the files written.
pub fn write_evaluation_bundle(dir: &Path, b: &EvaluationBundle) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let mut files = vec![
        write(dir, "predictions.jsonl", predictions_jsonl(b.gold, b.predictions)?)?,
        write(dir, "report.json", serde_json::to_vec_pretty(b.report)?)?,
        write(dir, "report.csv", b.report.to_csv())?,
    ];
    let mut emb = String::new();
    for p in b.predictions {
        emb.push_str(&p.utterance_id);
        for v in &p.embedding {
            let _ = write!(emb, ",{v}");
        }
        emb.push('\n');
    }
    files.push(write(dir, "embeddings.csv", emb)?);

    let pred: Vec<String> = b.predictions.iter().map(|p| p.predicted_label.clone()).collect();
    let gold_dist = label_distribution(b.gold, b.labels, DistributionSource::Gold)?;
    let pred_dist = label_distribution(&pred, b.labels, DistributionSource::Predicted)?;
    let mut csv = String::from("label,gold,predicted\n");
    for (l, g) in &gold_dist.counts {
        let _ = writeln!(csv, "{l},{g},{}", pred_dist.counts[l]);
    }
    files.push(write(dir, "label_distribution.csv", csv)?);
    files.push(write(dir, "label_distribution.svg", label_distribution_svg(&[("gold", &gold_dist), ("predicted", &pred_dist)]))?);

    let d = b.predictions.first().map(|p| p.embedding.len()).unwrap_or(0);
    let rows = Array2::from_shape_vec((b.predictions.len(), d), b.predictions.iter().flat_map(|p| p.embedding.clone()).collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    match pca_project(&rows, 2.min(d.max(1))) {
        Ok(pca) => {
            let mut csv = String::from("utterance_id,gold,pc1,pc2\n");
            for (p, (g, c)) in b.predictions.iter().zip(b.gold.iter().zip(&pca.projection)) {
                let _ = writeln!(csv, "{},{g},{},{}", p.utterance_id, c[0], c.get(1).copied().unwrap_or(0.0));
            }
            files.push(write(dir, "pca.csv", csv)?);
            files.push(write(dir, "pca.svg", pca_scatter_svg(&pca, b.gold, b.labels))?);
        }
        Err(e) => log::warn!("skipping PCA plot: {e}"),
    }
    Ok(files)
}
