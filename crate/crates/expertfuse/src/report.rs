//! Attention and efficiency reporting: CSV as the contract, SVG plots as
//! convenience output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PredictionRecord;

pub const HIST_BINS: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionHistRow {
    pub method: String,
    pub dataset: String,
    pub expert: String,
    pub bins: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionEntropyRow {
    pub method: String,
    pub dataset: String,
    pub mean_entropy: f64,
    pub examples: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AttentionReport {
    pub hist: Vec<AttentionHistRow>,
    pub entropy: Vec<AttentionEntropyRow>,
}

/// Shannon entropy of a weight vector, in nats; `0 ln 0 = 0`.
pub fn entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * a.ln())
        .sum::<f64>()
}

fn bin_of(a: f64) -> usize {
    ((a * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

impl AttentionReport {
    /// Accumulate one dataset's records for one method. Every record must
    /// carry attention weights (SF predictions have none and are an error).
    pub fn add_dataset(
        &mut self,
        method: &str,
        dataset: &str,
        expert_ids: &[String],
        records: &[PredictionRecord],
    ) -> Result<()> {
        if records.is_empty() {
            return Err(Error::InvalidData(format!("no records for {dataset}")));
        }
        let mut bins = vec![vec![0u64; HIST_BINS]; expert_ids.len()];
        let mut entropy_sum = 0.0;
        for r in records {
            let a = r.attention.as_ref().ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{method} produces no attention weights; attention report undefined"
                ))
            })?;
            if a.len() != expert_ids.len() {
                return Err(Error::ShapeMismatch {
                    layer: "attention report".into(),
                    expected: format!("[{}]", expert_ids.len()),
                    actual: format!("[{}]", a.len()),
                });
            }
            for (e, &v) in a.iter().enumerate() {
                bins[e][bin_of(v)] += 1;
            }
            entropy_sum += entropy(a);
        }
        for (e, id) in expert_ids.iter().enumerate() {
            self.hist.push(AttentionHistRow {
                method: method.to_string(),
                dataset: dataset.to_string(),
                expert: id.clone(),
                bins: bins[e].clone(),
            });
        }
        self.entropy.push(AttentionEntropyRow {
            method: method.to_string(),
            dataset: dataset.to_string(),
            mean_entropy: entropy_sum / records.len() as f64,
            examples: records.len(),
        });
        Ok(())
    }

    /// Mean entropy pooled over the given datasets (weighted by examples).
    pub fn pooled_entropy(&self, method: &str, datasets: &[&str]) -> Option<f64> {
        let rows: Vec<&AttentionEntropyRow> = self
            .entropy
            .iter()
            .filter(|r| r.method == method && datasets.contains(&r.dataset.as_str()))
            .collect();
        if rows.is_empty() {
            return None;
        }
        let total: usize = rows.iter().map(|r| r.examples).sum();
        Some(
            rows.iter()
                .map(|r| r.mean_entropy * r.examples as f64)
                .sum::<f64>()
                / total as f64,
        )
    }

    pub fn hist_csv(&self) -> String {
        let mut out = String::from("method,dataset,expert,bin,count\n");
        for row in &self.hist {
            for (b, count) in row.bins.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.method, row.dataset, row.expert, b, count
                ));
            }
        }
        out
    }

    pub fn entropy_csv(&self) -> String {
        let mut out = String::from("method,dataset,mean_entropy,examples\n");
        for row in &self.entropy {
            out.push_str(&format!(
                "{},{},{:.6},{}\n",
                row.method, row.dataset, row.mean_entropy, row.examples
            ));
        }
        out
    }

    /// One SVG per method: a grid of per-(dataset, expert) histograms.
    pub fn to_svg(&self, method: &str) -> String {
        let rows: Vec<&AttentionHistRow> =
            self.hist.iter().filter(|r| r.method == method).collect();
        let datasets: Vec<String> = {
            let mut seen = Vec::new();
            for r in &rows {
                if !seen.contains(&r.dataset) {
                    seen.push(r.dataset.clone());
                }
            }
            seen
        };
        let experts: Vec<String> = {
            let mut seen = Vec::new();
            for r in &rows {
                if !seen.contains(&r.expert) {
                    seen.push(r.expert.clone());
                }
            }
            seen
        };
        let (cell_w, cell_h, margin) = (150.0, 90.0, 40.0);
        let width = margin * 2.0 + cell_w * experts.len() as f64;
        let height = margin * 2.0 + cell_h * datasets.len() as f64;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n"
        );
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">attention scores: {method}</text>\n",
            width / 2.0
        ));
        for (di, ds) in datasets.iter().enumerate() {
            for (ei, ex) in experts.iter().enumerate() {
                let Some(row) = rows.iter().find(|r| &r.dataset == ds && &r.expert == ex) else {
                    continue;
                };
                let x0 = margin + cell_w * ei as f64;
                let y0 = margin + cell_h * di as f64;
                let max = row.bins.iter().copied().max().unwrap_or(1).max(1) as f64;
                let bar_w = (cell_w - 20.0) / HIST_BINS as f64;
                for (b, &count) in row.bins.iter().enumerate() {
                    let h = (cell_h - 30.0) * count as f64 / max;
                    svg.push_str(&format!(
                        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#4878a8\"/>\n",
                        x0 + 10.0 + bar_w * b as f64,
                        y0 + cell_h - 10.0 - h,
                        bar_w.max(1.0),
                        h
                    ));
                }
                svg.push_str(&format!(
                    "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\">{}/{}</text>\n",
                    x0 + 10.0,
                    y0 + 12.0,
                    ds,
                    ex
                ));
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}

// ── efficiency ──────────────────────────────────────────────────────────

/// One timed stage of a pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub step: u32,
    pub stage: String,
    pub seconds: f64,
}

pub fn timings_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("method,step,stage,seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            r.method, r.step, r.stage, r.seconds
        ));
    }
    out
}

pub fn parse_timings_csv(text: &str) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("bad timings row: {line}")));
        }
        rows.push(TimingRow {
            method: parts[0].to_string(),
            step: parts[1].parse().map_err(|_| Error::Format(format!("bad step in {line}")))?,
            stage: parts[2].to_string(),
            seconds: parts[3]
                .parse()
                .map_err(|_| Error::Format(format!("bad seconds in {line}")))?,
        });
    }
    Ok(rows)
}

/// Cumulative training-seconds curve per method, steps ascending.
///
/// A method's cost at step s is everything it needed up to s: the shared
/// base training, per-step fine-tuning and bundle exports, and its own
/// fusion training. The oracle's cost is base training plus each retrain.
pub fn cumulative_training_curves(rows: &[TimingRow]) -> Vec<(String, Vec<(u32, f64)>)> {
    let max_step = rows.iter().map(|r| r.step).max().unwrap_or(0);
    let sum = |pred: &dyn Fn(&TimingRow) -> bool| -> f64 {
        rows.iter().filter(|r| pred(r)).map(|r| r.seconds).sum()
    };
    let shared_base = sum(&|r: &TimingRow| r.stage == "train-base");
    let mut out = Vec::new();
    let fusion_methods: Vec<String> = {
        let mut seen = Vec::new();
        for r in rows {
            if r.stage == "train-fusion" && !seen.contains(&r.method) {
                seen.push(r.method.clone());
            }
        }
        seen
    };
    for method in fusion_methods {
        let mut curve = Vec::new();
        let mut acc = shared_base;
        for step in 1..=max_step {
            acc += sum(&|r: &TimingRow| {
                r.step == step && (r.stage == "finetune" || r.stage == "bundle-export")
            });
            acc += sum(&|r: &TimingRow| {
                r.step == step && r.stage == "train-fusion" && r.method == method
            });
            curve.push((step, acc));
        }
        out.push((method, curve));
    }
    let mut oracle_curve = Vec::new();
    let mut acc = shared_base;
    for step in 1..=max_step {
        acc += sum(&|r: &TimingRow| r.step == step && r.stage == "oracle-retrain");
        oracle_curve.push((step, acc));
    }
    out.push(("combine-retrain".into(), oracle_curve));
    out
}

pub fn cumulative_csv(curves: &[(String, Vec<(u32, f64)>)]) -> String {
    let mut out = String::from("method,step,cumulative_seconds\n");
    for (method, points) in curves {
        for (step, seconds) in points {
            out.push_str(&format!("{method},{step},{seconds:.6}\n"));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceRow {
    pub predictor: String,
    pub examples: usize,
    pub mean_seconds_per_example: f64,
}

pub fn inference_csv(rows: &[InferenceRow]) -> String {
    let mut out = String::from("predictor,examples,mean_seconds_per_example\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.9}\n",
            r.predictor, r.examples, r.mean_seconds_per_example
        ));
    }
    out
}

const PALETTE: [&str; 6] = ["#4878a8", "#a85448", "#58a868", "#a88a48", "#7858a8", "#48a0a8"];

/// Minimal line chart; one polyline per series.
pub fn svg_line_chart(title: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (width, height, margin) = (640.0, 420.0, 60.0);
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).collect();
    let (xmin, xmax) = bounds(&xs);
    let (_, ymax) = bounds(&ys);
    let ymin = 0.0;
    let sx = |x: f64| margin + (x - xmin) / (xmax - xmin).max(1e-12) * (width - 2.0 * margin);
    let sy = |y: f64| height - margin - (y - ymin) / (ymax - ymin).max(1e-12) * (height - 2.0 * margin);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n"
    );
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        width / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#333\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"#333\"/>\n",
        m = margin,
        b = height - margin,
        r = width - margin,
        t = margin
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"11\" transform=\"rotate(-90 16 {})\">{ylabel}</text>\n",
        height / 2.0,
        height / 2.0
    ));
    for (i, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"{color}\">{label}</text>\n",
            width - margin + 4.0 - 120.0,
            margin + 16.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Minimal horizontal bar chart.
pub fn svg_bar_chart(title: &str, rows: &[(String, f64)]) -> String {
    let (width, margin, bar_h) = (640.0, 60.0, 26.0);
    let height = margin * 2.0 + bar_h * rows.len() as f64;
    let max = rows.iter().map(|r| r.1).fold(f64::MIN_POSITIVE, f64::max);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n"
    );
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        width / 2.0
    ));
    for (i, (label, value)) in rows.iter().enumerate() {
        let y = margin + bar_h * i as f64;
        let w = (width - 2.0 * margin - 150.0) * value / max;
        svg.push_str(&format!(
            "<rect x=\"150\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>\n",
            y,
            w.max(1.0),
            bar_h - 6.0,
            PALETTE[i % PALETTE.len()]
        ));
        svg.push_str(&format!(
            "<text x=\"4\" y=\"{:.1}\" font-size=\"11\">{label}</text>\n",
            y + bar_h / 2.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{:.2e}</text>\n",
            154.0 + w,
            y + bar_h / 2.0,
            value
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if !min.is_finite() {
        (0.0, 1.0)
    } else {
        (min, max)
    }
}
