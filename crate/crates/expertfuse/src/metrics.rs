//! Accuracy and macro-F1 scoring plus the predictor interface every method
//! implements for evaluation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineKind, PooledModel};
use crate::error::{Error, Result};
use crate::expert::{Expert, NaiveModel};
use crate::fusion::{AttentionSource, FusionExample, FusionMode, FusionModel};
use crate::nmd;
use crate::tensor::Tensor;

/// One evaluated example: labels only, no pixel data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub true_label: usize,
    pub pred_label: usize,
    /// Per-expert weights A, when the predictor has them.
    pub attention: Option<Vec<f64>>,
}

/// Anything that maps images to global class predictions.
pub trait ImagePredictor {
    fn name(&self) -> String;
    fn predict_images(&self, images: &[&Tensor]) -> Result<Vec<(usize, Option<Vec<f64>>)>>;
}

pub struct SingleExpertPredictor<'a> {
    pub expert: &'a Expert,
}

impl ImagePredictor for SingleExpertPredictor<'_> {
    fn name(&self) -> String {
        format!("single-expert-{}", self.expert.site_id)
    }

    fn predict_images(&self, images: &[&Tensor]) -> Result<Vec<(usize, Option<Vec<f64>>)>> {
        let logits = self.expert.own_logits(images)?;
        let n = self.expert.num_classes();
        Ok((0..images.len())
            .map(|r| {
                let local = crate::tensor::argmax_slice(&logits.data[r * n..(r + 1) * n]);
                (self.expert.label_set[local], None)
            })
            .collect())
    }
}

pub struct NaivePredictor<'a> {
    pub model: &'a NaiveModel,
    pub label: String,
}

impl ImagePredictor for NaivePredictor<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict_images(&self, images: &[&Tensor]) -> Result<Vec<(usize, Option<Vec<f64>>)>> {
        Ok(self
            .model
            .predict(images)?
            .into_iter()
            .map(|c| (c, None))
            .collect())
    }
}

pub struct PooledPredictor<'a> {
    pub model: &'a PooledModel,
}

impl ImagePredictor for PooledPredictor<'_> {
    fn name(&self) -> String {
        "combine-retrain".into()
    }

    fn predict_images(&self, images: &[&Tensor]) -> Result<Vec<(usize, Option<Vec<f64>>)>> {
        Ok(self
            .model
            .predict(images)?
            .into_iter()
            .map(|c| (c, None))
            .collect())
    }
}

pub struct ConfidenceBaselinePredictor<'a> {
    pub experts: Vec<&'a Expert>,
    pub kind: BaselineKind,
}

impl ImagePredictor for ConfidenceBaselinePredictor<'_> {
    fn name(&self) -> String {
        self.kind.name().to_string()
    }

    fn predict_images(&self, images: &[&Tensor]) -> Result<Vec<(usize, Option<Vec<f64>>)>> {
        let preds = match self.kind {
            BaselineKind::MaxLogit => crate::baselines::max_logit_predict(&self.experts, images)?,
            BaselineKind::Msp => crate::baselines::msp_predict(&self.experts, images)?,
            BaselineKind::ConfidenceRouting => {
                crate::baselines::confidence_route_predict(&self.experts, images)?
            }
            BaselineKind::CombineRetrain => {
                return Err(Error::InvalidConfig(
                    "combine-retrain is a trained model, not a confidence rule".into(),
                ))
            }
        };
        Ok(preds.into_iter().map(|c| (c, None)).collect())
    }
}

/// Full fusion inference from raw images: every expert's features (and
/// discrepancy vectors for nmd mode) feed the fusion model.
pub struct FusionPredictor<'a> {
    pub experts: Vec<&'a Expert>,
    pub model: &'a FusionModel,
}

impl FusionPredictor<'_> {
    pub fn rows_for(&self, images: &[&Tensor]) -> Result<Vec<FusionExample>> {
        let k = self.model.feature_dim;
        let p = self.model.nmd_dim;
        let n = self.experts.len();
        let mut h_all = vec![0.0; images.len() * k * n];
        let mut g_all = vec![0.0; images.len() * p * n];
        for (e, expert) in self.experts.iter().enumerate() {
            let h = expert.encode(images)?;
            for r in 0..images.len() {
                h_all[r * k * n + e * k..r * k * n + (e + 1) * k]
                    .copy_from_slice(&h.data[r * k..(r + 1) * k]);
            }
            if self.model.mode == FusionMode::NmdWsf {
                let g = nmd::nmd_vectors(expert, images)?;
                for r in 0..images.len() {
                    g_all[r * p * n + e * p..r * p * n + (e + 1) * p]
                        .copy_from_slice(&g.data[r * p..(r + 1) * p]);
                }
            }
        }
        Ok((0..images.len())
            .map(|r| FusionExample {
                h: h_all[r * k * n..(r + 1) * k * n].to_vec(),
                g: g_all[r * p * n..(r + 1) * p * n].to_vec(),
                label: 0,
            })
            .collect())
    }
}

impl ImagePredictor for FusionPredictor<'_> {
    fn name(&self) -> String {
        self.model.mode.name().to_string()
    }

    fn predict_images(&self, images: &[&Tensor]) -> Result<Vec<(usize, Option<Vec<f64>>)>> {
        let rows = self.rows_for(images)?;
        let refs: Vec<&FusionExample> = rows.iter().collect();
        let preds = self.model.predict(&refs, AttentionSource::Model)?;
        Ok(preds
            .into_iter()
            .map(|p| (p.class, Some(p.attention)))
            .collect())
    }
}

/// Data-transfer class of a method, as reported in the results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferClass {
    None,
    Features,
    Images,
}

impl fmt::Display for TransferClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TransferClass::None => "none",
            TransferClass::Features => "features",
            TransferClass::Images => "images",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub experts: usize,
    pub transfer: TransferClass,
    pub dataset: String,
    /// Percent.
    pub acc: f64,
    /// Percent, macro over classes present in the dataset's ground truth.
    pub f1: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    /// Append an unweighted average row over the given method's datasets.
    pub fn push_average(&mut self, method: &str) {
        let rows: Vec<&MetricsRow> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.dataset != "average")
            .collect();
        if rows.is_empty() {
            return;
        }
        let acc = rows.iter().map(|r| r.acc).sum::<f64>() / rows.len() as f64;
        let f1 = rows.iter().map(|r| r.f1).sum::<f64>() / rows.len() as f64;
        self.rows.push(MetricsRow {
            method: method.to_string(),
            experts: rows[0].experts,
            transfer: rows[0].transfer,
            dataset: "average".into(),
            acc,
            f1,
        });
    }

    pub fn average_acc(&self, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.dataset == "average")
            .map(|r| r.acc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,experts,transfer,dataset,acc,f1\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4}\n",
                r.method, r.experts, r.transfer, r.dataset, r.acc, r.f1
            ));
        }
        out
    }
}

/// Accuracy and macro-F1 (both percent) from prediction records.
///
/// Macro-F1 averages per-class F1 over the classes present in the ground
/// truth; predictions of classes absent from the ground truth still count
/// as false positives for those classes' precision but add no class of
/// their own.
pub fn score_records(records: &[PredictionRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::InvalidData("empty test set".into()));
    }
    let correct = records.iter().filter(|r| r.true_label == r.pred_label).count();
    let acc = 100.0 * correct as f64 / records.len() as f64;
    let classes: BTreeSet<usize> = records.iter().map(|r| r.true_label).collect();
    let mut f1_sum = 0.0;
    for &c in &classes {
        let tp = records
            .iter()
            .filter(|r| r.true_label == c && r.pred_label == c)
            .count() as f64;
        let fns = records
            .iter()
            .filter(|r| r.true_label == c && r.pred_label != c)
            .count() as f64;
        let fps = records
            .iter()
            .filter(|r| r.true_label != c && r.pred_label == c)
            .count() as f64;
        let denom = 2.0 * tp + fps + fns;
        f1_sum += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    let f1 = 100.0 * f1_sum / classes.len() as f64;
    Ok((acc, f1))
}

/// Run a predictor over labeled images and keep labels plus attention only.
pub fn predict_labeled(
    predictor: &dyn ImagePredictor,
    labeled: &[(&Tensor, usize)],
) -> Result<Vec<PredictionRecord>> {
    if labeled.is_empty() {
        return Err(Error::InvalidData("empty test set".into()));
    }
    let images: Vec<&Tensor> = labeled.iter().map(|(img, _)| *img).collect();
    let preds = predictor.predict_images(&images)?;
    Ok(preds
        .into_iter()
        .zip(labeled)
        .map(|((pred_label, attention), (_, true_label))| PredictionRecord {
            true_label: *true_label,
            pred_label,
            attention,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: usize, p: usize) -> PredictionRecord {
        PredictionRecord {
            true_label: t,
            pred_label: p,
            attention: None,
        }
    }

    #[test]
    fn perfect_predictions_score_hundred() {
        let records: Vec<PredictionRecord> = (0..10).map(|i| rec(i % 3, i % 3)).collect();
        let (acc, f1) = score_records(&records).unwrap();
        assert_eq!(acc, 100.0);
        assert_eq!(f1, 100.0);
    }

    #[test]
    fn disjoint_predictor_scores_zero() {
        let records: Vec<PredictionRecord> = (0..8).map(|i| rec(i % 2, 10 + i % 3)).collect();
        let (acc, f1) = score_records(&records).unwrap();
        assert_eq!(acc, 0.0);
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn macro_f1_matches_hand_worked_confusion() {
        // Truth [0,0,1,1,2,2], predictions [0,1,1,1,2,0]:
        // F1 per class = 0.5, 0.8, 2/3; macro = 0.655555...
        let records = vec![rec(0, 0), rec(0, 1), rec(1, 1), rec(1, 1), rec(2, 2), rec(2, 0)];
        let (acc, f1) = score_records(&records).unwrap();
        assert!((acc - 100.0 * 4.0 / 6.0).abs() < 1e-9);
        let expect = 100.0 * (0.5 + 0.8 + 2.0 / 3.0) / 3.0;
        assert!((f1 - expect).abs() < 1e-9, "f1 {f1} vs {expect}");
    }

    #[test]
    fn empty_test_set_is_an_error() {
        assert!(score_records(&[]).is_err());
    }

    #[test]
    fn average_row_is_arithmetic_mean() {
        let mut report = MetricsReport::default();
        for (ds, acc) in [("a", 90.0), ("b", 70.0), ("c", 83.0)] {
            report.rows.push(MetricsRow {
                method: "m".into(),
                experts: 4,
                transfer: TransferClass::Features,
                dataset: ds.into(),
                acc,
                f1: acc - 1.0,
            });
        }
        report.push_average("m");
        let avg = report.average_acc("m").unwrap();
        assert!((avg - 81.0).abs() < 0.05);
        let csv = report.to_csv();
        assert!(csv.starts_with("method,experts,transfer,dataset,acc,f1\n"));
        assert!(csv.contains("m,4,features,average,81.0000,80.0000"));
    }
}
