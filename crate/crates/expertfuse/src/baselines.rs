//! Confidence-based multi-expert selection baselines and the
//! combine-and-retrain oracle.
//!
//! The confidence baselines use each expert's own head only (no cross
//! weights, no data transfer): max-logit and max-softmax pool per-class
//! scores across experts, confidence routing hands the whole prediction to
//! the most confident expert. The oracle retrains one classifier from
//! scratch on all data pooled centrally.

use serde::{Deserialize, Serialize};

use crate::data::{SiteDataset, Split};
use crate::error::{Error, Result};
use crate::expert::Expert;
use crate::nn::{fit_classifier, Network, TrainConfig, TrainLog};
use crate::tensor::{argmax_slice, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    MaxLogit,
    Msp,
    ConfidenceRouting,
    CombineRetrain,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::MaxLogit => "max-logit",
            BaselineKind::Msp => "msp",
            BaselineKind::ConfidenceRouting => "confidence-routing",
            BaselineKind::CombineRetrain => "combine-retrain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max-logit" => Ok(BaselineKind::MaxLogit),
            "msp" => Ok(BaselineKind::Msp),
            "confidence-routing" => Ok(BaselineKind::ConfidenceRouting),
            "combine-retrain" => Ok(BaselineKind::CombineRetrain),
            other => Err(Error::InvalidConfig(format!("unknown baseline kind {other}"))),
        }
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Union of label sets in ascending global-id order.
fn union_classes(label_sets: &[&[usize]]) -> Vec<usize> {
    let mut classes: Vec<usize> = label_sets.iter().flat_map(|s| s.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Per-class max over expert logits, argmax over the union label set.
pub fn max_logit_combine(label_sets: &[&[usize]], logits: &[&[f64]]) -> usize {
    let classes = union_classes(label_sets);
    let scores: Vec<f64> = classes
        .iter()
        .map(|&c| {
            label_sets
                .iter()
                .zip(logits)
                .filter_map(|(set, z)| set.iter().position(|&g| g == c).map(|i| z[i]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    classes[argmax_slice(&scores)]
}

/// Per-class max over expert softmax probabilities.
pub fn msp_combine(label_sets: &[&[usize]], logits: &[&[f64]]) -> usize {
    let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let prob_refs: Vec<&[f64]> = probs.iter().map(|p| p.as_slice()).collect();
    max_logit_combine(label_sets, &prob_refs)
}

/// The expert with the highest max-softmax wins outright; ties break to the
/// lowest expert index. Returns `(winner, predicted global class)`.
pub fn confidence_route_combine(label_sets: &[&[usize]], logits: &[&[f64]]) -> (usize, usize) {
    let mut winner = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, z) in logits.iter().enumerate() {
        let conf = softmax(z).into_iter().fold(f64::NEG_INFINITY, f64::max);
        if conf > best {
            best = conf;
            winner = i;
        }
    }
    let class = label_sets[winner][argmax_slice(logits[winner])];
    (winner, class)
}

fn expert_logits(experts: &[&Expert], images: &[&Tensor]) -> Result<Vec<Tensor>> {
    experts.iter().map(|e| e.own_logits(images)).collect()
}

fn combine_over_images(
    experts: &[&Expert],
    images: &[&Tensor],
    combine: impl Fn(&[&[usize]], &[&[f64]]) -> usize,
) -> Result<Vec<usize>> {
    if experts.is_empty() {
        return Err(Error::MissingInput("no experts supplied".into()));
    }
    let label_sets: Vec<&[usize]> = experts.iter().map(|e| e.label_set.as_slice()).collect();
    let all_logits = expert_logits(experts, images)?;
    let mut out = Vec::with_capacity(images.len());
    for r in 0..images.len() {
        let rows: Vec<&[f64]> = all_logits
            .iter()
            .zip(experts)
            .map(|(t, e)| &t.data[r * e.num_classes()..(r + 1) * e.num_classes()])
            .collect();
        out.push(combine(&label_sets, &rows));
    }
    Ok(out)
}

pub fn max_logit_predict(experts: &[&Expert], images: &[&Tensor]) -> Result<Vec<usize>> {
    combine_over_images(experts, images, max_logit_combine)
}

pub fn msp_predict(experts: &[&Expert], images: &[&Tensor]) -> Result<Vec<usize>> {
    combine_over_images(experts, images, msp_combine)
}

pub fn confidence_route_predict(experts: &[&Expert], images: &[&Tensor]) -> Result<Vec<usize>> {
    combine_over_images(experts, images, |sets, logits| {
        confidence_route_combine(sets, logits).1
    })
}

/// A single classifier over pooled data (the privileged oracle).
#[derive(Debug, Clone)]
pub struct PooledModel {
    pub net: Network,
    /// Global class ids in head-column order.
    pub classes: Vec<usize>,
    pub log: TrainLog,
}

impl PooledModel {
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        Ok(self
            .net
            .classify(images)?
            .into_iter()
            .map(|local| self.classes[local])
            .collect())
    }

    pub fn save(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::weights::save_params(&dir.join(format!("{stem}.efw")), &self.net.params)?;
        let sidecar = crate::expert::FlatModelSidecar {
            classes: self.classes.clone(),
            image_height: self.net.input_shape()[1],
            image_width: self.net.input_shape()[2],
            logs: vec![self.log.clone()],
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path, stem: &str) -> Result<PooledModel> {
        let sidecar: crate::expert::FlatModelSidecar = serde_json::from_str(
            &std::fs::read_to_string(dir.join(format!("{stem}.json")))?,
        )?;
        let specs = crate::expert::classifier_architecture(
            sidecar.image_height,
            sidecar.image_width,
            sidecar.classes.len(),
        )?;
        let mut net = Network::sequential(
            vec![1, sidecar.image_height, sidecar.image_width],
            &specs,
            0,
        )?;
        let stored = crate::weights::load_params(&dir.join(format!("{stem}.efw")))?;
        crate::weights::apply_stored(&mut net.params, &stored)?;
        let log = sidecar
            .logs
            .into_iter()
            .next()
            .ok_or_else(|| Error::Format("pooled model sidecar missing log".into()))?;
        Ok(PooledModel {
            net,
            classes: sidecar.classes,
            log,
        })
    }
}

/// Retrain one model from scratch on the union of the given sites' train
/// splits, validating on the union of their validation splits.
pub fn combine_retrain(sites: &[&SiteDataset], cfg: &TrainConfig) -> Result<PooledModel> {
    if sites.is_empty() {
        return Err(Error::MissingInput("oracle needs at least one site".into()));
    }
    let label_sets: Vec<&[usize]> = sites.iter().map(|s| s.labels.as_slice()).collect();
    let classes = union_classes(&label_sets);
    let localize = |split: Split| -> Vec<(&Tensor, usize)> {
        sites
            .iter()
            .flat_map(|s| s.labeled(split))
            .map(|(img, global)| {
                let local = classes
                    .binary_search(&global)
                    .expect("label in union by construction");
                (img, local)
            })
            .collect()
    };
    let train = localize(Split::Train);
    let val = localize(Split::Val);
    let first = sites[0]
        .examples
        .first()
        .ok_or_else(|| Error::InvalidData("oracle site has no examples".into()))?;
    let (h, w) = (first.image.shape[1], first.image.shape[2]);
    let mut net = Network::sequential(
        vec![1, h, w],
        &crate::expert::classifier_architecture(h, w, classes.len())?,
        cfg.seed,
    )?;
    let log = fit_classifier(&mut net, &train, &val, cfg)?;
    Ok(PooledModel { net, classes, log })
}
