//! Per-site expert classifiers.
//!
//! The base expert is trained from scratch on the base site; each
//! incremental expert is a clone of the base fine-tuned on its own site with
//! every layer trainable and a freshly initialized head sized to the site's
//! label set. Naive sequential fine-tuning (the forgetting baselines) lives
//! here too.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SiteDataset, Split};
use crate::error::{Error, Result};
use crate::nn::{fit_classifier, LayerSpec, Network, TrainConfig, TrainLog};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{rng, weights};

/// Feature width k of the encoder output.
pub const FEATURE_DIM: usize = 32;
/// Channels of the two convolutional layers.
pub const CONV_CHANNELS: [usize; 2] = [8, 16];
/// Neural-mean width p: one entry per convolutional channel.
pub const NMD_DIM: usize = CONV_CHANNELS[0] + CONV_CHANNELS[1];

/// Layer indices within the fixed architecture.
const CONV1_RELU: usize = 1;
const CONV2_RELU: usize = 4;
const FEATURE_LAYER: usize = 8;
const HEAD_LAYER: usize = 9;

/// The fixed classifier architecture shared by experts, the naive
/// fine-tuning baselines, and the combine-and-retrain oracle.
pub fn classifier_architecture(
    height: usize,
    width: usize,
    classes: usize,
) -> Result<Vec<LayerSpec>> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidConfig(format!(
            "encoder needs at least 8x8 input, got {height}x{width}"
        )));
    }
    let (h1, w1) = ((height - 2) / 2, (width - 2) / 2);
    let (h2, w2) = ((h1 - 2) / 2, (w1 - 2) / 2);
    let flat = CONV_CHANNELS[1] * h2 * w2;
    Ok(vec![
        LayerSpec::Conv2d { in_ch: 1, out_ch: CONV_CHANNELS[0], kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::Conv2d { in_ch: CONV_CHANNELS[0], out_ch: CONV_CHANNELS[1], kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: flat, out_dim: FEATURE_DIM },
        LayerSpec::Relu,
        LayerSpec::Dense { in_dim: FEATURE_DIM, out_dim: classes },
    ])
}

/// One expert: encoder, own head, label set, and (once computed) the
/// reference neural mean of its training data.
#[derive(Debug, Clone)]
pub struct Expert {
    pub id: String,
    pub site_id: String,
    /// Global class ids, in head-column order.
    pub label_set: Vec<usize>,
    pub net: Network,
    pub reference_mean: Option<Vec<f64>>,
    pub log: TrainLog,
}

impl Expert {
    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn nmd_dim(&self) -> usize {
        NMD_DIM
    }

    pub fn num_classes(&self) -> usize {
        self.label_set.len()
    }

    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.label_set.iter().position(|&g| g == global)
    }

    /// Head parameters (weight, bias).
    pub fn head_params(&self) -> (crate::nn::ParamId, crate::nn::ParamId) {
        let (w, b) = self.net.layer_params(HEAD_LAYER);
        (w.unwrap(), b.unwrap())
    }

    /// Forward a batch and return `(tape, per-layer node ids)`.
    pub fn trace(&self, batch: &Tensor) -> Result<(Tape, Vec<crate::tape::NodeId>)> {
        let mut tape = Tape::new();
        let input = tape.input(batch.clone());
        let outputs = self.net.forward_trace(&mut tape, input)?;
        Ok((tape, outputs))
    }

    /// Feature vectors h (output of the encoder) for a batch of images.
    pub fn encode(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut rows: Vec<f64> = Vec::with_capacity(images.len() * FEATURE_DIM);
        for chunk in images.chunks(128) {
            let batch = self.net.assemble_batch(chunk)?;
            let (tape, outputs) = self.trace(&batch)?;
            let h = tape.value(outputs[FEATURE_LAYER]);
            rows.extend_from_slice(&h.data);
        }
        Ok(Tensor::new(vec![images.len(), FEATURE_DIM], rows))
    }

    /// Own-head logits for a batch of images.
    pub fn own_logits(&self, images: &[&Tensor]) -> Result<Tensor> {
        let n_classes = self.num_classes();
        let mut rows: Vec<f64> = Vec::with_capacity(images.len() * n_classes);
        for chunk in images.chunks(128) {
            let batch = self.net.assemble_batch(chunk)?;
            let (logits, _) = self.net.run(&batch)?;
            rows.extend_from_slice(&logits.data);
        }
        Ok(Tensor::new(vec![images.len(), n_classes], rows))
    }

    /// Per-channel spatial means of both conv layers (post-ReLU) per image.
    pub fn neural_means(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut rows: Vec<f64> = Vec::with_capacity(images.len() * NMD_DIM);
        for chunk in images.chunks(128) {
            let batch = self.net.assemble_batch(chunk)?;
            let (tape, outputs) = self.trace(&batch)?;
            for r in 0..chunk.len() {
                for layer in [CONV1_RELU, CONV2_RELU] {
                    let act = tape.value(outputs[layer]);
                    let (c, hw) = (act.shape[1], act.shape[2] * act.shape[3]);
                    for ch in 0..c {
                        let base = r * c * hw + ch * hw;
                        let mean: f64 =
                            act.data[base..base + hw].iter().sum::<f64>() / hw as f64;
                        rows.push(mean);
                    }
                }
            }
        }
        Ok(Tensor::new(vec![images.len(), NMD_DIM], rows))
    }

    /// Features and neural means in one forward pass per chunk.
    pub fn features_and_means(&self, images: &[&Tensor]) -> Result<(Tensor, Tensor)> {
        let mut h_rows: Vec<f64> = Vec::with_capacity(images.len() * FEATURE_DIM);
        let mut m_rows: Vec<f64> = Vec::with_capacity(images.len() * NMD_DIM);
        for chunk in images.chunks(128) {
            let batch = self.net.assemble_batch(chunk)?;
            let (tape, outputs) = self.trace(&batch)?;
            h_rows.extend_from_slice(&tape.value(outputs[FEATURE_LAYER]).data);
            for r in 0..chunk.len() {
                for layer in [CONV1_RELU, CONV2_RELU] {
                    let act = tape.value(outputs[layer]);
                    let (c, hw) = (act.shape[1], act.shape[2] * act.shape[3]);
                    for ch in 0..c {
                        let base = r * c * hw + ch * hw;
                        m_rows.push(act.data[base..base + hw].iter().sum::<f64>() / hw as f64);
                    }
                }
            }
        }
        Ok((
            Tensor::new(vec![images.len(), FEATURE_DIM], h_rows),
            Tensor::new(vec![images.len(), NMD_DIM], m_rows),
        ))
    }

    /// Serialize to a self-contained byte blob (sidecar JSON + weights).
    pub fn to_blob(&self) -> Result<Vec<u8>> {
        let sidecar = ExpertSidecar {
            id: self.id.clone(),
            site_id: self.site_id.clone(),
            label_set: self.label_set.clone(),
            feature_dim: FEATURE_DIM,
            nmd_dim: NMD_DIM,
            image_height: self.net.input_shape()[1],
            image_width: self.net.input_shape()[2],
            reference_mean: self.reference_mean.clone(),
            log: self.log.clone(),
        };
        let json = serde_json::to_vec(&sidecar)?;
        let mut blob = Vec::new();
        blob.extend_from_slice(&(json.len() as u32).to_le_bytes());
        blob.extend_from_slice(&json);
        weights::write_params(&mut blob, &self.net.params)?;
        Ok(blob)
    }

    pub fn from_blob(blob: &[u8]) -> Result<Expert> {
        if blob.len() < 4 {
            return Err(Error::Format("expert blob too short".into()));
        }
        let json_len = u32::from_le_bytes(blob[0..4].try_into().unwrap()) as usize;
        if blob.len() < 4 + json_len {
            return Err(Error::Format("expert blob truncated".into()));
        }
        let sidecar: ExpertSidecar = serde_json::from_slice(&blob[4..4 + json_len])?;
        let specs = classifier_architecture(
            sidecar.image_height,
            sidecar.image_width,
            sidecar.label_set.len(),
        )?;
        let mut net = Network::sequential(
            vec![1, sidecar.image_height, sidecar.image_width],
            &specs,
            0,
        )?;
        let stored = weights::read_params(&mut &blob[4 + json_len..])?;
        weights::apply_stored(&mut net.params, &stored)?;
        Ok(Expert {
            id: sidecar.id,
            site_id: sidecar.site_id,
            label_set: sidecar.label_set,
            net,
            reference_mean: sidecar.reference_mean,
            log: sidecar.log,
        })
    }

    /// Map split examples to `(image, local label)` pairs for training.
    pub fn local_split<'a>(
        &self,
        ds: &'a SiteDataset,
        split: Split,
    ) -> Result<Vec<(&'a Tensor, usize)>> {
        localize(ds, split, &self.label_set)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        weights::save_params(&dir.join(format!("expert_{}.efw", self.id)), &self.net.params)?;
        let sidecar = ExpertSidecar {
            id: self.id.clone(),
            site_id: self.site_id.clone(),
            label_set: self.label_set.clone(),
            feature_dim: FEATURE_DIM,
            nmd_dim: NMD_DIM,
            image_height: self.net.input_shape()[1],
            image_width: self.net.input_shape()[2],
            reference_mean: self.reference_mean.clone(),
            log: self.log.clone(),
        };
        fs::write(
            dir.join(format!("expert_{}.json", self.id)),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, id: &str) -> Result<Expert> {
        let sidecar: ExpertSidecar =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("expert_{id}.json")))?)?;
        let specs = classifier_architecture(
            sidecar.image_height,
            sidecar.image_width,
            sidecar.label_set.len(),
        )?;
        let mut net = Network::sequential(
            vec![1, sidecar.image_height, sidecar.image_width],
            &specs,
            0,
        )?;
        let stored = weights::load_params(&dir.join(format!("expert_{id}.efw")))?;
        weights::apply_stored(&mut net.params, &stored)?;
        Ok(Expert {
            id: sidecar.id,
            site_id: sidecar.site_id,
            label_set: sidecar.label_set,
            net,
            reference_mean: sidecar.reference_mean,
            log: sidecar.log,
        })
    }
}

/// Sidecar for single-network models (naive baselines, oracle).
#[derive(Serialize, Deserialize)]
pub struct FlatModelSidecar {
    pub classes: Vec<usize>,
    pub image_height: usize,
    pub image_width: usize,
    pub logs: Vec<TrainLog>,
}

#[derive(Serialize, Deserialize)]
struct ExpertSidecar {
    id: String,
    site_id: String,
    label_set: Vec<usize>,
    feature_dim: usize,
    nmd_dim: usize,
    image_height: usize,
    image_width: usize,
    reference_mean: Option<Vec<f64>>,
    log: TrainLog,
}

fn localize<'a>(
    ds: &'a SiteDataset,
    split: Split,
    label_set: &[usize],
) -> Result<Vec<(&'a Tensor, usize)>> {
    ds.labeled(split)
        .into_iter()
        .map(|(img, global)| {
            label_set
                .iter()
                .position(|&g| g == global)
                .map(|local| (img, local))
                .ok_or(Error::LabelOutOfRange {
                    label: global,
                    classes: label_set.len(),
                })
        })
        .collect()
}

/// Train the base expert from scratch on the base site.
pub fn train_base(ds: &SiteDataset, cfg: &TrainConfig) -> Result<Expert> {
    let (h, w) = image_dims(ds)?;
    let specs = classifier_architecture(h, w, ds.labels.len())?;
    let mut net = Network::sequential(vec![1, h, w], &specs, cfg.seed)?;
    let mut expert = Expert {
        id: "b".into(),
        site_id: ds.site_id.clone(),
        label_set: ds.labels.clone(),
        net: Network::sequential(vec![1, h, w], &specs, cfg.seed)?,
        reference_mean: None,
        log: TrainLog {
            epoch_loss: vec![],
            val_acc: vec![],
            best_epoch: 0,
            best_val_acc: 0.0,
            seconds: 0.0,
        },
    };
    let train = localize(ds, Split::Train, &expert.label_set)?;
    let val = localize(ds, Split::Val, &expert.label_set)?;
    expert.log = fit_classifier(&mut net, &train, &val, cfg)?;
    expert.net = net;
    Ok(expert)
}

/// Clone `base` and fine-tune it on an incremental site. The head is
/// replaced with a freshly initialized one sized to the new label set;
/// every layer stays trainable. `base` itself is never modified.
pub fn finetune_expert(
    base: &Expert,
    expert_id: &str,
    ds: &SiteDataset,
    cfg: &TrainConfig,
) -> Result<Expert> {
    let (h, w) = image_dims(ds)?;
    if [1, h, w] != *base.net.input_shape() {
        return Err(Error::ShapeMismatch {
            layer: "finetune input".into(),
            expected: format!("{:?}", base.net.input_shape()),
            actual: format!("[1, {h}, {w}]"),
        });
    }
    let specs = classifier_architecture(h, w, ds.labels.len())?;
    let head_seed = rng::derive_seed(cfg.seed, &format!("head/{expert_id}"));
    let mut net = Network::sequential(vec![1, h, w], &specs, head_seed)?;
    copy_encoder(&base.net, &mut net)?;
    let mut expert = Expert {
        id: expert_id.to_string(),
        site_id: ds.site_id.clone(),
        label_set: ds.labels.clone(),
        net: Network::sequential(vec![1, h, w], &specs, head_seed)?,
        reference_mean: None,
        log: base.log.clone(),
    };
    let train = localize(ds, Split::Train, &expert.label_set)?;
    let val = localize(ds, Split::Val, &expert.label_set)?;
    expert.log = fit_classifier(&mut net, &train, &val, cfg)?;
    expert.net = net;
    Ok(expert)
}

/// Copy every parameter except the head from `src` into `dst`.
fn copy_encoder(src: &Network, dst: &mut Network) -> Result<()> {
    for layer in 0..HEAD_LAYER {
        let (sw, sb) = src.layer_params(layer);
        let (dw, db) = dst.layer_params(layer);
        for (s, d) in [(sw, dw), (sb, db)] {
            if let (Some(s), Some(d)) = (s, d) {
                *dst.params.value_mut(d) = src.params.value(s).clone();
            }
        }
    }
    Ok(())
}

fn image_dims(ds: &SiteDataset) -> Result<(usize, usize)> {
    let first = ds
        .examples
        .first()
        .ok_or_else(|| Error::InvalidData(format!("site {} has no examples", ds.site_id)))?;
    Ok((first.image.shape[1], first.image.shape[2]))
}

/// Head policy for naive sequential fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    /// Replace the head at every step; the model only predicts the newest
    /// label set.
    Constant,
    /// Append columns for novel classes, keeping (and training) existing ones.
    Expand,
}

/// A plain classifier dragged through incremental steps without any
/// forgetting mitigation.
#[derive(Debug, Clone)]
pub struct NaiveModel {
    pub net: Network,
    /// Global class ids in head-column order.
    pub classes: Vec<usize>,
    pub logs: Vec<TrainLog>,
}

impl NaiveModel {
    pub fn from_expert(expert: &Expert) -> Self {
        Self {
            net: expert.net.clone(),
            classes: expert.label_set.clone(),
            logs: Vec::new(),
        }
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        weights::save_params(&dir.join(format!("{stem}.efw")), &self.net.params)?;
        let sidecar = FlatModelSidecar {
            classes: self.classes.clone(),
            image_height: self.net.input_shape()[1],
            image_width: self.net.input_shape()[2],
            logs: self.logs.clone(),
        };
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<NaiveModel> {
        let sidecar: FlatModelSidecar =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let specs = classifier_architecture(
            sidecar.image_height,
            sidecar.image_width,
            sidecar.classes.len(),
        )?;
        let mut net = Network::sequential(
            vec![1, sidecar.image_height, sidecar.image_width],
            &specs,
            0,
        )?;
        let stored = weights::load_params(&dir.join(format!("{stem}.efw")))?;
        weights::apply_stored(&mut net.params, &stored)?;
        Ok(NaiveModel {
            net,
            classes: sidecar.classes,
            logs: sidecar.logs,
        })
    }

    /// Argmax prediction mapped to global class ids.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        Ok(self
            .net
            .classify(images)?
            .into_iter()
            .map(|local| self.classes[local])
            .collect())
    }
}

/// One naive fine-tuning step on `ds` under the chosen head policy.
pub fn finetune_naive(
    model: &mut NaiveModel,
    ds: &SiteDataset,
    mode: HeadMode,
    cfg: &TrainConfig,
) -> Result<()> {
    let (h, w) = image_dims(ds)?;
    let new_classes: Vec<usize> = match mode {
        HeadMode::Constant => ds.labels.clone(),
        HeadMode::Expand => {
            let mut classes = model.classes.clone();
            for &l in &ds.labels {
                if !classes.contains(&l) {
                    classes.push(l);
                }
            }
            classes
        }
    };
    let specs = classifier_architecture(h, w, new_classes.len())?;
    let head_seed = rng::derive_seed(cfg.seed, &format!("naive-head/{}", ds.site_id));
    let mut net = Network::sequential(vec![1, h, w], &specs, head_seed)?;
    copy_encoder(&model.net, &mut net)?;
    if mode == HeadMode::Expand {
        // Retain trained weights for classes the old head already covered.
        let (old_w, old_b) = model.net.layer_params(HEAD_LAYER);
        let (new_w, new_b) = net.layer_params(HEAD_LAYER);
        let old_cols = model.classes.len();
        let new_cols = new_classes.len();
        let old_weight = model.net.params.value(old_w.unwrap()).clone();
        let old_bias = model.net.params.value(old_b.unwrap()).clone();
        let weight = net.params.value_mut(new_w.unwrap());
        for i in 0..FEATURE_DIM {
            for j in 0..old_cols {
                weight.data[i * new_cols + j] = old_weight.data[i * old_cols + j];
            }
        }
        let bias = net.params.value_mut(new_b.unwrap());
        bias.data[..old_cols].copy_from_slice(&old_bias.data);
    }
    let train = localize(ds, Split::Train, &new_classes)?;
    let val = localize(ds, Split::Val, &new_classes)?;
    let log = fit_classifier(&mut net, &train, &val, cfg)?;
    model.net = net;
    model.classes = new_classes;
    model.logs.push(log);
    Ok(())
}
