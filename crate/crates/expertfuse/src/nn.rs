//! Parameters, sequential networks, Adam, and the classifier training loop.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Flat store of named parameters; gradients live next to their values.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape.clone());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.shape, g.shape);
        for (dst, src) in p.grad.data.iter_mut().zip(&g.data) {
            *dst += src;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for v in &mut p.grad.data {
                *v = 0.0;
            }
        }
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            assert_eq!(p.value.shape, s.shape);
            p.value = s.clone();
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for p in &self.params {
            if !p.value.is_finite() {
                return Err(Error::NonFinite(format!("{context}: parameter {}", p.name)));
            }
        }
        Ok(())
    }
}

/// Kaiming-uniform fan-in initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, seed: u64, tag: &str) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = rng::stream(seed, tag);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Softmax,
}

#[derive(Debug, Clone)]
struct Layer {
    name: String,
    spec: LayerSpec,
    weight: Option<ParamId>,
    bias: Option<ParamId>,
}

/// A sequential network over a fixed per-example input shape.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    pub params: ParamSet,
}

impl Network {
    pub fn sequential(input_shape: Vec<usize>, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.clone();
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("layer{i}");
            let (weight, bias) = match *spec {
                LayerSpec::Conv2d { in_ch, out_ch, kernel } => {
                    if shape.len() != 3 || shape[0] != in_ch {
                        return Err(Error::InvalidConfig(format!(
                            "{name}: conv2d expects [{in_ch},h,w] input, network carries {shape:?}"
                        )));
                    }
                    if shape[1] < kernel || shape[2] < kernel {
                        return Err(Error::InvalidConfig(format!(
                            "{name}: kernel {kernel} larger than input {shape:?}"
                        )));
                    }
                    let fan_in = in_ch * kernel * kernel;
                    let w = params.add(
                        &format!("{name}.weight"),
                        kaiming_uniform(
                            vec![out_ch, in_ch, kernel, kernel],
                            fan_in,
                            seed,
                            &format!("init/{name}.weight"),
                        ),
                        true,
                    );
                    let b = params.add(&format!("{name}.bias"), Tensor::zeros(vec![out_ch]), true);
                    shape = vec![out_ch, shape[1] - kernel + 1, shape[2] - kernel + 1];
                    (Some(w), Some(b))
                }
                LayerSpec::Relu | LayerSpec::Softmax => (None, None),
                LayerSpec::MaxPool2 => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(Error::InvalidConfig(format!(
                            "{name}: maxpool2 expects [c,h,w] with h,w >= 2, got {shape:?}"
                        )));
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                    (None, None)
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    (None, None)
                }
                LayerSpec::Dense { in_dim, out_dim } => {
                    if shape != [in_dim] {
                        return Err(Error::InvalidConfig(format!(
                            "{name}: dense expects [{in_dim}] input, network carries {shape:?}"
                        )));
                    }
                    let w = params.add(
                        &format!("{name}.weight"),
                        kaiming_uniform(
                            vec![in_dim, out_dim],
                            in_dim,
                            seed,
                            &format!("init/{name}.weight"),
                        ),
                        true,
                    );
                    let b = params.add(&format!("{name}.bias"), Tensor::zeros(vec![out_dim]), true);
                    shape = vec![out_dim];
                    (Some(w), Some(b))
                }
            };
            layers.push(Layer {
                name,
                spec: *spec,
                weight,
                bias,
            });
        }
        Ok(Self {
            input_shape,
            layers,
            params,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_spec(&self, i: usize) -> LayerSpec {
        self.layers[i].spec
    }

    pub fn layer_params(&self, i: usize) -> (Option<ParamId>, Option<ParamId>) {
        (self.layers[i].weight, self.layers[i].bias)
    }

    /// Output width of the final dense layer.
    pub fn output_dim(&self) -> usize {
        for layer in self.layers.iter().rev() {
            if let LayerSpec::Dense { out_dim, .. } = layer.spec {
                return out_dim;
            }
        }
        0
    }

    /// Push the whole network onto `tape`, returning every layer's output.
    pub fn forward_trace(&self, tape: &mut Tape, batch: NodeId) -> Result<Vec<NodeId>> {
        let got = tape.value(batch).shape.clone();
        let want: Vec<usize> = std::iter::once(got.first().copied().unwrap_or(0))
            .chain(self.input_shape.iter().copied())
            .collect();
        if got != want {
            return Err(Error::ShapeMismatch {
                layer: "input".to_string(),
                expected: format!("[batch,{:?}]", self.input_shape),
                actual: format!("{got:?}"),
            });
        }
        let rows = got[0];
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = batch;
        for layer in &self.layers {
            cur = match layer.spec {
                LayerSpec::Conv2d { .. } => {
                    let w = tape.param(&self.params, layer.weight.unwrap());
                    let b = tape.param(&self.params, layer.bias.unwrap());
                    tape.conv2d(&layer.name, cur, w, b)?
                }
                LayerSpec::Relu => tape.relu(cur),
                LayerSpec::MaxPool2 => tape.max_pool2(&layer.name, cur)?,
                LayerSpec::Flatten => {
                    let n = tape.value(cur).numel() / rows;
                    tape.reshape(&layer.name, cur, vec![rows, n])?
                }
                LayerSpec::Dense { .. } => {
                    let w = tape.param(&self.params, layer.weight.unwrap());
                    let b = tape.param(&self.params, layer.bias.unwrap());
                    let mm = tape.matmul(&layer.name, cur, w)?;
                    tape.add_row(&layer.name, mm, b)?
                }
                LayerSpec::Softmax => tape.softmax(&layer.name, cur)?,
            };
            outputs.push(cur);
        }
        Ok(outputs)
    }

    pub fn forward(&self, tape: &mut Tape, batch: NodeId) -> Result<NodeId> {
        let outputs = self.forward_trace(tape, batch)?;
        outputs.last().copied().ok_or_else(|| {
            Error::InvalidConfig("network has no layers".into())
        })
    }

    /// Run a batch through a fresh tape and return the output with its tape.
    pub fn run(&self, batch: &Tensor) -> Result<(Tensor, Tape)> {
        let mut tape = Tape::new();
        let input = tape.input(batch.clone());
        let out = self.forward(&mut tape, input)?;
        let value = tape.value(out).clone();
        value.check_finite("network output")?;
        Ok((value, tape))
    }

    /// Stack per-example images into one batch tensor.
    pub fn assemble_batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        let per: usize = self.input_shape.iter().product();
        let mut data = Vec::with_capacity(images.len() * per);
        for img in images {
            if img.shape != self.input_shape {
                return Err(Error::ShapeMismatch {
                    layer: "batch assembly".into(),
                    expected: format!("{:?}", self.input_shape),
                    actual: img.shape_string(),
                });
            }
            data.extend_from_slice(&img.data);
        }
        let mut shape = vec![images.len()];
        shape.extend_from_slice(&self.input_shape);
        Ok(Tensor::new(shape, data))
    }

    /// Argmax class index per image, evaluated in chunks.
    pub fn classify(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let batch = self.assemble_batch(chunk)?;
            let (logits, _) = self.run(&batch)?;
            let n = logits.cols();
            for r in 0..chunk.len() {
                out.push(crate::tensor::argmax_slice(&logits.data[r * n..(r + 1) * n]));
            }
        }
        Ok(out)
    }
}

/// Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape.clone())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape.clone())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Apply one update from the gradients stored in `params`.
    /// Frozen parameters keep their gradient but receive no update.
    pub fn apply(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::ShapeMismatch {
                layer: "adam".into(),
                expected: format!("{} parameter slots", self.m.len()),
                actual: format!("{}", params.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let idx = id.0;
            if self.m[idx].shape != params.value(id).shape {
                return Err(Error::ShapeMismatch {
                    layer: format!("adam moment for {}", params.name(id)),
                    expected: format!("{:?}", self.m[idx].shape),
                    actual: params.value(id).shape_string(),
                });
            }
            let g = params.grad(id).data.clone();
            let m = &mut self.m[idx].data;
            let v = &mut self.v[idx].data;
            let value = &mut params.value_mut(id).data;
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        params.check_finite("adam step")?;
        Ok(())
    }
}

/// Shared hyperparameters for every gradient-trained model in the crate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn classifier(seed: u64) -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            seed,
        }
    }

    pub fn fusion(seed: u64) -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            seed,
        }
    }
}

/// Per-epoch record of one training run plus the best-checkpoint bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub seconds: f64,
}

/// Train a classifier network with cross-entropy and Adam, keeping the
/// weights from the epoch with the highest validation accuracy.
pub fn fit_classifier(
    net: &mut Network,
    train: &[(&Tensor, usize)],
    val: &[(&Tensor, usize)],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidData("empty train or validation split".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be positive".into()));
    }
    let start = Instant::now();
    let mut adam = AdamState::new(&net.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, "fit/shuffle");
    let mut log = TrainLog {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        val_acc: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_acc: f64::NEG_INFINITY,
        seconds: 0.0,
    };
    let mut best: Option<Vec<Tensor>> = None;

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let batch = net.assemble_batch(&images)?;
            let mut tape = Tape::new();
            let input = tape.input(batch);
            let logits = net.forward(&mut tape, input)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let loss_value = tape.value(loss).data[0];
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss became non-finite at epoch {epoch}"
                )));
            }
            net.params.zero_grads();
            tape.backward(loss, &mut net.params)?;
            adam.apply(&mut net.params, cfg.lr)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        log.epoch_loss.push(epoch_loss / batches as f64);

        let val_images: Vec<&Tensor> = val.iter().map(|(img, _)| *img).collect();
        let preds = net.classify(&val_images)?;
        let correct = preds
            .iter()
            .zip(val.iter())
            .filter(|(p, (_, y))| **p == *y)
            .count();
        let acc = correct as f64 / val.len() as f64;
        log.val_acc.push(acc);
        if acc > log.best_val_acc {
            log.best_val_acc = acc;
            log.best_epoch = epoch;
            best = Some(net.params.snapshot());
        }
    }

    if let Some(snapshot) = best {
        net.params.restore(&snapshot);
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Accuracy of a classifier on a labeled split.
pub fn classifier_accuracy(net: &Network, split: &[(&Tensor, usize)]) -> Result<f64> {
    let images: Vec<&Tensor> = split.iter().map(|(img, _)| *img).collect();
    let preds = net.classify(&images)?;
    let correct = preds
        .iter()
        .zip(split.iter())
        .filter(|(p, (_, y))| **p == *y)
        .count();
    Ok(correct as f64 / split.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(seed: u64) -> Network {
        Network::sequential(
            vec![1, 6, 6],
            &[
                LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: 8, out_dim: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 5, out_dim: 3 },
            ],
            seed,
        )
        .unwrap()
    }

    fn loss_of(net: &Network, batch: &Tensor, labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let input = tape.input(batch.clone());
        let logits = net.forward(&mut tape, input).unwrap();
        let loss = tape.cross_entropy(logits, labels).unwrap();
        tape.value(loss).data[0]
    }

    /// Central finite differences over every parameter of a small network:
    /// the analytic gradient must agree to high relative accuracy.
    #[test]
    fn gradients_match_finite_differences() {
        use rand::Rng;
        let mut net = tiny_net(3);
        let mut rng = rng::stream(5, "fd-input");
        let batch = Tensor::new(
            vec![2, 1, 6, 6],
            (0..72).map(|_| rng.random_range(0.0..1.0)).collect(),
        );
        let labels = vec![1usize, 2usize];

        let mut tape = Tape::new();
        let input = tape.input(batch.clone());
        let logits = net.forward(&mut tape, input).unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        net.params.zero_grads();
        tape.backward(loss, &mut net.params).unwrap();

        let eps = 1e-5;
        let ids: Vec<ParamId> = net.params.ids().collect();
        let mut max_rel = 0.0f64;
        for id in ids {
            let n = net.params.value(id).numel();
            for i in (0..n).step_by(3) {
                let orig = net.params.value(id).data[i];
                net.params.value_mut(id).data[i] = orig + eps;
                let up = loss_of(&net, &batch, &labels);
                net.params.value_mut(id).data[i] = orig - eps;
                let down = loss_of(&net, &batch, &labels);
                net.params.value_mut(id).data[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let analytic = net.params.grad(id).data[i];
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max((analytic - fd).abs() / denom);
            }
        }
        assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let net = tiny_net(1);
        let bad = Tensor::zeros(vec![1, 1, 4, 4]);
        let err = net.run(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input"), "got: {msg}");
        assert!(msg.contains("[1, 1, 4, 4]"), "got: {msg}");
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // Constant gradient 1 at step 1: bias-corrected update is lr/(1+eps).
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::new(vec![1], vec![0.5]), true);
        let mut adam = AdamState::new(&params);
        params.accumulate_grad(id, &Tensor::new(vec![1], vec![1.0]));
        let lr = 1e-3;
        adam.apply(&mut params, lr).unwrap();
        let delta = 0.5 - params.value(id).data[0];
        assert!((delta - lr).abs() < 1e-10, "delta {delta}");
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameter_unchanged() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::new(vec![2], vec![0.3, -0.7]), true);
        let mut adam = AdamState::new(&params);
        adam.apply(&mut params, 1e-3).unwrap();
        assert_eq!(params.value(id).data, vec![0.3, -0.7]);
    }

    #[test]
    fn frozen_parameter_keeps_gradient_but_skips_update() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::new(vec![1], vec![1.0]), false);
        let mut adam = AdamState::new(&params);
        params.accumulate_grad(id, &Tensor::new(vec![1], vec![2.0]));
        adam.apply(&mut params, 0.1).unwrap();
        assert_eq!(params.grad(id).data, vec![2.0]);
        assert_eq!(params.value(id).data, vec![1.0]);
    }

    #[test]
    fn adam_updates_are_deterministic() {
        let run = || {
            let mut net = tiny_net(9);
            let batch = Tensor::new(vec![1, 1, 6, 6], vec![0.25; 36]);
            let mut adam = AdamState::new(&net.params);
            for _ in 0..100 {
                let mut tape = Tape::new();
                let input = tape.input(batch.clone());
                let logits = net.forward(&mut tape, input).unwrap();
                let loss = tape.cross_entropy(logits, &[1]).unwrap();
                net.params.zero_grads();
                tape.backward(loss, &mut net.params).unwrap();
                adam.apply(&mut net.params, 1e-3).unwrap();
            }
            net.params.snapshot()
        };
        let (a, b) = (run(), run());
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn training_reaches_best_checkpoint() {
        use rand::Rng;
        let mut rng = rng::stream(2, "fit-data");
        // Two blob classes in a 6x6 image: top-left bright vs bottom-right bright.
        let mut images = Vec::new();
        for i in 0..40 {
            let class = i % 2;
            let mut img = vec![0.1; 36];
            for y in 0..3 {
                for x in 0..3 {
                    let (yy, xx) = if class == 0 { (y, x) } else { (y + 3, x + 3) };
                    img[yy * 6 + xx] = 0.8 + rng.random_range(-0.05..0.05);
                }
            }
            images.push((Tensor::new(vec![1, 6, 6], img), class));
        }
        let refs: Vec<(&Tensor, usize)> = images.iter().map(|(t, c)| (t, *c)).collect();
        let (train, val) = refs.split_at(30);
        let mut net = Network::sequential(
            vec![1, 6, 6],
            &[
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: 36, out_dim: 2 },
            ],
            7,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-2,
            seed: 7,
        };
        let log = fit_classifier(&mut net, train, val, &cfg).unwrap();
        // Restored weights must reproduce the logged best validation accuracy.
        let acc = classifier_accuracy(&net, val).unwrap();
        assert!((acc - log.best_val_acc).abs() < 1e-12);
        assert!(log.best_val_acc > 0.9);
    }
}
