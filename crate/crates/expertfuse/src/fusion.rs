//! Score fusion across expert branches.
//!
//! Every expert contributes logits to every branch through a learned cross
//! weight matrix; the diagonal blocks are the frozen expert heads. A branch's
//! logits are the sum of per-expert affine contributions, each scaled by the
//! contributing expert's in-distribution score. Branch logits are
//! concatenated and reduced to one logit per global class by max-pooling
//! duplicate classes (the knowledge pooler).
//!
//! Three modes share this graph:
//! - `Sf`: unweighted, every score fixed to 1;
//! - `AttnWsf`: scores from a small network over the concatenated features h;
//! - `NmdWsf`: scores from the same network shape over the concatenated
//!   neural-mean discrepancy vectors g.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::Expert;
use crate::nn::{kaiming_uniform, AdamState, ParamId, ParamSet, TrainConfig, TrainLog};
use crate::tape::{NodeId, Tape};
use crate::tensor::{argmax_slice, Tensor};
use crate::{rng, weights};

pub const ATTN_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    Sf,
    AttnWsf,
    NmdWsf,
}

impl FusionMode {
    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Sf => "sf",
            FusionMode::AttnWsf => "attn-wsf",
            FusionMode::NmdWsf => "nmd-wsf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sf" => Ok(FusionMode::Sf),
            "attn" | "attn-wsf" => Ok(FusionMode::AttnWsf),
            "nmd" | "nmd-wsf" => Ok(FusionMode::NmdWsf),
            other => Err(Error::InvalidConfig(format!("unknown fusion mode {other}"))),
        }
    }
}

/// What fusion needs to know about one expert branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertMeta {
    pub id: String,
    pub label_set: Vec<usize>,
}

/// Map from positions in the concatenated branch logits to global classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingMap {
    /// Pooled class order: ascending global ids of the union label set.
    pub classes: Vec<usize>,
    /// groups[i] lists the positions of classes[i] in the concatenated logits.
    pub groups: Vec<Vec<usize>>,
    pub total_positions: usize,
}

impl PoolingMap {
    pub fn new(experts: &[ExpertMeta]) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::InvalidConfig("fusion needs at least one expert".into()));
        }
        let mut classes: Vec<usize> = experts
            .iter()
            .flat_map(|e| e.label_set.iter().copied())
            .collect();
        classes.sort_unstable();
        classes.dedup();
        let mut groups = vec![Vec::new(); classes.len()];
        let mut pos = 0;
        for e in experts {
            for &global in &e.label_set {
                let slot = classes.binary_search(&global).expect("class in union");
                groups[slot].push(pos);
                pos += 1;
            }
        }
        let map = Self {
            classes,
            groups,
            total_positions: pos,
        };
        map.validate()?;
        Ok(map)
    }

    /// Every concatenated position must be covered exactly once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.total_positions];
        for g in &self.groups {
            for &p in g {
                if p >= self.total_positions || seen[p] {
                    return Err(Error::InvalidData(format!(
                        "pooling map position {p} repeated or out of range"
                    )));
                }
                seen[p] = true;
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(Error::InvalidData("pooling map leaves positions uncovered".into()))
        }
    }

    /// Max over each class's positions; classes appearing once pass through.
    pub fn pool(&self, concatenated: &[f64]) -> Result<Vec<f64>> {
        if concatenated.len() != self.total_positions {
            return Err(Error::ShapeMismatch {
                layer: "knowledge pooler".into(),
                expected: format!("[{}]", self.total_positions),
                actual: format!("[{}]", concatenated.len()),
            });
        }
        Ok(self
            .groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&p| concatenated[p])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect())
    }

    /// Index into `classes` for a global id.
    pub fn class_index(&self, global: usize) -> Option<usize> {
        self.classes.binary_search(&global).ok()
    }
}

/// One fusion training or inference row: the transferred vectors of a single
/// augmented example. `h` holds every expert's feature vector in roster
/// order, `g` every expert's discrepancy vector.
#[derive(Debug, Clone)]
pub struct FusionExample {
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Global class id.
    pub class: usize,
    /// Pooled logits in `PoolingMap::classes` order.
    pub pooled: Vec<f64>,
    /// Per-expert weights A.
    pub attention: Vec<f64>,
}

/// How `predict` obtains the per-expert weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionSource {
    /// The model's own mode (ones for SF, learned scores for wSF).
    Model,
    /// Force uniform weights 1/|d|.
    ForcedUniform,
    /// Force all-ones weights (the unweighted sum).
    ForcedOnes,
}

struct AttnParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

pub struct FusionModel {
    pub mode: FusionMode,
    pub experts: Vec<ExpertMeta>,
    pub feature_dim: usize,
    pub nmd_dim: usize,
    pub pooling: PoolingMap,
    pub params: ParamSet,
    /// cross[src][dst] = (weight, bias) for the contribution of expert `src`
    /// to branch `dst`; the diagonal holds the frozen expert heads.
    cross: Vec<Vec<(ParamId, ParamId)>>,
    attn: Option<AttnParams>,
    pub trained: bool,
    pub log: Option<TrainLog>,
}

impl FusionModel {
    /// Build a fusion model over explicit head tensors (one `(weight, bias)`
    /// per expert). Off-diagonal cross weights start at zero so the initial
    /// model reproduces each expert's own head exactly.
    pub fn from_heads(
        mode: FusionMode,
        experts: Vec<ExpertMeta>,
        heads: &[(Tensor, Tensor)],
        feature_dim: usize,
        nmd_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if experts.len() != heads.len() {
            return Err(Error::InvalidConfig(format!(
                "{} experts but {} heads",
                experts.len(),
                heads.len()
            )));
        }
        let pooling = PoolingMap::new(&experts)?;
        let mut params = ParamSet::new();
        let mut cross = Vec::with_capacity(experts.len());
        for (si, src) in experts.iter().enumerate() {
            let mut row = Vec::with_capacity(experts.len());
            for (di, dst) in experts.iter().enumerate() {
                let classes = dst.label_set.len();
                let (w, b) = if si == di {
                    let (hw, hb) = &heads[di];
                    if hw.shape != [feature_dim, classes] || hb.shape != [classes] {
                        return Err(Error::ShapeMismatch {
                            layer: format!("head of expert {}", dst.id),
                            expected: format!("[{feature_dim}, {classes}] and [{classes}]"),
                            actual: format!("{:?} and {:?}", hw.shape, hb.shape),
                        });
                    }
                    (
                        params.add(&format!("cross.{}.{}.weight", src.id, dst.id), hw.clone(), false),
                        params.add(&format!("cross.{}.{}.bias", src.id, dst.id), hb.clone(), false),
                    )
                } else {
                    (
                        params.add(
                            &format!("cross.{}.{}.weight", src.id, dst.id),
                            Tensor::zeros(vec![feature_dim, classes]),
                            true,
                        ),
                        params.add(
                            &format!("cross.{}.{}.bias", src.id, dst.id),
                            Tensor::zeros(vec![classes]),
                            true,
                        ),
                    )
                };
                row.push((w, b));
            }
            cross.push(row);
        }
        let attn = match mode {
            FusionMode::Sf => None,
            FusionMode::AttnWsf | FusionMode::NmdWsf => {
                let input_dim = match mode {
                    FusionMode::AttnWsf => feature_dim * experts.len(),
                    _ => nmd_dim * experts.len(),
                };
                let out = experts.len();
                Some(AttnParams {
                    w1: params.add(
                        "attn.l1.weight",
                        kaiming_uniform(vec![input_dim, ATTN_HIDDEN], input_dim, seed, "init/attn.l1"),
                        true,
                    ),
                    b1: params.add("attn.l1.bias", Tensor::zeros(vec![ATTN_HIDDEN]), true),
                    w2: params.add(
                        "attn.l2.weight",
                        kaiming_uniform(vec![ATTN_HIDDEN, ATTN_HIDDEN], ATTN_HIDDEN, seed, "init/attn.l2"),
                        true,
                    ),
                    b2: params.add("attn.l2.bias", Tensor::zeros(vec![ATTN_HIDDEN]), true),
                    // Zero output layer: scores start exactly uniform, so
                    // training starts at the unweighted-fusion behaviour and
                    // the first gradients set the weighting direction.
                    w3: params.add(
                        "attn.l3.weight",
                        Tensor::zeros(vec![ATTN_HIDDEN, out]),
                        true,
                    ),
                    b3: params.add("attn.l3.bias", Tensor::zeros(vec![out]), true),
                })
            }
        };
        Ok(Self {
            mode,
            experts,
            feature_dim,
            nmd_dim,
            pooling,
            params,
            cross,
            attn,
            trained: false,
            log: None,
        })
    }

    /// Build directly over trained experts, freezing copies of their heads.
    pub fn from_experts(mode: FusionMode, experts: &[&Expert], seed: u64) -> Result<Self> {
        let metas: Vec<ExpertMeta> = experts
            .iter()
            .map(|e| ExpertMeta {
                id: e.id.clone(),
                label_set: e.label_set.clone(),
            })
            .collect();
        let heads: Vec<(Tensor, Tensor)> = experts
            .iter()
            .map(|e| {
                let (w, b) = e.head_params();
                (e.net.params.value(w).clone(), e.net.params.value(b).clone())
            })
            .collect();
        let (k, p) = match experts.first() {
            Some(e) => (e.feature_dim(), e.nmd_dim()),
            None => return Err(Error::InvalidConfig("fusion needs at least one expert".into())),
        };
        Self::from_heads(mode, metas, &heads, k, p, seed)
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Width of the attention input for this mode (0 for SF).
    pub fn attention_input_dim(&self) -> usize {
        match self.mode {
            FusionMode::Sf => 0,
            FusionMode::AttnWsf => self.feature_dim * self.experts.len(),
            FusionMode::NmdWsf => self.nmd_dim * self.experts.len(),
        }
    }

    pub fn cross_params(&self, src: usize, dst: usize) -> (ParamId, ParamId) {
        self.cross[src][dst]
    }

    fn expect_row(&self, row: &FusionExample) -> Result<()> {
        let hk = self.feature_dim * self.experts.len();
        let gp = self.nmd_dim * self.experts.len();
        if row.h.len() != hk {
            return Err(Error::MissingInput(format!(
                "fusion row carries {} feature values, expected {hk} ({} experts)",
                row.h.len(),
                self.experts.len()
            )));
        }
        if row.g.len() != gp {
            return Err(Error::MissingInput(format!(
                "fusion row carries {} nmd values, expected {gp} ({} experts)",
                row.g.len(),
                self.experts.len()
            )));
        }
        Ok(())
    }

    /// Tensor of each expert's feature vectors for a batch of rows.
    fn h_tensors(&self, rows: &[&FusionExample]) -> Vec<Tensor> {
        let k = self.feature_dim;
        (0..self.experts.len())
            .map(|e| {
                let mut data = Vec::with_capacity(rows.len() * k);
                for row in rows {
                    data.extend_from_slice(&row.h[e * k..(e + 1) * k]);
                }
                Tensor::new(vec![rows.len(), k], data)
            })
            .collect()
    }

    fn attention_input_tensor(&self, rows: &[&FusionExample]) -> Option<Tensor> {
        match self.mode {
            FusionMode::Sf => None,
            FusionMode::AttnWsf => {
                let width = self.feature_dim * self.experts.len();
                let mut data = Vec::with_capacity(rows.len() * width);
                for row in rows {
                    data.extend_from_slice(&row.h);
                }
                Some(Tensor::new(vec![rows.len(), width], data))
            }
            FusionMode::NmdWsf => {
                let width = self.nmd_dim * self.experts.len();
                let mut data = Vec::with_capacity(rows.len() * width);
                for row in rows {
                    data.extend_from_slice(&row.g);
                }
                Some(Tensor::new(vec![rows.len(), width], data))
            }
        }
    }

    /// Push the attention network onto the tape: two ReLU layers and a
    /// softmax output.
    fn attention_graph(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let attn = self
            .attn
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("SF mode has no attention network".into()))?;
        let w1 = tape.param(&self.params, attn.w1);
        let b1 = tape.param(&self.params, attn.b1);
        let mut x = tape.matmul("attn.l1", input, w1)?;
        x = tape.add_row("attn.l1", x, b1)?;
        x = tape.relu(x);
        let w2 = tape.param(&self.params, attn.w2);
        let b2 = tape.param(&self.params, attn.b2);
        x = tape.matmul("attn.l2", x, w2)?;
        x = tape.add_row("attn.l2", x, b2)?;
        x = tape.relu(x);
        let w3 = tape.param(&self.params, attn.w3);
        let b3 = tape.param(&self.params, attn.b3);
        x = tape.matmul("attn.l3", x, w3)?;
        x = tape.add_row("attn.l3", x, b3)?;
        tape.softmax("attn.softmax", x)
    }

    /// Push the full fusion graph for a batch; returns
    /// `(pooled logits node, attention node)`.
    fn fusion_graph(
        &self,
        tape: &mut Tape,
        h_nodes: &[NodeId],
        a_node: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut branch_nodes = Vec::with_capacity(self.experts.len());
        for dst in 0..self.experts.len() {
            let mut acc: Option<NodeId> = None;
            for src in 0..self.experts.len() {
                let (w, b) = self.cross[src][dst];
                let wn = tape.param(&self.params, w);
                let bn = tape.param(&self.params, b);
                let label = format!(
                    "cross.{}.{}",
                    self.experts[src].id, self.experts[dst].id
                );
                let mm = tape.matmul(&label, h_nodes[src], wn)?;
                let affine = tape.add_row(&label, mm, bn)?;
                let scaled = tape.col_scale(&label, affine, a_node, src)?;
                acc = Some(match acc {
                    None => scaled,
                    Some(prev) => tape.add("branch sum", prev, scaled)?,
                });
            }
            branch_nodes.push(acc.expect("at least one expert"));
        }
        let z_a = tape.concat_cols("branch concat", &branch_nodes)?;
        let pooled = tape.group_max("knowledge pooler", z_a, &self.pooling.groups)?;
        Ok((pooled, a_node))
    }

    /// Per-branch logits for a single example, with explicit weights `a`
    /// (`None` means the unweighted all-ones of plain score fusion).
    pub fn branch_logits(&self, row: &FusionExample, a: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
        self.expect_row(row)?;
        let weights = match a {
            Some(w) => {
                if w.len() != self.experts.len() {
                    return Err(Error::ShapeMismatch {
                        layer: "branch weights".into(),
                        expected: format!("[{}]", self.experts.len()),
                        actual: format!("[{}]", w.len()),
                    });
                }
                w.to_vec()
            }
            None => vec![1.0; self.experts.len()],
        };
        let mut tape = Tape::new();
        let rows = [row];
        let h_tensors = self.h_tensors(&rows);
        let h_nodes: Vec<NodeId> = h_tensors.into_iter().map(|t| tape.input(t)).collect();
        let a_node = tape.input(Tensor::new(vec![1, weights.len()], weights));
        let mut out = Vec::with_capacity(self.experts.len());
        for dst in 0..self.experts.len() {
            let mut acc: Option<NodeId> = None;
            for src in 0..self.experts.len() {
                let (w, b) = self.cross[src][dst];
                let wn = tape.param(&self.params, w);
                let bn = tape.param(&self.params, b);
                let mm = tape.matmul("branch", h_nodes[src], wn)?;
                let affine = tape.add_row("branch", mm, bn)?;
                let scaled = tape.col_scale("branch", affine, a_node, src)?;
                acc = Some(match acc {
                    None => scaled,
                    Some(prev) => tape.add("branch", prev, scaled)?,
                });
            }
            out.push(tape.value(acc.unwrap()).data.clone());
        }
        Ok(out)
    }

    /// Attention scores for one row's concatenated input vector.
    pub fn attention_scores(&self, input: &[f64]) -> Result<Vec<f64>> {
        let want = self.attention_input_dim();
        if self.mode == FusionMode::Sf {
            return Err(Error::InvalidConfig(
                "attention scores are undefined in SF mode".into(),
            ));
        }
        if input.len() != want {
            return Err(Error::ShapeMismatch {
                layer: "attention input".into(),
                expected: format!("[{want}]"),
                actual: format!("[{}]", input.len()),
            });
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, want], input.to_vec()));
        let a = self.attention_graph(&mut tape, x)?;
        Ok(tape.value(a).data.clone())
    }

    fn attention_node_for(
        &self,
        tape: &mut Tape,
        rows: &[&FusionExample],
        source: AttentionSource,
    ) -> Result<NodeId> {
        let n = self.experts.len();
        match (source, self.mode) {
            (AttentionSource::ForcedUniform, _) => Ok(tape.input(Tensor::new(
                vec![rows.len(), n],
                vec![1.0 / n as f64; rows.len() * n],
            ))),
            (AttentionSource::ForcedOnes, _) | (AttentionSource::Model, FusionMode::Sf) => Ok(tape
                .input(Tensor::new(
                    vec![rows.len(), n],
                    vec![1.0; rows.len() * n],
                ))),
            (AttentionSource::Model, _) => {
                let input = self
                    .attention_input_tensor(rows)
                    .expect("wSF mode has attention input");
                let node = tape.input(input);
                self.attention_graph(tape, node)
            }
        }
    }

    /// Predictions for a batch of rows.
    pub fn predict(&self, rows: &[&FusionExample], source: AttentionSource) -> Result<Vec<Prediction>> {
        if !self.trained {
            return Err(Error::NotTrained(format!(
                "{} fusion model has not been trained",
                self.mode.name()
            )));
        }
        self.predict_untrained(rows, source)
    }

    /// Same as `predict` without the trained-model guard; used internally
    /// during training and by construction-time tests.
    pub fn predict_untrained(
        &self,
        rows: &[&FusionExample],
        source: AttentionSource,
    ) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(256) {
            for row in chunk {
                self.expect_row(row)?;
            }
            let mut tape = Tape::new();
            let h_nodes: Vec<NodeId> = self
                .h_tensors(chunk)
                .into_iter()
                .map(|t| tape.input(t))
                .collect();
            let a_node = self.attention_node_for(&mut tape, chunk, source)?;
            let (pooled, a) = self.fusion_graph(&mut tape, &h_nodes, a_node)?;
            let pooled_v = tape.value(pooled);
            let a_v = tape.value(a);
            let (gn, an) = (pooled_v.shape[1], a_v.shape[1]);
            for r in 0..chunk.len() {
                let logits = pooled_v.data[r * gn..(r + 1) * gn].to_vec();
                let class = self.pooling.classes[argmax_slice(&logits)];
                out.push(Prediction {
                    class,
                    pooled: logits,
                    attention: a_v.data[r * an..(r + 1) * an].to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Train the off-diagonal cross weights (and the attention network for
    /// wSF modes) with cross-entropy over the pooled logits. Diagonal blocks
    /// are frozen. Keeps the best-validation-accuracy checkpoint.
    pub fn train(
        &mut self,
        train_rows: &[FusionExample],
        val_rows: &[FusionExample],
        cfg: &TrainConfig,
    ) -> Result<TrainLog> {
        if train_rows.is_empty() || val_rows.is_empty() {
            return Err(Error::InvalidData("empty fusion train or val rows".into()));
        }
        for row in train_rows.iter().chain(val_rows) {
            self.expect_row(row)?;
            if self.pooling.class_index(row.label).is_none() {
                return Err(Error::LabelOutOfRange {
                    label: row.label,
                    classes: self.pooling.classes.len(),
                });
            }
        }
        let start = std::time::Instant::now();
        let mut adam = AdamState::new(&self.params);
        let mut order: Vec<usize> = (0..train_rows.len()).collect();
        let mut shuffle_rng = rng::stream(cfg.seed, "fusion/shuffle");
        let mut log = TrainLog {
            epoch_loss: Vec::with_capacity(cfg.epochs),
            val_acc: Vec::with_capacity(cfg.epochs),
            best_epoch: 0,
            best_val_acc: f64::NEG_INFINITY,
            seconds: 0.0,
        };
        let mut best: Option<Vec<Tensor>> = None;
        let val_refs: Vec<&FusionExample> = val_rows.iter().collect();

        for epoch in 0..cfg.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let rows: Vec<&FusionExample> = chunk.iter().map(|&i| &train_rows[i]).collect();
                let labels: Vec<usize> = rows
                    .iter()
                    .map(|r| self.pooling.class_index(r.label).expect("validated"))
                    .collect();
                let mut tape = Tape::new();
                let h_nodes: Vec<NodeId> = self
                    .h_tensors(&rows)
                    .into_iter()
                    .map(|t| tape.input(t))
                    .collect();
                let a_node = self.attention_node_for(&mut tape, &rows, AttentionSource::Model)?;
                let (pooled, _) = self.fusion_graph(&mut tape, &h_nodes, a_node)?;
                let loss = tape.cross_entropy(pooled, &labels)?;
                let loss_value = tape.value(loss).data[0];
                if !loss_value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "fusion loss became non-finite at epoch {epoch}"
                    )));
                }
                self.params.zero_grads();
                tape.backward(loss, &mut self.params)?;
                adam.apply(&mut self.params, cfg.lr)?;
                epoch_loss += loss_value;
                batches += 1;
            }
            log.epoch_loss.push(epoch_loss / batches as f64);

            let preds = self.predict_untrained(&val_refs, AttentionSource::Model)?;
            let correct = preds
                .iter()
                .zip(val_rows)
                .filter(|(p, r)| p.class == r.label)
                .count();
            let acc = correct as f64 / val_rows.len() as f64;
            log.val_acc.push(acc);
            if acc > log.best_val_acc {
                log.best_val_acc = acc;
                log.best_epoch = epoch;
                best = Some(self.params.snapshot());
            }
        }
        if let Some(snapshot) = best {
            self.params.restore(&snapshot);
        }
        log.seconds = start.elapsed().as_secs_f64();
        self.trained = true;
        self.log = Some(log.clone());
        Ok(log)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        weights::save_params(&dir.join(format!("{stem}.efw")), &self.params)?;
        let sidecar = FusionSidecar {
            mode: self.mode,
            experts: self.experts.clone(),
            feature_dim: self.feature_dim,
            nmd_dim: self.nmd_dim,
            pooling: self.pooling.clone(),
            trained: self.trained,
            log: self.log.clone(),
        };
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let sidecar: FusionSidecar =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let heads: Vec<(Tensor, Tensor)> = sidecar
            .experts
            .iter()
            .map(|e| {
                (
                    Tensor::zeros(vec![sidecar.feature_dim, e.label_set.len()]),
                    Tensor::zeros(vec![e.label_set.len()]),
                )
            })
            .collect();
        let mut model = Self::from_heads(
            sidecar.mode,
            sidecar.experts,
            &heads,
            sidecar.feature_dim,
            sidecar.nmd_dim,
            0,
        )?;
        if model.pooling != sidecar.pooling {
            return Err(Error::Format(
                "stored pooling map does not match the expert roster".into(),
            ));
        }
        let stored = weights::load_params(&dir.join(format!("{stem}.efw")))?;
        weights::apply_stored(&mut model.params, &stored)?;
        model.trained = sidecar.trained;
        model.log = sidecar.log;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct FusionSidecar {
    mode: FusionMode,
    experts: Vec<ExpertMeta>,
    feature_dim: usize,
    nmd_dim: usize,
    pooling: PoolingMap,
    trained: bool,
    log: Option<TrainLog>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn meta(id: &str, labels: &[usize]) -> ExpertMeta {
        ExpertMeta {
            id: id.into(),
            label_set: labels.to_vec(),
        }
    }

    /// The worked 2-expert example used across several tests: k = 2,
    /// branch b covers classes {0,1}, branch n1 covers {1,2}.
    fn two_expert_model(mode: FusionMode) -> FusionModel {
        let metas = vec![meta("b", &[0, 1]), meta("n1", &[1, 2])];
        let heads = vec![
            (
                Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
                Tensor::new(vec![2], vec![0.0, 0.0]),
            ),
            (
                Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]),
                Tensor::new(vec![2], vec![1.0, 1.0]),
            ),
        ];
        let mut model = FusionModel::from_heads(mode, metas, &heads, 2, 3, 5).unwrap();
        // Hand-set off-diagonal blocks.
        let (w, b) = model.cross_params(1, 0); // n1 -> branch b
        *model.params.value_mut(w) = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]);
        *model.params.value_mut(b) = Tensor::new(vec![2], vec![0.5, -0.5]);
        let (w, b) = model.cross_params(0, 1); // b -> branch n1
        *model.params.value_mut(w) = Tensor::new(vec![2, 2], vec![2.0, 0.0, 1.0, 1.0]);
        *model.params.value_mut(b) = Tensor::new(vec![2], vec![0.0, 1.0]);
        model
    }

    fn row(h: Vec<f64>, g_len: usize, label: usize) -> FusionExample {
        FusionExample {
            h,
            g: vec![0.0; g_len],
            label,
        }
    }

    #[test]
    fn single_expert_reduces_to_own_head() {
        let metas = vec![meta("b", &[3, 7, 9])];
        let heads = vec![(
            Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]),
            Tensor::new(vec![3], vec![0.1, 0.2, 0.3]),
        )];
        let model = FusionModel::from_heads(FusionMode::Sf, metas, &heads, 2, 3, 1).unwrap();
        let r = row(vec![2.0, -1.0], 3, 3);
        let z = model.branch_logits(&r, Some(&[1.0])).unwrap();
        // h W + b by hand: [2*0.5-1*1.5+0.1, 2*-1-0.25+0.2, 2*2+0.75+0.3]
        let expect = [-0.4, -2.05, 5.05];
        for (a, b) in z[0].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{z:?}");
        }
        let preds = model.predict_untrained(&[&r], AttentionSource::Model).unwrap();
        assert_eq!(preds[0].class, 9);
        assert_eq!(preds[0].attention, vec![1.0]);
    }

    #[test]
    fn one_hot_weights_silence_other_experts() {
        let model = two_expert_model(FusionMode::Sf);
        let r = row(vec![1.0, 2.0, 3.0, 1.0], 6, 0);
        // One-hot on expert n1 (index 1).
        let z = model.branch_logits(&r, Some(&[0.0, 1.0])).unwrap();
        // Branch b sees only h_n1 W_{n1->b} + b = [3.5, 3.5].
        assert_eq!(z[0], vec![3.5, 3.5]);
        // Branch n1 sees only its own head: [7, 11].
        assert_eq!(z[1], vec![7.0, 11.0]);
    }

    #[test]
    fn hand_worked_two_expert_fusion() {
        let model = two_expert_model(FusionMode::Sf);
        let r = row(vec![1.0, 2.0, 3.0, 1.0], 6, 0);
        let z = model.branch_logits(&r, Some(&[0.25, 0.75])).unwrap();
        let expect_b = [2.875, 3.125];
        let expect_n1 = [6.25, 9.0];
        for (a, b) in z[0].iter().zip(&expect_b) {
            assert!((a - b).abs() < 1e-12, "branch b {z:?}");
        }
        for (a, b) in z[1].iter().zip(&expect_n1) {
            assert!((a - b).abs() < 1e-12, "branch n1 {z:?}");
        }
        // Pool: class 0 <- 2.875, class 1 <- max(3.125, 6.25), class 2 <- 9.
        let pooled = model
            .pooling
            .pool(&[z[0][0], z[0][1], z[1][0], z[1][1]])
            .unwrap();
        assert_eq!(pooled, vec![2.875, 6.25, 9.0]);
    }

    #[test]
    fn five_hand_built_examples_end_to_end() {
        let mut model = two_expert_model(FusionMode::Sf);
        model.trained = true;
        let rows: Vec<FusionExample> = vec![
            row(vec![1.0, 2.0, 3.0, 1.0], 6, 0),
            row(vec![0.0, 0.0, 0.0, 0.0], 6, 0),
            row(vec![-1.0, 1.0, 0.5, -0.5], 6, 0),
            row(vec![2.0, 2.0, 2.0, 2.0], 6, 0),
            row(vec![1.0, 0.0, 0.0, 1.0], 6, 0),
        ];
        let refs: Vec<&FusionExample> = rows.iter().collect();
        let preds = model.predict(&refs, AttentionSource::Model).unwrap();
        // Independent re-computation with plain loops (A = ones in SF mode).
        let w: [[f64; 4]; 4] = [
            [1.0, 0.0, 0.0, 1.0], // W_bb col-major pairs: [2x2] row-major
            [1.0, 1.0, 0.0, 1.0], // W_n1->b
            [2.0, 0.0, 1.0, 1.0], // W_b->n1
            [1.0, 2.0, 3.0, 4.0], // W_n1n1
        ];
        let biases: [[f64; 2]; 4] = [[0.0, 0.0], [0.5, -0.5], [0.0, 1.0], [1.0, 1.0]];
        for (r, pred) in rows.iter().zip(&preds) {
            let (hb, hn) = (&r.h[0..2], &r.h[2..4]);
            let apply = |w: &[f64; 4], b: &[f64; 2], h: &[f64]| {
                [
                    h[0] * w[0] + h[1] * w[2] + b[0],
                    h[0] * w[1] + h[1] * w[3] + b[1],
                ]
            };
            let zb = apply(&w[0], &biases[0], hb);
            let znb = apply(&w[1], &biases[1], hn);
            let zbn = apply(&w[2], &biases[2], hb);
            let znn = apply(&w[3], &biases[3], hn);
            let z_a = [
                zb[0] + znb[0],
                zb[1] + znb[1],
                zbn[0] + znn[0],
                zbn[1] + znn[1],
            ];
            let pooled = [z_a[0], z_a[1].max(z_a[2]), z_a[3]];
            for (a, b) in pred.pooled.iter().zip(&pooled) {
                assert!((a - b).abs() < 1e-12);
            }
            // Ties break to the lowest class index.
            let mut best = 0;
            for i in 1..3 {
                if pooled[i] > pooled[best] {
                    best = i;
                }
            }
            assert_eq!(pred.class, best);
        }
    }

    #[test]
    fn pooler_handles_overlap_and_passthrough() {
        let map = PoolingMap::new(&[meta("a", &[0, 1]), meta("b", &[1, 2])]).unwrap();
        assert_eq!(map.classes, vec![0, 1, 2]);
        let pooled = map.pool(&[0.2, 0.2, 0.9, -1.0]).unwrap();
        assert_eq!(pooled[1], 0.9);

        // Value triple (0.2, 0.9, -1.0) for one class across three branches.
        let tri = PoolingMap::new(&[meta("a", &[5]), meta("b", &[5]), meta("c", &[5])]).unwrap();
        assert_eq!(tri.pool(&[0.2, 0.9, -1.0]).unwrap(), vec![0.9]);

        // Disjoint label sets: pooling is a permutation gather.
        let disjoint = PoolingMap::new(&[meta("a", &[2, 0]), meta("b", &[1])]).unwrap();
        let out = disjoint.pool(&[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(out, vec![20.0, 30.0, 10.0]);
        assert!(disjoint.pool(&[1.0]).is_err());
    }

    #[test]
    fn pooler_matches_brute_force_on_random_instances() {
        let mut rng = rng::stream(7, "pool-oracle");
        let metas = vec![
            meta("a", &[0, 3, 5]),
            meta("b", &[1, 3, 6, 5]),
            meta("c", &[5, 2, 4]),
        ];
        let map = PoolingMap::new(&metas).unwrap();
        // Flatten (branch, class) pairs in concatenation order.
        let layout: Vec<usize> = metas.iter().flat_map(|m| m.label_set.clone()).collect();
        for _ in 0..1000 {
            let z: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let pooled = map.pool(&z).unwrap();
            for (ci, &class) in map.classes.iter().enumerate() {
                let brute = layout
                    .iter()
                    .zip(&z)
                    .filter(|(c, _)| **c == class)
                    .map(|(_, v)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(pooled[ci], brute);
            }
        }
    }

    #[test]
    fn zeroed_final_layer_gives_uniform_attention() {
        let mut model = two_expert_model(FusionMode::AttnWsf);
        let attn_w3 = model.params.find("attn.l3.weight").unwrap();
        for v in &mut model.params.value_mut(attn_w3).data {
            *v = 0.0;
        }
        let a = model.attention_scores(&[0.3, -0.5, 2.0, 0.0]).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
    }

    #[test]
    fn attention_is_a_probability_vector() {
        let model = two_expert_model(FusionMode::NmdWsf);
        let mut rng = rng::stream(3, "attn-prob");
        for _ in 0..50 {
            let input: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
            let a = model.attention_scores(&input).unwrap();
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(a.iter().all(|&v| v >= 0.0));
        }
        // Wrong dim and wrong mode error out.
        assert!(model.attention_scores(&[1.0]).is_err());
        let sf = two_expert_model(FusionMode::Sf);
        assert!(sf.attention_scores(&[0.0; 4]).is_err());
    }

    #[test]
    fn forced_uniform_matches_sf_argmax() {
        let mut model = two_expert_model(FusionMode::AttnWsf);
        model.trained = true;
        let mut rng = rng::stream(11, "uniform-vs-sf");
        let rows: Vec<FusionExample> = (0..200)
            .map(|_| row((0..4).map(|_| rng.random_range(-2.0..2.0)).collect(), 6, 0))
            .collect();
        let refs: Vec<&FusionExample> = rows.iter().collect();
        let uniform = model.predict(&refs, AttentionSource::ForcedUniform).unwrap();
        let ones = model.predict(&refs, AttentionSource::ForcedOnes).unwrap();
        for (u, o) in uniform.iter().zip(&ones) {
            assert_eq!(u.class, o.class);
            // Pooled logits shrink by exactly 1/|d|.
            for (a, b) in u.pooled.iter().zip(&o.pooled) {
                assert!((a * 2.0 - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn argmax_invariant_to_constant_shift_of_concatenated_logits() {
        let map = PoolingMap::new(&[meta("a", &[0, 1]), meta("b", &[1, 2])]).unwrap();
        let mut rng = rng::stream(13, "shift");
        for _ in 0..100 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c: f64 = rng.random_range(-10.0..10.0);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let a = map.pool(&z).unwrap();
            let b = map.pool(&shifted).unwrap();
            assert_eq!(argmax_slice(&a), argmax_slice(&b));
        }
    }

    #[test]
    fn training_gradient_matches_finite_differences() {
        let mut model = two_expert_model(FusionMode::Sf);
        let rows = vec![
            row(vec![1.0, 2.0, 3.0, 1.0], 6, 0),
            row(vec![0.5, -1.0, 0.0, 2.0], 6, 2),
        ];
        let refs: Vec<&FusionExample> = rows.iter().collect();
        let labels: Vec<usize> = rows
            .iter()
            .map(|r| model.pooling.class_index(r.label).unwrap())
            .collect();

        let loss_of = |model: &FusionModel| -> f64 {
            let mut tape = Tape::new();
            let h_nodes: Vec<NodeId> = model
                .h_tensors(&refs)
                .into_iter()
                .map(|t| tape.input(t))
                .collect();
            let a_node = model
                .attention_node_for(&mut tape, &refs, AttentionSource::Model)
                .unwrap();
            let (pooled, _) = model.fusion_graph(&mut tape, &h_nodes, a_node).unwrap();
            let loss = tape.cross_entropy(pooled, &labels).unwrap();
            tape.value(loss).data[0]
        };

        // Analytic gradients.
        {
            let mut tape = Tape::new();
            let h_nodes: Vec<NodeId> = model
                .h_tensors(&refs)
                .into_iter()
                .map(|t| tape.input(t))
                .collect();
            let a_node = model
                .attention_node_for(&mut tape, &refs, AttentionSource::Model)
                .unwrap();
            let (pooled, _) = model.fusion_graph(&mut tape, &h_nodes, a_node).unwrap();
            let loss = tape.cross_entropy(pooled, &labels).unwrap();
            model.params.zero_grads();
            tape.backward(loss, &mut model.params).unwrap();
        }

        let (w, _) = model.cross_params(1, 0);
        let eps = 1e-6;
        for i in 0..model.params.value(w).numel() {
            let orig = model.params.value(w).data[i];
            model.params.value_mut(w).data[i] = orig + eps;
            let up = loss_of(&model);
            model.params.value_mut(w).data[i] = orig - eps;
            let down = loss_of(&model);
            model.params.value_mut(w).data[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let analytic = model.params.grad(w).data[i];
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() / denom < 1e-4,
                "entry {i}: fd {fd} vs {analytic}"
            );
        }
    }

    #[test]
    fn diagonal_blocks_stay_frozen_through_training() {
        let mut model = two_expert_model(FusionMode::AttnWsf);
        let diag_before: Vec<Vec<u64>> = (0..2)
            .map(|d| {
                let (w, _) = model.cross_params(d, d);
                model.params.value(w).data.iter().map(|v| v.to_bits()).collect()
            })
            .collect();
        let mut rng = rng::stream(21, "fusion-train");
        let make_rows = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<FusionExample> {
            (0..n)
                .map(|i| FusionExample {
                    h: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    g: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    label: i % 3,
                })
                .collect()
        };
        let train_rows = make_rows(&mut rng, 48);
        let val_rows = make_rows(&mut rng, 12);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 1e-3,
            seed: 2,
        };
        model.train(&train_rows, &val_rows, &cfg).unwrap();
        for d in 0..2 {
            let (w, _) = model.cross_params(d, d);
            let after: Vec<u64> = model.params.value(w).data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(diag_before[d], after, "diagonal {d} drifted");
        }
        assert!(model.trained);
    }

    #[test]
    fn untrained_predict_errors_and_row_validation_fires() {
        let model = two_expert_model(FusionMode::Sf);
        let r = row(vec![1.0; 4], 6, 0);
        assert!(matches!(
            model.predict(&[&r], AttentionSource::Model),
            Err(Error::NotTrained(_))
        ));
        let bad = row(vec![1.0; 3], 6, 0);
        assert!(model.branch_logits(&bad, None).is_err());
    }

    #[test]
    fn fusion_round_trips_through_disk() {
        let mut model = two_expert_model(FusionMode::NmdWsf);
        model.trained = true;
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), "fusion_nmd").unwrap();
        let loaded = FusionModel::load(dir.path(), "fusion_nmd").unwrap();
        assert_eq!(loaded.mode, FusionMode::NmdWsf);
        assert!(loaded.trained);
        for (a, b) in loaded.params.iter().zip(model.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            let bits_a: Vec<u64> = a.value.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    use crate::rng;
}
