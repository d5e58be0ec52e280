//! Site vaults and the cross-site transfer protocol.
//!
//! A [`SiteVault`] owns one site's images; pixel data is private to the
//! vault and every public operation returns only model blobs, feature
//! bundles, or label-level evaluation records. Cross-site traffic is
//! restricted to two payload kinds by construction: serialized models and
//! [`FeatureBundle`]s. There is no image payload kind, so an audit of the
//! transfer log can never contain one.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentParams, SiteDataset, SiteRole, Split};
use crate::error::{Error, Result};
use crate::expert::{train_base, finetune_expert, Expert};
use crate::fusion::FusionExample;
use crate::metrics::{ImagePredictor, PredictionRecord};
use crate::nn::TrainConfig;
use crate::rng;
use crate::tensor::Tensor;

/// The only payload kinds that may cross a site boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadKind {
    Model,
    Bundle,
}

impl PayloadKind {
    pub fn name(&self) -> &'static str {
        match self {
            PayloadKind::Model => "model",
            PayloadKind::Bundle => "bundle",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferRecord {
    pub step: u32,
    /// `to:<site>`, `from:<site>`, or `local:<site>` for the base site's
    /// own export (no boundary crossed).
    pub direction: String,
    pub kind: PayloadKind,
    pub bytes: u64,
    pub seconds: f64,
}

/// Append-only audit log of every payload movement.
#[derive(Debug, Clone, Default)]
pub struct TransferLog {
    records: Vec<TransferRecord>,
}

impl TransferLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TransferRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[TransferRecord] {
        &self.records
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,direction,kind,bytes,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                r.step,
                r.direction,
                r.kind.name(),
                r.bytes,
                r.seconds
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<TransferLog> {
        let mut log = TransferLog::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::Format(format!("bad transfer row: {line}")));
            }
            let kind = match parts[2] {
                "model" => PayloadKind::Model,
                "bundle" => PayloadKind::Bundle,
                other => {
                    return Err(Error::Format(format!(
                        "forbidden payload kind in transfer log: {other}"
                    )))
                }
            };
            log.push(TransferRecord {
                step: parts[0].parse().map_err(|_| Error::Format(line.into()))?,
                direction: parts[1].to_string(),
                kind,
                bytes: parts[3].parse().map_err(|_| Error::Format(line.into()))?,
                seconds: parts[4].parse().map_err(|_| Error::Format(line.into()))?,
            });
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BundleSplit {
    Train,
    Val,
}

/// The per-augmentation vectors of one example: features and discrepancy
/// vectors from every expert in the roster, labels, and bookkeeping. No
/// pixel data.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleRow {
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub label: u32,
    pub patient: u32,
    pub aug_index: u8,
    pub split: BundleSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub site_id: String,
    /// Expert ids in vector-block order.
    pub roster: Vec<String>,
    pub feature_dim: usize,
    pub nmd_dim: usize,
    pub n_aug: usize,
    pub rows: Vec<BundleRow>,
}

const BUNDLE_MAGIC: &[u8; 4] = b"EFB1";

impl FeatureBundle {
    /// Fusion rows of one split, in file order.
    pub fn fusion_rows(&self, split: BundleSplit) -> Vec<FusionExample> {
        self.rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| FusionExample {
                h: r.h.clone(),
                g: r.g.clone(),
                label: r.label as usize,
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        let id = self.site_id.as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(self.roster.len() as u32).to_le_bytes());
        for e in &self.roster {
            let b = e.as_bytes();
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.nmd_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_aug as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        // Fixed-stride little-endian f64 records.
        for row in &self.rows {
            out.extend_from_slice(&(row.label as f64).to_le_bytes());
            out.extend_from_slice(&(row.patient as f64).to_le_bytes());
            out.extend_from_slice(&(row.aug_index as f64).to_le_bytes());
            let split = match row.split {
                BundleSplit::Train => 0.0f64,
                BundleSplit::Val => 1.0,
            };
            out.extend_from_slice(&split.to_le_bytes());
            for v in row.h.iter().chain(&row.g) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FeatureBundle> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return Err(Error::Format("bad bundle magic".into()));
        }
        let site_id = read_string(&mut r)?;
        let n_roster = read_u32(&mut r)? as usize;
        let mut roster = Vec::with_capacity(n_roster);
        for _ in 0..n_roster {
            roster.push(read_string(&mut r)?);
        }
        let feature_dim = read_u32(&mut r)? as usize;
        let nmd_dim = read_u32(&mut r)? as usize;
        let n_aug = read_u32(&mut r)? as usize;
        let n_rows = read_u32(&mut r)? as usize;
        let stride = 4 + n_roster * (feature_dim + nmd_dim);
        let mut rows = Vec::with_capacity(n_rows);
        let mut buf = [0u8; 8];
        for _ in 0..n_rows {
            let mut record = Vec::with_capacity(stride);
            for _ in 0..stride {
                r.read_exact(&mut buf)?;
                record.push(f64::from_le_bytes(buf));
            }
            let split = match record[3] {
                v if v == 0.0 => BundleSplit::Train,
                v if v == 1.0 => BundleSplit::Val,
                other => return Err(Error::Format(format!("bad split tag {other}"))),
            };
            let hk = n_roster * feature_dim;
            rows.push(BundleRow {
                label: record[0] as u32,
                patient: record[1] as u32,
                aug_index: record[2] as u8,
                split,
                h: record[4..4 + hk].to_vec(),
                g: record[4 + hk..].to_vec(),
            });
        }
        Ok(FeatureBundle {
            site_id,
            roster,
            feature_dim,
            nmd_dim,
            n_aug,
            rows,
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<FeatureBundle> {
        let mut bytes = Vec::new();
        BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

/// Which examples an evaluation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalScope {
    Split(Split),
    /// Every example of the site; used for external held-out sites.
    All,
}

/// Owns one site's dataset. Pixels never leave: public methods return model
/// blobs, bundles, counts, or label-level records.
pub struct SiteVault {
    dataset: SiteDataset,
}

impl SiteVault {
    pub fn new(dataset: SiteDataset) -> Self {
        Self { dataset }
    }

    pub fn site_id(&self) -> &str {
        &self.dataset.site_id
    }

    pub fn role(&self) -> SiteRole {
        self.dataset.role
    }

    pub fn labels(&self) -> &[usize] {
        &self.dataset.labels
    }

    pub fn n_examples(&self, scope: EvalScope) -> usize {
        match scope {
            EvalScope::Split(s) => self.dataset.split_indices(s).len(),
            EvalScope::All => self.dataset.examples.len(),
        }
    }

    /// Raw pixel bytes of one split, for transfer-size accounting only.
    pub fn image_bytes(&self, split: Split) -> u64 {
        self.dataset
            .split_examples(split)
            .iter()
            .map(|e| (e.image.numel() * 8) as u64)
            .sum()
    }

    /// Train the base expert inside the vault and hand back its blob.
    pub fn train_base_expert(&self, cfg: &TrainConfig) -> Result<Vec<u8>> {
        if self.dataset.role != SiteRole::Base {
            return Err(Error::InvalidConfig(format!(
                "site {} is not the base site",
                self.site_id()
            )));
        }
        let mut expert = train_base(&self.dataset, cfg)?;
        self.install_reference_mean(&mut expert)?;
        expert.to_blob()
    }

    /// Clone the delivered model, fine-tune it on this site, and return the
    /// fine-tuned expert's blob. Only weights leave the vault.
    pub fn remote_finetune(
        &self,
        expert_id: &str,
        base_blob: &[u8],
        cfg: &TrainConfig,
    ) -> Result<Vec<u8>> {
        let base = Expert::from_blob(base_blob)?;
        let mut expert = finetune_expert(&base, expert_id, &self.dataset, cfg)?;
        self.install_reference_mean(&mut expert)?;
        expert.to_blob()
    }

    fn install_reference_mean(&self, expert: &mut Expert) -> Result<()> {
        let train = self.dataset.labeled(Split::Train);
        let images: Vec<&Tensor> = train.iter().map(|(img, _)| *img).collect();
        crate::nmd::set_reference_mean(expert, &images)
    }

    /// Five (by default) augmented forward passes per example through every
    /// delivered expert; returns the h/g vectors, never pixels.
    pub fn export_feature_bundle(
        &self,
        roster_blobs: &[Vec<u8>],
        n_aug: usize,
        seed: u64,
    ) -> Result<FeatureBundle> {
        if roster_blobs.is_empty() {
            return Err(Error::MissingInput(
                "bundle export requires at least one expert blob".into(),
            ));
        }
        if n_aug == 0 {
            return Err(Error::InvalidConfig("n_aug must be positive".into()));
        }
        let experts: Vec<Expert> = roster_blobs
            .iter()
            .map(|b| Expert::from_blob(b))
            .collect::<Result<_>>()?;
        for e in &experts {
            if e.reference_mean.is_none() {
                return Err(Error::MissingInput(format!(
                    "expert {} blob carries no reference mean",
                    e.id
                )));
            }
        }
        let (k, p) = (experts[0].feature_dim(), experts[0].nmd_dim());
        let params = AugmentParams::default();
        let mut rows = Vec::new();
        for (split, tag) in [(Split::Train, BundleSplit::Train), (Split::Val, BundleSplit::Val)] {
            let split_name = match tag {
                BundleSplit::Train => "train",
                BundleSplit::Val => "val",
            };
            let mut stream = rng::stream(
                seed,
                &format!("bundle/{}/{}", self.site_id(), split_name),
            );
            let examples = self.dataset.split_examples(split);
            let mut augmented: Vec<Tensor> = Vec::with_capacity(examples.len() * n_aug);
            let mut meta: Vec<(u32, u32, u8)> = Vec::with_capacity(examples.len() * n_aug);
            for e in &examples {
                for a in 0..n_aug {
                    augmented.push(augment(&e.image, &params, &mut stream));
                    meta.push((e.label as u32, e.patient, a as u8));
                }
            }
            let image_refs: Vec<&Tensor> = augmented.iter().collect();
            let mut h_blocks = Vec::with_capacity(experts.len());
            let mut g_blocks = Vec::with_capacity(experts.len());
            for expert in &experts {
                let (h, mut m) = expert.features_and_means(&image_refs)?;
                let reference = expert.reference_mean.as_ref().expect("checked above");
                for r in 0..image_refs.len() {
                    for j in 0..p {
                        m.data[r * p + j] -= reference[j];
                    }
                }
                h_blocks.push(h);
                g_blocks.push(m);
            }
            for (r, &(label, patient, aug_index)) in meta.iter().enumerate() {
                let mut h = Vec::with_capacity(k * experts.len());
                let mut g = Vec::with_capacity(p * experts.len());
                for (hb, gb) in h_blocks.iter().zip(&g_blocks) {
                    h.extend_from_slice(&hb.data[r * k..(r + 1) * k]);
                    g.extend_from_slice(&gb.data[r * p..(r + 1) * p]);
                }
                rows.push(BundleRow {
                    h,
                    g,
                    label,
                    patient,
                    aug_index,
                    split: tag,
                });
            }
        }
        Ok(FeatureBundle {
            site_id: self.site_id().to_string(),
            roster: experts.iter().map(|e| e.id.clone()).collect(),
            feature_dim: k,
            nmd_dim: p,
            n_aug,
            rows,
        })
    }

    /// Run a predictor over this site's examples; only labels and attention
    /// weights leave the vault.
    pub fn evaluate(
        &self,
        scope: EvalScope,
        predictor: &dyn ImagePredictor,
    ) -> Result<Vec<PredictionRecord>> {
        let labeled: Vec<(&Tensor, usize)> = match scope {
            EvalScope::Split(split) => self.dataset.labeled(split),
            EvalScope::All => self.dataset.all_labeled(),
        };
        crate::metrics::predict_labeled(predictor, &labeled)
    }
}
