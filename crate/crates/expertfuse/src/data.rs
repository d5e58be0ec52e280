//! Synthetic multi-site corpus generation.
//!
//! Each global class has a fixed low-frequency template (a seeded
//! superposition of 2-D cosines). A site draws samples as
//! `clip(gain * (translate(template) + patient_offset + noise) + bias)`,
//! so sites sharing a class still differ in acquisition statistics.
//! Splits are by patient: a per-patient intensity offset correlates the
//! frames of one patient, which is what makes a frame-level split leak.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Canonical ordered class list; global ids are dense indices into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalClassRegistry {
    classes: Vec<String>,
}

impl GlobalClassRegistry {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = classes.iter().collect();
        if unique.len() != classes.len() {
            return Err(Error::InvalidConfig("duplicate class names".into()));
        }
        if classes.is_empty() {
            return Err(Error::InvalidConfig("registry needs at least one class".into()));
        }
        Ok(Self { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.classes[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn names(&self) -> &[String] {
        &self.classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub gain: f64,
    pub bias: f64,
    pub noise_sigma: f64,
    pub max_translation: usize,
    pub patient_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteRole {
    Base,
    Incremental { step: u32 },
    External,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteSpec {
    pub id: String,
    /// Local label subset as global class ids, in site order.
    pub labels: Vec<usize>,
    pub patients: usize,
    pub samples_per_patient: usize,
    pub role: SiteRole,
    pub shift: ShiftParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub class_names: Vec<String>,
    pub sites: Vec<SiteSpec>,
    pub split_ratios: [f64; 3],
    /// Number of cosine components per class template.
    pub template_waves: usize,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::InvalidConfig("image dimensions must be positive".into()));
        }
        let g = self.class_names.len();
        GlobalClassRegistry::new(self.class_names.clone())?;
        let sum: f64 = self.split_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split_ratios.iter().any(|r| *r < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "split ratios {:?} must be non-negative and sum to 1",
                self.split_ratios
            )));
        }
        if self.template_waves == 0 {
            return Err(Error::InvalidConfig("template_waves must be positive".into()));
        }
        let mut ids = BTreeSet::new();
        let mut base_count = 0;
        let mut steps = BTreeSet::new();
        for site in &self.sites {
            if !ids.insert(site.id.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate site id {}", site.id)));
            }
            if site.labels.is_empty() || site.patients == 0 || site.samples_per_patient == 0 {
                return Err(Error::InvalidConfig(format!("site {} is empty", site.id)));
            }
            let unique: BTreeSet<usize> = site.labels.iter().copied().collect();
            if unique.len() != site.labels.len() {
                return Err(Error::InvalidConfig(format!(
                    "site {} repeats labels",
                    site.id
                )));
            }
            if site.labels.iter().any(|&l| l >= g) {
                return Err(Error::InvalidConfig(format!(
                    "site {} uses labels outside the registry of {} classes",
                    site.id, g
                )));
            }
            match site.role {
                SiteRole::Base => base_count += 1,
                SiteRole::Incremental { step } => {
                    if !steps.insert(step) {
                        return Err(Error::InvalidConfig(format!(
                            "duplicate incremental step {step}"
                        )));
                    }
                }
                SiteRole::External => {}
            }
        }
        if base_count != 1 {
            return Err(Error::InvalidConfig(format!(
                "exactly one base site required, found {base_count}"
            )));
        }
        let expect: BTreeSet<u32> = (1..=steps.len() as u32).collect();
        if steps != expect {
            return Err(Error::InvalidConfig(format!(
                "incremental steps must be 1..=t, found {steps:?}"
            )));
        }
        Ok(())
    }

    /// The stock desk-scale scenario: one base site, three incremental sites
    /// whose label sets are respectively a strict subset of the base set,
    /// a superset with novel classes, and fully disjoint, plus two external
    /// held-out sites covering every class.
    pub fn default_scenario() -> Self {
        let class_names: Vec<String> = [
            "A2C", "A3C", "A4C", "A5C", "PLAX", "PLAX-AV", "PSAX-AV", "PSAX-PM",
            "RV", "SC", "SC-IVC",
            "A2C-contrast", "A3C-contrast", "A4C-contrast", "PLAX-contrast",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        // Site shifts are deliberately larger than the augmentation jitter,
        // so a site's acquisition signature survives the five augmented
        // passes that produce the transferred vectors.
        let sites = vec![
            SiteSpec {
                id: "base".into(),
                labels: (0..8).collect(),
                patients: 50,
                samples_per_patient: 10,
                role: SiteRole::Base,
                shift: ShiftParams {
                    gain: 1.0,
                    bias: 0.0,
                    noise_sigma: 0.16,
                    max_translation: 2,
                    patient_sigma: 0.12,
                },
            },
            SiteSpec {
                id: "inc1".into(),
                labels: vec![0, 2],
                patients: 20,
                samples_per_patient: 8,
                role: SiteRole::Incremental { step: 1 },
                shift: ShiftParams {
                    gain: 1.45,
                    bias: 0.12,
                    noise_sigma: 0.05,
                    max_translation: 2,
                    patient_sigma: 0.12,
                },
            },
            SiteSpec {
                id: "inc2".into(),
                labels: (0..11).collect(),
                patients: 30,
                samples_per_patient: 10,
                role: SiteRole::Incremental { step: 2 },
                shift: ShiftParams {
                    gain: 0.6,
                    bias: -0.12,
                    noise_sigma: 0.1,
                    max_translation: 2,
                    patient_sigma: 0.12,
                },
            },
            SiteSpec {
                id: "inc3".into(),
                labels: (11..15).collect(),
                patients: 30,
                samples_per_patient: 10,
                role: SiteRole::Incremental { step: 3 },
                shift: ShiftParams {
                    gain: 1.3,
                    bias: -0.15,
                    noise_sigma: 0.08,
                    max_translation: 2,
                    patient_sigma: 0.12,
                },
            },
            SiteSpec {
                id: "ext1".into(),
                labels: (0..15).collect(),
                patients: 20,
                samples_per_patient: 8,
                role: SiteRole::External,
                shift: ShiftParams {
                    gain: 0.88,
                    bias: 0.05,
                    noise_sigma: 0.11,
                    max_translation: 2,
                    patient_sigma: 0.12,
                },
            },
            SiteSpec {
                id: "ext2".into(),
                labels: (0..15).collect(),
                patients: 20,
                samples_per_patient: 8,
                role: SiteRole::External,
                shift: ShiftParams {
                    gain: 1.22,
                    bias: -0.06,
                    noise_sigma: 0.1,
                    max_translation: 2,
                    patient_sigma: 0.12,
                },
            },
        ];
        Self {
            image_height: 16,
            image_width: 16,
            class_names,
            sites,
            split_ratios: [0.8, 0.1, 0.1],
            template_waves: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub image: Tensor,
    pub label: usize,
    pub patient: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct SiteDataset {
    pub site_id: String,
    pub role: SiteRole,
    pub labels: Vec<usize>,
    pub shift: ShiftParams,
    pub examples: Vec<Example>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl SiteDataset {
    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_idx,
            Split::Val => &self.val_idx,
            Split::Test => &self.test_idx,
        }
    }

    /// `(image, global label)` pairs of one split.
    pub fn labeled(&self, split: Split) -> Vec<(&Tensor, usize)> {
        self.split_indices(split)
            .iter()
            .map(|&i| (&self.examples[i].image, self.examples[i].label))
            .collect()
    }

    pub fn split_examples(&self, split: Split) -> Vec<&Example> {
        self.split_indices(split)
            .iter()
            .map(|&i| &self.examples[i])
            .collect()
    }

    /// Every example, regardless of split.
    pub fn all_labeled(&self) -> Vec<(&Tensor, usize)> {
        self.examples.iter().map(|e| (&e.image, e.label)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MultiSiteCorpus {
    pub registry: GlobalClassRegistry,
    pub config: ScenarioConfig,
    pub seed: u64,
    pub sites: Vec<SiteDataset>,
}

impl MultiSiteCorpus {
    pub fn site(&self, id: &str) -> Option<&SiteDataset> {
        self.sites.iter().find(|s| s.site_id == id)
    }

    pub fn base_site(&self) -> &SiteDataset {
        self.sites
            .iter()
            .find(|s| s.role == SiteRole::Base)
            .expect("validated config has a base site")
    }

    /// Base site first, then incremental sites ordered by step.
    pub fn internal_sites(&self) -> Vec<&SiteDataset> {
        let mut out = vec![self.base_site()];
        let mut incremental: Vec<&SiteDataset> = self
            .sites
            .iter()
            .filter(|s| matches!(s.role, SiteRole::Incremental { .. }))
            .collect();
        incremental.sort_by_key(|s| match s.role {
            SiteRole::Incremental { step } => step,
            _ => unreachable!(),
        });
        out.extend(incremental);
        out
    }

    pub fn incremental_site(&self, step: u32) -> Option<&SiteDataset> {
        self.sites
            .iter()
            .find(|s| s.role == SiteRole::Incremental { step })
    }

    pub fn external_sites(&self) -> Vec<&SiteDataset> {
        self.sites
            .iter()
            .filter(|s| s.role == SiteRole::External)
            .collect()
    }

    pub fn num_steps(&self) -> u32 {
        self.sites
            .iter()
            .filter_map(|s| match s.role {
                SiteRole::Incremental { step } => Some(step),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}

/// The fixed template of one global class.
pub fn class_template(seed: u64, class: usize, height: usize, width: usize, waves: usize) -> Tensor {
    let mut rng = rng::stream(seed, &format!("template/{class}"));
    let mut components = Vec::with_capacity(waves);
    for _ in 0..waves {
        let amplitude: f64 = rng.random_range(0.06..0.2);
        let fy: f64 = rng.random_range(0.4..1.8);
        let fx: f64 = rng.random_range(0.4..1.8);
        let phase: f64 = rng.random_range(0.0..TAU);
        components.push((amplitude, fy, fx, phase));
    }
    let mut data = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut v = 0.5;
            for (a, fy, fx, phase) in &components {
                v += a * (TAU * (fy * y as f64 / height as f64 + fx * x as f64 / width as f64) + phase).cos();
            }
            data[y * width + x] = v;
        }
    }
    Tensor::new(vec![1, height, width], data)
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Deterministic partition of examples by patient id.
///
/// Patients are shuffled, then cut at boundaries `round(cum_ratio * P)`;
/// an empty split with a non-zero ratio is an error.
pub fn split_by_patient(
    examples: &[Example],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::InvalidConfig(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut patients: Vec<u32> = Vec::new();
    for e in examples {
        if !patients.contains(&e.patient) {
            patients.push(e.patient);
        }
    }
    let nonzero = ratios.iter().filter(|r| **r > 0.0).count();
    if patients.len() < nonzero {
        return Err(Error::InvalidData(format!(
            "{} patients cannot fill {} non-empty splits",
            patients.len(),
            nonzero
        )));
    }
    use rand::seq::SliceRandom;
    let mut rng = rng::stream(seed, "split");
    patients.shuffle(&mut rng);
    let p = patients.len() as f64;
    let b1 = ((ratios[0] * p).round() as usize).min(patients.len());
    let b2 = (((ratios[0] + ratios[1]) * p).round() as usize).clamp(b1, patients.len());
    let mut counts = [b1, b2 - b1, patients.len() - b2];
    // Rounding may starve a small non-zero split; move one patient over from
    // the largest group, keeping every count within one of its target.
    loop {
        let Some(need) = (0..3).find(|&i| ratios[i] > 0.0 && counts[i] == 0) else {
            break;
        };
        let donor = (0..3)
            .max_by_key(|&i| counts[i])
            .expect("three split groups");
        if counts[donor] <= 1 {
            return Err(Error::InvalidData(format!(
                "split with ratio {} received no patients",
                ratios[need]
            )));
        }
        counts[donor] -= 1;
        counts[need] += 1;
    }
    let groups = [
        &patients[..counts[0]],
        &patients[counts[0]..counts[0] + counts[1]],
        &patients[counts[0] + counts[1]..],
    ];
    let index_of = |pid: u32| -> usize {
        groups
            .iter()
            .position(|g| g.contains(&pid))
            .expect("patient assigned to a split")
    };
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for (i, e) in examples.iter().enumerate() {
        match index_of(e.patient) {
            0 => out.0.push(i),
            1 => out.1.push(i),
            _ => out.2.push(i),
        }
    }
    Ok(out)
}

/// Random translation, intensity jitter, and gaussian noise; the output is
/// clipped to [0,1]. Zero magnitudes reproduce the input exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub max_translation: usize,
    pub gain_range: (f64, f64),
    pub bias_range: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            max_translation: 2,
            gain_range: (0.9, 1.1),
            bias_range: (-0.05, 0.05),
            noise_sigma: 0.02,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            max_translation: 0,
            gain_range: (1.0, 1.0),
            bias_range: (0.0, 0.0),
            noise_sigma: 0.0,
        }
    }
}

pub fn augment(image: &Tensor, params: &AugmentParams, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (image.shape[1], image.shape[2]);
    let t = params.max_translation as i64;
    let dy: i64 = rng.random_range(-t..=t);
    let dx: i64 = rng.random_range(-t..=t);
    let gain: f64 = rng.random_range(params.gain_range.0..=params.gain_range.1);
    let bias: f64 = rng.random_range(params.bias_range.0..=params.bias_range.1);
    let mut data = vec![0.0; image.numel()];
    for y in 0..h {
        for x in 0..w {
            let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
            let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
            data[y * w + x] = image.data[sy * w + sx] * gain + bias;
        }
    }
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma).expect("sigma >= 0");
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    for v in &mut data {
        *v = clip01(*v);
    }
    Tensor::new(image.shape.clone(), data)
}

/// Generate the full corpus; identical `(config, seed)` is bit-identical.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<MultiSiteCorpus> {
    config.validate()?;
    let registry = GlobalClassRegistry::new(config.class_names.clone())?;
    let (h, w) = (config.image_height, config.image_width);
    let templates: Vec<Tensor> = (0..registry.len())
        .map(|c| class_template(seed, c, h, w, config.template_waves))
        .collect();

    let mut sites = Vec::with_capacity(config.sites.len());
    for spec in &config.sites {
        let mut site_rng = rng::stream(seed, &format!("site/{}", spec.id));
        let noise = if spec.shift.noise_sigma > 0.0 {
            Some(Normal::new(0.0, spec.shift.noise_sigma).expect("sigma >= 0"))
        } else {
            None
        };
        let patient_offsets = if spec.shift.patient_sigma > 0.0 {
            let dist = Normal::new(0.0, spec.shift.patient_sigma).expect("sigma >= 0");
            (0..spec.patients).map(|_| dist.sample(&mut site_rng)).collect()
        } else {
            vec![0.0; spec.patients]
        };
        let mut examples = Vec::with_capacity(spec.patients * spec.samples_per_patient);
        for patient in 0..spec.patients {
            let offset: f64 = patient_offsets[patient];
            for _ in 0..spec.samples_per_patient {
                let label = spec.labels[site_rng.random_range(0..spec.labels.len())];
                let t = spec.shift.max_translation as i64;
                let dy: i64 = site_rng.random_range(-t..=t);
                let dx: i64 = site_rng.random_range(-t..=t);
                let template = &templates[label];
                let mut data = vec![0.0; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
                        let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                        let mut v = template.data[sy * w + sx] + offset;
                        if let Some(dist) = &noise {
                            v += dist.sample(&mut site_rng);
                        }
                        data[y * w + x] = clip01(spec.shift.gain * v + spec.shift.bias);
                    }
                }
                examples.push(Example {
                    image: Tensor::new(vec![1, h, w], data),
                    label,
                    patient: patient as u32,
                });
            }
        }
        let (train_idx, val_idx, test_idx) = split_by_patient(
            &examples,
            config.split_ratios,
            rng::derive_seed(seed, &format!("split/{}", spec.id)),
        )?;
        sites.push(SiteDataset {
            site_id: spec.id.clone(),
            role: spec.role,
            labels: spec.labels.clone(),
            shift: spec.shift,
            examples,
            train_idx,
            val_idx,
            test_idx,
        });
    }
    Ok(MultiSiteCorpus {
        registry,
        config: config.clone(),
        seed,
        sites,
    })
}

// ── corpus persistence ──────────────────────────────────────────────────

const SITE_MAGIC: &[u8; 4] = b"EFS1";

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    config: ScenarioConfig,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    classes: Vec<String>,
}

pub fn save_corpus(corpus: &MultiSiteCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let registry = RegistryFile {
        classes: corpus.registry.names().to_vec(),
    };
    fs::write(
        dir.join("registry.json"),
        serde_json::to_string_pretty(&registry)?,
    )?;
    let scenario = ScenarioFile {
        config: corpus.config.clone(),
        seed: corpus.seed,
    };
    fs::write(
        dir.join("scenario.json"),
        serde_json::to_string_pretty(&scenario)?,
    )?;
    for site in &corpus.sites {
        let mut w = BufWriter::new(fs::File::create(
            dir.join(format!("site_{}.bin", site.site_id)),
        )?);
        w.write_all(SITE_MAGIC)?;
        let id = site.site_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        let (kind, step) = match site.role {
            SiteRole::Base => (0u32, 0u32),
            SiteRole::Incremental { step } => (1, step),
            SiteRole::External => (2, 0),
        };
        w.write_all(&kind.to_le_bytes())?;
        w.write_all(&step.to_le_bytes())?;
        w.write_all(&(site.examples.len() as u32).to_le_bytes())?;
        w.write_all(&(corpus.config.image_height as u32).to_le_bytes())?;
        w.write_all(&(corpus.config.image_width as u32).to_le_bytes())?;
        for e in &site.examples {
            w.write_all(&(e.label as u32).to_le_bytes())?;
            w.write_all(&e.patient.to_le_bytes())?;
            for v in &e.image.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<MultiSiteCorpus> {
    let scenario: ScenarioFile =
        serde_json::from_str(&fs::read_to_string(dir.join("scenario.json"))?)?;
    let config = scenario.config;
    config.validate()?;
    let registry = GlobalClassRegistry::new(config.class_names.clone())?;
    let mut sites = Vec::with_capacity(config.sites.len());
    for spec in &config.sites {
        let path = dir.join(format!("site_{}.bin", spec.id));
        let mut r = BufReader::new(fs::File::open(&path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SITE_MAGIC {
            return Err(Error::Format(format!("{}: bad site magic", path.display())));
        }
        let id_len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| Error::Format(e.to_string()))?;
        if id != spec.id {
            return Err(Error::Format(format!(
                "site file {} holds data for site {id}",
                path.display()
            )));
        }
        let kind = read_u32(&mut r)?;
        let step = read_u32(&mut r)?;
        let role = match kind {
            0 => SiteRole::Base,
            1 => SiteRole::Incremental { step },
            2 => SiteRole::External,
            other => return Err(Error::Format(format!("unknown site role {other}"))),
        };
        if role != spec.role {
            return Err(Error::Format(format!(
                "site {} role does not match scenario config",
                spec.id
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        if h != config.image_height || w != config.image_width {
            return Err(Error::Format(format!(
                "site {} image size {h}x{w} does not match config",
                spec.id
            )));
        }
        let mut examples = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            let label = read_u32(&mut r)? as usize;
            let patient = read_u32(&mut r)?;
            let mut data = Vec::with_capacity(h * w);
            for _ in 0..h * w {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            if !spec.labels.contains(&label) {
                return Err(Error::InvalidData(format!(
                    "site {} contains label {label} outside its subset",
                    spec.id
                )));
            }
            examples.push(Example {
                image: Tensor::new(vec![1, h, w], data),
                label,
                patient,
            });
        }
        let (train_idx, val_idx, test_idx) = split_by_patient(
            &examples,
            config.split_ratios,
            rng::derive_seed(scenario.seed, &format!("split/{}", spec.id)),
        )?;
        sites.push(SiteDataset {
            site_id: spec.id.clone(),
            role: spec.role,
            labels: spec.labels.clone(),
            shift: spec.shift,
            examples,
            train_idx,
            val_idx,
            test_idx,
        });
    }
    Ok(MultiSiteCorpus {
        registry,
        config,
        seed: scenario.seed,
        sites,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Order-independent fingerprint of every corpus file in `dir`.
pub fn corpus_checksum(dir: &Path) -> Result<u64> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut acc: u64 = 0xcbf29ce484222325;
    for name in names {
        let bytes = fs::read(dir.join(&name))?;
        acc ^= rng::fingerprint(name.as_bytes()) ^ rng::fingerprint(&bytes);
        acc = acc.wrapping_mul(0x100000001b3);
    }
    Ok(acc)
}
