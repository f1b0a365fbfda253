//! Episode sampling and the four augmentation modes.
//!
//! Task-level augmentation mints virtual classes at class-pool construction
//! time, so a class-wide transform (say, rotate everything by 180 degrees)
//! holds for every image ever drawn from that virtual class. Support, query,
//! and shot entries of a descriptor are applied per episode.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{normalize, ChannelStats, FewShotDataset, ImageTensor, Split};
use crate::error::{Error, Result};
use crate::imgaug::{self, EraseParams, SoftLabel};
use crate::rng::RngStream;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub split: Split,
    /// Forbid two virtual classes derived from the same base class inside
    /// one episode. Off by default: a car class and its rotated twin may
    /// co-occur, making tasks harder.
    #[serde(default)]
    pub forbid_shared_base: bool,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::Config(format!("way must be >= 2, got {}", self.way)));
        }
        if self.shot < 1 || self.query < 1 {
            return Err(Error::Config("shot and query must be >= 1".into()));
        }
        Ok(())
    }
}

/// Hyperparameters for every augmentation technique. The defaults are the
/// values used throughout; a run config may override any of them, and a
/// descriptor entry may override per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugParams {
    pub cutmix_alpha: f64,
    pub mixup_alpha: f64,
    pub feature_mixup_alpha: f64,
    pub erase: EraseParams,
    pub jitter_strength: f64,
    pub solarize_threshold: f32,
    pub crop_pad: usize,
    pub shot_copies: usize,
}

impl Default for AugParams {
    fn default() -> Self {
        Self {
            cutmix_alpha: 1.0,
            mixup_alpha: 1.0,
            feature_mixup_alpha: 1.0,
            erase: EraseParams::default(),
            jitter_strength: 0.4,
            solarize_threshold: 128.0,
            crop_pad: 4,
            shot_copies: 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Virtual classes and the class pool
// ---------------------------------------------------------------------------

/// Class-wide transform defining a virtual class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClassTransform {
    Identity,
    /// Quarter turns, k in 1..=3.
    LargeRotation { k: u8 },
    /// Every image is the 50/50 pixel average of one image from each parent.
    ClassMixup { partner: usize },
    /// Every image is a cutmix of parent images with a fresh box per image.
    ClassCutmix { partner: usize },
    /// Each image drawn uniformly from either parent; one way slot.
    CombinedLabels { partner: usize },
    /// Fresh random erase per image.
    ClassRandomErase,
    /// One channel, fixed per virtual class, zeroed in every image.
    ClassDropChannel { channel: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualClass {
    /// Index into the dataset's class list.
    pub base: usize,
    pub transform: ClassTransform,
}

impl VirtualClass {
    pub fn identity(base: usize) -> Self {
        Self {
            base,
            transform: ClassTransform::Identity,
        }
    }

    /// Base classes this virtual class draws from.
    pub fn bases(&self) -> (usize, Option<usize>) {
        match self.transform {
            ClassTransform::ClassMixup { partner }
            | ClassTransform::ClassCutmix { partner }
            | ClassTransform::CombinedLabels { partner } => (self.base, Some(partner)),
            _ => (self.base, None),
        }
    }
}

/// Task-level technique selecting how the class pool is enlarged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskTechnique {
    LargeRotation,
    ClassMixup,
    ClassCutmix,
    CombinedLabels,
    ClassRandomErase,
    ClassDropChannel,
}

/// Identity classes for one split, with no task augmentation. This is the
/// pool evaluation episodes are sampled from.
pub fn identity_pool(dataset: &FewShotDataset, split: Split) -> Vec<VirtualClass> {
    dataset
        .split_classes(split)
        .into_iter()
        .map(VirtualClass::identity)
        .collect()
}

/// Build the train-split class pool. Identity classes are always present;
/// the optional task technique appends virtual classes: three rotations per
/// base class for large rotation, one class per sampled disjoint pair for
/// the pairing techniques, and one transformed twin per base class for the
/// unary techniques.
pub fn build_class_pool(
    dataset: &FewShotDataset,
    task_aug: Option<TaskTechnique>,
    rng: &mut RngStream,
) -> Result<Vec<VirtualClass>> {
    let bases = dataset.split_classes(Split::Train);
    if bases.is_empty() {
        return Err(Error::Config("train split has no classes".into()));
    }
    let mut pool: Vec<VirtualClass> = bases.iter().copied().map(VirtualClass::identity).collect();
    let Some(technique) = task_aug else {
        return Ok(pool);
    };
    match technique {
        TaskTechnique::LargeRotation => {
            for &base in &bases {
                for k in 1..=3u8 {
                    pool.push(VirtualClass {
                        base,
                        transform: ClassTransform::LargeRotation { k },
                    });
                }
            }
        }
        TaskTechnique::ClassMixup | TaskTechnique::ClassCutmix | TaskTechnique::CombinedLabels => {
            if bases.len() < 2 {
                return Err(Error::Config(
                    "pairing task augmentation needs at least 2 base classes".into(),
                ));
            }
            let perm = index_sample(rng, bases.len(), bases.len()).into_vec();
            for pair in perm.chunks_exact(2) {
                let (a, b) = (bases[pair[0]], bases[pair[1]]);
                let transform = match technique {
                    TaskTechnique::ClassMixup => ClassTransform::ClassMixup { partner: b },
                    TaskTechnique::ClassCutmix => ClassTransform::ClassCutmix { partner: b },
                    _ => ClassTransform::CombinedLabels { partner: b },
                };
                pool.push(VirtualClass { base: a, transform });
            }
        }
        TaskTechnique::ClassRandomErase => {
            for &base in &bases {
                pool.push(VirtualClass {
                    base,
                    transform: ClassTransform::ClassRandomErase,
                });
            }
        }
        TaskTechnique::ClassDropChannel => {
            if dataset.geometry.channels < 2 {
                return Err(Error::Geometry(
                    "class drop-channel needs at least 2 channels".into(),
                ));
            }
            for &base in &bases {
                let channel = rng.random_range(0..dataset.geometry.channels);
                pool.push(VirtualClass {
                    base,
                    transform: ClassTransform::ClassDropChannel { channel },
                });
            }
        }
    }
    Ok(pool)
}

/// Union pool over every distinct task technique appearing in an
/// augmentation pool; identity classes appear once.
pub fn build_epoch_pool(
    dataset: &FewShotDataset,
    techniques: &[TaskTechnique],
    rng: &mut RngStream,
) -> Result<Vec<VirtualClass>> {
    let mut pool = build_class_pool(dataset, None, rng)?;
    let mut seen = std::collections::HashSet::new();
    for (i, &tech) in techniques.iter().enumerate() {
        if !seen.insert(tech) {
            continue;
        }
        let mut child = rng.child("task-aug", i as u64);
        let extra = build_class_pool(dataset, Some(tech), &mut child)?;
        pool.extend(extra.into_iter().filter(|vc| vc.transform != ClassTransform::Identity));
    }
    Ok(pool)
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// Pairing plan for feature-space mixup, drawn at descriptor-application
/// time so the loss pipeline stays a pure function of the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMixPlan {
    pub partner: Vec<usize>,
    pub lambda: Vec<f64>,
}

impl FeatureMixPlan {
    pub fn sample(n: usize, alpha: f64, rng: &mut RngStream) -> Self {
        use rand_distr::Distribution;
        let beta = rand_distr::Beta::new(alpha, alpha).expect("alpha must be positive");
        let mut partner = Vec::with_capacity(n);
        let mut lambda = Vec::with_capacity(n);
        for _ in 0..n {
            partner.push(rng.random_range(0..n));
            lambda.push(beta.sample(rng));
        }
        Self { partner, lambda }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: SoftLabel,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub ways: usize,
    /// Support rows before any shot augmentation (N * K).
    pub base_support: usize,
    pub support: Vec<LabeledImage>,
    pub query: Vec<LabeledImage>,
    /// Way slot -> virtual class.
    pub classes: Vec<VirtualClass>,
    /// Feature-mixup plans to apply to support embeddings, in order.
    pub support_mix: Vec<FeatureMixPlan>,
    /// Feature-mixup plans to apply to query embeddings, in order.
    pub query_mix: Vec<FeatureMixPlan>,
    /// Descriptor that produced this episode, if any.
    pub provenance: Option<AugmentationDescriptor>,
}

impl Episode {
    /// Convert every image from the raw to the normalized domain.
    pub fn normalized(&self, stats: &ChannelStats) -> Result<Episode> {
        let map = |set: &[LabeledImage]| -> Result<Vec<LabeledImage>> {
            set.iter()
                .map(|li| {
                    Ok(LabeledImage {
                        image: normalize(&li.image, stats)?,
                        label: li.label.clone(),
                    })
                })
                .collect()
        };
        Ok(Episode {
            ways: self.ways,
            base_support: self.base_support,
            support: map(&self.support)?,
            query: map(&self.query)?,
            classes: self.classes.clone(),
            support_mix: self.support_mix.clone(),
            query_mix: self.query_mix.clone(),
            provenance: self.provenance.clone(),
        })
    }
}

/// Sample one N-way episode from a class pool. Per way slot, K + Q images
/// are drawn without replacement from the base class and the class-level
/// transform is applied to all of them; the first K become support, the
/// rest query, with one-hot labels.
pub fn sample_episode(
    dataset: &FewShotDataset,
    pool: &[VirtualClass],
    cfg: &TaskConfig,
    aug: &AugParams,
    rng: &mut RngStream,
) -> Result<Episode> {
    cfg.validate()?;
    if pool.len() < cfg.way {
        return Err(Error::Config(format!(
            "pool has {} classes, need way = {}",
            pool.len(),
            cfg.way
        )));
    }

    let slots: Vec<usize> = if cfg.forbid_shared_base {
        let perm = index_sample(rng, pool.len(), pool.len()).into_vec();
        let mut used = std::collections::HashSet::new();
        let mut chosen = Vec::with_capacity(cfg.way);
        for idx in perm {
            let (a, b) = pool[idx].bases();
            if used.contains(&a) || b.map(|b| used.contains(&b)).unwrap_or(false) {
                continue;
            }
            used.insert(a);
            if let Some(b) = b {
                used.insert(b);
            }
            chosen.push(idx);
            if chosen.len() == cfg.way {
                break;
            }
        }
        if chosen.len() < cfg.way {
            return Err(Error::Config(
                "cannot fill ways with disjoint base classes".into(),
            ));
        }
        chosen
    } else {
        index_sample(rng, pool.len(), cfg.way).into_vec()
    };

    let needed = cfg.shot + cfg.query;
    let mut support = Vec::with_capacity(cfg.way * cfg.shot);
    let mut query = Vec::with_capacity(cfg.way * cfg.query);
    let mut classes = Vec::with_capacity(cfg.way);

    for (slot, &pool_idx) in slots.iter().enumerate() {
        let vc = pool[pool_idx];
        classes.push(vc);
        let label = SoftLabel::one_hot(cfg.way, slot);
        let images = draw_class_images(dataset, &vc, needed, aug, rng)?;
        for (i, image) in images.into_iter().enumerate() {
            let li = LabeledImage {
                image,
                label: label.clone(),
            };
            if i < cfg.shot {
                support.push(li);
            } else {
                query.push(li);
            }
        }
    }

    Ok(Episode {
        ways: cfg.way,
        base_support: cfg.way * cfg.shot,
        support,
        query,
        classes,
        support_mix: Vec::new(),
        query_mix: Vec::new(),
        provenance: None,
    })
}

fn sample_indices(
    dataset: &FewShotDataset,
    class: usize,
    needed: usize,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let count = dataset.classes[class].count;
    if count < needed {
        return Err(Error::InsufficientImages {
            class: dataset.classes[class].id.clone(),
            available: count,
            needed,
        });
    }
    Ok(index_sample(rng, count, needed).into_vec())
}

fn draw_class_images(
    dataset: &FewShotDataset,
    vc: &VirtualClass,
    needed: usize,
    aug: &AugParams,
    rng: &mut RngStream,
) -> Result<Vec<ImageTensor>> {
    let scratch_label = SoftLabel::one_hot(2, 0);
    match vc.transform {
        ClassTransform::Identity => {
            let idx = sample_indices(dataset, vc.base, needed, rng)?;
            Ok(idx.into_iter().map(|i| dataset.image(vc.base, i)).collect())
        }
        ClassTransform::LargeRotation { k } => {
            let idx = sample_indices(dataset, vc.base, needed, rng)?;
            idx.into_iter()
                .map(|i| imgaug::rotate90(&dataset.image(vc.base, i), k))
                .collect()
        }
        ClassTransform::ClassMixup { partner } => {
            let a = sample_indices(dataset, vc.base, needed, rng)?;
            let b = sample_indices(dataset, partner, needed, rng)?;
            a.into_iter()
                .zip(b)
                .map(|(i, j)| {
                    let out = imgaug::mixup_with_lambda(
                        &dataset.image(vc.base, i),
                        &scratch_label,
                        &dataset.image(partner, j),
                        &scratch_label,
                        0.5,
                    )?;
                    Ok(out.image)
                })
                .collect()
        }
        ClassTransform::ClassCutmix { partner } => {
            let a = sample_indices(dataset, vc.base, needed, rng)?;
            let b = sample_indices(dataset, partner, needed, rng)?;
            a.into_iter()
                .zip(b)
                .map(|(i, j)| {
                    let out = imgaug::cutmix(
                        &dataset.image(vc.base, i),
                        &scratch_label,
                        &dataset.image(partner, j),
                        &scratch_label,
                        aug.cutmix_alpha,
                        rng,
                    )?;
                    Ok(out.image)
                })
                .collect()
        }
        ClassTransform::CombinedLabels { partner } => {
            let a = sample_indices(dataset, vc.base, needed, rng)?;
            let b = sample_indices(dataset, partner, needed, rng)?;
            let mut next_a = 0;
            let mut next_b = 0;
            let mut out = Vec::with_capacity(needed);
            for _ in 0..needed {
                // Uniform parent choice, falling back when one side is dry.
                let from_a = if next_a >= a.len() {
                    false
                } else if next_b >= b.len() {
                    true
                } else {
                    rng.random_range(0.0..1.0f64) < 0.5
                };
                if from_a {
                    out.push(dataset.image(vc.base, a[next_a]));
                    next_a += 1;
                } else {
                    out.push(dataset.image(partner, b[next_b]));
                    next_b += 1;
                }
            }
            Ok(out)
        }
        ClassTransform::ClassRandomErase => {
            let idx = sample_indices(dataset, vc.base, needed, rng)?;
            Ok(idx
                .into_iter()
                .map(|i| imgaug::random_erase(&dataset.image(vc.base, i), &aug.erase, rng))
                .collect())
        }
        ClassTransform::ClassDropChannel { channel } => {
            let idx = sample_indices(dataset, vc.base, needed, rng)?;
            Ok(idx
                .into_iter()
                .map(|i| imgaug::drop_channel_at(&dataset.image(vc.base, i), channel))
                .collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentation descriptors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Support,
    Query,
    Task,
    Shot,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Support => "support",
            Mode::Query => "query",
            Mode::Task => "task",
            Mode::Shot => "shot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Technique {
    Identity,
    Cutmix,
    Mixup,
    SelfMix,
    RandomErase,
    Rotation,
    Hflip,
    RandomCrop,
    ColorJitter,
    Solarize,
    DropChannel,
    FeatureMixup,
    CombinedLabels,
    Duplicate,
}

impl Technique {
    pub fn as_str(&self) -> &'static str {
        match self {
            Technique::Identity => "identity",
            Technique::Cutmix => "cutmix",
            Technique::Mixup => "mixup",
            Technique::SelfMix => "self-mix",
            Technique::RandomErase => "random-erase",
            Technique::Rotation => "rotation",
            Technique::Hflip => "hflip",
            Technique::RandomCrop => "random-crop",
            Technique::ColorJitter => "color-jitter",
            Technique::Solarize => "solarize",
            Technique::DropChannel => "drop-channel",
            Technique::FeatureMixup => "feature-mixup",
            Technique::CombinedLabels => "combined-labels",
            Technique::Duplicate => "duplicate",
        }
    }
}

/// Optional per-entry overrides of [`AugParams`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EntryParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub copies: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorEntry {
    pub mode: Mode,
    pub technique: Technique,
    #[serde(default, skip_serializing_if = "EntryParams::is_default")]
    pub params: EntryParams,
}

impl EntryParams {
    fn is_default(&self) -> bool {
        *self == EntryParams::default()
    }
}

impl DescriptorEntry {
    pub fn new(mode: Mode, technique: Technique) -> Self {
        Self {
            mode,
            technique,
            params: EntryParams::default(),
        }
    }
}

/// One element of the augmentation pool: a list of mode/technique entries
/// applied together (for example query CutMix plus task rotation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugmentationDescriptor {
    pub entries: Vec<DescriptorEntry>,
}

impl AugmentationDescriptor {
    pub fn identity() -> Self {
        Self { entries: vec![] }
    }

    pub fn new(entries: Vec<DescriptorEntry>) -> Result<Self> {
        let d = Self { entries };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let task_entries = self
            .entries
            .iter()
            .filter(|e| e.mode == Mode::Task)
            .count();
        if task_entries > 1 {
            return Err(Error::Config(
                "descriptor may contain at most one task-mode entry".into(),
            ));
        }
        for entry in &self.entries {
            entry_kind(entry)?;
        }
        Ok(())
    }

    /// Task techniques named by this descriptor (zero or one).
    pub fn task_techniques(&self) -> Vec<TaskTechnique> {
        self.entries
            .iter()
            .filter_map(|e| match entry_kind(e) {
                Ok(EntryKind::Task(t)) => Some(t),
                _ => None,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        if self.entries.is_empty() {
            return "identity".to_string();
        }
        self.entries
            .iter()
            .map(|e| format!("{}({})", e.technique.as_str(), &e.mode.as_str()[..1].to_uppercase()))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// A named set of descriptors, the candidate set S.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPool {
    pub name: String,
    pub descriptors: Vec<AugmentationDescriptor>,
}

impl AugmentationPool {
    pub fn new(name: impl Into<String>, descriptors: Vec<AugmentationDescriptor>) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(Error::Config("augmentation pool must be non-empty".into()));
        }
        Ok(Self {
            name: name.into(),
            descriptors,
        })
    }

    /// Distinct task techniques across all descriptors.
    pub fn task_techniques(&self) -> Vec<TaskTechnique> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for d in &self.descriptors {
            for t in d.task_techniques() {
                if seen.insert(t) {
                    out.push(t);
                }
            }
        }
        out
    }
}

enum EntryKind {
    SetLevel,
    Task(TaskTechnique),
    Shot,
    Noop,
}

fn entry_kind(entry: &DescriptorEntry) -> Result<EntryKind> {
    use Mode::*;
    use Technique::*;
    let bad = || {
        Err(Error::UnknownTechnique {
            technique: entry.technique.as_str().to_string(),
            mode: entry.mode.as_str().to_string(),
        })
    };
    match entry.mode {
        Support | Query => match entry.technique {
            Identity => Ok(EntryKind::Noop),
            Cutmix | Mixup | SelfMix | RandomErase | Rotation | Hflip | RandomCrop
            | ColorJitter | Solarize | DropChannel | FeatureMixup => Ok(EntryKind::SetLevel),
            CombinedLabels | Duplicate => bad(),
        },
        Task => match entry.technique {
            Identity => Ok(EntryKind::Noop),
            Rotation => Ok(EntryKind::Task(TaskTechnique::LargeRotation)),
            Mixup => Ok(EntryKind::Task(TaskTechnique::ClassMixup)),
            Cutmix => Ok(EntryKind::Task(TaskTechnique::ClassCutmix)),
            CombinedLabels => Ok(EntryKind::Task(TaskTechnique::CombinedLabels)),
            RandomErase => Ok(EntryKind::Task(TaskTechnique::ClassRandomErase)),
            DropChannel => Ok(EntryKind::Task(TaskTechnique::ClassDropChannel)),
            _ => bad(),
        },
        Shot => match entry.technique {
            Identity => Ok(EntryKind::Noop),
            Hflip | Rotation | RandomCrop | Duplicate => Ok(EntryKind::Shot),
            _ => bad(),
        },
    }
}

// ---------------------------------------------------------------------------
// Descriptor application
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum SetKind {
    Support,
    Query,
}

/// Apply a descriptor's support, query, and shot entries to an episode.
/// Task entries were consumed when the class pool was built and are skipped
/// here. Pairwise kernels read partners from a snapshot of the set, so
/// evaluation order cannot leak between elements.
pub fn apply_descriptor(
    episode: &Episode,
    descriptor: &AugmentationDescriptor,
    aug: &AugParams,
    rng: &mut RngStream,
) -> Result<Episode> {
    descriptor.validate()?;
    let mut out = episode.clone();
    for (entry_index, entry) in descriptor.entries.iter().enumerate() {
        let mut entry_rng = rng.child("entry", entry_index as u64);
        match entry_kind(entry)? {
            EntryKind::Noop | EntryKind::Task(_) => {}
            EntryKind::SetLevel => {
                let kind = if entry.mode == Mode::Support {
                    SetKind::Support
                } else {
                    SetKind::Query
                };
                apply_set_entry(&mut out, kind, entry, aug, &mut entry_rng)?;
            }
            EntryKind::Shot => apply_shot_entry(&mut out, entry, aug, &mut entry_rng)?,
        }
    }
    out.provenance = Some(descriptor.clone());
    Ok(out)
}

fn apply_set_entry(
    episode: &mut Episode,
    kind: SetKind,
    entry: &DescriptorEntry,
    aug: &AugParams,
    rng: &mut RngStream,
) -> Result<()> {
    let set = match kind {
        SetKind::Support => &mut episode.support,
        SetKind::Query => &mut episode.query,
    };
    let n = set.len();
    if n == 0 {
        return Ok(());
    }

    match entry.technique {
        Technique::FeatureMixup => {
            let alpha = entry.params.alpha.unwrap_or(aug.feature_mixup_alpha);
            let plan = FeatureMixPlan::sample(n, alpha, rng);
            // Labels mix against a snapshot, exactly as the embeddings will.
            let snapshot: Vec<SoftLabel> = set.iter().map(|li| li.label.clone()).collect();
            for i in 0..n {
                set[i].label =
                    SoftLabel::mix(&snapshot[i], &snapshot[plan.partner[i]], plan.lambda[i]);
            }
            match kind {
                SetKind::Support => episode.support_mix.push(plan),
                SetKind::Query => episode.query_mix.push(plan),
            }
            return Ok(());
        }
        Technique::Cutmix | Technique::Mixup => {
            let snapshot: Vec<LabeledImage> = set.clone();
            for i in 0..n {
                let j = rng.random_range(0..n);
                let (a, b) = (&snapshot[i], &snapshot[j]);
                let outcome = if entry.technique == Technique::Cutmix {
                    imgaug::cutmix(
                        &a.image,
                        &a.label,
                        &b.image,
                        &b.label,
                        entry.params.alpha.unwrap_or(aug.cutmix_alpha),
                        rng,
                    )?
                } else {
                    imgaug::mixup(
                        &a.image,
                        &a.label,
                        &b.image,
                        &b.label,
                        entry.params.alpha.unwrap_or(aug.mixup_alpha),
                        rng,
                    )?
                };
                set[i] = LabeledImage {
                    image: outcome.image,
                    label: outcome.label,
                };
            }
            return Ok(());
        }
        _ => {}
    }

    for item in set.iter_mut() {
        item.image = match entry.technique {
            Technique::SelfMix => imgaug::self_mix(&item.image, rng)?,
            Technique::RandomErase => imgaug::random_erase(&item.image, &aug.erase, rng),
            Technique::Rotation => imgaug::random_rotate90(&item.image, 0, rng)?,
            Technique::Hflip => imgaug::random_hflip(&item.image, rng),
            Technique::RandomCrop => imgaug::random_crop(&item.image, aug.crop_pad, rng),
            Technique::ColorJitter => imgaug::color_jitter(
                &item.image,
                entry.params.strength.unwrap_or(aug.jitter_strength),
                rng,
            ),
            Technique::Solarize => imgaug::solarize(
                &item.image,
                entry.params.threshold.unwrap_or(aug.solarize_threshold),
            ),
            Technique::DropChannel => imgaug::drop_channel(&item.image, rng)?,
            _ => unreachable!("handled above"),
        };
    }
    Ok(())
}

fn apply_shot_entry(
    episode: &mut Episode,
    entry: &DescriptorEntry,
    aug: &AugParams,
    rng: &mut RngStream,
) -> Result<()> {
    if entry.technique == Technique::Identity {
        return Ok(());
    }
    let copies = entry.params.copies.unwrap_or(aug.shot_copies);
    let originals: Vec<LabeledImage> = episode.support[..episode.base_support].to_vec();
    for _ in 0..copies {
        for item in &originals {
            let image = match entry.technique {
                Technique::Hflip => imgaug::hflip(&item.image),
                Technique::Rotation => imgaug::random_rotate90(&item.image, 1, rng)?,
                Technique::RandomCrop => imgaug::random_crop(&item.image, aug.crop_pad, rng),
                Technique::Duplicate => item.image.clone(),
                _ => unreachable!("validated by entry_kind"),
            };
            episode.support.push(LabeledImage {
                image,
                label: item.label.clone(),
            });
        }
    }
    Ok(())
}

/// The comparison baseline: random crop, random horizontal flip, and color
/// jitter on both support and query sets.
pub fn baseline_descriptor() -> AugmentationDescriptor {
    let entries = [Mode::Support, Mode::Query]
        .iter()
        .flat_map(|&mode| {
            [
                Technique::RandomCrop,
                Technique::Hflip,
                Technique::ColorJitter,
            ]
            .iter()
            .map(move |&technique| DescriptorEntry::new(mode, technique))
        })
        .collect();
    AugmentationDescriptor { entries }
}

// ---------------------------------------------------------------------------
// Pool presets
// ---------------------------------------------------------------------------

/// Named augmentation pools. `medium` and `large` follow the published
/// recipe; `single` collects the strongest standalone techniques; and
/// `cutmix-only` repeats query CutMix.
pub fn preset_pool(name: &str) -> Result<AugmentationPool> {
    use Mode::*;
    use Technique::*;
    let entry = DescriptorEntry::new;
    let d = |entries: Vec<DescriptorEntry>| AugmentationDescriptor { entries };

    let medium = vec![
        d(vec![entry(Query, Cutmix)]),
        d(vec![entry(Query, RandomErase)]),
        d(vec![entry(Support, SelfMix)]),
        d(vec![entry(Task, Rotation)]),
        d(vec![entry(Query, Cutmix), entry(Task, Rotation)]),
        d(vec![entry(Query, RandomErase), entry(Task, Rotation)]),
    ];

    let descriptors = match name {
        "medium" => medium,
        "large" => {
            let mut large = medium;
            large.extend([
                d(vec![entry(Query, RandomErase), entry(Support, RandomErase)]),
                d(vec![entry(Query, Cutmix), entry(Support, RandomErase)]),
                d(vec![entry(Query, Cutmix), entry(Query, RandomErase)]),
                d(vec![entry(Query, Cutmix), entry(Support, SelfMix)]),
            ]);
            large
        }
        "single" => vec![
            d(vec![entry(Query, Cutmix)]),
            d(vec![entry(Query, RandomErase)]),
            d(vec![entry(Query, SelfMix)]),
            d(vec![entry(Support, SelfMix)]),
            d(vec![entry(Task, Rotation)]),
            d(vec![entry(Shot, Hflip)]),
        ],
        "cutmix-only" => vec![d(vec![entry(Query, Cutmix)]); 6],
        other => {
            return Err(Error::Config(format!(
                "unknown pool preset `{other}` (expected single, medium, large, cutmix-only)"
            )))
        }
    };
    AugmentationPool::new(name, descriptors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{generate_synthetic, SyntheticSpec};

    fn dataset() -> FewShotDataset {
        generate_synthetic(&SyntheticSpec {
            train_classes: 8,
            val_classes: 2,
            test_classes: 2,
            images_per_class: 20,
            channels: 3,
            height: 8,
            width: 8,
            seed: 5,
        })
        .unwrap()
    }

    fn cfg() -> TaskConfig {
        TaskConfig {
            way: 5,
            shot: 1,
            query: 3,
            split: Split::Train,
            forbid_shared_base: false,
        }
    }

    fn stream(i: u64) -> RngStream {
        RngStream::root(17).child("episodic-test", i)
    }

    // -- class pool ------------------------------------------------------------

    #[test]
    fn pool_without_task_aug_is_base_classes() {
        let ds = dataset();
        let mut rng = stream(0);
        let pool = build_class_pool(&ds, None, &mut rng).unwrap();
        assert_eq!(pool.len(), 8);
        assert!(pool.iter().all(|vc| vc.transform == ClassTransform::Identity));
    }

    #[test]
    fn large_rotation_quadruples_pool() {
        let ds = dataset();
        let mut rng = stream(1);
        let pool = build_class_pool(&ds, Some(TaskTechnique::LargeRotation), &mut rng).unwrap();
        assert_eq!(pool.len(), 8 * 4);
    }

    #[test]
    fn class_mixup_adds_half_as_many_pairs() {
        let ds = dataset();
        let mut rng = stream(2);
        let pool = build_class_pool(&ds, Some(TaskTechnique::ClassMixup), &mut rng).unwrap();
        assert_eq!(pool.len(), 8 + 4);
        // Pairs are disjoint.
        let mut seen = std::collections::HashSet::new();
        for vc in pool.iter().filter(|vc| vc.transform != ClassTransform::Identity) {
            let (a, b) = vc.bases();
            assert!(seen.insert(a));
            assert!(seen.insert(b.unwrap()));
        }
    }

    #[test]
    fn pairing_needs_two_classes() {
        let ds = generate_synthetic(&SyntheticSpec {
            train_classes: 1,
            val_classes: 1,
            test_classes: 1,
            images_per_class: 8,
            channels: 1,
            height: 4,
            width: 4,
            seed: 0,
        })
        .unwrap();
        let mut rng = stream(3);
        assert!(build_class_pool(&ds, Some(TaskTechnique::ClassMixup), &mut rng).is_err());
    }

    // -- sampling ------------------------------------------------------------

    #[test]
    fn episode_shapes_and_one_hot_labels() {
        let ds = dataset();
        let pool = identity_pool(&ds, Split::Train);
        let mut rng = stream(4);
        let cfg = TaskConfig {
            way: 5,
            shot: 1,
            query: 15,
            split: Split::Train,
            forbid_shared_base: false,
        };
        let ep = sample_episode(&ds, &pool, &cfg, &AugParams::default(), &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        for li in ep.support.iter().chain(&ep.query) {
            assert!(li.label.is_simplex());
            assert_eq!(li.label.0.iter().filter(|&&w| w == 1.0).count(), 1);
        }
    }

    #[test]
    fn episode_insufficient_images_error() {
        let ds = generate_synthetic(&SyntheticSpec {
            train_classes: 5,
            val_classes: 1,
            test_classes: 1,
            images_per_class: 3,
            channels: 1,
            height: 4,
            width: 4,
            seed: 0,
        })
        .unwrap();
        let pool = identity_pool(&ds, Split::Train);
        let mut rng = stream(5);
        let cfg = TaskConfig {
            way: 5,
            shot: 1,
            query: 15,
            split: Split::Train,
            forbid_shared_base: false,
        };
        match sample_episode(&ds, &pool, &cfg, &AugParams::default(), &mut rng) {
            Err(Error::InsufficientImages { .. }) => {}
            other => panic!("expected insufficient-images, got {other:?}"),
        }
    }

    #[test]
    fn episode_sampling_is_deterministic() {
        let ds = dataset();
        let pool = identity_pool(&ds, Split::Train);
        let run = || {
            let mut rng = stream(6);
            sample_episode(&ds, &pool, &cfg(), &AugParams::default(), &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.support.iter().zip(&b.support) {
            assert_eq!(x.image.data, y.image.data);
        }
        for (x, y) in a.query.iter().zip(&b.query) {
            assert_eq!(x.image.data, y.image.data);
        }
        assert_eq!(a.classes, b.classes);
    }

    #[test]
    fn support_and_query_are_disjoint_per_class() {
        // Identity classes: raw bytes of support images must differ from all
        // query images of the same slot (sampling without replacement).
        let ds = dataset();
        let pool = identity_pool(&ds, Split::Train);
        for i in 0..20 {
            let mut rng = stream(100 + i);
            let ep = sample_episode(&ds, &pool, &cfg(), &AugParams::default(), &mut rng).unwrap();
            for (si, s) in ep.support.iter().enumerate() {
                for q in &ep.query {
                    if s.label == q.label {
                        assert_ne!(s.image.data, q.image.data, "episode {i} slot {si}");
                    }
                }
            }
        }
    }

    // -- descriptors ------------------------------------------------------------

    #[test]
    fn empty_descriptor_is_identity() {
        let ds = dataset();
        let pool = identity_pool(&ds, Split::Train);
        let mut rng = stream(7);
        let ep = sample_episode(&ds, &pool, &cfg(), &AugParams::default(), &mut rng).unwrap();
        let mut rng2 = stream(8);
        let out = apply_descriptor(
            &ep,
            &AugmentationDescriptor::identity(),
            &AugParams::default(),
            &mut rng2,
        )
        .unwrap();
        for (a, b) in ep.support.iter().zip(&out.support) {
            assert_eq!(a.image.data, b.image.data);
        }
        for (a, b) in ep.query.iter().zip(&out.query) {
            assert_eq!(a.image.data, b.image.data);
        }
    }

    #[test]
    fn query_cutmix_leaves_support_untouched() {
        let ds = dataset();
        let pool = identity_pool(&ds, Split::Train);
        let d = AugmentationDescriptor {
            entries: vec![DescriptorEntry::new(Mode::Query, Technique::Cutmix)],
        };
        let mut rng = stream(9);
        let ep = sample_episode(&ds, &pool, &cfg(), &AugParams::default(), &mut rng).unwrap();
        let mut rng2 = stream(10);
        let out = apply_descriptor(&ep, &d, &AugParams::default(), &mut rng2).unwrap();
        assert_eq!(out.query.len(), ep.query.len());
        for (a, b) in ep.support.iter().zip(&out.support) {
            assert_eq!(a.image.data, b.image.data, "support must be bit-identical");
        }
        for q in &out.query {
            assert!(q.label.is_simplex());
            let nonzero = q.label.0.iter().filter(|&&w| w > 0.0).count();
            assert!(nonzero <= 2, "cutmix mixes at most two labels");
        }
    }

    #[test]
    fn shot_hflip_doubles_support() {
        let ds = dataset();
        let pool = identity_pool(&ds, Split::Train);
        let d = AugmentationDescriptor {
            entries: vec![DescriptorEntry::new(Mode::Shot, Technique::Hflip)],
        };
        let mut rng = stream(11);
        let ep = sample_episode(&ds, &pool, &cfg(), &AugParams::default(), &mut rng).unwrap();
        let mut rng2 = stream(12);
        let out = apply_descriptor(&ep, &d, &AugParams::default(), &mut rng2).unwrap();
        assert_eq!(out.support.len(), 10);
        assert_eq!(out.query.len(), ep.query.len());
        for (i, orig) in ep.support.iter().enumerate() {
            let copy = &out.support[5 + i];
            assert_eq!(copy.image.data, imgaug::hflip(&orig.image).data);
            assert_eq!(copy.label, orig.label);
        }
        // Queries untouched by shot augmentation.
        for (a, b) in ep.query.iter().zip(&out.query) {
            assert_eq!(a.image.data, b.image.data);
        }
    }

    #[test]
    fn baseline_descriptor_shape() {
        let d = baseline_descriptor();
        assert!(d
            .entries
            .iter()
            .all(|e| matches!(e.mode, Mode::Support | Mode::Query)));
        let ds = dataset();
        let pool = identity_pool(&ds, Split::Train);
        let mut rng = stream(13);
        let ep = sample_episode(&ds, &pool, &cfg(), &AugParams::default(), &mut rng).unwrap();
        let mut rng2 = stream(14);
        let out = apply_descriptor(&ep, &d, &AugParams::default(), &mut rng2).unwrap();
        assert_eq!(out.support.len(), ep.support.len());
        assert_eq!(out.query.len(), ep.query.len());
    }

    #[test]
    fn baseline_with_identity_draws_is_identity() {
        // Forced identity draws: crop offset (pad, pad), no flip, unit factors.
        let ds = dataset();
        let pool = identity_pool(&ds, Split::Train);
        let mut rng = stream(15);
        let ep = sample_episode(&ds, &pool, &cfg(), &AugParams::default(), &mut rng).unwrap();
        let img = &ep.support[0].image;
        let cropped = imgaug::crop_with_offset(img, 4, 4, 4);
        let jittered = imgaug::color_jitter_with_factors(&cropped, 1.0, 1.0, 1.0);
        assert_eq!(jittered.data, img.data);
    }

    #[test]
    fn two_task_entries_rejected() {
        let d = AugmentationDescriptor {
            entries: vec![
                DescriptorEntry::new(Mode::Task, Technique::Rotation),
                DescriptorEntry::new(Mode::Task, Technique::Mixup),
            ],
        };
        assert!(d.validate().is_err());
    }

    #[test]
    fn invalid_mode_technique_combo_rejected() {
        let d = AugmentationDescriptor {
            entries: vec![DescriptorEntry::new(Mode::Shot, Technique::Cutmix)],
        };
        match d.validate() {
            Err(Error::UnknownTechnique { .. }) => {}
            other => panic!("expected unknown-technique, got {other:?}"),
        }
    }

    // -- presets ------------------------------------------------------------

    #[test]
    fn preset_sizes() {
        assert_eq!(preset_pool("medium").unwrap().descriptors.len(), 6);
        assert_eq!(preset_pool("large").unwrap().descriptors.len(), 10);
        assert_eq!(preset_pool("single").unwrap().descriptors.len(), 6);
        assert_eq!(preset_pool("cutmix-only").unwrap().descriptors.len(), 6);
        assert!(preset_pool("huge").is_err());
    }

    #[test]
    fn presets_use_only_implemented_techniques() {
        for name in ["single", "medium", "large", "cutmix-only"] {
            let pool = preset_pool(name).unwrap();
            for d in &pool.descriptors {
                d.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            }
        }
    }

    #[test]
    fn descriptor_json_round_trip() {
        let pool = preset_pool("large").unwrap();
        let json = serde_json::to_string(&pool.descriptors).unwrap();
        let back: Vec<AugmentationDescriptor> = serde_json::from_str(&json).unwrap();
        assert_eq!(pool.descriptors, back);
    }

    #[test]
    fn forbid_shared_base_is_enforced() {
        let ds = dataset();
        let mut rng = stream(16);
        let pool = build_class_pool(&ds, Some(TaskTechnique::LargeRotation), &mut rng).unwrap();
        let mut cfg = cfg();
        cfg.forbid_shared_base = true;
        cfg.way = 8; // every base class must appear exactly once
        for i in 0..10 {
            let mut ep_rng = stream(200 + i);
            let ep = sample_episode(&ds, &pool, &cfg, &AugParams::default(), &mut ep_rng).unwrap();
            let mut bases = std::collections::HashSet::new();
            for vc in &ep.classes {
                assert!(bases.insert(vc.base), "shared base in episode {i}");
            }
        }
    }

    #[test]
    fn shared_base_allowed_by_default() {
        // With rotation task augmentation and way close to pool size, some
        // episode must contain two virtual classes over one base.
        let ds = dataset();
        let mut rng = stream(17);
        let pool = build_class_pool(&ds, Some(TaskTechnique::LargeRotation), &mut rng).unwrap();
        let mut cfg = cfg();
        cfg.way = 16;
        let mut saw_shared = false;
        for i in 0..20 {
            let mut ep_rng = stream(300 + i);
            let ep = sample_episode(&ds, &pool, &cfg, &AugParams::default(), &mut ep_rng).unwrap();
            let mut bases = std::collections::HashSet::new();
            if ep.classes.iter().any(|vc| !bases.insert(vc.base)) {
                saw_shared = true;
                break;
            }
        }
        assert!(saw_shared);
    }
}
