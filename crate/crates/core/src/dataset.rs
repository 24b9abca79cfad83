//! Synthetic lesion images with weak labels and held-out segmentations.
//!
//! Label 0 images are background texture only. Label 1 images carry smooth
//! disk-shaped blobs of moderate contrast; label 2 images carry at least one
//! irregular star-shaped blob of higher contrast.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "masd-dataset";
const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    /// Labels 1 and 2 are positive.
    Lesion,
    /// Only label 2 is positive.
    Malignant,
}

impl std::str::FromStr for Problem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lesion" => Ok(Problem::Lesion),
            "malignant" => Ok(Problem::Malignant),
            _ => Err(Error::Config(format!("unknown problem `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobKind {
    Benign,
    Malignant,
}

pub fn binarize_label(y: u8, problem: Problem) -> Result<u8> {
    match (y, problem) {
        (0, _) => Ok(0),
        (1, Problem::Lesion) => Ok(1),
        (1, Problem::Malignant) => Ok(0),
        (2, _) => Ok(1),
        _ => Err(Error::Contract(format!("label {y} is not in {{0, 1, 2}}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fractions of labels 0, 1 and 2 within every split.
    pub proportions: [f64; 3],
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub background: f64,
    pub noise_std: f64,
    pub benign_contrast: f64,
    pub malignant_contrast: f64,
    /// Number of star arms of a malignant blob.
    pub star_points: usize,
    /// Relative radial modulation of a malignant blob, in `[0, 1)`.
    pub star_depth: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train: 200,
            val: 40,
            test: 80,
            proportions: [0.5, 0.25, 0.25],
            blobs_min: 1,
            blobs_max: 2,
            radius_min: 3.0,
            radius_max: 6.0,
            background: 0.2,
            noise_std: 0.05,
            benign_contrast: 0.4,
            malignant_contrast: 0.7,
            star_points: 5,
            star_depth: 0.4,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.image_size < 4 {
            return bad(format!("image_size {} is below 4", self.image_size));
        }
        if self.proportions.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad(format!("proportions {:?} must be non-negative", self.proportions));
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("proportions sum to {sum}, not 1"));
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return bad(format!("blob count range [{}, {}] is empty or zero", self.blobs_min, self.blobs_max));
        }
        if !(self.radius_min >= 2.0 && self.radius_max >= self.radius_min) {
            return bad(format!(
                "radius range [{}, {}] must satisfy 2 <= min <= max",
                self.radius_min, self.radius_max
            ));
        }
        if !(0.0..1.0).contains(&self.star_depth) || self.star_points < 2 {
            return bad("star_depth must be in [0, 1) and star_points >= 2".into());
        }
        if self.noise_std < 0.0 || self.benign_contrast <= 0.0 || self.malignant_contrast <= 0.0 {
            return bad("noise must be >= 0 and contrasts > 0".into());
        }
        // Every blob must fit entirely inside the image.
        let extent = self.radius_max * (1.0 + self.star_depth);
        if 2.0 * extent.ceil() + 1.0 > self.image_size as f64 {
            return bad(format!(
                "a blob of radius {} (extent {extent:.2}) cannot fit in a {n}x{n} image",
                self.radius_max,
                n = self.image_size
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub patient_id: String,
    pub side: Side,
    pub split: Split,
    pub label: u8,
    /// `[1, H, W]`
    pub x: Tensor<f32>,
    /// Binary `[1, H, W]` masks, one per blob; evaluation only.
    pub segmentations: Vec<Tensor<f32>>,
    pub seg_kinds: Vec<BlobKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub patient_id: String,
    pub label: u8,
    pub side: Side,
    pub split: Split,
    pub x_path: String,
    pub seg_paths: Vec<String>,
    pub seg_kinds: Vec<BlobKind>,
    /// Reserved for a T1-weighted companion image; never written.
    pub t1_path: Option<String>,
    /// SHA-256 of each referenced file, keyed by relative path.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn image_size(&self) -> usize {
        self.manifest.generator.image_size
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    kind: BlobKind,
    phase: f64,
}

impl Blob {
    fn extent(&self, depth: f64) -> f64 {
        match self.kind {
            BlobKind::Benign => self.radius,
            BlobKind::Malignant => self.radius * (1.0 + depth),
        }
    }

    fn contains(&self, y: f64, x: f64, cfg: &GeneratorConfig) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let d = (dy * dy + dx * dx).sqrt();
        match self.kind {
            BlobKind::Benign => d <= self.radius,
            BlobKind::Malignant => {
                let theta = dy.atan2(dx);
                let r = self.radius * (1.0 + cfg.star_depth * (cfg.star_points as f64 * theta + self.phase).cos());
                d <= r
            }
        }
    }
}

fn place_blobs(cfg: &GeneratorConfig, kinds: &[BlobKind], rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    let size = cfg.image_size as f64;
    let mut blobs: Vec<Blob> = Vec::new();
    for &kind in kinds {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let radius = if cfg.radius_max > cfg.radius_min {
                rng.random_range(cfg.radius_min..=cfg.radius_max)
            } else {
                cfg.radius_min
            };
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut b = Blob {
                cy: 0.0,
                cx: 0.0,
                radius,
                kind,
                phase,
            };
            let e = b.extent(cfg.star_depth).ceil();
            let (lo, hi) = (e, size - 1.0 - e);
            b.cy = rng.random_range(lo..=hi);
            b.cx = rng.random_range(lo..=hi);
            // Separate blobs by a gap so each segmentation is its own component.
            let clear = blobs.iter().all(|o| {
                let d = ((o.cy - b.cy).powi(2) + (o.cx - b.cx).powi(2)).sqrt();
                d > o.extent(cfg.star_depth) + b.extent(cfg.star_depth) + 2.0
            });
            if clear {
                blobs.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "cannot place {} non-overlapping blobs in a {}x{} image",
                kinds.len(),
                cfg.image_size,
                cfg.image_size
            )));
        }
    }
    Ok(blobs)
}

fn render(cfg: &GeneratorConfig, label: u8, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<Tensor<f32>>, Vec<BlobKind>)> {
    let n = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let mut img: Vec<f64> = (0..n * n).map(|_| cfg.background + noise.sample(rng)).collect();

    let kinds: Vec<BlobKind> = if label == 0 {
        Vec::new()
    } else {
        let count = rng.random_range(cfg.blobs_min..=cfg.blobs_max);
        (0..count)
            .map(|i| match label {
                1 => BlobKind::Benign,
                // The first blob of a malignant image is always malignant.
                _ if i == 0 => BlobKind::Malignant,
                _ if rng.random_bool(0.5) => BlobKind::Malignant,
                _ => BlobKind::Benign,
            })
            .collect()
    };
    let blobs = place_blobs(cfg, &kinds, rng)?;

    let mut segs = Vec::with_capacity(blobs.len());
    for b in &blobs {
        let contrast = match b.kind {
            BlobKind::Benign => cfg.benign_contrast,
            BlobKind::Malignant => cfg.malignant_contrast,
        };
        let mut seg = vec![0.0f32; n * n];
        for i in 0..n {
            for j in 0..n {
                if b.contains(i as f64, j as f64, cfg) {
                    seg[i * n + j] = 1.0;
                    img[i * n + j] += contrast;
                }
            }
        }
        segs.push(Tensor::new(vec![1, n, n], seg)?);
    }
    let x = Tensor::new(vec![1, n, n], img.into_iter().map(|v| v as f32).collect())?;
    Ok((x, segs, kinds))
}

fn label_quota(cfg: &GeneratorConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n0 = (cfg.proportions[0] * count as f64).round() as usize;
    let n1 = ((cfg.proportions[1] * count as f64).round() as usize).min(count - n0.min(count));
    let n0 = n0.min(count);
    let n2 = count - n0 - n1;
    let mut labels: Vec<u8> = std::iter::repeat_n(0, n0)
        .chain(std::iter::repeat_n(1, n1))
        .chain(std::iter::repeat_n(2, n2))
        .collect();
    labels.shuffle(rng);
    labels
}

fn x_rel(id: &str) -> String {
    format!("tensors/{id}_x.mast")
}

fn seg_rel(id: &str, j: usize) -> String {
    format!("tensors/{id}_seg{j}.mast")
}

fn entry_for(s: &Sample) -> ManifestEntry {
    let mut checksums = BTreeMap::new();
    let x_path = x_rel(&s.id);
    checksums.insert(x_path.clone(), sha256_hex(&s.x.to_mast_bytes()));
    let seg_paths: Vec<String> = (0..s.segmentations.len()).map(|j| seg_rel(&s.id, j)).collect();
    for (p, t) in seg_paths.iter().zip(&s.segmentations) {
        checksums.insert(p.clone(), sha256_hex(&t.to_mast_bytes()));
    }
    ManifestEntry {
        id: s.id.clone(),
        patient_id: s.patient_id.clone(),
        label: s.label,
        side: s.side,
        split: s.split,
        x_path,
        seg_paths,
        seg_kinds: s.seg_kinds.clone(),
        t1_path: None,
        checksums,
    }
}

/// Deterministic in `cfg.seed`. Samples are consecutive `(patient, side)`
/// pairs, so both sides of a patient always share a split.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::new();
    for split in Split::ALL {
        let count = cfg.count(split);
        let labels = label_quota(cfg, count, &mut rng);
        for (i, &label) in labels.iter().enumerate() {
            let patient_id = format!("{}-p{:04}", split.as_str(), i / 2);
            let side = if i % 2 == 0 { Side::Left } else { Side::Right };
            let id = format!("{patient_id}-{}", if side == Side::Left { "l" } else { "r" });
            let (x, segmentations, seg_kinds) = render(cfg, label, &mut rng)?;
            samples.push(Sample {
                id,
                patient_id,
                side,
                split,
                label,
                x,
                segmentations,
                seg_kinds,
            });
        }
    }
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        version: VERSION,
        seed: cfg.seed,
        generator: cfg.clone(),
        samples: samples.iter().map(entry_for).collect(),
    };
    Ok(Dataset { manifest, samples })
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    for (s, e) in dataset.samples.iter().zip(&dataset.manifest.samples) {
        s.x.save_mast(&dir.join(&e.x_path))?;
        for (t, p) in s.segmentations.iter().zip(&e.seg_paths) {
            t.save_mast(&dir.join(p))?;
        }
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn load_checked(dir: &Path, rel: &str, entry: &ManifestEntry, manifest: &Path) -> Result<Tensor<f32>> {
    let full: PathBuf = dir.join(rel);
    let field = format!("samples[{}].{rel}", entry.id);
    let bytes = fs::read(&full)
        .map_err(|e| Error::format(manifest, field.clone(), format!("cannot read {}: {e}", full.display())))?;
    match entry.checksums.get(rel) {
        None => return Err(Error::format(manifest, field, "no checksum recorded")),
        Some(sum) if *sum != sha256_hex(&bytes) => {
            return Err(Error::format(manifest, field, format!("checksum mismatch for {}", full.display())))
        }
        Some(_) => {}
    }
    Tensor::from_mast_bytes(&bytes, &full)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, "manifest", e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::format(&path, "format", format!("expected `{FORMAT}`")));
    }
    if manifest.version != VERSION {
        return Err(Error::format(&path, "version", format!("unsupported version {}", manifest.version)));
    }
    if manifest.seed != manifest.generator.seed {
        return Err(Error::format(&path, "seed", "differs from generator.seed"));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let x = load_checked(dir, &e.x_path, e, &path)?;
        let segmentations = e
            .seg_paths
            .iter()
            .map(|p| load_checked(dir, p, e, &path))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id: e.id.clone(),
            patient_id: e.patient_id.clone(),
            side: e.side,
            split: e.split,
            label: e.label,
            x,
            segmentations,
            seg_kinds: e.seg_kinds.clone(),
        });
    }
    let ds = Dataset { manifest, samples };
    validate_dataset(&ds).map_err(|e| match e {
        Error::Contract(m) => Error::format(&path, "samples", m),
        other => other,
    })?;
    Ok(ds)
}

/// Split disjointness by patient, unique ids, and label/segmentation consistency.
pub fn validate_dataset(ds: &Dataset) -> Result<()> {
    let mut patient_split: BTreeMap<&str, Split> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    for s in &ds.samples {
        if !ids.insert(s.id.as_str()) {
            return Err(Error::Contract(format!("duplicate sample id `{}`", s.id)));
        }
        if let Some(prev) = patient_split.insert(&s.patient_id, s.split) {
            if prev != s.split {
                return Err(Error::Contract(format!(
                    "patient `{}` appears in both {} and {}",
                    s.patient_id,
                    prev.as_str(),
                    s.split.as_str()
                )));
            }
        }
        check_sample(s)?;
    }
    Ok(())
}

fn check_sample(s: &Sample) -> Result<()> {
    let bad = |m: String| Err(Error::Contract(format!("sample `{}`: {m}", s.id)));
    if s.x.rank() != 3 || s.x.shape()[0] != 1 {
        return bad(format!("image shape {:?} is not [1, H, W]", s.x.shape()));
    }
    if s.label > 2 {
        return bad(format!("label {} is not in {{0, 1, 2}}", s.label));
    }
    if (s.label == 0) != s.segmentations.is_empty() {
        return bad(format!("label {} with {} segmentations", s.label, s.segmentations.len()));
    }
    if s.seg_kinds.len() != s.segmentations.len() {
        return bad("seg_kinds and segmentations differ in length".into());
    }
    for seg in &s.segmentations {
        if seg.shape() != s.x.shape() {
            return bad(format!("segmentation shape {:?} differs from image {:?}", seg.shape(), s.x.shape()));
        }
        if seg.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return bad("segmentation is not binary".into());
        }
        if !seg.data().contains(&1.0) {
            return bad("segmentation has zero area".into());
        }
    }
    if s.label == 2 && !s.seg_kinds.contains(&BlobKind::Malignant) {
        return bad("label 2 without a malignant blob".into());
    }
    if s.label == 1 && s.seg_kinds.contains(&BlobKind::Malignant) {
        return bad("label 1 with a malignant blob".into());
    }
    Ok(())
}

/// Stacks sample images into an `[N, 1, H, W]` batch.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let parts: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.x).collect();
    Tensor::stack(&parts)
}
