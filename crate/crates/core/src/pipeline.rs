//! Experiment configuration, the run ledger, and the stage commands driven by the CLI.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dataset::{generate_dataset, read_dataset, write_dataset, Dataset, GeneratorConfig, Problem, Split};
use crate::error::{Error, Result};
use crate::eval::{emit_results, froc_curve, FrocCurve, Prediction, Scenario, DEFAULT_DICE_MIN};
use crate::loss::LossWeights;
use crate::network::{load_checkpoint, save_checkpoint, DecoderConfig, EncoderConfig, ModelCheckpoint};
use crate::optim::AdamConfig;
use crate::tensor::Tensor;
use crate::train::{
    infer, mask_statistics, train_classifier_observed, train_saliency_observed, EpochRecord, MaskStats, TrainConfig,
    TrainReport,
};

pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub checkpoint_every: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    /// Propagated to data generation and both training phases.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `generator.seed` is ignored in favour of `seed`.
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub classifier: PhaseConfig,
    pub saliency: PhaseConfig,
    /// Loss weights; the problem's published preset when absent.
    pub weights: Option<LossWeights>,
    /// Number of evenly spaced thresholds in `[0, 1]`.
    pub tau_steps: usize,
    pub scenarios: Vec<Scenario>,
    pub dice_min: f32,
    /// Split the `infer` stage runs on.
    pub infer_split: Split,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: Problem::Lesion,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            generator: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            classifier: PhaseConfig::default(),
            saliency: PhaseConfig {
                optimizer: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                ..PhaseConfig::default()
            },
            weights: None,
            tau_steps: 101,
            scenarios: vec![Scenario::All, Scenario::CPlus],
            dice_min: DEFAULT_DICE_MIN,
            infer_split: Split::Test,
        }
    }
}

fn field_err(field: &str, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {detail}"))
}

/// Prefixes a nested validation error with the config field it came from.
fn nested(field: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config(m) if m.starts_with(field) => Error::Config(m),
        Error::Config(m) => field_err(field, m),
        other => field_err(field, other),
    }
}

impl ExperimentConfig {
    /// Parses JSON, applies `key=value` overrides on dotted paths, and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let base: ExperimentConfig =
            serde_path_to_error::deserialize(de).map_err(|e| field_err(&e.path().to_string(), e.inner()))?;
        let cfg = if overrides.is_empty() {
            base
        } else {
            let mut v = serde_json::to_value(&base).expect("config serializes");
            for o in overrides {
                apply_override(&mut v, o)?;
            }
            serde_path_to_error::deserialize(v).map_err(|e| field_err(&e.path().to_string(), e.inner()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.weights.unwrap_or(match self.problem {
            Problem::Lesion => LossWeights::lesion(),
            Problem::Malignant => LossWeights::malignant(),
        })
    }

    pub fn taus(&self) -> Vec<f32> {
        let n = self.tau_steps;
        (0..n).map(|i| (i as f64 / (n - 1) as f64) as f32).collect()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            ..self.generator.clone()
        }
    }

    pub fn train_config(&self, phase: &PhaseConfig) -> TrainConfig {
        TrainConfig {
            problem: self.problem,
            epochs: phase.epochs,
            batch_size: phase.batch_size,
            optimizer: phase.optimizer,
            weights: self.loss_weights(),
            seed: self.seed,
            checkpoint_every: phase.checkpoint_every,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Full schema validation, run before any stage starts.
    pub fn validate(&self) -> Result<()> {
        self.generator_config().validate().map_err(nested("generator"))?;
        self.encoder.validate().map_err(nested("encoder"))?;
        self.decoder.validate(&self.encoder).map_err(nested("decoder"))?;
        let total = self.encoder.total_downsample();
        if !self.generator.image_size.is_multiple_of(total) {
            return Err(field_err(
                "generator.image_size",
                format!("{} is not divisible by the encoder downsampling {total}", self.generator.image_size),
            ));
        }
        if let Some(w) = &self.weights {
            w.validate().map_err(nested("weights"))?;
        }
        for (name, p) in [("classifier", &self.classifier), ("saliency", &self.saliency)] {
            if !(p.optimizer.lr > 0.0) {
                return Err(field_err(&format!("{name}.optimizer.lr"), "must be > 0"));
            }
            self.train_config(p).validate().map_err(nested(name))?;
        }
        if self.tau_steps < 2 {
            return Err(field_err("tau_steps", "must be >= 2"));
        }
        if self.scenarios.is_empty() {
            return Err(field_err("scenarios", "must not be empty"));
        }
        if !(self.dice_min > 0.0 && self.dice_min <= 1.0) {
            return Err(field_err("dice_min", "must be in (0, 1]"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(field_err("output_dir", "must not be empty"));
        }
        Ok(())
    }
}

/// Sets `a.b.c=value` on an existing key; `value` is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| field_err(key, "no such field"))?;
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainClassifier,
    TrainSaliency,
    Infer,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainClassifier => "train-classifier",
            Stage::TrainSaliency => "train-saliency",
            Stage::Infer => "infer",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Output directory relative to the run directory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenData => "data",
            Stage::TrainClassifier => "classifier",
            Stage::TrainSaliency => "masd",
            Stage::Infer => "predictions",
            Stage::Evaluate => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_digest: String,
    pub output_digest: String,
    pub completed_unix: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLedger {
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunLedger {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LEDGER_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::format(&path, "ledger", e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(LEDGER_FILE);
        let text = serde_json::to_string_pretty(self).expect("ledger serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// SHA-256 over every file below `dir`, keyed by sorted relative path.
/// `timing.json` files hold wall-clock measurements and are left out.
pub fn digest_dir(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let p = entry.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else if entry.file_name() != TIMING_FILE {
                let rel = p.strip_prefix(base).expect("below base").to_string_lossy().replace('\\', "/");
                out.push((rel, p));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, p) in files {
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn digest_value(v: &Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Line-oriented JSON events on standard error.
#[derive(Debug, Clone, Copy, Default)]
pub struct Logger {
    pub quiet: bool,
}

impl Logger {
    pub fn event(&self, stage: &str, event: &str, fields: Value) {
        if self.quiet {
            return;
        }
        let mut obj = json!({ "stage": stage, "event": event });
        if let (Value::Object(o), Value::Object(f)) = (&mut obj, fields) {
            o.extend(f);
        }
        eprintln!("{obj}");
    }

    fn epoch(&self, stage: &str, r: &EpochRecord) {
        self.event(stage, "epoch", serde_json::to_value(r).expect("record serializes"));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub skipped: bool,
    pub output_digest: String,
}

/// One experiment rooted at `run_dir`.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
    pub log: Logger,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEntry {
    pub id: String,
    pub prob: f32,
    pub positive: bool,
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionsFile {
    pub split: Split,
    pub eer_threshold: f64,
    pub entries: Vec<PredictionEntry>,
}

pub fn read_predictions(dir: &Path) -> Result<(PredictionsFile, Vec<Prediction>)> {
    let path = dir.join("predictions.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: PredictionsFile =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, "predictions", e.to_string()))?;
    let preds = file
        .entries
        .iter()
        .map(|e| {
            let mask = e.mask_path.as_ref().map(|p| Tensor::load_mast(&dir.join(p))).transpose()?;
            if e.positive != mask.is_some() {
                return Err(Error::format(&path, format!("entries[{}]", e.id), "mask present iff positive"));
            }
            Ok(Prediction {
                id: e.id.clone(),
                prob: e.prob,
                positive: e.positive,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((file, preds))
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out_override: Option<PathBuf>, log: Logger) -> Result<Self> {
        config.validate()?;
        let run_dir = out_override.unwrap_or_else(|| config.output_dir.clone());
        Ok(Self { config, run_dir, log })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.dir())
    }

    /// Output digest of a completed prerequisite, or an error naming it.
    fn require(&self, ledger: &RunLedger, stage: Stage) -> Result<String> {
        let missing = || Error::Prerequisite {
            stage: stage.name().to_string(),
        };
        let rec = ledger.stages.get(stage.name()).ok_or_else(missing)?;
        let dir = self.stage_dir(stage);
        if !dir.exists() {
            return Err(missing());
        }
        let digest = digest_dir(&dir)?;
        if digest != rec.output_digest {
            return Err(Error::Contract(format!(
                "outputs of `{}` changed since it completed; rerun it",
                stage.name()
            )));
        }
        Ok(digest)
    }

    /// Runs `body` unless the ledger shows identical inputs and intact outputs.
    fn run_stage(
        &self,
        stage: Stage,
        out_dir: &Path,
        ledger_key: &str,
        inputs: Value,
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<StageOutcome> {
        let mut ledger = RunLedger::load(&self.run_dir)?;
        let input_digest = digest_value(&inputs);
        if let Some(rec) = ledger.stages.get(ledger_key) {
            if rec.input_digest == input_digest && out_dir.exists() && digest_dir(out_dir)? == rec.output_digest {
                self.log.event(ledger_key, "skipped", json!({ "reason": "input digest unchanged", "input_digest": input_digest }));
                return Ok(StageOutcome {
                    stage: stage.name(),
                    skipped: true,
                    output_digest: rec.output_digest.clone(),
                });
            }
        }
        self.log.event(ledger_key, "start", json!({ "input_digest": input_digest }));
        fresh_dir(out_dir)?;
        body(out_dir)?;
        let output_digest = digest_dir(out_dir)?;
        ledger.stages.insert(
            ledger_key.to_string(),
            StageRecord {
                input_digest,
                output_digest: output_digest.clone(),
                completed_unix: now_unix(),
            },
        );
        ledger.save(&self.run_dir)?;
        self.log.event(ledger_key, "done", json!({ "output_digest": output_digest }));
        Ok(StageOutcome {
            stage: stage.name(),
            skipped: false,
            output_digest,
        })
    }

    fn dataset(&self) -> Result<Dataset> {
        read_dataset(&self.stage_dir(Stage::GenData))
    }

    pub fn gen_data(&self) -> Result<StageOutcome> {
        let g = self.config.generator_config();
        let inputs = json!({ "stage": "gen-data", "generator": g });
        self.run_stage(Stage::GenData, &self.stage_dir(Stage::GenData), "gen-data", inputs, |dir| {
            write_dataset(&generate_dataset(&g)?, dir)
        })
    }

    pub fn train_classifier(&self) -> Result<StageOutcome> {
        let ledger = RunLedger::load(&self.run_dir)?;
        let data = self.require(&ledger, Stage::GenData)?;
        let tc = self.config.train_config(&self.config.classifier);
        let inputs = json!({ "stage": "train-classifier", "data": data, "train": tc });
        let log = self.log;
        self.run_stage(Stage::TrainClassifier, &self.stage_dir(Stage::TrainClassifier), "train-classifier", inputs, |dir| {
            let ds = self.dataset()?;
            let run = train_classifier_observed::<f32>(&ds, &tc, |r| log.epoch("train-classifier", r))?;
            save_checkpoint(&dir.join("checkpoint"), &run.checkpoint)?;
            for (epoch, params) in &run.snapshots {
                let mut snap = run.checkpoint.clone();
                snap.encoder = params.clone();
                snap.metadata.epoch = *epoch;
                save_checkpoint(&dir.join(format!("snapshots/epoch{epoch:04}")), &snap)?;
            }
            write_report(dir, &run.report)
        })
    }

    pub fn train_saliency(&self) -> Result<StageOutcome> {
        let ledger = RunLedger::load(&self.run_dir)?;
        let data = self.require(&ledger, Stage::GenData)?;
        let classifier = self.require(&ledger, Stage::TrainClassifier)?;
        let tc = self.config.train_config(&self.config.saliency);
        let inputs = json!({ "stage": "train-saliency", "data": data, "classifier": classifier, "train": tc });
        let out = self.stage_dir(Stage::TrainSaliency);
        self.saliency_into(&out, "train-saliency", inputs, &tc)
    }

    fn saliency_into(&self, out: &Path, key: &str, inputs: Value, tc: &TrainConfig) -> Result<StageOutcome> {
        let log = self.log;
        self.run_stage(Stage::TrainSaliency, out, key, inputs, |dir| {
            let ds = self.dataset()?;
            let cls: ModelCheckpoint<f32> = load_checkpoint(&self.stage_dir(Stage::TrainClassifier).join("checkpoint"))?;
            let run = train_saliency_observed(&ds, &cls, tc, |r| log.epoch(key, r))?;
            save_checkpoint(&dir.join("checkpoint"), &run.checkpoint)?;
            for (epoch, params) in &run.snapshots {
                let mut snap = run.checkpoint.clone();
                snap.decoder = Some(params.clone());
                snap.metadata.epoch = *epoch;
                save_checkpoint(&dir.join(format!("snapshots/epoch{epoch:04}")), &snap)?;
            }
            write_report(dir, &run.report)
        })
    }

    /// Predictions for `infer_split` from `checkpoint` (default: the trained model).
    pub fn infer(&self, checkpoint: Option<&Path>) -> Result<StageOutcome> {
        let ledger = RunLedger::load(&self.run_dir)?;
        let data = self.require(&ledger, Stage::GenData)?;
        let ckpt_dir = match checkpoint {
            Some(p) => p.to_path_buf(),
            None => {
                self.require(&ledger, Stage::TrainSaliency)?;
                self.stage_dir(Stage::TrainSaliency).join("checkpoint")
            }
        };
        let split = self.config.infer_split;
        let inputs = json!({ "stage": "infer", "data": data, "checkpoint": digest_dir(&ckpt_dir)?, "split": split });
        self.run_stage(Stage::Infer, &self.stage_dir(Stage::Infer), "infer", inputs, |dir| {
            let ds = self.dataset()?;
            let ckpt: ModelCheckpoint<f32> = load_checkpoint(&ckpt_dir)?;
            write_predictions(dir, &ds, &ckpt, split)
        })
    }

    /// FROC curves for every configured scenario.
    pub fn evaluate(&self, predictions: Option<&Path>) -> Result<StageOutcome> {
        let ledger = RunLedger::load(&self.run_dir)?;
        let data = self.require(&ledger, Stage::GenData)?;
        let pred_dir = match predictions {
            Some(p) => p.to_path_buf(),
            None => {
                self.require(&ledger, Stage::Infer)?;
                self.stage_dir(Stage::Infer)
            }
        };
        if !pred_dir.join("predictions.json").exists() {
            return Err(Error::Prerequisite { stage: "infer".into() });
        }
        let c = &self.config;
        let inputs = json!({
            "stage": "evaluate", "data": data, "predictions": digest_dir(&pred_dir)?,
            "problem": c.problem, "taus": c.taus(), "scenarios": c.scenarios, "dice_min": c.dice_min,
        });
        self.run_stage(Stage::Evaluate, &self.stage_dir(Stage::Evaluate), "evaluate", inputs, |dir| {
            let ds = self.dataset()?;
            evaluate_into(dir, &ds, &pred_dir, c, self.log)
        })
    }

    /// Baseline and term-disabled saliency runs with the same seed, each inferred and evaluated.
    pub fn ablate(&self, term: &str) -> Result<StageOutcome> {
        let ledger = RunLedger::load(&self.run_dir)?;
        let data = self.require(&ledger, Stage::GenData)?;
        let classifier = self.require(&ledger, Stage::TrainClassifier)?;
        let base = self.config.train_config(&self.config.saliency);
        let mut off = base.clone();
        match term {
            "tv" => off.weights.enable_tv = false,
            "area" => off.weights.enable_area = false,
            "preserve" => off.weights.enable_preserve = false,
            "destroy" => off.weights.enable_destroy = false,
            other => return Err(Error::Config(format!("unknown loss term `{other}` (tv|area|preserve|destroy)"))),
        }
        let key = format!("ablate-{term}");
        let inputs = json!({ "stage": key, "data": data, "classifier": classifier, "baseline": base, "ablated": off });
        let out = self.run_dir.join("ablate").join(term);
        let log = self.log;
        self.run_stage(Stage::TrainSaliency, &out, &key, inputs, |dir| {
            let ds = self.dataset()?;
            let cls: ModelCheckpoint<f32> = load_checkpoint(&self.stage_dir(Stage::TrainClassifier).join("checkpoint"))?;
            let split = self.config.infer_split;
            let mut summary = serde_json::Map::new();
            for (variant, tc) in [("baseline", &base), ("disabled", &off)] {
                let vdir = dir.join(variant);
                let run = train_saliency_observed(&ds, &cls, tc, |r| log.epoch(&key, r))?;
                save_checkpoint(&vdir.join("checkpoint"), &run.checkpoint)?;
                write_report(&vdir, &run.report)?;
                let pdir = vdir.join("predictions");
                fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
                write_predictions(&pdir, &ds, &run.checkpoint, split)?;
                let edir = vdir.join("eval");
                fs::create_dir_all(&edir).map_err(|e| Error::io(&edir, e))?;
                evaluate_into(&edir, &ds, &pdir, &self.config, log)?;
                let stats = mask_statistics(&run.checkpoint, &ds.split(split), self.config.problem)?;
                summary.insert(variant.into(), serde_json::to_value(stats).expect("stats serialize"));
            }
            write_json(&dir.join("summary.json"), &Value::Object(summary))
        })
    }
}

const TIMING_FILE: &str = "timing.json";

fn write_report(dir: &Path, report: &TrainReport) -> Result<()> {
    // Wall-clock time varies between runs; it goes to a separate file so that
    // stage digests depend only on the computation.
    let mut v = serde_json::to_value(report).expect("report serializes");
    if let Value::Object(o) = &mut v {
        o.remove("wall_clock_secs");
    }
    write_json(&dir.join("report.json"), &v)?;
    let timing = dir.join(TIMING_FILE);
    let t = json!({ "wall_clock_secs": report.wall_clock_secs });
    fs::write(&timing, t.to_string() + "\n").map_err(|e| Error::io(&timing, e))
}

fn write_predictions(dir: &Path, ds: &Dataset, ckpt: &ModelCheckpoint<f32>, split: Split) -> Result<()> {
    let samples = ds.split(split);
    let results = infer(ckpt, &samples)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (s, r) in samples.iter().zip(&results) {
        let mask_path = match &r.mask {
            Some(m) => {
                let rel = format!("masks/{}.mast", s.id);
                let p = dir.join(&rel);
                fs::create_dir_all(p.parent().expect("has parent")).map_err(|e| Error::io(dir, e))?;
                m.save_mast(&p)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(PredictionEntry {
            id: s.id.clone(),
            prob: r.prob,
            positive: r.positive,
            mask_path,
        });
    }
    let file = PredictionsFile {
        split,
        eer_threshold: ckpt.metadata.eer_threshold.expect("infer checked the threshold"),
        entries,
    };
    write_json(&dir.join("predictions.json"), &file)
}

fn evaluate_into(dir: &Path, ds: &Dataset, pred_dir: &Path, c: &ExperimentConfig, log: Logger) -> Result<()> {
    let (file, preds) = read_predictions(pred_dir)?;
    let samples = ds.split(file.split);
    let mut summary = serde_json::Map::new();
    for &scenario in &c.scenarios {
        match froc_curve(&preds, &samples, scenario, c.problem, &c.taus(), c.dice_min) {
            Ok(curve) => {
                emit_results(&curve, &dir.join(scenario.as_str()))?;
                summary.insert(scenario.as_str().into(), curve_summary(&curve));
            }
            Err(e @ Error::UndefinedRate(_)) => {
                log.event("evaluate", "undefined", json!({ "scenario": scenario.as_str(), "reason": e.to_string() }));
                summary.insert(scenario.as_str().into(), json!({ "undefined": e.to_string() }));
            }
            Err(e) => return Err(e),
        }
    }
    write_json(&dir.join("summary.json"), &Value::Object(summary))
}

fn curve_summary(curve: &FrocCurve) -> Value {
    json!({
        "points": curve.points.len(),
        "tpr_at_fpd_1": curve.tpr_at(1.0),
        "max_tpr": curve.points.iter().map(|p| p.tpr).fold(0.0f32, f32::max),
    })
}

/// Reads the mask statistics an ablation wrote.
pub fn read_ablation_summary(run_dir: &Path, term: &str) -> Result<(MaskStats, MaskStats)> {
    let path = run_dir.join("ablate").join(term).join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    #[derive(Deserialize)]
    struct S {
        baseline: MaskStats,
        disabled: MaskStats,
    }
    let s: S = serde_json::from_str(&text).map_err(|e| Error::format(&path, "summary", e.to_string()))?;
    Ok((s.baseline, s.disabled))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(ExperimentConfig::from_json("{}", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_field_is_named() {
        let err = ExperimentConfig::from_json(r#"{"classifier": {"epocs": 3}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("epocs"), "{err}");
    }

    #[test]
    fn wrong_type_names_the_path() {
        let err = ExperimentConfig::from_json(r#"{"saliency": {"batch_size": "x"}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("saliency.batch_size"), "{err}");
    }

    #[test]
    fn overrides_apply_on_dotted_paths() {
        let sets = vec!["classifier.epochs=3".to_string(), "problem=malignant".to_string()];
        let cfg = ExperimentConfig::from_json("{}", &sets).unwrap();
        assert_eq!(cfg.classifier.epochs, 3);
        assert_eq!(cfg.problem, Problem::Malignant);
        assert_eq!(cfg.loss_weights(), LossWeights::malignant());
        let err = ExperimentConfig::from_json("{}", &["classifier.nope=1".to_string()]).unwrap_err();
        assert!(err.to_string().contains("classifier.nope"), "{err}");
    }

    #[test]
    fn zero_learning_rate_rejected_by_schema() {
        let err = ExperimentConfig::from_json("{}", &["saliency.optimizer.lr=0".to_string()]).unwrap_err();
        assert!(err.to_string().contains("saliency.optimizer.lr"), "{err}");
    }

    #[test]
    fn taus_span_unit_interval() {
        let t = ExperimentConfig::default().taus();
        assert_eq!((t.len(), t[0], t[100]), (101, 0.0, 1.0));
        assert_eq!(t[50], 0.5);
    }
}
