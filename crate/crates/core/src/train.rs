//! Classifier training, frozen-encoder mask training, and gated inference.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{batch_images, binarize_label, Dataset, Problem, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::{auc, compute_eer};
use crate::loss::{total_loss, LossBreakdown, LossWeights};
use crate::network::{
    decoder_forward, encoder_forward, init_params, CheckpointMetadata, DecoderConfig, EncoderConfig, FrozenEncoder,
    ModelCheckpoint, Norm, ParamStore,
};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Samples per forward pass when no gradients are needed.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub problem: Problem,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Keep a snapshot every this many epochs; 0 disables snapshots.
    pub checkpoint_every: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            problem: Problem::Lesion,
            epochs: 30,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            weights: LossWeights::lesion(),
            seed: 0,
            checkpoint_every: 0,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Structural checks. The learning rate may be 0 here; callers that
    /// require progress enforce `lr > 0` themselves.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} is below 2 (train-mode batch norm needs two samples)",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Classifier,
    Saliency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
    pub val_breakdown: Option<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub eer_threshold: Option<f64>,
    pub eer: Option<f64>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Equality on everything but wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.phase == other.phase
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.eer_threshold == other.eer_threshold
            && self.eer == other.eer
    }
}

/// Parameters after a given epoch, kept when `checkpoint_every` is set.
pub type Snapshots<T> = Vec<(usize, ParamStore<T>)>;

fn labels(samples: &[&Sample], problem: Problem) -> Result<Vec<u8>> {
    samples.iter().map(|s| binarize_label(s.label, problem)).collect()
}

/// Derived seed for one random stream: 1 encoder init, 2 classifier shuffling,
/// 3 decoder init, 4 saliency shuffling.
pub fn init_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

/// Shuffled index batches; a trailing batch of one joins its predecessor.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

fn gather<'a>(samples: &[&'a Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| samples[i]).collect()
}

fn images<T: Real>(samples: &[&Sample]) -> Result<Tensor<T>> {
    Ok(batch_images(samples)?.cast())
}

fn check_two_classes(y: &[u8], what: &str) -> Result<()> {
    if !y.contains(&0) || !y.contains(&1) {
        return Err(Error::TrainingDegenerate(format!("{what} split contains a single class")));
    }
    Ok(())
}

/// Eval-mode positive probabilities.
pub fn classifier_probabilities<T: Real>(
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
    samples: &[&Sample],
) -> Result<Vec<f32>> {
    let enc = FrozenEncoder::new(cfg, params);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let x = tape.constant(images(chunk)?);
        let o = enc.forward(&mut tape, x)?;
        out.extend(tape.value(o.prob).data().iter().map(|p| p.to_f32_lossy()));
    }
    Ok(out)
}

fn bce(probs: &[f32], y: &[u8]) -> f64 {
    let eps = 1e-7;
    let s: f64 = probs
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = (p as f64).clamp(eps, 1.0 - eps);
            if t == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    s / probs.len() as f64
}

fn split_scores(probs: &[f32], y: &[u8]) -> (Vec<f32>, Vec<f32>) {
    let pos = probs.iter().zip(y).filter(|(_, &t)| t == 1).map(|(&p, _)| p).collect();
    let neg = probs.iter().zip(y).filter(|(_, &t)| t == 0).map(|(&p, _)| p).collect();
    (pos, neg)
}

pub struct ClassifierRun<T> {
    pub checkpoint: ModelCheckpoint<T>,
    pub report: TrainReport,
    pub snapshots: Snapshots<T>,
}

/// Binary cross-entropy training of the encoder; keeps the epoch with the best
/// validation AUC (earliest on ties) and stores its validation EER threshold.
pub fn train_classifier<T: Real>(dataset: &Dataset, cfg: &TrainConfig) -> Result<ClassifierRun<T>> {
    train_classifier_observed(dataset, cfg, |_| {})
}

/// [`train_classifier`] with a callback after each epoch.
pub fn train_classifier_observed<T: Real>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ClassifierRun<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::TrainingDegenerate("train and validation splits must be nonempty".into()));
    }
    let y_train = labels(&train, cfg.problem)?;
    let y_val = labels(&val, cfg.problem)?;
    check_two_classes(&y_train, "training")?;
    check_two_classes(&y_val, "validation")?;

    let ecfg = &cfg.encoder;
    let mut params: ParamStore<T> = init_params(&ecfg.param_specs(), init_seed(cfg.seed, 1))?;
    let mut opt = Adam::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed, 2));
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            let bs = gather(&train, &batch);
            let targets: Vec<T> = batch.iter().map(|&i| T::from_u8(y_train[i]).expect("0 or 1")).collect();
            let mut tape = Tape::new();
            let x = tape.constant(images(&bs)?);
            let bound = params.bind(&mut tape, true);
            let out = encoder_forward(&mut tape, ecfg, &bound, &mut Norm::Train(Some(&mut params)), x)?;
            let loss = tape.bce_with_logits(out.logit, &targets)?;
            loss_sum += tape.value(loss).data()[0].to_f64_lossy() * bs.len() as f64;
            tape.backward(loss)?;
            let grads: BTreeMap<String, Tensor<T>> = bound
                .vars
                .iter()
                .map(|(k, &v)| (k.clone(), tape.grad(v).expect("bound leaf requires grad")))
                .collect();
            opt.step(&mut params, &grads)?;
        }
        let probs = classifier_probabilities(ecfg, &params, &val)?;
        let (pos, neg) = split_scores(&probs, &y_val);
        let val_auc = auc(&pos, &neg)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: bce(&probs, &y_val),
            val_auc: Some(val_auc),
            val_breakdown: None,
        };
        on_epoch(&rec);
        records.push(rec);
        if best.as_ref().is_none_or(|(b, _, _)| val_auc > *b) {
            best = Some((val_auc, epoch, params.clone()));
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            snapshots.push((epoch, params.clone()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("epochs >= 1");
    let probs = classifier_probabilities(ecfg, &best_params, &val)?;
    let (pos, neg) = split_scores(&probs, &y_val);
    let (threshold, eer) = compute_eer(&pos, &neg)?;
    let checkpoint = ModelCheckpoint {
        encoder_config: ecfg.clone(),
        decoder_config: None,
        encoder: best_params,
        decoder: None,
        metadata: CheckpointMetadata {
            seed: cfg.seed,
            epoch: best_epoch,
            problem: cfg.problem,
            eer_threshold: Some(threshold),
        },
    };
    let report = TrainReport {
        phase: Phase::Classifier,
        epochs: records,
        best_epoch,
        eer_threshold: Some(threshold),
        eer: Some(eer),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(ClassifierRun {
        checkpoint,
        report,
        snapshots,
    })
}

/// Batch-mean loss terms of the decoder in eval mode, sample-weighted over chunks.
pub fn saliency_validation<T: Real>(
    ckpt_encoder: (&EncoderConfig, &ParamStore<T>),
    dcfg: &DecoderConfig,
    decoder: &ParamStore<T>,
    samples: &[&Sample],
    problem: Problem,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let enc = FrozenEncoder::new(ckpt_encoder.0, ckpt_encoder.1);
    let y = labels(samples, problem)?;
    let mut acc = [0f64; 7];
    for (chunk, yc) in samples.chunks(EVAL_CHUNK).zip(y.chunks(EVAL_CHUNK)) {
        let mut tape = Tape::new();
        let x = tape.constant(images(chunk)?);
        let feats = enc.forward(&mut tape, x)?;
        let bound = decoder.bind(&mut tape, false);
        let m = decoder_forward(&mut tape, dcfg, &bound, &mut Norm::Eval(decoder), &feats)?;
        let (_, b) = total_loss(&mut tape, m, x, yc, weights, &enc)?;
        let w = chunk.len() as f64;
        for (a, v) in acc
            .iter_mut()
            .zip([b.tv, b.area, b.preserve, b.destroy, b.gated_preserve, b.gated_destroy, b.total])
        {
            *a += v as f64 * w;
        }
    }
    let n = samples.len() as f64;
    let f = |i: usize| (acc[i] / n) as f32;
    Ok(LossBreakdown {
        tv: f(0),
        area: f(1),
        preserve: f(2),
        destroy: f(3),
        gated_preserve: f(4),
        gated_destroy: f(5),
        total: f(6),
    })
}

pub struct SaliencyRun<T> {
    pub checkpoint: ModelCheckpoint<T>,
    pub report: TrainReport,
    pub snapshots: Snapshots<T>,
}

/// Trains the decoder against the frozen, eval-mode encoder of `classifier`;
/// keeps the epoch with the lowest validation total loss (earliest on ties).
pub fn train_saliency<T: Real>(
    dataset: &Dataset,
    classifier: &ModelCheckpoint<T>,
    cfg: &TrainConfig,
) -> Result<SaliencyRun<T>> {
    train_saliency_observed(dataset, classifier, cfg, |_| {})
}

pub fn train_saliency_observed<T: Real>(
    dataset: &Dataset,
    classifier: &ModelCheckpoint<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<SaliencyRun<T>> {
    cfg.validate()?;
    classifier.validate()?;
    if classifier.metadata.problem != cfg.problem {
        return Err(Error::Config(format!(
            "classifier was trained for {:?} but the run targets {:?}",
            classifier.metadata.problem, cfg.problem
        )));
    }
    let ecfg = &classifier.encoder_config;
    let dcfg = &cfg.decoder;
    dcfg.validate(ecfg)?;
    let start = Instant::now();
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::TrainingDegenerate("train and validation splits must be nonempty".into()));
    }
    let y_train = labels(&train, cfg.problem)?;
    let enc_params = &classifier.encoder;
    let enc = FrozenEncoder::new(ecfg, enc_params);

    let mut dec: ParamStore<T> = init_params(&dcfg.param_specs(ecfg), init_seed(cfg.seed, 3))?;
    let mut opt = Adam::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed(cfg.seed, 4));
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let mut best: Option<(f32, usize, ParamStore<T>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for batch in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            let bs = gather(&train, &batch);
            let y: Vec<u8> = batch.iter().map(|&i| y_train[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(images(&bs)?);
            let feats = enc.forward(&mut tape, x)?;
            let bound = dec.bind(&mut tape, true);
            let m = decoder_forward(&mut tape, dcfg, &bound, &mut Norm::Train(Some(&mut dec)), &feats)?;
            let (loss, b) = total_loss(&mut tape, m, x, &y, &cfg.weights, &enc)?;
            loss_sum += b.total as f64 * bs.len() as f64;
            tape.backward(loss)?;
            let grads: BTreeMap<String, Tensor<T>> = bound
                .vars
                .iter()
                .map(|(k, &v)| (k.clone(), tape.grad(v).expect("bound leaf requires grad")))
                .collect();
            opt.step(&mut dec, &grads)?;
        }
        let vb = saliency_validation((ecfg, enc_params), dcfg, &dec, &val, cfg.problem, &cfg.weights)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: vb.total as f64,
            val_auc: None,
            val_breakdown: Some(vb),
        };
        on_epoch(&rec);
        records.push(rec);
        if best.as_ref().is_none_or(|(b, _, _)| vb.total < *b) {
            best = Some((vb.total, epoch, dec.clone()));
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            snapshots.push((epoch, dec.clone()));
        }
    }

    let (_, best_epoch, best_dec) = best.expect("epochs >= 1");
    let checkpoint = ModelCheckpoint {
        encoder_config: ecfg.clone(),
        decoder_config: Some(dcfg.clone()),
        encoder: enc_params.clone(),
        decoder: Some(best_dec),
        metadata: CheckpointMetadata {
            seed: cfg.seed,
            epoch: best_epoch,
            problem: cfg.problem,
            eer_threshold: classifier.metadata.eer_threshold,
        },
    };
    let report = TrainReport {
        phase: Phase::Saliency,
        epochs: records,
        best_epoch,
        eer_threshold: classifier.metadata.eer_threshold,
        eer: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(SaliencyRun {
        checkpoint,
        report,
        snapshots,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub prob: f32,
    pub positive: bool,
    /// `[1, H, W]`, present only for positive decisions.
    pub mask: Option<Tensor<f32>>,
}

/// Positive decision rule shared by every inference path.
pub fn is_positive(prob: f32, threshold: f64) -> bool {
    prob as f64 > threshold
}

/// Raw decoder masks `[1, H, W]` for every sample, regardless of the classifier decision.
pub fn raw_masks<T: Real>(ckpt: &ModelCheckpoint<T>, samples: &[&Sample]) -> Result<Vec<(f32, Tensor<f32>)>> {
    let (Some(dcfg), Some(dec)) = (&ckpt.decoder_config, &ckpt.decoder) else {
        return Err(Error::Contract("checkpoint has no decoder".into()));
    };
    let enc = FrozenEncoder::new(&ckpt.encoder_config, &ckpt.encoder);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let x = tape.constant(images(chunk)?);
        let feats = enc.forward(&mut tape, x)?;
        let bound = dec.bind(&mut tape, false);
        let m = decoder_forward(&mut tape, dcfg, &bound, &mut Norm::Eval(dec), &feats)?;
        let probs = tape.value(feats.prob).cast::<f32>();
        let masks = tape.value(m).cast::<f32>();
        for i in 0..chunk.len() {
            let mi = masks.select(i)?;
            let shape = mi.shape()[1..].to_vec();
            out.push((probs.data()[i], mi.reshape(&shape)?));
        }
    }
    Ok(out)
}

/// Classifies each sample and produces a mask only when `prob > eer_threshold`.
pub fn infer<T: Real>(ckpt: &ModelCheckpoint<T>, samples: &[&Sample]) -> Result<Vec<Inference>> {
    let threshold = ckpt
        .metadata
        .eer_threshold
        .ok_or_else(|| Error::Contract("checkpoint carries no EER threshold".into()))?;
    Ok(raw_masks(ckpt, samples)?
        .into_iter()
        .map(|(prob, mask)| {
            let positive = is_positive(prob, threshold);
            Inference {
                prob,
                positive,
                mask: positive.then_some(mask),
            }
        })
        .collect())
}

/// Mask behaviour summary used by ablations and end-to-end checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    /// Mean raw mask value over samples with a positive binarized label.
    pub mean_area_positive: f64,
    /// Mean raw mask value over samples with a negative binarized label.
    pub mean_area_negative: f64,
    /// Mean of `P(x) − P((1 − m) ⊙ x)` over positive samples.
    pub destroy_drop: f64,
}

pub fn mask_statistics<T: Real>(ckpt: &ModelCheckpoint<T>, samples: &[&Sample], problem: Problem) -> Result<MaskStats> {
    let y = labels(samples, problem)?;
    let raw = raw_masks(ckpt, samples)?;
    let enc = FrozenEncoder::new(&ckpt.encoder_config, &ckpt.encoder);
    let (mut ap, mut an, mut drop, mut np, mut nn) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for ((s, &yi), (prob, mask)) in samples.iter().zip(&y).zip(&raw) {
        if yi == 0 {
            an += mask.mean();
            nn += 1;
            continue;
        }
        ap += mask.mean();
        np += 1;
        let removed: Vec<f32> = s.x.data().iter().zip(mask.data()).map(|(&x, &m)| (1.0 - m) * x).collect();
        let mut shape = vec![1];
        shape.extend_from_slice(s.x.shape());
        let mut tape = Tape::new();
        let xr = tape.constant(Tensor::new(shape, removed)?.cast::<T>());
        let p = enc.forward(&mut tape, xr)?.prob;
        drop += *prob as f64 - tape.value(p).data()[0].to_f64_lossy();
    }
    let avg = |v: f64, n: usize| if n == 0 { f64::NAN } else { v / n as f64 };
    Ok(MaskStats {
        mean_area_positive: avg(ap, np),
        mean_area_negative: avg(an, nn),
        destroy_drop: avg(drop, np),
    })
}
