//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{all_ops_gradients, conv_suite, decoder_objective_gradients, eer_oracle, flood_fill, random, score_sets};
use masd_core::autodiff::Tape;
use masd_core::dataset::{generate_dataset, Dataset, GeneratorConfig, Sample, Split};
use masd_core::eval::{
    compute_eer, connected_components, froc_curve, is_monotone, parse_froc_csv, BinaryMask, FrocCurve, Prediction,
    Scenario,
};
use masd_core::loss::{area_loss, total_loss, tv_loss, LossWeights};
use masd_core::network::{init_params, EncoderConfig, FrozenEncoder};
use masd_core::pipeline::{digest_dir, ExperimentConfig, Logger, Pipeline};
use masd_core::train::{infer, mask_statistics, raw_masks, train_classifier, train_saliency, TrainConfig};
use masd_core::{Checkpoint32, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-2;
const GRAD_BUDGET_SECS: f64 = 120.0;
const RECOMBINE_TOL: f32 = 1e-6;
const MIN_AUC: f64 = 0.95;
const MAX_CLASSIFIER_EPOCHS: usize = 30;
const CLASSIFIER_BUDGET_SECS: f64 = 15.0 * 60.0;
const MAX_NEGATIVE_MASK: f64 = 0.05;
const MIN_TPR: f32 = 0.8;
const MAX_FPD: f32 = 1.0;
const END_TO_END_BUDGET_SECS: f64 = 30.0 * 60.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, v: &Verdict) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} [{status}] {name}: {}", v.detail);
    std::io::stdout().flush().ok();
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let ops = all_ops_gradients::<f64>(1e-6);
    let objective = decoder_objective_gradients();
    let secs = start.elapsed().as_secs_f64();
    let worst_op = ops.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
    let ops_ok = ops.iter().all(|r| r.passed() && r.tol <= GRAD_TOL);
    let pass = ops_ok && objective.passed() && objective.tol <= GRAD_TOL && secs < GRAD_BUDGET_SECS;
    Verdict {
        pass,
        detail: format!(
            "{} op checks max rel err {worst_op:.2e}; objective max rel err {:.2e} \
             ({} of {} entries re-probed across a ReLU kink, {:.2e} before refinement); {secs:.1}s",
            ops.len(),
            objective.max_rel_error(),
            objective.kinked(),
            objective.entries.iter().map(|e| e.checked).sum::<usize>(),
            objective.max_rel_error_at_h(),
        ),
    }
}

fn loss_units() -> Verdict {
    let mut failures = Vec::new();
    let mut tape = Tape::<f32>::new();
    let c = tape.constant(Tensor::full(&[2, 1, 9, 7], 0.37));
    let tv = tv_loss(&mut tape, c).unwrap();
    if tape.value(tv).data()[0] != 0.0 {
        failures.push("tv(constant) != 0");
    }
    let ones = tape.constant(Tensor::full(&[2, 1, 9, 7], 1.0));
    let area = area_loss(&mut tape, ones).unwrap();
    if tape.value(area).data()[0] != 1.0 {
        failures.push("area(all-ones) != 1");
    }

    let cfg = EncoderConfig::default();
    let params = init_params::<f32>(&cfg.param_specs(), 5).unwrap();
    let enc = FrozenEncoder::new(&cfg, &params);
    let w = LossWeights::lesion();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m: Tensor<f32> = random(&mut rng, &[3, 1, 16, 16], 0.0, 1.0);
    let mut totals = Vec::new();
    for x_seed in [1, 2, 3] {
        let x: Tensor<f32> = random(&mut ChaCha8Rng::seed_from_u64(x_seed), &[3, 1, 16, 16], 0.0, 1.0);
        let mut tape = Tape::new();
        let (mv, xv) = (tape.constant(m.clone()), tape.constant(x));
        let (total, _) = total_loss(&mut tape, mv, xv, &[0, 0, 0], &w, &enc).unwrap();
        let tv = tv_loss(&mut tape, mv).unwrap();
        let area = area_loss(&mut tape, mv).unwrap();
        let expect = w.lambda1 * tape.value(tv).data()[0] + w.lambda2 * tape.value(area).data()[0];
        let got = tape.value(total).data()[0];
        if got.to_bits() != expect.to_bits() {
            failures.push("y=0 total differs from smoothness + area");
        }
        totals.push(got.to_bits());
    }
    if totals.windows(2).any(|p| p[0] != p[1]) {
        failures.push("y=0 total depends on x");
    }

    let mut worst = 0.0f32;
    for case in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let mut w = LossWeights::new(
            rng.random_range(0.0..3.0),
            rng.random_range(0.0..3.0),
            rng.random_range(0.0..3.0),
            rng.random_range(0.0..3.0),
        );
        w.enable_tv = rng.random_bool(0.8);
        w.enable_area = rng.random_bool(0.8);
        w.enable_preserve = rng.random_bool(0.8);
        w.enable_destroy = rng.random_bool(0.8);
        w.destroy_log = rng.random_bool(0.5);
        let n = rng.random_range(2..5);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let mut tape = Tape::<f32>::new();
        let m = tape.constant(random(&mut rng, &[n, 1, 16, 16], 0.0, 1.0));
        let x = tape.constant(random(&mut rng, &[n, 1, 16, 16], 0.0, 1.0));
        let (_, b) = total_loss(&mut tape, m, x, &labels, &w, &enc).unwrap();
        worst = worst.max((b.recombine(&w) - b.total).abs());
    }
    if worst >= RECOMBINE_TOL {
        failures.push("breakdown recombination outside tolerance");
    }
    Verdict {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("constant, all-ones and y=0 identities exact; recombination max err {worst:.1e} over 200 cases")
        } else {
            failures.join("; ")
        },
    }
}

fn oracles() -> Verdict {
    let mut cc_bad = 0;
    for code in 0u32..1 << 16 {
        let bits: Vec<bool> = (0..16).map(|i| code >> i & 1 == 1).collect();
        if connected_components(&BinaryMask::new(4, 4, bits.clone()).unwrap()) != flood_fill(&bits, 4, 4) {
            cc_bad += 1;
        }
    }
    let mut eer_bad = 0;
    for (pos, neg) in score_sets(1000, 77) {
        let (t, eer) = compute_eer(&pos, &neg).unwrap();
        let called = pos.iter().chain(&neg).filter(|&&s| s as f64 > t).count();
        if (eer, called) != eer_oracle(&pos, &neg) {
            eer_bad += 1;
        }
    }
    let (conv_cases, conv_bad) = conv_suite();
    Verdict {
        pass: cc_bad == 0 && eer_bad == 0 && conv_bad == 0,
        detail: format!(
            "components {cc_bad}/65536 mismatches; EER {eer_bad}/1000; conv2d {conv_bad}/{conv_cases}"
        ),
    }
}

struct Trained {
    data: Dataset,
    config: ExperimentConfig,
    classifier: Checkpoint32,
    classifier_secs: f64,
}

fn classifier_phase(t: &Trained, best_auc: f64, epochs: usize) -> Verdict {
    Verdict {
        pass: best_auc >= MIN_AUC && epochs <= MAX_CLASSIFIER_EPOCHS && t.classifier_secs < CLASSIFIER_BUDGET_SECS,
        detail: format!("best val AUC {best_auc:.4} over {epochs} epochs in {:.0}s", t.classifier_secs),
    }
}

fn predictions(ckpt: &Checkpoint32, samples: &[&Sample]) -> Vec<Prediction> {
    infer(ckpt, samples)
        .unwrap()
        .into_iter()
        .zip(samples)
        .map(|(r, s)| Prediction {
            id: s.id.clone(),
            prob: r.prob,
            positive: r.positive,
            mask: r.mask,
        })
        .collect()
}

fn curves(t: &Trained, preds: &[Prediction], samples: &[&Sample]) -> Vec<FrocCurve> {
    let c = &t.config;
    [Scenario::All, Scenario::CPlus]
        .into_iter()
        .map(|s| froc_curve(preds, samples, s, c.problem, &c.taus(), c.dice_min).unwrap())
        .collect()
}

fn mean_mask(ckpt: &Checkpoint32, samples: &[&Sample]) -> f64 {
    let masks = raw_masks(ckpt, samples).unwrap();
    masks.iter().map(|(_, m)| m.mean()).sum::<f64>() / masks.len() as f64
}

fn saliency_config(t: &Trained) -> TrainConfig {
    t.config.train_config(&t.config.saliency)
}

fn random_curves_monotone(t: &Trained, samples: &[&Sample]) -> (usize, usize) {
    let (mut total, mut bad) = (0, 0);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<Prediction> = samples
            .iter()
            .map(|s| {
                let prob: f32 = rng.random_range(0.0..1.0);
                let positive = rng.random_bool(0.6);
                let mask = positive.then(|| random::<f32>(&mut rng, s.x.shape(), 0.0, 1.0));
                Prediction {
                    id: s.id.clone(),
                    prob,
                    positive,
                    mask,
                }
            })
            .collect();
        for curve in curves(t, &preds, samples) {
            total += 1;
            bad += usize::from(!curve.is_monotone());
        }
    }
    (total, bad)
}

fn ablation(t: &Trained, baseline: &Checkpoint32, samples: &[&Sample]) -> Verdict {
    let base_cfg = saliency_config(t);
    let mut no_area = base_cfg.clone();
    no_area.weights.enable_area = false;
    let mut no_destroy = base_cfg.clone();
    no_destroy.weights.enable_destroy = false;
    let area_off = train_saliency(&t.data, &t.classifier, &no_area).unwrap().checkpoint;
    let destroy_off = train_saliency(&t.data, &t.classifier, &no_destroy).unwrap().checkpoint;

    let (a0, a1) = (mean_mask(baseline, samples), mean_mask(&area_off, samples));
    let drop0 = mask_statistics(baseline, samples, t.config.problem).unwrap().destroy_drop;
    let drop1 = mask_statistics(&destroy_off, samples, t.config.problem).unwrap().destroy_drop;
    Verdict {
        pass: a1 > a0 && drop1 < drop0,
        detail: format!(
            "mean mask area {a0:.4} -> {a1:.4} without area term; destroy drop {drop0:.4} -> {drop1:.4} without destroy term"
        ),
    }
}

fn determinism() -> Verdict {
    let overrides: Vec<String> = ["classifier.epochs=2", "saliency.epochs=2"].iter().map(|s| s.to_string()).collect();
    let config = ExperimentConfig::from_json("{}", &overrides).unwrap();
    let run = |dir: &Path| {
        let p = Pipeline::new(config.clone(), Some(dir.to_path_buf()), Logger { quiet: true }).unwrap();
        p.gen_data().unwrap();
        p.train_classifier().unwrap();
        p.train_saliency().unwrap();
        p.infer(None).unwrap();
        p.evaluate(None).unwrap();
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    let mut differing = Vec::new();
    for sub in ["classifier/checkpoint", "masd/checkpoint"] {
        if digest_dir(&a.path().join(sub)).unwrap() != digest_dir(&b.path().join(sub)).unwrap() {
            differing.push(sub.to_string());
        }
    }
    let mut monotone = true;
    for scenario in ["all", "c_plus"] {
        let rel = format!("eval/{scenario}/froc.csv");
        let (fa, fb) = (a.path().join(&rel), b.path().join(&rel));
        let (ta, tb) = (fs::read_to_string(&fa).unwrap(), fs::read_to_string(&fb).unwrap());
        if ta != tb {
            differing.push(rel);
        }
        monotone &= is_monotone(&parse_froc_csv(&ta, &fa).unwrap());
    }
    Verdict {
        pass: differing.is_empty() && monotone,
        detail: if differing.is_empty() {
            "checkpoints and froc.csv identical across two runs (default data, 2+2 epochs)".into()
        } else {
            format!("differing outputs: {}", differing.join(", "))
        },
    }
}

fn main() -> ExitCode {
    let mut passed = Vec::new();
    let mut record = |n: usize, name: &str, v: Verdict| {
        report(n, name, &v);
        passed.push(v.pass);
    };

    record(1, "gradient correctness", gradients());
    record(2, "loss unit suite", loss_units());
    record(3, "oracle equivalence", oracles());

    let config = ExperimentConfig::default();
    let data = generate_dataset(&GeneratorConfig { seed: config.seed, ..config.generator.clone() }).unwrap();
    let run = train_classifier::<f32>(&data, &config.train_config(&config.classifier)).unwrap();
    let best_auc = run.report.epochs.iter().filter_map(|e| e.val_auc).fold(0.0, f64::max);
    let epochs = run.report.epochs.len();
    let t = Trained {
        data,
        config,
        classifier: run.checkpoint,
        classifier_secs: run.report.wall_clock_secs,
    };
    record(4, "classifier phase", classifier_phase(&t, best_auc, epochs));

    let sal = train_saliency(&t.data, &t.classifier, &saliency_config(&t)).unwrap();
    let test = t.data.split(Split::Test);
    let preds = predictions(&sal.checkpoint, &test);
    let emitted = curves(&t, &preds, &test);
    let negatives: Vec<&Sample> = test.iter().copied().filter(|s| s.label == 0).collect();
    let neg_mask = mean_mask(&sal.checkpoint, &negatives);
    let tpr = emitted[0].points.iter().filter(|p| p.fpd <= MAX_FPD).map(|p| p.tpr).fold(0.0f32, f32::max);
    let secs = t.classifier_secs + sal.report.wall_clock_secs;
    record(
        5,
        "end-to-end saliency",
        Verdict {
            pass: neg_mask < MAX_NEGATIVE_MASK && tpr >= MIN_TPR && secs < END_TO_END_BUDGET_SECS,
            detail: format!(
                "test negatives mean mask {neg_mask:.4}; All-scenario TPR {tpr:.3} at FPD <= {MAX_FPD}; {secs:.0}s for both phases"
            ),
        },
    );

    let (random_total, random_bad) = random_curves_monotone(&t, &test);
    let trained_bad = emitted.iter().filter(|c| !c.is_monotone()).count();
    record(
        6,
        "FROC monotonicity",
        Verdict {
            pass: trained_bad == 0 && random_bad == 0,
            detail: format!(
                "{trained_bad}/{} trained-model curves and {random_bad}/{random_total} randomized curves non-monotone",
                emitted.len()
            ),
        },
    );

    record(7, "ablation direction", ablation(&t, &sal.checkpoint, &test));
    record(8, "determinism", determinism());

    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
