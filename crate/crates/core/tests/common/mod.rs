//! Reference implementations shared by the integration tests and the acceptance gate.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use masd_core::autodiff::{gradient_check, BatchNormMode, GradCheckReport, Tape, Var};
use masd_core::{Real, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(lo..hi)))
}

/// Direct cross-correlation, accumulated in f64.
pub fn conv_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (f, kh, kw): (usize, usize, usize),
    bias: &[f64],
    pad: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[fi];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((fi * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub type Build<'a, T> = dyn Fn(&mut Tape<T>, &BTreeMap<String, Var>) -> Result<Var> + 'a;

/// Runs one gradient check at h = 1e-3, tolerance 1e-2, and records the report.
pub fn check<T: Real>(out: &mut Vec<GradCheckReport>, params: BTreeMap<String, Tensor<T>>, build: &Build<'_, T>, floor: f64) {
    out.push(gradient_check(&params, build, 1e-3, 1e-2, floor).expect("gradient check runs"));
}

pub fn params<T: Real>(items: Vec<(&str, Tensor<T>)>) -> BTreeMap<String, Tensor<T>> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Weighted sum with fixed random weights so every output element matters.
pub fn project<T: Real>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random::<T>(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.mean_all(p)
}

/// Finite-difference agreement of every registered operation.
pub fn all_ops_gradients<T: Real>(floor: f64) -> Vec<GradCheckReport> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x4 = random::<T>(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let pos = random::<T>(&mut rng, &[2, 3, 4, 4], 0.2, 2.0);

    check(&mut out, 
        params(vec![
            ("x", x4.clone()),
            ("k", random(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)),
            ("b", random(&mut rng, &[2], -0.5, 0.5)),
        ]),
        &|t, v| {
            let y = t.conv2d(v["x"], v["k"], Some(v["b"]), 1, 1)?;
            project(t, y, 1)
        },
        floor,
    );
    check(&mut out, 
        params(vec![("x", x4.clone()), ("k", random(&mut rng, &[2, 3, 1, 3], -1.0, 1.0))]),
        &|t, v| {
            let y = t.conv2d(v["x"], v["k"], None, 1, 2)?;
            project(t, y, 2)
        },
        floor,
    );
    check(&mut out, 
        params(vec![
            ("x", x4.clone()),
            ("gamma", random(&mut rng, &[3], 0.5, 1.5)),
            ("beta", random(&mut rng, &[3], -0.5, 0.5)),
        ]),
        &|t, v| {
            let mode = BatchNormMode::Train { running: None, momentum: 0.1 };
            let y = t.batchnorm(v["x"], v["gamma"], v["beta"], mode, 1e-5)?;
            project(t, y, 3)
        },
        floor,
    );
    let (rm, rv) = (
        random::<T>(&mut rng, &[3], -0.2, 0.2),
        random::<T>(&mut rng, &[3], 0.5, 1.5),
    );
    check(&mut out, 
        params(vec![
            ("x", x4.clone()),
            ("gamma", random(&mut rng, &[3], 0.5, 1.5)),
            ("beta", random(&mut rng, &[3], -0.5, 0.5)),
        ]),
        &|t, v| {
            let mode = BatchNormMode::Eval { mean: rm.data(), var: rv.data() };
            let y = t.batchnorm(v["x"], v["gamma"], v["beta"], mode, 1e-5)?;
            project(t, y, 4)
        },
        floor,
    );
    check(&mut out, params(vec![("x", x4.clone())]), &|t, v| {
        let y = t.relu(v["x"])?;
        project(t, y, 5)
    }, floor);
    check(&mut out, params(vec![("x", x4.clone())]), &|t, v| {
        let y = t.sigmoid(v["x"])?;
        project(t, y, 6)
    }, floor);
    check(&mut out, params(vec![("x", pos.clone())]), &|t, v| {
        let y = t.log(v["x"], T::from_f64_lossy(1e-8))?;
        project(t, y, 7)
    }, floor);
    check(&mut out, params(vec![("x", x4.clone())]), &|t, v| {
        let y = t.abs(v["x"])?;
        project(t, y, 8)
    }, floor);
    check(&mut out, params(vec![("x", x4.clone())]), &|t, v| {
        let y = t.upsample_nearest(v["x"], 2)?;
        project(t, y, 9)
    }, floor);
    check(&mut out, params(vec![("x", x4.clone())]), &|t, v| {
        let y = t.avg_pool(v["x"], 2)?;
        project(t, y, 10)
    }, floor);
    check(&mut out, 
        params(vec![
            ("x", random::<T>(&mut rng, &[3, 4], -1.0, 1.0)),
            ("w", random(&mut rng, &[4, 2], -1.0, 1.0)),
            ("b", random(&mut rng, &[2], -1.0, 1.0)),
        ]),
        &|t, v| {
            let y = t.dense(v["x"], v["w"], v["b"])?;
            project(t, y, 11)
        },
        floor,
    );
    check(&mut out, params(vec![("x", x4.clone())]), &|t, v| {
        let y = t.reduce_mean(v["x"], &[2, 3])?;
        project(t, y, 12)
    }, floor);
    check(&mut out, params(vec![("x", x4.clone())]), &|t, v| {
        let y = t.reduce_sum(v["x"], &[0, 2])?;
        project(t, y, 13)
    }, floor);
    let other = random::<T>(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    check(&mut out, params(vec![("a", x4.clone()), ("b", other.clone())]), &|t, v| {
        let s = t.add(v["a"], v["b"])?;
        let d = t.sub(s, v["b"])?;
        let m = t.mul(d, v["b"])?;
        project(t, m, 14)
    }, floor);
    check(&mut out, params(vec![("a", x4.clone()), ("b", random(&mut rng, &[2, 1, 4, 4], -1.0, 1.0))]), &|t, v| {
        let y = t.concat_channels(v["a"], v["b"])?;
        project(t, y, 15)
    }, floor);
    check(&mut out, params(vec![("m", random(&mut rng, &[2, 1, 4, 4], 0.0, 1.0)), ("x", x4.clone())]), &|t, v| {
        let y = t.mask_apply(v["m"], v["x"])?;
        project(t, y, 16)
    }, floor);
    check(&mut out, params(vec![("x", x4.clone())]), &|t, v| {
        let a = t.shift_diff(v["x"], 2)?;
        let b = t.shift_diff(v["x"], 3)?;
        let pa = project(t, a, 17)?;
        let pb = project(t, b, 18)?;
        t.add(pa, pb)
    }, floor);
    check(&mut out, params(vec![("x", x4.clone())]), &|t, v| {
        let y = t.affine(v["x"], T::from_f64_lossy(-1.5), T::from_f64_lossy(0.25))?;
        let r = t.reshape(y, &[6, 16])?;
        project(t, r, 19)
    }, floor);
    let targets: Vec<T> = [1.0, 0.0, 1.0, 0.0, 0.0].iter().map(|&v| T::from_f64_lossy(v)).collect();
    check(&mut out, params(vec![("z", random(&mut rng, &[5], -3.0, 3.0))]), &|t, v| t.bce_with_logits(v["z"], &targets), floor);
    out
}

/// Compares `conv2d` against [`conv_oracle`] over a seeded grid of small shapes.
/// Returns `(cases, mismatching cases)`; an element mismatches at 1e-5 absolute.
pub fn conv_suite() -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut cases, mut bad) = (0, 0);
    let as64 = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    for &(n, c, f) in &[(1, 1, 1), (2, 2, 3), (1, 3, 2)] {
        for h in 1..=8 {
            for w in 1..=8 {
                for &(kh, kw) in &[(1, 1), (1, 3), (3, 1), (3, 3)] {
                    for pad in 0..=1 {
                        for stride in 1..=2 {
                            if h + 2 * pad < kh || w + 2 * pad < kw {
                                continue;
                            }
                            let x: Tensor<f32> = random(&mut rng, &[n, c, h, w], -1.0, 1.0);
                            let k: Tensor<f32> = random(&mut rng, &[f, c, kh, kw], -1.0, 1.0);
                            let b: Tensor<f32> = random(&mut rng, &[f], -0.5, 0.5);
                            let expect = conv_oracle(&as64(&x), (n, c, h, w), &as64(&k), (f, kh, kw), &as64(&b), pad, stride);
                            let mut tape = Tape::new();
                            let (xv, kv, bv) = (tape.constant(x), tape.constant(k), tape.constant(b));
                            let y = tape.conv2d(xv, kv, Some(bv), pad, stride).expect("valid shapes");
                            let got = tape.value(y).data();
                            let ok = got.len() == expect.len()
                                && got.iter().zip(&expect).all(|(g, e)| (*g as f64 - e).abs() < 1e-5);
                            cases += 1;
                            bad += usize::from(!ok);
                        }
                    }
                }
            }
        }
    }
    (cases, bad)
}

/// Breadth-first 4-connected labelling; components sorted, ordered by first pixel.
pub fn flood_fill(bits: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = (i / w, i % w);
            let mut nbrs = Vec::with_capacity(4);
            if r > 0 {
                nbrs.push(i - w);
            }
            if r + 1 < h {
                nbrs.push(i + w);
            }
            if c > 0 {
                nbrs.push(i - 1);
            }
            if c + 1 < w {
                nbrs.push(i + 1);
            }
            for j in nbrs {
                if bits[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Exhaustive EER: every score (plus minus infinity) is tried as the
/// threshold, a score is positive when strictly above it, and the smallest
/// |FPR - FNR| wins with the lowest threshold breaking ties.
/// Returns `(eer, number of scores classified positive)`.
pub fn eer_oracle(pos: &[f32], neg: &[f32]) -> (f64, usize) {
    let mut thresholds: Vec<f64> = vec![f64::NEG_INFINITY];
    thresholds.extend(pos.iter().chain(neg).map(|&s| s as f64));
    thresholds.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64, usize)> = None;
    for t in thresholds {
        let fp = neg.iter().filter(|&&s| s as f64 > t).count();
        let tp = pos.iter().filter(|&&s| s as f64 > t).count();
        let fpr = fp as f64 / neg.len() as f64;
        let fnr = (pos.len() - tp) as f64 / pos.len() as f64;
        let gap = (fpr - fnr).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, 0.5 * (fpr + fnr), fp + tp));
        }
    }
    let (_, eer, called) = best.expect("at least one threshold");
    (eer, called)
}

/// Seeded score sets with deliberate ties; sizes 1..=40 per class.
pub fn score_sets(count: usize, seed: u64) -> Vec<(Vec<f32>, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let np = rng.random_range(1..=40);
            let nn = rng.random_range(1..=40);
            let coarse = i % 3 == 0;
            let mut draw = |shift: f32| {
                let v: f32 = rng.random_range(0.0..1.0) + shift;
                if coarse {
                    (v * 8.0).round() / 8.0
                } else {
                    v
                }
            };
            let pos = (0..np).map(|_| draw(0.3)).collect();
            let neg = (0..nn).map(|_| draw(0.0)).collect();
            (pos, neg)
        })
        .collect()
}

/// Gradient check of the full mask objective with respect to every decoder
/// parameter on one positive 16x16 sample. The decoder keeps its four-block
/// layout at width 4 so the check stays within budget on one core; batch-norm
/// layers use their stored statistics.
pub fn decoder_objective_gradients() -> GradCheckReport {
    use masd_core::loss::{total_loss, LossWeights};
    use masd_core::network::{decoder_forward, init_params, Bound, DecoderConfig, EncoderConfig, FrozenEncoder, Norm};

    let ecfg = EncoderConfig::default();
    let mut dcfg = DecoderConfig::default();
    for b in &mut dcfg.blocks {
        b.channels = 4;
    }
    let enc_params = init_params::<f64>(&ecfg.param_specs(), 21).expect("encoder init");
    let dec_params = init_params::<f64>(&dcfg.param_specs(&ecfg), 22).expect("decoder init");
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random::<f64>(&mut rng, &[1, 1, 16, 16], 0.0, 1.0);
    let weights = LossWeights::lesion();
    let params: BTreeMap<String, Tensor<f64>> = dec_params.trainable().map(|(k, v)| (k.clone(), v.clone())).collect();
    let enc = FrozenEncoder::new(&ecfg, &enc_params);
    let build = |tape: &mut Tape<f64>, vars: &BTreeMap<String, Var>| -> Result<Var> {
        let xv = tape.constant(x.clone());
        let feats = enc.forward(tape, xv)?;
        let bound = Bound { vars: vars.clone() };
        let m = decoder_forward(tape, &dcfg, &bound, &mut Norm::Eval(&dec_params), &feats)?;
        Ok(total_loss(tape, m, xv, &[1], &weights, &enc)?.0)
    };
    gradient_check(&params, build, 1e-3, 1e-2, 1e-6).expect("gradient check runs")
}
