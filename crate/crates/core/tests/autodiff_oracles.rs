mod common;

use common::{all_ops_gradients, check, conv_oracle, conv_suite, decoder_objective_gradients, params, random};
use masd_core::autodiff::{GradCheckReport, Tape};
use masd_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn conv2d_matches_nested_loop_oracle_on_small_shapes() {
    let (cases, bad) = conv_suite();
    assert!(cases > 1000);
    assert_eq!(bad, 0);
}

#[test]
fn conv2d_seeded_five_by_five() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Tensor<f32> = random(&mut rng, &[1, 1, 5, 5], -1.0, 1.0);
    let k: Tensor<f32> = random(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
    let as64 = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let expect = conv_oracle(&as64(&x), (1, 1, 5, 5), &as64(&k), (1, 3, 3), &[0.0], 1, 1);
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x), tape.constant(k));
    let y = tape.conv2d(xv, kv, None, 1, 1).unwrap();
    for (g, e) in tape.value(y).data().iter().zip(&expect) {
        assert!((*g as f64 - e).abs() < 1e-5);
    }
}

fn assert_all_pass(reports: &[GradCheckReport]) {
    for r in reports {
        assert!(
            r.passed(),
            "gradient check failed: {:?}",
            r.entries.iter().filter(|e| e.max_rel_error >= r.tol).collect::<Vec<_>>()
        );
    }
}

#[test]
fn every_op_agrees_with_finite_differences_f64() {
    assert_all_pass(&all_ops_gradients::<f64>(1e-6));
}

#[test]
fn every_op_agrees_with_finite_differences_f32() {
    // f32 loss evaluations carry ~1e-7 relative rounding, so central
    // differences at h = 1e-3 resolve gradients only down to ~1e-3.
    assert_all_pass(&all_ops_gradients::<f32>(5e-2));
}

#[test]
fn composite_conv_relu_mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let p = params(vec![
        ("x", random::<f64>(&mut rng, &[1, 2, 6, 6], -1.0, 1.0)),
        ("k", random::<f64>(&mut rng, &[3, 2, 3, 3], -1.0, 1.0)),
    ]);
    let mut out = Vec::new();
    check(
        &mut out,
        p,
        &|t, v| {
            let c = t.conv2d(v["x"], v["k"], None, 1, 1)?;
            let r = t.relu(c)?;
            t.mean_all(r)
        },
        1e-6,
    );
    assert_all_pass(&out);
}

#[test]
fn upsample_mean_gradient_equals_mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random::<f64>(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
    let grad_of = |up: bool| {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let y = if up { tape.upsample_nearest(v, 2).unwrap() } else { v };
        let m = tape.mean_all(y).unwrap();
        tape.backward(m).unwrap();
        tape.grad(v).unwrap()
    };
    let (a, b) = (grad_of(true), grad_of(false));
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-15);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random::<f64>(&mut rng, &[1, 1, 5, 5], -1.0, 1.0);
    let k = random::<f64>(&mut rng, &[2, 1, 3, 3], -1.0, 1.0);
    let run = |which: u8| {
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(x.clone(), true), tape.leaf(k.clone(), true));
        let c = tape.conv2d(xv, kv, None, 1, 1).unwrap();
        let r = tape.relu(c).unwrap();
        let l1 = tape.mean_all(r).unwrap();
        let s = tape.sigmoid(c).unwrap();
        let l2 = tape.reduce_sum(s, &[0, 1, 2, 3]).unwrap();
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => tape.add(l1, l2).unwrap(),
        };
        tape.backward(loss).unwrap();
        (tape.grad(xv).unwrap(), tape.grad(kv).unwrap())
    };
    let (a, b, both) = (run(1), run(2), run(3));
    for (s, (p, q)) in both.0.data().iter().zip(a.0.data().iter().zip(b.0.data())) {
        assert!((s - (p + q)).abs() < 1e-12);
    }
    for (s, (p, q)) in both.1.data().iter().zip(a.1.data().iter().zip(b.1.data())) {
        assert!((s - (p + q)).abs() < 1e-12);
    }
}

#[test]
fn finite_inputs_give_finite_outputs_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(random(&mut rng, &[2, 2, 4, 4], -50.0, 50.0), true);
        let k = tape.leaf(random(&mut rng, &[2, 2, 3, 3], -5.0, 5.0), true);
        let c = tape.conv2d(x, k, None, 1, 1).unwrap();
        let s = tape.sigmoid(c).unwrap();
        let l = tape.log(s, 1e-8).unwrap();
        let m = tape.mean_all(l).unwrap();
        assert!(tape.value(m).all_finite());
        tape.backward(m).unwrap();
        assert!(tape.grad(x).unwrap().all_finite());
        assert!(tape.grad(k).unwrap().all_finite());
    }
}

#[test]
fn mask_objective_gradients_wrt_decoder() {
    let report = decoder_objective_gradients();
    assert!(report.entries.len() > 10);
    assert_all_pass(&[report]);
}
