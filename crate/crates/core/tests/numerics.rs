use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use yvector::numerics::gradcheck::{check, GradCheckConfig};
use yvector::numerics::*;
use yvector::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn conv(input: Tensor<f64>, kernel: Tensor<f64>, bias: &[f64], stride: usize) -> yvector::Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(input);
    let w = g.constant(kernel);
    let b = g.constant(Tensor::vector(bias.to_vec()));
    let y = g.conv1d(x, w, Some(b), stride, 1, "test")?;
    Ok(g.value(y).data().to_vec())
}

#[test]
fn conv1d_worked_examples() {
    let y = conv(t(&[1, 4], &[1., 2., 3., 4.]), t(&[1, 1, 2], &[1., 1.]), &[0.], 2).unwrap();
    assert_eq!(y, vec![3., 7.]);

    let input = [0.5, -1.0, 2.0, 3.5];
    let y = conv(t(&[1, 4], &input), t(&[1, 1, 1], &[1.]), &[0.], 1).unwrap();
    assert_eq!(y, input.to_vec());

    let y = conv(t(&[1, 4], &[1., 2., 3., 4.]), t(&[1, 1, 2], &[1., 1.]), &[0.5], 2).unwrap();
    assert_eq!(y, vec![3.5, 7.5]);
}

#[test]
fn conv1d_long_input_length() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 62400]));
    let w = g.constant(Tensor::zeros(&[2, 1, 12]));
    let y = g.conv1d(x, w, None, 6, 1, "branch").unwrap();
    assert_eq!(g.value(y).shape(), &[2, 10399]);
}

#[test]
fn conv1d_too_short_names_layer() {
    let err = conv(t(&[1, 3], &[1., 2., 3.]), t(&[1, 1, 4], &[1.; 4]), &[0.], 1).unwrap_err();
    match err {
        Error::InputTooShort { layer, len, required } => {
            assert_eq!(layer, "test");
            assert_eq!((len, required), (3, 4));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn conv1d_dilation_matches_manual_taps() {
    // taps at offsets 0 and 2
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 5], &[1., 2., 3., 4., 5.]));
    let w = g.constant(t(&[1, 1, 2], &[1., 10.]));
    let y = g.conv1d(x, w, None, 1, 2, "tdnn").unwrap();
    assert_eq!(g.value(y).data(), &[31., 42., 53.]);
}

fn pool(data: &[f64], window: usize, stride: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, data.len()], data));
    let y = g.maxpool1d(x, window, stride).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn maxpool_worked_examples() {
    assert_eq!(pool(&[1., 3., 2., 5.], 2, 2), vec![3., 5.]);
    assert_eq!(pool(&[1., 3., 2., 5.], 1, 1), vec![1., 3., 2., 5.]);
    assert_eq!(pool(&[0.7; 9], 3, 2), vec![0.7; 4]);
}

#[test]
fn maxpool_too_short() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1., 2.]));
    assert!(matches!(g.maxpool1d(x, 3, 1), Err(Error::InputTooShort { .. })));
}

#[test]
fn maxpool_gradient_ties_go_to_first_index() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 4], &[2., 2., 1., 1.]), true);
    let y = g.maxpool1d(x, 2, 2).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1., 0., 1., 0.]);
}

#[test]
fn sliding_window_lengths_match_exhaustive_oracle() {
    for len in 1..=64usize {
        for k in 1..=len {
            for s in 1..=8usize {
                // oracle: count window starts that fit
                let mut expected = 0;
                let mut start = 0;
                while start + k <= len {
                    expected += 1;
                    start += s;
                }
                let mut g = Graph::<f32>::new();
                let x = g.constant(Tensor::zeros(&[1, len]));
                let w = g.constant(Tensor::zeros(&[1, 1, k]));
                let y = g.conv1d(x, w, None, s, 1, "oracle").unwrap();
                assert_eq!(g.value(y).shape()[1], expected, "conv L={len} K={k} s={s}");
                let p = g.maxpool1d(x, k, s).unwrap();
                assert_eq!(g.value(p).shape()[1], expected, "pool L={len} K={k} s={s}");
            }
        }
    }
}

#[test]
fn avgpool_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[1., 3., 2., 2.]));
    let y = g.avgpool_time(x).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 1]);
    assert_eq!(g.value(y).data(), &[2., 2.]);

    let x = g.constant(t(&[3, 1], &[1., -2., 4.]));
    let y = g.avgpool_time(x).unwrap();
    assert_eq!(g.value(y).data(), &[1., -2., 4.]);

    let x = g.constant(Tensor::zeros(&[4, 7]));
    let y = g.avgpool_time(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1., 0., 2.]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0., 0., 2.]);
    let x = g.constant(t(&[1], &[-1.]));
    let l = g.leaky_relu(x, 0.2);
    assert!((g.value(l).item() + 0.2).abs() < 1e-15);
    let x = g.constant(t(&[1], &[0.]));
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).item(), 0.5);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(t(&[2], &[1., 1.]));
    let bias = g.constant(t(&[2], &[0., 0.]));
    let x = g.constant(t(&[2, 1], &[2., 2.]));
    let y = g.layer_norm_channels(x, gain, bias, LAYER_NORM_EPS).unwrap();
    assert_eq!(g.value(y).data(), &[0., 0.]);

    let x = g.constant(t(&[2, 1], &[1., 3.]));
    let y = g.layer_norm_channels(x, gain, bias, 1e-14).unwrap();
    let v = g.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);

    let zero_gain = g.constant(t(&[2], &[0., 0.]));
    let b = g.constant(t(&[2], &[0.3, -0.7]));
    let x = g.constant(t(&[2, 3], &[1., 5., -2., 4., 0., 9.]));
    let y = g.layer_norm_channels(x, zero_gain, b, LAYER_NORM_EPS).unwrap();
    assert_eq!(g.value(y).data(), &[0.3, 0.3, 0.3, -0.7, -0.7, -0.7]);
}

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[3., 4.]));
    let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let zero_b = g.constant(t(&[2], &[0., 0.]));
    let y = g.linear(x, eye, Some(zero_b)).unwrap();
    assert_eq!(g.value(y).data(), &[3., 4.]);

    let zw = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(t(&[2], &[0.5, -1.5]));
    let y = g.linear(x, zw, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.5]);

    let w = g.constant(t(&[1, 2], &[1., 2.]));
    let b = g.constant(t(&[1], &[1.]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[12.]);

    let bad = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.linear(x, bad, None), Err(Error::Shape(_))));
}

#[test]
fn dropout_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(t(&[4], &[1., 2., 3., 4.]));
    let y = g.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
    let y = g.dropout(x, 0.7, false, &mut rng).unwrap();
    assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
    assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let input = [0.5, -1.25, 2.0];
    let draws = 10_000;
    let mut acc = [0.0f64; 3];
    for _ in 0..draws {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &input));
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        for (a, &v) in acc.iter_mut().zip(g.value(y).data()) {
            *a += v;
        }
    }
    for (a, &x) in acc.iter().zip(&input) {
        let mean = a / draws as f64;
        assert!((mean - x).abs() <= 0.02 * x.abs(), "mean {mean} vs {x}");
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2, 3], &[0.1, -2., 3., 4., 5., 6.]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.; 6]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1., 2.]), true);
    let y = g.mul(x, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
    // repeated calls accumulate
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4., 8.]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1., 2.]), true);
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn composed_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    use rand::Rng;
    let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let inputs = vec![
        t(&[2, 11], &r(22)),
        t(&[3, 2, 3], &r(18)),
        t(&[3], &r(3)),
        t(&[3], &r(3)),
        t(&[3], &r(3)),
        t(&[3, 3], &r(9)),
    ];
    let report = check(&inputs, GradCheckConfig::default(), |g, v| {
        let c = g.conv1d(v[0], v[1], Some(v[2]), 2, 1, "c")?;
        let n = g.layer_norm_channels(c, v[3], v[4], 1e-5)?;
        let s = g.sigmoid(n);
        let p = g.avgpool_time(s)?;
        let l = g.linear(p, v[5], None)?;
        let m = g.mul(s, l)?;
        Ok(g.sum_squares(m))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn sgd_examples() {
    let g = vec![Tensor::from_f64(&[2], &[1.0, -3.0]).unwrap()];
    let mut p = vec![Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap()];
    let mut v = vec![Tensor::<f64>::zeros(&[2])];
    sgd_momentum_step(&mut p, &g, &mut v, 0.01, 0.9).unwrap();
    assert!((p[0].data()[0] - 0.49).abs() < 1e-15);
    assert!((p[0].data()[1] - 0.53).abs() < 1e-15);

    let mut p2 = vec![Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap()];
    let mut v2 = vec![Tensor::<f64>::zeros(&[2])];
    sgd_momentum_step(&mut p2, &[Tensor::zeros(&[2])], &mut v2, 0.01, 0.9).unwrap();
    assert_eq!(p2[0].data(), &[0.5, 0.5]);

    let gval = 2.0;
    let mut p3 = vec![Tensor::scalar(1.0f64)];
    let mut v3 = vec![Tensor::scalar(0.0f64)];
    for _ in 0..2 {
        sgd_momentum_step(&mut p3, &[Tensor::scalar(gval)], &mut v3, 0.01, 0.9).unwrap();
    }
    let expected = 1.0 - 0.01 * (gval + 1.9 * gval);
    assert!((p3[0].item() - expected).abs() < 1e-15);
}

#[test]
fn sgd_zero_lr_is_exact_noop() {
    let orig = Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap();
    let mut p = vec![orig.clone()];
    let mut v = vec![Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()];
    sgd_momentum_step(&mut p, &[Tensor::full(&[3], 7.0)], &mut v, 0.0, 0.9).unwrap();
    assert_eq!(p[0], orig);
}

proptest! {
    #[test]
    fn sigmoid_strictly_inside_unit_interval(x in -30.0f64..30.0) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(x));
        let s = g.sigmoid(v);
        let y = g.value(s).item();
        prop_assert!(y > 0.0 && y < 1.0);
    }

    #[test]
    fn layer_norm_frames_are_standardized(
        f in 2usize..12,
        t in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..f * t).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(t_(&[f, t], &data));
        let gain = g.constant(Tensor::full(&[f], 1.0));
        let bias = g.constant(Tensor::zeros(&[f]));
        let y = g.layer_norm_channels(x, gain, bias, LAYER_NORM_EPS).unwrap();
        let out = g.value(y).data();
        for c in 0..t {
            let col: Vec<f64> = (0..f).map(|r| data[r * t + c]).collect();
            let m = col.iter().sum::<f64>() / f as f64;
            let var_in = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / f as f64;
            if var_in <= 1e-3 { continue; }
            let ycol: Vec<f64> = (0..f).map(|r| out[r * t + c]).collect();
            let ym = ycol.iter().sum::<f64>() / f as f64;
            let yv = ycol.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / f as f64;
            prop_assert!(ym.abs() < 1e-6);
            prop_assert!((yv - 1.0).abs() < 1e-4 + LAYER_NORM_EPS / var_in);
        }
    }
}

fn t_(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    t(shape, data)
}
