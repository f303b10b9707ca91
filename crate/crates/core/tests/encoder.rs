use proptest::prelude::*;
use yvector::encoder::*;
use yvector::nn::{ParamStore, Session};
use yvector::numerics::{Graph, Tensor};
use yvector::rng;
use yvector::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn build(cfg: EncoderConfig, seed: u64) -> (WaveformEncoder, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let enc = WaveformEncoder::new(cfg, &mut store, &mut rng::stream(seed, &[0])).unwrap();
    (enc, store)
}

fn wave(len: usize, seed: u64) -> Vec<f32> {
    use rand::Rng;
    let mut r = rng::stream(seed, &[99]);
    (0..len).map(|_| r.gen_range(-1.0f32..1.0)).collect()
}

fn run(enc: &WaveformEncoder, store: &ParamStore<f32>, x: &[f32]) -> (Vec<usize>, Vec<f32>) {
    let mut s = Session::inference(store);
    let w = s.input(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap());
    let y = enc.forward(&mut s, w).unwrap();
    let v = s.graph.value(y);
    (v.shape().to_vec(), v.data().to_vec())
}

#[test]
fn yvector5_shape_chain() {
    let cfg = EncoderConfig::preset("yvector-5").unwrap();
    let chain = cfg.shape_chain(62400).unwrap();
    assert_eq!(chain.branch_lengths, vec![(10399, 3465), (6932, 3464), (3465, 3461)]);
    assert_eq!(chain.concat, 3461);
    assert_eq!(chain.downsample, vec![1729, 864, 431]);
    assert_eq!(cfg.concat_channels(), 512);
    assert_eq!(chain.channels, 1536);
    assert_eq!(cfg.aggregation_factors(), vec![4, 2, 1]);
}

#[test]
fn yvector5_forward_shapes_at_full_width() {
    let (enc, store) = build(EncoderConfig::preset("yvector-5").unwrap(), 1);
    let x = wave(62400, 1);
    let mut s = Session::inference(&store);
    let w = s.input(Tensor::new(vec![1, x.len()], x).unwrap());
    let tr = enc.forward_traced(&mut s, w).unwrap();
    let shape = |v| s.graph.value(v).shape().to_vec();
    let branches: Vec<_> = tr.branches.iter().map(|&v| shape(v)).collect();
    assert_eq!(branches, vec![vec![160, 3465], vec![160, 3464], vec![192, 3461]]);
    assert_eq!(shape(tr.concat), vec![512, 3461]);
    let ds: Vec<_> = tr.downsample.iter().map(|&v| shape(v)).collect();
    assert_eq!(ds, vec![vec![512, 1729], vec![512, 864], vec![512, 431]]);
    assert_eq!(shape(tr.output), vec![1536, 431]);
    assert!(s.graph.value(tr.output).is_finite());
}

#[test]
fn decimation_24_variant_without_aggregation() {
    let cfg = EncoderConfig::preset("yvector-1").unwrap();
    assert!(!cfg.multilevel_aggregation && !cfg.tfse_enabled);
    let chain = cfg.shape_chain(62400).unwrap();
    assert_eq!(chain.branch_lengths, vec![(7799, 2599), (5199, 2598), (2599, 2595)]);
    assert_eq!(chain.downsample, vec![1296, 647, 323]);
    assert_eq!(chain.channels, 512);
    let (enc, store) = build(cfg.scaled(8).unwrap(), 2);
    let (shape, _) = run(&enc, &store, &wave(62400, 2));
    assert_eq!(shape, vec![64, 323]);
}

#[test]
fn presets_keep_decimation_constant() {
    let expected = [
        ("yvector-1", 24),
        ("yvector-2", 24),
        ("yvector-3", 24),
        ("yvector-4", 18),
        ("yvector-5", 18),
        ("single-low", 20),
        ("single-mid", 20),
        ("single-high", 20),
        ("multi-32", 20),
    ];
    assert_eq!(expected.len(), PRESET_NAMES.len());
    for (name, dec) in expected {
        let cfg = EncoderConfig::preset(name).unwrap();
        cfg.validate().unwrap();
        for b in &cfg.branches {
            assert_eq!(b.stride * b.dm_stride, dec, "{name}");
            assert_eq!(b.kernel, 2 * b.stride, "{name}");
        }
        let first: usize = cfg.branches.iter().map(|b| b.filter_channels).sum();
        let want = match name {
            "yvector-1" | "yvector-2" => 150,
            "yvector-3" | "yvector-4" | "yvector-5" => 270,
            "multi-32" => 96,
            _ => 96,
        };
        assert_eq!(first, want, "{name}");
        assert_eq!(cfg.concat_channels(), 512, "{name}");
    }
    let y5 = EncoderConfig::preset("yvector-5").unwrap();
    let dm: Vec<usize> = y5.branches.iter().map(|b| b.dm_channels).collect();
    assert_eq!(dm, vec![160, 160, 192]);
    assert!(matches!(EncoderConfig::preset("yvector-6"), Err(Error::Config(_))));
}

#[test]
fn every_preset_runs_on_a_short_input() {
    for name in PRESET_NAMES {
        let cfg = EncoderConfig::preset(name).unwrap().scaled(16).unwrap();
        let len = 16000;
        let chain = cfg.shape_chain(len).unwrap();
        let (enc, store) = build(cfg, 3);
        let (shape, data) = run(&enc, &store, &wave(len, 3));
        assert_eq!(shape, vec![chain.channels, chain.frames()], "{name}");
        assert!(data.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn validation_rejects_inconsistent_geometry() {
    let mut cfg = EncoderConfig::preset("yvector-5").unwrap();
    cfg.branches[1].dm_stride = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    let mut cfg = EncoderConfig::preset("yvector-5").unwrap();
    cfg.branches[0].kernel = 13;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.strict_ratio = false;
    cfg.validate().unwrap();

    let mut cfg = EncoderConfig::preset("yvector-5").unwrap();
    cfg.dropout_rate = 1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn input_shorter_than_a_branch_names_it() {
    let (enc, store) = build(EncoderConfig::preset("yvector-5").unwrap().scaled(16).unwrap(), 4);
    let mut s = Session::inference(&store);
    let w = s.input(Tensor::new(vec![1, 30], vec![0.1f32; 30]).unwrap());
    match enc.forward(&mut s, w) {
        Err(Error::InputTooShort { layer, .. }) => assert_eq!(layer, "encoder.branch0.dm"),
        other => panic!("expected input-too-short, got {other:?}"),
    }
}

#[test]
fn single_identity_branch_preserves_length() {
    // one channel throughout: channel normalization of a single value leaves
    // only its shift, so the output is ReLU(norm bias) at every sample
    let cfg = EncoderConfig {
        branches: vec![BranchSpec::new(1, 1, 1, 1, 1, 1)],
        downsample_blocks: vec![DownsampleSpec::new(1, 1, 1)],
        multilevel_aggregation: false,
        tfse_enabled: false,
        dropout_rate: 0.0,
        strict_ratio: false,
    };
    let (enc, mut store) = build(cfg, 5);
    for name in ["encoder.branch0.filter.conv.weight", "encoder.branch0.dm.conv.weight", "encoder.ds0.conv.weight"] {
        let id = store.id(name).unwrap();
        store.get_mut(id).data_mut()[0] = 1.0;
    }
    let x = wave(100, 5);
    let mut s = Session::inference(&store);
    let w = s.input(Tensor::new(vec![1, 100], x).unwrap());
    let (_, concat) = enc.multi_scale_filter(&mut s, w).unwrap();
    assert_eq!(s.graph.value(concat).shape(), &[1, 100]);
    let (shape, data) = run(&enc, &store, &wave(100, 5));
    assert_eq!(shape, vec![1, 100]);
    assert!(data.iter().all(|&v| v == data[0]));
}

#[test]
fn zero_waveform_gives_finite_output() {
    let (enc, store) = build(EncoderConfig::preset("yvector-5").unwrap().scaled(8).unwrap(), 6);
    let (_, data) = run(&enc, &store, &vec![0.0; 20000]);
    assert!(data.iter().all(|v| v.is_finite()));
}

#[test]
fn inference_is_deterministic() {
    let (enc, store) = build(EncoderConfig::preset("yvector-5").unwrap().scaled(8).unwrap(), 7);
    let x = wave(12000, 7);
    assert_eq!(run(&enc, &store, &x), run(&enc, &store, &x));
}

#[test]
fn tfse_changes_the_output() {
    let on = EncoderConfig::preset("yvector-5").unwrap().scaled(8).unwrap();
    let mut off = on.clone();
    off.tfse_enabled = false;
    let (enc_on, store_on) = build(on, 8);
    let (enc_off, mut store_off) = build(off, 8);
    for (i, name) in store_off.names().to_vec().iter().enumerate() {
        let src = store_on.id(name).unwrap();
        store_off.tensors_mut()[i] = store_on.get(src).clone();
    }
    let x = wave(12000, 8);
    assert_ne!(run(&enc_on, &store_on, &x).1, run(&enc_off, &store_off, &x).1);
}

#[test]
fn zero_conv_weights_give_identical_frames() {
    let cfg = EncoderConfig::preset("yvector-5").unwrap().scaled(8).unwrap();
    let (enc, mut store) = build(cfg, 9);
    for b in &enc.blocks {
        store.get_mut(b.conv.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut s = Session::inference(&store);
    let x = wave(12000, 9);
    let w = s.input(Tensor::new(vec![1, x.len()], x).unwrap());
    let tr = enc.forward_traced(&mut s, w).unwrap();
    for &d in &tr.downsample {
        let v = s.graph.value(d);
        let (f, t) = v.dims2().unwrap();
        for c in 0..f {
            let row = &v.data()[c * t..(c + 1) * t];
            assert!(row.iter().all(|&x| (x - row[0]).abs() < 1e-6));
        }
    }
}

#[test]
fn gradients_reach_every_branch() {
    let cfg = EncoderConfig::preset("yvector-5").unwrap().scaled(8).unwrap();
    let (enc, store) = build(cfg, 10);
    let x = wave(12000, 10);
    let mut s = Session::training(&store, rng::stream(10, &[1]));
    let w = s.input(Tensor::new(vec![1, x.len()], x).unwrap());
    let y = enc.forward(&mut s, w).unwrap();
    let l = s.graph.sum_squares(y);
    s.graph.backward(l).unwrap();
    let grads = s.param_grads();
    for b in &enc.branches {
        let g = grads[b.filter.weight.index()].expect("filter bound");
        assert!(g.sum_squares() > 0.0);
    }
}

#[test]
fn frequency_gate_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[1.0, 3.0, 0.0, 0.0]));
    let w1 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b1 = g.constant(t(&[2], &[0.0, 0.0]));
    let y = recalibrate_frequency(&mut g, x, w1, b1).unwrap();
    let s2 = 1.0 / (1.0 + (-2.0f64).exp());
    let want = [s2, 3.0 * s2, 0.0, 0.0];
    for (a, b) in g.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((s2 - 0.8808).abs() < 1e-4 && (3.0 * s2 - 2.6424).abs() < 1e-4);

    let zero = g.constant(Tensor::zeros(&[2, 2]));
    let zb = g.constant(Tensor::zeros(&[2]));
    let y = recalibrate_frequency(&mut g, x, zero, zb).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 1.5, 0.0, 0.0]);

    let big = g.constant(t(&[2], &[50.0, 50.0]));
    let y = recalibrate_frequency(&mut g, x, zero, big).unwrap();
    for (a, b) in g.value(y).data().iter().zip([1.0, 3.0, 0.0, 0.0]) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn time_gate_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]));
    let w2 = g.constant(t(&[1, 2], &[1.0, 1.0]));
    let b2 = g.constant(t(&[1], &[0.0]));
    let y = recalibrate_time(&mut g, x, w2, b2).unwrap();
    let s2 = 1.0 / (1.0 + (-2.0f64).exp());
    let v = g.value(y).data();
    assert!((v[0] - s2).abs() < 1e-12 && (v[2] - s2).abs() < 1e-12);
    assert_eq!((v[1], v[3]), (0.0, 0.0));

    let w0 = g.constant(Tensor::zeros(&[1, 2]));
    let y = recalibrate_time(&mut g, x, w0, b2).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.0, 0.5, 0.0]);
}

#[test]
fn multilevel_aggregate_examples() {
    let mut g = Graph::<f64>::new();
    let maps: Vec<_> = [1729, 864, 431]
        .iter()
        .map(|&l| g.constant(Tensor::full(&[4, l], 2.5)))
        .collect();
    let y = multilevel_aggregate(&mut g, &maps, &[4, 2, 1]).unwrap();
    assert_eq!(g.value(y).shape(), &[12, 431]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));

    let one = multilevel_aggregate(&mut g, &maps[..1], &[1]).unwrap();
    assert_eq!(one, maps[0]);

    let short = g.constant(Tensor::full(&[4, 800], 1.0));
    let bad = multilevel_aggregate(&mut g, &[short, maps[2]], &[2, 1]);
    assert!(matches!(bad, Err(Error::Config(_))));
}

#[test]
fn impulse_fixture_sets_unit_impulses() {
    let (enc, mut store) = build(EncoderConfig::preset("multi-32").unwrap(), 11);
    enc.set_impulse_filters(&mut store);
    for (_, filters) in enc.first_layer_filters(&store) {
        for f in filters {
            assert_eq!(f[0], 1.0);
            assert!(f[1..].iter().all(|&v| v == 0.0));
        }
    }
}

fn gate_case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(f, t)| {
        (
            Just(f),
            Just(t),
            prop::collection::vec(-10.0f64..10.0, f * t),
            prop::collection::vec(-10.0f64..10.0, f * f),
            prop::collection::vec(-10.0f64..10.0, f),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn gates_never_amplify((f, tt, x, w, b) in gate_case()) {
        let mut g = Graph::new();
        let xv = g.constant(t(&[f, tt], &x));
        let w1 = g.constant(t(&[f, f], &w));
        let b1 = g.constant(t(&[f], &b));
        let yf = recalibrate_frequency(&mut g, xv, w1, b1).unwrap();
        let w2 = g.constant(t(&[1, f], &w[..f]));
        let b2 = g.constant(t(&[1], &b[..1]));
        let yt = recalibrate_time(&mut g, xv, w2, b2).unwrap();
        for y in [yf, yt] {
            for (o, i) in g.value(y).data().iter().zip(&x) {
                prop_assert!(o.abs() <= i.abs());
            }
        }
    }
}
