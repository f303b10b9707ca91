use yvector::model::{ModelConfig, SpeakerNet};
use yvector::Error;

#[test]
fn minimum_input_length() {
    let cfg = ModelConfig::preset("yvector-5", 4).unwrap().scaled(4).unwrap();
    let min = cfg.min_samples();
    assert_eq!(min, 2412);
    assert_eq!(cfg.encoder.shape_chain(min).unwrap().frames(), cfg.tdnn.context_span() + 1);
    let net: SpeakerNet<f32> = SpeakerNet::new(cfg, 0).unwrap();
    assert_eq!(net.embed(&vec![0.1; min]).unwrap().len(), 128);
    assert!(matches!(net.embed(&vec![0.1; min - 1]), Err(Error::InputTooShort { .. })));
}

#[test]
fn full_width_parameter_layout() {
    let cfg = ModelConfig::preset("yvector-5", 10).unwrap();
    assert_eq!(cfg.tdnn.embedding_dim, 512);
    assert_eq!(cfg.am_softmax.scale, 30.0);
    assert_eq!(cfg.am_softmax.margin, 0.35);
    let net: SpeakerNet<f32> = SpeakerNet::new(cfg, 0).unwrap();
    let shape = |n: &str| net.params.get(net.params.id(n).unwrap()).shape().to_vec();
    assert_eq!(shape("encoder.branch0.filter.conv.weight"), vec![90, 1, 12]);
    assert_eq!(shape("encoder.branch2.dm.conv.weight"), vec![192, 90, 5]);
    assert_eq!(shape("tdnn0.conv.weight"), vec![512, 1536, 5]);
    assert_eq!(shape("head.fc1.weight"), vec![512, 3000]);
    assert_eq!(shape("head.classes"), vec![10, 512]);
}

#[test]
fn seeded_init_and_named_restore() {
    let cfg = ModelConfig::preset("multi-32", 3).unwrap().scaled(16).unwrap();
    let a: SpeakerNet<f32> = SpeakerNet::new(cfg.clone(), 9).unwrap();
    let b: SpeakerNet<f32> = SpeakerNet::new(cfg.clone(), 9).unwrap();
    let c: SpeakerNet<f32> = SpeakerNet::new(cfg.clone(), 10).unwrap();
    assert_eq!(a.params.tensors(), b.params.tensors());
    assert_ne!(a.params.tensors(), c.params.tensors());

    let named: Vec<_> = a.params.names().iter().cloned().zip(a.params.tensors().iter().cloned()).collect();
    let r = SpeakerNet::from_named(cfg.clone(), named.clone()).unwrap();
    assert_eq!(r.params.tensors(), a.params.tensors());
    let mut renamed = named.clone();
    renamed[0].0 = "bogus".into();
    assert!(matches!(SpeakerNet::from_named(cfg.clone(), renamed), Err(Error::Checkpoint(_))));
    assert!(matches!(SpeakerNet::from_named(cfg, named[1..].to_vec()), Err(Error::Checkpoint(_))));
}
