use pairwise_cl::encoders::{
    load_checkpoint, save_checkpoint, EncoderSpec, ModelCheckpoint, MultiViewModel, ViewClassifier,
};
use pairwise_cl::Tensor;

fn input(rows: usize, dims: &[usize]) -> Tensor<f32> {
    let mut shape = vec![rows];
    shape.extend(dims);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i * 37 % 101) as f32 - 50.0) / 25.0).collect()).unwrap()
}

#[test]
fn multiview_checkpoint_round_trip() {
    let specs = vec![
        EncoderSpec::for_view("w2v2", vec![13, 6, 32]).unwrap(),
        EncoderSpec::for_view("spec", vec![16, 24]).unwrap(),
        EncoderSpec::for_view("egemaps", vec![88]).unwrap(),
    ];
    let model = MultiViewModel::<f32>::new(specs.clone(), 11).unwrap();
    let ckpt = ModelCheckpoint::from_multiview(&model);
    let bytes = ckpt.to_bytes();
    let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.views(), ["w2v2", "spec", "egemaps"]);
    assert!(!back.is_classifier());
    for s in &specs {
        assert_eq!(&back.spec_for(&s.view).unwrap(), s);
    }
    let restored = back.to_multiview().unwrap();
    for s in &specs {
        let a = ViewClassifier::from_checkpoint(&ckpt, s, 4, 0).unwrap();
        let b = ViewClassifier::from_checkpoint(&back, s, 4, 0).unwrap();
        let x = input(3, &s.input_dims);
        assert_eq!(
            a.representations(&x).unwrap().data(),
            b.representations(&x).unwrap().data()
        );
    }
    assert_eq!(ModelCheckpoint::from_multiview(&restored).to_bytes(), bytes);
}

#[test]
fn classifier_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = EncoderSpec::for_view("spec", vec![16, 24]).unwrap();
    let classes: Vec<String> = ["neutral", "angry", "sad", "happy"].map(String::from).to_vec();
    let model = ViewClassifier::<f32>::new(spec.clone(), classes.len(), 3).unwrap();
    let path = dir.path().join("clf.pcl");
    save_checkpoint(&path, &ModelCheckpoint::from_classifier(&model, &classes)).unwrap();

    let ckpt = load_checkpoint(&path).unwrap();
    assert!(ckpt.is_classifier());
    assert_eq!(ckpt.classes(), classes);
    let back = ckpt.to_classifier().unwrap();
    assert_eq!(back.spec, spec);
    let x = input(5, &spec.input_dims);
    let (p, q) = (model.predict_proba(&x).unwrap(), back.predict_proba(&x).unwrap());
    assert_eq!(p.shape(), [5, 4]);
    assert_eq!(p.data(), q.data());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let spec = EncoderSpec::for_view("egemaps", vec![10]).unwrap();
    let model = MultiViewModel::<f32>::new(vec![spec], 1).unwrap();
    let bytes = ModelCheckpoint::from_multiview(&model).to_bytes();
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(ModelCheckpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut garbage = bytes.clone();
    garbage[0] ^= 0xff;
    assert!(ModelCheckpoint::from_bytes(&garbage).is_err());
    assert!(ModelCheckpoint::from_multiview(&model).to_classifier().is_err());
}
