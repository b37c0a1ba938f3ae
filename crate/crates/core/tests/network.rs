use segnl_core::nn::gradcheck::{check_layer, check_unet, transposed_conv_adjoint_gap, LAYERS};
use segnl_core::nn::train::EpochLog;
use segnl_core::nn::{
    load_checkpoint, predict_volume, save_checkpoint, Mode, SliceDataset, Tensor, TrainConfig, Trainer, UNet,
    UNetConfig,
};
use segnl_core::phantom::generate_subject;
use segnl_core::pipeline::headline_phantom;
use segnl_core::preprocess::preprocess_channels;
use segnl_core::rng::substream;

#[test]
fn every_layer_passes_ten_gradient_checks() {
    let mut rng = substream(21, "gradcheck", 0);
    for name in LAYERS {
        for k in 0..10 {
            let err = check_layer(name, &mut rng).unwrap();
            assert!(err <= 1e-5, "{name} instance {k}: relative error {err:e}");
        }
    }
}

#[test]
fn transposed_conv_is_the_adjoint_of_strided_conv() {
    let mut rng = substream(22, "adjoint", 0);
    for _ in 0..10 {
        let gap = transposed_conv_adjoint_gap(&mut rng).unwrap();
        assert!(gap <= 1e-12, "adjoint gap {gap:e}");
    }
}

#[test]
fn whole_network_gradient() {
    let cfg = UNetConfig { depth: 3, base_filters: 2, ..UNetConfig::default() };
    let err = check_unet(&cfg, 8, 4, &mut substream(23, "unet", 0)).unwrap();
    assert!(err <= 1e-5, "relative error {err:e}");
}

fn input(seed: u64) -> Tensor<f32> {
    let mut rng = substream(seed, "input", 0);
    let data = (0..2 * 2 * 16 * 16).map(|_| rand::Rng::random_range(&mut rng, -1.0f32..1.0)).collect();
    Tensor::new(&[2, 2, 16, 16], data).unwrap()
}

#[test]
fn eval_forward_is_bit_identical() {
    let cfg = UNetConfig { depth: 3, base_filters: 4, ..UNetConfig::default() };
    let mut model = UNet::<f32>::new(&cfg, &mut substream(5, "init", 0)).unwrap();
    let a = model.forward(input(1), Mode::Eval, &mut substream(1, "dropout", 0)).unwrap();
    let b = model.forward(input(1), Mode::Eval, &mut substream(2, "dropout", 0)).unwrap();
    assert_eq!(a, b);
    assert!(a.all_finite());
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let cfg = UNetConfig { depth: 3, base_filters: 4, ..UNetConfig::default() };
    let mut model = UNet::<f32>::new(&cfg, &mut substream(6, "init", 0)).unwrap();
    // One train-mode pass so batch-norm running statistics are not at their defaults.
    model.forward(input(3), Mode::Train, &mut substream(6, "dropout", 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let mut loaded = load_checkpoint(&path).unwrap();
    let mut unused = substream(0, "eval", 0);
    let a = model.forward(input(4), Mode::Eval, &mut unused).unwrap();
    let b = loaded.forward(input(4), Mode::Eval, &mut unused).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

/// Eight slices of a headline phantom subject with clean labels.
fn probe_slices() -> (SliceDataset, segnl_core::phantom::Subject) {
    let s = generate_subject(&headline_phantom(), 0).unwrap();
    let pre = preprocess_channels(&s.channel1, &s.channel2).unwrap();
    let [nx, ny, nz] = s.truth.dims;
    let mut all = SliceDataset::new(2, ny, nx);
    all.push_volume(&[&pre.channel1, &pre.channel2], &s.truth).unwrap();
    let mid = nz / 2;
    let mut data = SliceDataset::new(2, ny, nx);
    data.slices = all.slices[mid - 4..mid + 4].to_vec();
    (data, s)
}

#[test]
fn overfit_probe_loss_decreases() {
    let (data, _) = probe_slices();
    let cfg = UNetConfig { depth: 3, base_filters: 8, ..UNetConfig::default() };
    let model = UNet::new(&cfg, &mut substream(0, "init", 0)).unwrap();
    let mut t = Trainer::new(model);
    let train = TrainConfig { epochs: 10, batch_size: 1, lr_initial: 1e-3, ..TrainConfig::default() };
    t.run(&data, &data, &train, |_, _| Ok(())).unwrap();
    let loss = |r: &EpochLog| r.train_loss;
    assert!(loss(&t.log[9]) < loss(&t.log[0]), "epoch 1 {} vs epoch 10 {}", t.log[0].train_loss, t.log[9].train_loss);
}

#[test]
fn predicted_probabilities_sum_to_one() {
    let (_, s) = probe_slices();
    let pre = preprocess_channels(&s.channel1, &s.channel2).unwrap();
    let cfg = UNetConfig { depth: 3, base_filters: 4, ..UNetConfig::default() };
    let mut model = UNet::new(&cfg, &mut substream(9, "init", 0)).unwrap();
    let probs = predict_volume(&mut model, &[&pre.channel1, &pre.channel2]).unwrap();
    for i in 0..probs[0].data.len() {
        let sum: f64 = probs.iter().map(|p| p.data[i] as f64).sum();
        assert!((sum - 1.0).abs() <= 1e-6, "voxel {i}: {sum}");
    }
}
