use kse::finetune::{accuracy, TrainConfig};
use kse::toy::{toy_dataset, toy_model, toy_train_config, train_toy};
use kse::{analyze_model, compress_model, finetune, with_workers, CompressionConfig};

#[test]
fn baseline_loss_falls_over_first_epochs() {
    let data = toy_dataset(40, 21);
    let mut cfg = toy_train_config();
    cfg.epochs = 3;
    let out = train_toy(&data, 2, &cfg).unwrap();
    assert!(out.loss_trace.windows(2).all(|w| w[1] < w[0]), "{:?}", out.loss_trace);
}

#[test]
fn finetune_is_deterministic_across_worker_counts() {
    let data = toy_dataset(12, 22);
    let labeled = data.labeled().unwrap();
    let dense = toy_model(3);
    let cfg = CompressionConfig::default();
    let reports = analyze_model(&dense, &cfg.analysis()).unwrap();
    let comp = compress_model(&dense, &reports, &cfg).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 4,
        ..Default::default()
    };
    let a = with_workers(1, || finetune(&comp, &labeled, &tc)).unwrap().unwrap();
    let b = with_workers(4, || finetune(&comp, &labeled, &tc)).unwrap().unwrap();
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.model, b.model);
    assert_eq!(accuracy(&a.model, &labeled).unwrap(), accuracy(&b.model, &labeled).unwrap());
}
