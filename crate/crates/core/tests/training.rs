use tce_core::data::{Dataset, Split};
use tce_core::encoder::{BackboneConfig, ModelConfig, TcnLayerConfig};
use tce_core::trainer::{evaluate, train, TrainConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { stage_widths: vec![4, 8, 8, 16], reduction: 2, ..Default::default() },
        tcn: TcnLayerConfig::stack(3, 16, &[1, 2, 4, 8], 0.3),
        ..ModelConfig::default()
    }
}

#[test]
fn training_loss_falls_between_iterations_100_and_2000() {
    let train_set = Dataset::generate(500, 1, Split::Train).unwrap();
    let val_set = Dataset::generate(50, 1, Split::Val).unwrap();
    let config = TrainConfig { batch_size: 8, iterations: 2000, val_interval: 100, seed: 1, model: small_model(), ..Default::default() };
    let outcome = train(&config, &train_set, &val_set, |_| {}).unwrap();
    assert_eq!(outcome.log.len(), 2000 / 100 + 1);
    let at = |iter: usize| outcome.log.iter().find(|r| r.iteration == iter).unwrap().train_loss;
    assert!(at(2000) < at(100), "loss at 2000 {} vs at 100 {}", at(2000), at(100));
    let (best_iter, best_acc, best_model) = &outcome.best;
    assert_eq!(evaluate(best_model, &val_set).unwrap().accuracy, *best_acc);
    assert!(outcome.log.iter().all(|r| r.val_accuracy <= *best_acc));
    assert!(outcome.log.iter().any(|r| r.iteration == *best_iter && r.val_accuracy == *best_acc));
}
