//! Values fixed by the published method, pinned so a refactor cannot drift.

use ffad_core::losses::LossWeights;
use ffad_core::toyworld::{simulate, ToyScenario, TEST_FRAMES, TRAINING_FRAMES};
use ffad_core::trainer::TrainConfig;

#[test]
fn toy_split_sizes() {
    assert_eq!((TRAINING_FRAMES, TEST_FRAMES), (210, 1242));
    assert_eq!(simulate(&ToyScenario::default_training(0)).unwrap().len(), 210);
    assert_eq!(simulate(&ToyScenario::default_test(0)).unwrap().len(), 1242);
}

#[test]
fn default_loss_weights() {
    let w = LossWeights::default();
    assert_eq!((w.intensity, w.gradient, w.flow, w.adversarial), (1.0, 1.0, 2.0, 0.05));
}

#[test]
fn training_hyperparameters() {
    let c = TrainConfig::default();
    assert_eq!((c.history, c.batch, c.resolution), (4, 4, 256));
    assert_eq!(c.base_learning_rates(1), (0.0001, 0.00001));
    assert_eq!(c.base_learning_rates(3), (0.0002, 0.00002));
    assert_eq!(c.weights, LossWeights::default());
}
