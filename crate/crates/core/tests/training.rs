//! Training behaviour on small tasks with known answers.

use rand::Rng as _;
use timesteer::corpus::TemporalExample;
use timesteer::model::{AttentionMode, Interventions, Model, ModelConfig};
use timesteer::numerics::seeded_rng;
use timesteer::trainer::{accuracy, grad_check, make_batch, train, TrainConfig};

fn separable(n: usize, seed: u64) -> Vec<TemporalExample> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let lo = if label == 0 { 0 } else { 20 };
            let len = rng.gen_range(3..=8);
            TemporalExample {
                tokens: (0..len).map(|_| rng.gen_range(lo..lo + 20)).collect(),
                label,
                period: 0,
            }
        })
        .collect()
}

fn small(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 8,
        n_classes: 2,
        attention_mode: mode,
        seed: 11,
    }
}

#[test]
fn separable_task_is_learned() {
    let data = separable(128, 1);
    let held = separable(128, 2);
    let cfg = TrainConfig {
        epochs: 200,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let model = Model::init(small(AttentionMode::Causal)).unwrap();
    let (ckpt, report) = train(model, &data, &cfg, &held).unwrap();
    let reached = report.epoch_accuracy.iter().position(|a| *a >= 0.95);
    assert!(reached.is_some(), "train accuracy {:?}", report.epoch_accuracy);
    assert!(report.final_loss() < report.first_batch_loss);
    assert!(accuracy(&ckpt.model, &held, &Interventions::new()).unwrap() >= 0.95);
}

#[test]
fn training_is_deterministic() {
    let data = separable(64, 3);
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let model = Model::init(small(AttentionMode::Bidirectional)).unwrap();
    let (a, ra) = train(model.clone(), &data, &cfg, &[]).unwrap();
    let (b, rb) = train(model, &data, &cfg, &[]).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(ra.epoch_loss, rb.epoch_loss);
    assert_eq!(a.model.content_hash(), b.model.content_hash());
}

fn check_bar(model: &Model, data: &[TemporalExample], what: &str) {
    let refs: Vec<&TemporalExample> = data.iter().collect();
    let batch = make_batch(&refs).unwrap();
    let base = grad_check(model, &batch, 1e-4).unwrap();
    let doubled = grad_check(model, &batch, 2e-4).unwrap();
    eprintln!(
        "{what}: eps 1e-4 -> {:.3e} ({} params, worst {:?}); eps 2e-4 -> {:.3e}",
        base.max_relative_error, base.n_checked, base.worst, doubled.max_relative_error
    );
    assert!(base.n_checked >= 200);
    assert!(base.max_relative_error < 1e-3, "{what}: {base:?}");
    assert!(doubled.max_relative_error < 1e-3, "{what}: {doubled:?}");
}

#[test]
fn gradients_hold_at_init_and_after_training_steps() {
    let data = separable(40, 4);
    for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
        let model = Model::init(ModelConfig::toy(2, mode, 6)).unwrap();
        check_bar(&model, &data[..8], &format!("{mode:?} init"));
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (ckpt, report) = train(model, &data, &cfg, &[]).unwrap();
        assert_eq!(report.steps, 5);
        check_bar(&ckpt.model, &data[..8], &format!("{mode:?} after 5 steps"));
    }
}
