use avss::audionet::{Model, ModelConfig};
use avss::datasetio::{generate_fixtures, Dataset, FixtureSpec, Split};
use avss::mixer::MixtureSpec;
use avss::numerics::{Adam, AdamConfig};
use avss::training::{overfit, train, DataPool, Example, StepRecord, TrainConfig};

fn pools(dir: &std::path::Path) -> (DataPool, DataPool) {
    let manifest = generate_fixtures(&FixtureSpec::default(), dir, 11).unwrap();
    let ds = Dataset::open(&manifest, None).unwrap();
    let train = DataPool::load(&ds, &ds.split(Split::Train), 1).unwrap();
    let val = DataPool::load(&ds, &ds.split(Split::Val), 1).unwrap();
    (train, val)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn smoothed_loss_falls_on_a_fixed_batch() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, _) = pools(dir.path());
    let voices = pool.voice_entries();
    let accomp = pool.accomp_pool().categories.values().next().unwrap()[0].clone();
    let other = voices.iter().find(|v| v.sample_id != voices[0].sample_id).unwrap();
    let spec = MixtureSpec {
        voice_ids: vec![voices[0].id.clone(), other.id.clone()],
        accompaniment_id: Some(accomp),
        alpha: 1.0,
        target_index: 0,
        seed: 0,
    };
    let examples: Vec<Example> = vec![pool.materialize(&spec).unwrap()];
    let mut model = Model::new(ModelConfig::with_base(4, 4, true), 3).unwrap();
    let mut opt = Adam::new(AdamConfig::with_lr(1e-3), &model.store);
    let losses = overfit(&mut model, &mut opt, &examples, 1, 80).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    let (head, tail) = (mean(&losses[..10]), mean(&losses[70..]));
    assert!(tail < 0.7 * head, "first 10 mean {head:.3}, last 10 mean {tail:.3}");
}

#[test]
fn train_writes_log_and_resumable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (train_pool, val_pool) = pools(&dir.path().join("data"));
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        max_epochs: 3,
        max_steps: Some(12),
        seed: 4,
        ..Default::default()
    };
    let out = dir.path().join("run");
    let mut model = Model::new(ModelConfig::with_base(4, 2, true), 1).unwrap();
    let summary = train(&mut model, &train_pool, &val_pool, &config, &out).unwrap();
    assert_eq!(summary.steps, 12);
    assert!(summary.best_val_loss.is_finite());
    assert!(summary.saved.windows(2).all(|w| w[1].1 < w[0].1), "{:?}", summary.saved);

    let log = std::fs::read_to_string(&summary.log).unwrap();
    let records: Vec<StepRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 12);
    assert!(records.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));

    let (back, opt) = Model::load(&summary.checkpoint).unwrap();
    assert!(opt.is_some());
    assert_eq!(back.config(), model.config());
}
