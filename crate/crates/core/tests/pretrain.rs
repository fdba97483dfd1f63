use std::sync::OnceLock;

use doco_core::encoder::{Encoder, EncoderConfig};
use doco_core::objective::{stat_loss, SourceStats};
use doco_core::synth::*;

fn source() -> &'static (Task, Encoder, PretrainLog) {
    static CELL: OnceLock<(Task, Encoder, PretrainLog)> = OnceLock::new();
    CELL.get_or_init(|| {
        let task = Task::generate(TaskSpec::default()).unwrap();
        let (enc, log) = pretrain_source(&task, &EncoderConfig::default(), &PretrainConfig::default()).unwrap();
        (task, enc, log)
    })
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn default_task_reaches_floor() {
    let (_, _, log) = source();
    assert!(log.held_out_accuracy >= 0.9, "held-out accuracy {}", log.held_out_accuracy);
    assert!(log.steps >= PretrainConfig::default().min_steps);
}

#[test]
fn single_class_is_trivial() {
    let task = Task::generate(TaskSpec::new(1, 1, 4, 4, 2)).unwrap();
    let cfg = PretrainConfig { min_steps: 1, max_steps: 10, eval_every: 1, ..PretrainConfig::default() };
    let base = EncoderConfig { depth: 1, d_model: 8, ..EncoderConfig::default() };
    let (_, log) = pretrain_source(&task, &base, &cfg).unwrap();
    assert_eq!(log.held_out_accuracy, 1.0);
}

#[test]
fn seeds_give_different_weights() {
    let (task, enc, _) = source();
    let cfg = PretrainConfig { seed: 1, ..PretrainConfig::default() };
    let (other, log) = pretrain_source(task, &EncoderConfig::default(), &cfg).unwrap();
    assert!(log.held_out_accuracy >= 0.9);
    assert_ne!(&other, enc);
}

#[test]
fn unreachable_floor_is_error() {
    let task = Task::generate(TaskSpec::new(3, 1, 4, 4, 5)).unwrap();
    let cfg = PretrainConfig { min_steps: 1, max_steps: 2, eval_every: 1, accuracy_floor: 1.01, ..PretrainConfig::default() };
    let base = EncoderConfig { depth: 1, d_model: 8, ..EncoderConfig::default() };
    assert!(pretrain_source(&task, &base, &cfg).is_err());
}

#[test]
fn source_stats_deterministic_and_concentrating() {
    let (task, enc, _) = source();
    let a = cache_source_stats(enc, task, 300, 7).unwrap();
    assert_eq!(a, cache_source_stats(enc, task, 300, 7).unwrap());
    assert_eq!(a.n_source, 300);
    assert!(cache_source_stats(enc, task, 1, 7).is_err());

    let reference = cache_source_stats(enc, task, 20_000, 99).unwrap();
    let dist = |s: &SourceStats| l2(&s.mu_s, &reference.mu_s) + l2(&s.sigma_s, &reference.sigma_s);
    let small = dist(&cache_source_stats(enc, task, 50, 1).unwrap());
    let large = dist(&cache_source_stats(enc, task, 3000, 1).unwrap());
    assert!(large < small, "n=3000 distance {large} not below n=50 distance {small}");
}

#[test]
fn clean_domain_matches_source_stats() {
    let (task, enc, _) = source();
    let stats = cache_source_stats(enc, task, 300, 0).unwrap();
    let loss_at = |severity: f64| {
        let cfg = StreamConfig {
            severity,
            kappa: 0.0,
            batch_size: 256,
            batches_per_domain: 1,
            shift_kinds: vec![ShiftKind::AdditiveBias],
            domain_order: vec![0],
            seed: 3,
        };
        let stream = make_stream(&cfg, task).unwrap();
        stat_loss(&enc.forward_features(stream.batches[0].tokens(), None).unwrap(), &stats).unwrap()
    };
    let (fresh, _) = task.clean_id_batch(256, &mut doco_core::rng::stream(3, "fresh"));
    let sampling = stat_loss(&enc.forward_features(&fresh, None).unwrap(), &stats).unwrap();
    let clean = loss_at(0.0);
    let shifted = loss_at(SEVERE);
    assert!(clean < 2.0 * sampling, "clean {clean} vs fresh clean batch {sampling}");
    assert!(clean < 0.25 * shifted, "clean {clean} vs shifted {shifted}");
}

#[test]
fn source_accuracy_falls_with_severity() {
    let (task, enc, _) = source();
    let stats = cache_source_stats(enc, task, 300, 0).unwrap();
    let severities = [0.0, 0.5, 1.0, 2.0, 3.0];
    for kind in [ShiftKind::AdditiveBias, ShiftKind::Gain] {
        let accs: Vec<f64> = severities
            .iter()
            .map(|&severity| {
                (0..10u64)
                    .map(|seed| {
                        let cfg = StreamConfig {
                            severity,
                            batches_per_domain: 4,
                            shift_kinds: vec![kind],
                            domain_order: vec![0],
                            seed,
                            ..StreamConfig::default()
                        };
                        let stream = make_stream(&cfg, task).unwrap();
                        doco_core::adapt::run_source_only(enc, &stats, &stream.batches)
                            .unwrap()
                            .accuracy(false)
                            .unwrap()
                    })
                    .sum::<f64>()
                    / 10.0
            })
            .collect();
        let inversions = accs.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(inversions <= 1, "{kind}: accuracies {accs:?}");
        assert!(accs[0] > accs[severities.len() - 1], "{kind}: accuracies {accs:?}");
    }
}
