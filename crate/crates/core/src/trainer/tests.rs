use super::*;
use crate::checkpoint::{decode, encode};
use crate::config::ModelConfig;
use crate::optim::global_norm;
use crate::task::generate_splits;

fn tiny_config(max_iters: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_mlp: 32,
        ..ModelConfig::default()
    };
    c.train.batch_size = 8;
    c.train.max_iters = max_iters;
    c.train.warmup_iters = 2.min(max_iters);
    c.train.eval_interval = 5;
    c.train.eval_samples = 20;
    c.train.seed = 9;
    c
}

fn split() -> DatasetSplit {
    generate_splits(200, 40, 3).unwrap()
}

#[test]
fn zero_iterations_reports_initial_accuracy_only() {
    let (_, report) = train(&tiny_config(0), 1, &split(), &mut ()).unwrap();
    assert!(report.steps.is_empty());
    assert_eq!(report.evals.len(), 1);
    assert_eq!(report.evals[0].iter, 0);
    assert_eq!(report.evals[0].n_samples, 40);
    assert!(!report.failed());
}

#[test]
fn same_seeds_give_identical_traces() {
    let s = split();
    let (a, ra) = train(&tiny_config(12), 1, &s, &mut ()).unwrap();
    let (b, rb) = train(&tiny_config(12), 1, &s, &mut ()).unwrap();
    assert_eq!(ra.steps, rb.steps);
    assert_eq!(a.model, b.model);
    let (c, _) = train(&tiny_config(12), 2, &s, &mut ()).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn evaluations_follow_the_interval() {
    let (_, report) = train(&tiny_config(12), 1, &split(), &mut ()).unwrap();
    let iters: Vec<usize> = report.evals.iter().map(|e| e.iter).collect();
    assert_eq!(iters, vec![0, 5, 10, 12]);
    assert_eq!(report.evals.last().unwrap().n_samples, 40);
    assert_eq!(report.steps.len(), 12);
    assert!(report.steps.iter().all(|s| s.loss.is_finite()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let s = split();
    let mut full = Trainer::new(tiny_config(10), 4).unwrap();
    let mut full_trace = Vec::new();
    for _ in 0..10 {
        full_trace.push(full.step(&s.train).unwrap());
    }

    let mut first = Trainer::new(tiny_config(10), 4).unwrap();
    for _ in 0..4 {
        first.step(&s.train).unwrap();
    }
    let mut resumed = decode(&encode(&first)).unwrap();
    drop(first);
    let mut tail = Vec::new();
    for _ in 4..10 {
        tail.push(resumed.step(&s.train).unwrap());
    }
    assert_eq!(&full_trace[4..], &tail[..]);
    assert_eq!(full.model, resumed.model);
}

#[test]
fn clipped_gradients_respect_the_ceiling() {
    let cfg = tiny_config(1);
    let trainer = Trainer::new(cfg.clone(), 5).unwrap();
    let s = split();
    let batch: Vec<&AdditionSample> = s.train.iter().take(8).collect();
    let (ids, targets, mask) = lm_batch(&batch, false);
    let mut tape = Tape::new();
    let pass = trainer
        .model
        .forward(&mut tape, &ids, 8, SEQUENCE_LEN - 1, true)
        .unwrap();
    let loss = tape.cross_entropy(pass.logits, &targets, &mask).unwrap();
    tape.backward(loss).unwrap();
    let mut grads: Vec<Tensor> = pass
        .params
        .iter()
        .map(|&v| {
            let g = tape.grad(v).unwrap();
            let d = g.data().iter().map(|x| x * 1e3).collect();
            Tensor::new(g.shape(), d).unwrap()
        })
        .collect();
    let clip = 0.25;
    let before = clip_global_norm(&mut grads, clip);
    assert!(before > clip);
    assert!(global_norm(&grads) <= clip + 1e-12);
}

#[test]
fn answer_only_mask_covers_the_answer() {
    let s = crate::task::render_sample(123, 456).unwrap();
    let (ids, targets, mask) = lm_batch(&[&s], true);
    assert_eq!(ids.len(), 13);
    let picked: Vec<usize> = targets
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(t, _)| *t)
        .collect();
    assert_eq!(picked, s.answer);
    let (_, _, full) = lm_batch(&[&s], false);
    assert!(full.iter().all(|m| *m));
}

#[test]
fn divergence_is_reported_not_raised() {
    let mut cfg = tiny_config(20);
    cfg.train.learning_rate = 1e200;
    cfg.train.min_lr = 1e200;
    cfg.train.grad_clip = 0.0;
    cfg.train.weight_decay = 0.0;
    let (_, report) = train(&cfg, 1, &split(), &mut ()).unwrap();
    assert!(report.failed(), "{:?}", report.steps.last());
    assert!(report.final_accuracy < 0.05);
}
