mod common;

use mhn::data::{read_qa, TaskKind};
use mhn::harness::{evaluate, load_splits, train, train_on, LrSchedule, TaskData};
use mhn::model::Mhn;

#[test]
fn same_seed_gives_identical_metrics_log() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    common::dataset(&data, 40, 12, 12, 3);
    let mut cfg = common::small_run(&data, &[TaskKind::FrameqaAttr], 3);
    let read_log = |out: &std::path::Path| -> Vec<String> {
        std::fs::read_to_string(out.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_s");
                v.to_string()
            })
            .collect()
    };
    cfg.out = Some(tmp.path().join("a"));
    let a = train(&cfg).unwrap();
    cfg.out = Some(tmp.path().join("b"));
    let b = train(&cfg).unwrap();
    let (la, lb) = (
        read_log(&tmp.path().join("a")),
        read_log(&tmp.path().join("b")),
    );
    assert_eq!(la.len(), 3);
    assert_eq!(la, lb);
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
    }
    assert_eq!(a.test, b.test);

    cfg.seed = 1;
    cfg.out = Some(tmp.path().join("c"));
    train(&cfg).unwrap();
    assert_ne!(read_log(&tmp.path().join("c")), la);
}

#[test]
fn frozen_model_plateau_halves_the_rate_once() {
    let tmp = tempfile::tempdir().unwrap();
    common::dataset(tmp.path(), 16, 8, 1, 0);
    let mut cfg = common::small_run(tmp.path(), &[TaskKind::Action], 6);
    // A rate this small leaves the validation loss flat to far below the improvement threshold.
    cfg.optimizer.lr = 1e-12;
    cfg.optimizer.patience = 3;
    let out = train(&cfg).unwrap();
    let lrs: Vec<f64> = out.log.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, [1e-12, 1e-12, 1e-12, 1e-12, 5e-13, 5e-13]);

    cfg.optimizer.schedule = LrSchedule::Fixed;
    cfg.optimizer.patience = 2;
    let lrs: Vec<f64> = train(&cfg).unwrap().log.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, [1e-12, 1e-12, 5e-13, 5e-13, 2.5e-13, 2.5e-13]);
}

#[test]
fn memorized_train_split_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    common::dataset(tmp.path(), 24, 1, 1, 5);
    let mut cfg = common::small_run(tmp.path(), &[TaskKind::Action], 60);
    cfg.model.d = 32;
    cfg.optimizer.stop_at = Some(1.0);
    let data = TaskData::load(tmp.path(), &cfg.data.tasks).unwrap();
    let (model, store) = Mhn::new(data.spec(&cfg.model), 0).unwrap();
    let mut splits = load_splits(&model, &data, &cfg.data, &["train"]).unwrap();
    let train_split = splits.pop().unwrap();
    let out = train_on(&cfg, model, store, &train_split, &train_split, None).unwrap();
    let m = evaluate(&out.model, &out.store, &train_split).unwrap();
    assert_eq!(m.accuracy, Some(1.0), "{:?}", out.log.last());
}

#[test]
fn untrained_multi_choice_is_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    common::dataset(tmp.path(), 1, 1, 1200, 11);
    let cfg = common::small_run(tmp.path(), &[TaskKind::Transition], 1);
    let data = TaskData::load(tmp.path(), &cfg.data.tasks).unwrap();
    let mut accs = Vec::new();
    for seed in 0..3 {
        let (model, store) = Mhn::new(data.spec(&cfg.model), seed).unwrap();
        let test = load_splits(&model, &data, &cfg.data, &["test"])
            .unwrap()
            .pop()
            .unwrap();
        assert!(test.len() >= 1000);
        let acc = evaluate(&model, &store, &test).unwrap().accuracy.unwrap();
        assert!((acc - 0.25).abs() <= 0.05, "seed {seed}: accuracy {acc}");
        accs.push(acc);
    }
    // Three different initializations should not all pick identically.
    assert!(accs.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn count_reports_the_median_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    common::dataset(tmp.path(), 8, 4, 101, 2);
    let cfg = common::small_run(tmp.path(), &[TaskKind::Count], 1);
    let data = TaskData::load(tmp.path(), &cfg.data.tasks).unwrap();
    let (model, store) = Mhn::new(data.spec(&cfg.model), 0).unwrap();
    let test = load_splits(&model, &data, &cfg.data, &["test"])
        .unwrap()
        .pop()
        .unwrap();
    let m = evaluate(&model, &store, &test).unwrap();

    let mut answers: Vec<i64> = read_qa(tmp.path().join("test.jsonl"))
        .unwrap()
        .into_iter()
        .filter(|r| r.task == TaskKind::Count)
        .map(|r| r.answer)
        .collect();
    answers.sort_unstable();
    let n = answers.len() as f64;
    // Any median minimizes absolute error; the squared error here is for the middle element of an odd count.
    let med = answers[answers.len() / 2];
    let expect = answers
        .iter()
        .map(|&a| ((a - med) as f64).powi(2))
        .sum::<f64>()
        / n;
    assert_eq!(answers.len(), 101);
    assert!((m.baseline_mse.unwrap() - expect).abs() < 1e-12);
    assert!(m.mse.is_some() && m.accuracy.is_none());
}
