use isfl::checkpoint;
use isfl::data::SyntheticTask;
use isfl::encoder::EncoderConfig;
use isfl::experiment::{
    evaluate_checkpoint, sweep, sweep_plan, train_experiment, write_run, write_sweep_table,
    DataSource, ExperimentConfig, SweepRow,
};
use isfl::FusionMode;

fn small_config(mode: FusionMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        data: DataSource::Synthetic(SyntheticTask {
            n_examples: 240,
            seq_len: 6,
            vocab_size: 10,
            ..SyntheticTask::default()
        }),
        ..ExperimentConfig::default()
    };
    cfg.model.encoder = EncoderConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_len: 8,
        ..EncoderConfig::default()
    };
    cfg.set_fusion_mode(mode);
    cfg.train.epochs = 3;
    cfg.train.learning_rate = 3e-3;
    cfg
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    for mode in FusionMode::ALL {
        let cfg = small_config(mode);
        let a = train_experiment(&cfg).unwrap();
        let b = train_experiment(&cfg).unwrap();
        assert_eq!(a.log, b.log, "{mode}");
        for (p, q) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(p.value, q.value, "{mode}: {}", p.name);
        }
        let mut other = cfg.clone();
        other.set_seed(1);
        assert_ne!(train_experiment(&other).unwrap().log, a.log);
    }
}

#[test]
fn training_loss_goes_down() {
    let mut cfg = small_config(FusionMode::Isfl);
    cfg.train.epochs = 6;
    let out = train_experiment(&cfg).unwrap();
    let first = out.log.first().unwrap().train_loss;
    let last = out.log.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    assert!(out
        .log
        .iter()
        .all(|l| l.eval_accuracy.is_some() && l.eval_ece.is_some()));
    assert_eq!(
        out.log.iter().map(|l| l.epoch).collect::<Vec<_>>(),
        (1..=6).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_reproduces_the_held_out_report() {
    let cfg = small_config(FusionMode::Isfl);
    let out = train_experiment(&cfg).unwrap();
    let report = out.test_report(&cfg.ece).unwrap();

    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &out, &report).unwrap();
    for name in [
        "model.ckpt",
        "standardizer.json",
        "train_log.jsonl",
        "report.json",
        "reliability.csv",
        "roc.csv",
        "pr.csv",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), cfg.train.epochs);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "eval_accuracy", "eval_ece"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    let stats: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("standardizer.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(
        stats.as_object().unwrap().keys().collect::<Vec<_>>(),
        ["means", "stds"]
    );

    let ckpt = checkpoint::load(&dir.path().join("model.ckpt")).unwrap();
    let names: Vec<&str> = ckpt.model.params.iter().map(|p| p.name.as_str()).collect();
    assert!(names.contains(&"isfl.W_gate") && names.contains(&"isfl.b_gate"));
    let dataset = ckpt.preprocessing.data.load().unwrap();
    let again = evaluate_checkpoint(&ckpt, &dataset, &cfg.ece).unwrap();
    assert_eq!(again, report);
}

#[test]
fn checkpoint_rejects_a_dataset_of_the_wrong_width() {
    let cfg = small_config(FusionMode::ConcatHead);
    let out = train_experiment(&cfg).unwrap();
    let bytes = checkpoint::to_bytes(&out.model, &out.preprocessing).unwrap();
    let ckpt = checkpoint::from_bytes(&bytes).unwrap();
    let wider = SyntheticTask {
        d_struct: 6,
        n_examples: 50,
        ..SyntheticTask::default()
    }
    .generate()
    .unwrap();
    assert!(evaluate_checkpoint(&ckpt, &wider, &cfg.ece).is_err());
}

#[test]
fn sweep_covers_every_layer_plus_baselines() {
    let mut cfg = small_config(FusionMode::Isfl);
    cfg.train.epochs = 1;
    assert!(sweep_plan(&cfg, &[0, 3]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep(&cfg, &[0, 1, 2], Some(dir.path())).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["isfl@0", "isfl@1", "isfl@2", "none", "concat"]);
    assert!(rows.iter().all(|r| r.outcome.is_ok()));
    assert!(dir.path().join("isfl_1").join("report.json").exists());
    assert!(dir.path().join("concat").join("model.ckpt").exists());
}

#[test]
fn sweep_table_marks_failed_runs() {
    let mut cfg = small_config(FusionMode::Isfl);
    cfg.train.epochs = 1;
    let mut rows = sweep(&cfg, &[1], None).unwrap();
    rows.push(SweepRow {
        label: "isfl@2".into(),
        fusion_mode: FusionMode::Isfl,
        insert_layer: Some(2),
        outcome: Err("non-finite gradient in \"x\"".into()),
    });
    let mut buf = Vec::new();
    write_sweep_table(&rows, &mut buf).unwrap();
    let table = String::from_utf8(buf).unwrap();
    let mut reader = csv::Reader::from_reader(table.as_bytes());
    let records: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), 4);
    assert_eq!(&records[0][11], "ok");
    assert!(records[3][11].starts_with("failed"));
    assert_eq!(&records[3][3], "");
}
