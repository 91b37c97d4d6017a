use super::*;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::quick();
    c.seed = 3;
    c.out = dir.to_path_buf();
    c.data.train = 12;
    c.data.dev = 4;
    c.data.test = 3;
    c.model.model_dim = 8;
    c.model.heads = 2;
    c.model.ffn_dim = 16;
    c.pretrain.train.epochs = 1.0;
    c.pretrain.gate_wer = 100.0;
    c.pretrain.gate_utterances = 2;
    c.plan.train.epochs = 1.0;
    c.plan.train.replay_fraction = 0.25;
    c.sequential.epochs = 0.5;
    c.test_utterances = 3;
    c
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Experiment::new(tiny(a.path())).unwrap().gen_data().unwrap();
    Experiment::new(tiny(b.path())).unwrap().gen_data().unwrap();
    for lang in ["ka", "lu", "mo", "ni", "pe"] {
        for split in ["train", "dev", "test"] {
            let name = format!("data/{lang}.{split}.jsonl");
            let x = fs::read(a.path().join(&name)).unwrap();
            assert!(!x.is_empty());
            assert_eq!(x, fs::read(b.path().join(&name)).unwrap(), "{name}");
        }
    }
    let echoed = fs::read_to_string(a.path().join("config.txt")).unwrap();
    let back = ExperimentConfig::from_text(ExperimentConfig::default(), &echoed, false).unwrap();
    assert_eq!(back, tiny(a.path()));
}

#[test]
fn missing_upstream_artifacts_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(tiny(dir.path())).unwrap();
    match exp.pretrain() {
        Err(Error::MissingArtifact(p)) => assert!(p.ends_with("ka.train.jsonl"), "{p:?}"),
        other => panic!("{other:?}"),
    }
    exp.gen_data().unwrap();
    match exp.adapt(RunKind::Plan, Strategy::Ft) {
        Err(Error::MissingArtifact(p)) => assert!(p.ends_with(PRETRAINED_CHECKPOINT)),
        other => panic!("{other:?}"),
    }
    match exp.evaluate() {
        Err(Error::MissingArtifact(p)) => assert!(p.ends_with("decode/unadapted/phase0.jsonl")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn method_list() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(tiny(dir.path())).unwrap();
    let names: Vec<String> = exp.methods().into_iter().map(|m| m.name).collect();
    assert_eq!(names, ["ft", "er", "avg", "er-e", "er-e-part", "er-e-b", "er-b", "seq-er-e", "seq-er-e-b"]);
    let plan = exp.trained_strategies(RunKind::Plan);
    assert_eq!(plan, [Strategy::Ft, Strategy::Er, Strategy::Avg, Strategy::ErE, Strategy::ErEPart]);
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.plan.strategies = vec![Strategy::Ft, Strategy::ErEB];
    cfg.sequential.languages.clear();
    let exp = Experiment::new(cfg).unwrap();
    let mut stages = Vec::new();
    let report = exp.reproduce(|s| stages.push(s.to_string())).unwrap();
    assert_eq!(stages.first().map(String::as_str), Some("generating data"));
    for k in 1..=2 {
        assert!(exp.checkpoint_path(RunKind::Plan, Strategy::ErE, k).exists());
    }
    // unadapted + (ft, er-e-b) × 2 phases; old + seen new languages, two settings.
    assert_eq!(report.rows.len(), 2 * 2 + 2 * (3 + 4) * 2);
    for c in &report.confusion {
        for l in &c.matrix.languages {
            assert_eq!(c.matrix.row_sum(l), 3);
        }
    }
    assert_eq!(EvalReport::load(&dir.path().join("report")).unwrap(), report);
    let recs = exp.read_records("er-e-b", 2).unwrap();
    assert_eq!(recs.len(), 4 * 3 * 2);
}
