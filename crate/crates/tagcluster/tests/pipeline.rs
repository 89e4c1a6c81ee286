//! End-to-end pipeline behavior on a small generated corpus: stage
//! ordering, idempotent reruns, stale detection, stage isolation and the
//! ablation report shape.

mod common;

use std::fs;

use tagcluster::error::Error;
use tagcluster::pipeline::{
    run_ablation, run_stage, FeatureSubset, PipelineConfig, Stage, StageOutcome,
};
use tagcluster::tagger::LinearModel;

use common::{write_fixture, FixtureSpec, LanguageSpec};

fn load_config(fixture: &common::Fixture) -> PipelineConfig {
    PipelineConfig::load(&fixture.config_path).unwrap()
}

#[test]
fn full_pipeline_runs_and_reruns_are_noops() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = write_fixture(tmp.path(), &LanguageSpec::small(11), &FixtureSpec::small(11));
    let cfg = load_config(&fixture);

    for stage in Stage::ALL {
        assert_eq!(run_stage(&cfg, stage).unwrap(), StageOutcome::Ran, "{stage:?}");
    }

    // Artifacts exist.
    for name in [
        "baseline.model",
        "dist-0.tsv",
        "dist-p1.tsv",
        "dist-m1.tsv",
        "clusters-rho.tsv",
        "clusters-zeta.tsv",
        "clusters-eta.tsv",
        "clusters-tau.tsv",
        "final-all.model",
        "report.tsv",
    ] {
        assert!(fixture.workdir.join(name).exists(), "missing {name}");
    }
    let shards: Vec<_> = fs::read_dir(fixture.workdir.join("tagged"))
        .unwrap()
        .collect();
    assert!(shards.len() >= 2, "expected multiple raw shards");

    // Rerunning any stage with unchanged inputs is a no-op with an
    // identical manifest.
    for stage in Stage::ALL {
        let manifest = fixture
            .workdir
            .join(format!("manifest-{}.tsv", stage.as_str()));
        let before = fs::read(&manifest).unwrap();
        assert_eq!(run_stage(&cfg, stage).unwrap(), StageOutcome::UpToDate);
        assert_eq!(fs::read(&manifest).unwrap(), before);
    }
}

#[test]
fn stages_require_their_prerequisites() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = write_fixture(tmp.path(), &LanguageSpec::small(3), &FixtureSpec::small(3));
    let cfg = load_config(&fixture);

    let err = run_stage(&cfg, Stage::Cluster).unwrap_err();
    match err {
        Error::MissingArtifact { stage, .. } => assert_eq!(stage, "train-baseline"),
        other => panic!("expected missing-artifact error, got {other}"),
    }

    run_stage(&cfg, Stage::TrainBaseline).unwrap();
    let err = run_stage(&cfg, Stage::Cluster).unwrap_err();
    match err {
        Error::MissingArtifact { stage, .. } => assert_eq!(stage, "tag-raw"),
        other => panic!("expected missing-artifact error, got {other}"),
    }
}

#[test]
fn changed_config_makes_prior_stages_stale() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = write_fixture(tmp.path(), &LanguageSpec::small(5), &FixtureSpec::small(5));
    let cfg = load_config(&fixture);
    run_stage(&cfg, Stage::TrainBaseline).unwrap();

    let mut changed = cfg.clone();
    changed.master_seed = cfg.master_seed + 1;
    let err = run_stage(&changed, Stage::TagRaw).unwrap_err();
    match err {
        Error::StaleArtifact { stage, .. } => assert_eq!(stage, "train-baseline"),
        other => panic!("expected stale-artifact error, got {other}"),
    }
}

#[test]
fn deleting_a_stage_and_rerunning_reproduces_downstream_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = write_fixture(tmp.path(), &LanguageSpec::small(7), &FixtureSpec::small(7));
    let cfg = load_config(&fixture);
    for stage in Stage::ALL {
        run_stage(&cfg, stage).unwrap();
    }

    let files = [
        "clusters-rho.tsv",
        "clusters-zeta.tsv",
        "clusters-eta.tsv",
        "clusters-tau.tsv",
        "final-all.model",
        "report.tsv",
    ];
    let before: Vec<Vec<u8>> = files
        .iter()
        .map(|f| fs::read(fixture.workdir.join(f)).unwrap())
        .collect();

    // Drop the cluster stage outputs and everything downstream, then rerun
    // from `cluster`.
    for f in &files {
        fs::remove_file(fixture.workdir.join(f)).unwrap();
    }
    for stage in ["cluster", "train-final", "evaluate"] {
        fs::remove_file(fixture.workdir.join(format!("manifest-{stage}.tsv"))).unwrap();
    }
    for stage in [Stage::Cluster, Stage::TrainFinal, Stage::Evaluate] {
        assert_eq!(run_stage(&cfg, stage).unwrap(), StageOutcome::Ran);
    }

    for (f, expected) in files.iter().zip(before) {
        let now = fs::read(fixture.workdir.join(f)).unwrap();
        assert_eq!(now, expected, "{f} changed across reruns");
    }
}

#[test]
fn memorizing_toy_config_reaches_full_training_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    // Unambiguous language, train == eval corpus, generous epochs.
    let lang = LanguageSpec::small(13).without_ambiguity();
    let mut fix = FixtureSpec::small(13);
    fix.train_sentences = 25;
    fix.epochs = 20;
    fix.clip = 0.1;
    let fixture = write_fixture(tmp.path(), &lang, &fix);
    // Point both eval corpora at the training file.
    let config = fs::read_to_string(&fixture.config_path).unwrap();
    let config = config
        .replace("eval_corpus = dev:dev.tsv", "eval_corpus = train:train.tsv")
        .replace("eval_corpus = test:test.tsv", "");
    fs::write(&fixture.config_path, config).unwrap();

    let cfg = load_config(&fixture);
    for stage in Stage::ALL {
        run_stage(&cfg, stage).unwrap();
    }
    let rows = tagcluster::pipeline::read_report(&fixture.workdir.join("report.tsv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].corpus, "train");
    assert_eq!(rows[0].accuracy, 1.0, "toy config must memorize its training set");
}

#[test]
fn extra_training_corpora_join_the_final_training_set() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = write_fixture(tmp.path(), &LanguageSpec::small(19), &FixtureSpec::small(19));
    // Declare dev.tsv as additional in-domain training material.
    let config = fs::read_to_string(&fixture.config_path).unwrap();
    fs::write(
        &fixture.config_path,
        format!("{config}extra_train_corpus = dev.tsv\n"),
    )
    .unwrap();

    let cfg = load_config(&fixture);
    for stage in Stage::ALL {
        run_stage(&cfg, stage).unwrap();
    }
    // Tokens of the extra corpus count as in-vocabulary for OOV reporting,
    // so evaluating on it reports zero OOV tokens (oov accuracy NA).
    let rows = tagcluster::pipeline::read_report(&fixture.workdir.join("report.tsv")).unwrap();
    let dev_row = rows.iter().find(|r| r.corpus == "dev").unwrap();
    assert_eq!(dev_row.oov_accuracy, None);
}

#[test]
fn ablation_writes_all_subsets_and_the_comparison_table() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = write_fixture(tmp.path(), &LanguageSpec::small(17), &FixtureSpec::small(17));
    let cfg = load_config(&fixture);
    for stage in [
        Stage::TrainBaseline,
        Stage::TagRaw,
        Stage::CollectStats,
        Stage::Cluster,
    ] {
        run_stage(&cfg, stage).unwrap();
    }
    assert_eq!(run_ablation(&cfg).unwrap(), StageOutcome::Ran);
    assert_eq!(run_ablation(&cfg).unwrap(), StageOutcome::UpToDate);

    let rows = tagcluster::pipeline::read_report(&fixture.workdir.join("report.tsv")).unwrap();
    // Two eval corpora times eight subsets.
    assert_eq!(rows.len(), 16);
    for subset in FeatureSubset::ABLATION {
        assert!(
            fixture
                .workdir
                .join(format!("final-{}.model", subset.as_str()))
                .exists(),
            "missing model for {subset:?}"
        );
        assert_eq!(rows.iter().filter(|r| r.subset == subset).count(), 2);
    }

    // The comparison table mirrors the six canonical columns.
    let table = fs::read_to_string(fixture.workdir.join("ablation.tsv")).unwrap();
    let mut lines = table.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "corpus\tno-clusters\tdist\ttask\tdist+task\tall\tall-no-w0"
    );
    assert_eq!(lines.count(), 2);

    // The unlexicalized model must contain no word-identity features.
    let file = fs::File::open(fixture.workdir.join("final-all-no-w0.model")).unwrap();
    let model = LinearModel::load(file).unwrap();
    let alphabet = model.alphabet();
    for b in 0..alphabet.len() {
        assert!(
            !alphabet.name(b).starts_with("w0="),
            "unlexicalized model contains {}",
            alphabet.name(b)
        );
    }
}
