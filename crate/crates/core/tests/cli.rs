use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn uct(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uct"))
        .args(args)
        .current_dir(cwd)
        .env_remove("UCT_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A corpus where source and target are the same text, with a prior that
/// pairs every letter with itself.
fn identity_project(dir: &Path) {
    let lines = [
        "a cab", "bad cab", "dab a cab", "cab bad", "add a dab", "a bad cab", "dad", "cab dab bad", "bad add",
        "a dad", "dab dab", "cab a bad",
    ];
    let text = lines.join("\n") + "\n";
    for f in ["train.src", "train.tgt", "valid.src", "valid.tgt"] {
        fs::write(dir.join(f), &text).unwrap();
    }
    fs::write(dir.join("test.src"), "bad cab\ndab\n").unwrap();
    fs::write(dir.join("test.tgt"), "bad cab\ndab\n").unwrap();
    fs::write(dir.join("prior.tsv"), "a\ta\nb\tb\nc\tc\nd\td\n").unwrap();
    fs::write(
        dir.join("config.toml"),
        "[paths]\npriors = [\"prior.tsv\"]\noutput = \"out\"\n\n[lm]\norder = 2\n\n[channel]\ndelay = 0\nboost_pseudocount = 50.0\n\n[alphabet]\ncoverage = 1.0\n",
    )
    .unwrap();
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    identity_project(dir.path());
    assert_eq!(uct(&[], dir.path()).status.code(), Some(1));
    assert_eq!(uct(&["decode"], dir.path()).status.code(), Some(1));
    let unknown = uct(&["transmogrify", "--config", "config.toml"], dir.path());
    assert_eq!(unknown.status.code(), Some(1));
    assert!(stderr(&unknown).contains("transmogrify"));
    let bad_decoder = uct(&["decode", "--config", "config.toml", "--decoder", "oracle"], dir.path());
    assert_eq!(bad_decoder.status.code(), Some(1));
    let zero_beam = uct(&["decode", "--config", "config.toml", "--beam", "0"], dir.path());
    assert_eq!(zero_beam.status.code(), Some(1));
}

#[test]
fn help_exits_with_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = uct(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("--config"));
}

#[test]
fn unreadable_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(uct(&["prepare", "--config", "missing.toml"], dir.path()).status.code(), Some(2));
    identity_project(dir.path());
    fs::remove_file(dir.path().join("train.src")).unwrap();
    let o = uct(&["prepare", "--config", "config.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.src"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), "[lm]\norder = 3\nsmoothing = \"kn\"\n").unwrap();
    let o = uct(&["prepare", "--config", "config.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("smoothing"));
}

#[test]
fn missing_artifact_names_the_stage_to_run() {
    let dir = tempfile::tempdir().unwrap();
    identity_project(dir.path());
    let o = uct(&["decode", "--config", "config.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run `prepare` first"), "{}", stderr(&o));

    assert_eq!(uct(&["prepare", "--config", "config.toml"], dir.path()).status.code(), Some(0));
    let o = uct(&["train-wfst", "--config", "config.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run `train-lm` first"), "{}", stderr(&o));
}

#[test]
fn identity_channel_decodes_its_input() {
    let dir = tempfile::tempdir().unwrap();
    identity_project(dir.path());
    let o = uct(&["all", "--config", "config.toml"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert_eq!(fs::read_to_string(out.join("decode/wfst.txt")).unwrap(), "bad cab\ndab\n");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("wfst,0,0,"), "{metrics}");
    assert!(out.join("analysis/wfst").is_dir());
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    for stage in ["prepare", "train-lm", "train-wfst", "decode", "evaluate", "analyze"] {
        assert!(manifest.contains(&format!("stage {stage}")), "{manifest}");
    }
}

#[test]
fn output_root_variable_relocates_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    identity_project(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_uct"))
        .args(["prepare", "--config", "config.toml"])
        .current_dir(dir.path())
        .env("UCT_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
    assert!(fs::read_dir(root.path()).unwrap().count() > 0);
}

#[test]
fn fixture_config_round_trips() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cipher/config.toml");
    let config = uct::config::ExperimentConfig::load(&path).unwrap();
    assert_eq!(config.lm.order, 3);
    assert_eq!(config.channel.delay, 0);
    let again = uct::config::ExperimentConfig::from_toml(&config.to_toml(), "round trip").unwrap();
    assert_eq!(again, config);
}
