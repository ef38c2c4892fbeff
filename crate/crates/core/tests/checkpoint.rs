use cmlreid::checkpoint::Checkpoint;
use cmlreid::config::{ExperimentConfig, Variant};
use cmlreid::lifelong::{run_sequence, Experiment};
use cmlreid::Error;

fn quick() -> ExperimentConfig {
    ExperimentConfig {
        variant: Variant::Full,
        epoch_scale: 0.02,
        warmup_epochs: 0,
        ..Default::default()
    }
}

fn after_first_task() -> Experiment {
    let mut exp = Experiment::new(quick()).unwrap();
    exp.step_task().unwrap();
    exp
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.txt");
    let ck = after_first_task().checkpoint();
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let again = dir.path().join("again.txt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn restored_model_matches_bit_for_bit() {
    let exp = after_first_task();
    let restored = Experiment::from_checkpoint(&Checkpoint::from_text(&exp.checkpoint().to_text()).unwrap()).unwrap();
    assert_eq!(restored.completed, 1);
    assert_eq!(restored.model, exp.model);
    assert_eq!(restored.matrix, exp.matrix);
    assert_eq!(restored.logs, exp.logs);
}

#[test]
fn resumed_training_continues_identically() {
    let straight = run_sequence(&quick()).unwrap();
    let mut exp = after_first_task();
    exp.step_task().unwrap();
    let ck = Checkpoint::from_text(&exp.checkpoint().to_text()).unwrap();
    let mut resumed = Experiment::from_checkpoint(&ck).unwrap();
    resumed.run_to_end().unwrap();
    assert_eq!(resumed.epoch_csv(), straight.experiment.epoch_csv());
    assert_eq!(format!("{:?}", resumed.logs), format!("{:?}", straight.experiment.logs));
    assert_eq!(resumed.matrix.to_csv(), straight.matrix.to_csv());
    assert_eq!(resumed.checkpoint().to_text(), straight.checkpoint.to_text());
}

#[test]
fn truncated_file_is_corrupt() {
    let text = after_first_task().checkpoint().to_text();
    let cut: String = text.lines().take(text.lines().count() / 2).collect::<Vec<_>>().join("\n");
    assert!(matches!(Checkpoint::from_text(&cut), Err(Error::Corrupt { .. })));
    assert!(matches!(Checkpoint::from_text(""), Err(Error::Corrupt { .. })));
}

#[test]
fn damaged_number_names_its_line() {
    let text = after_first_task().checkpoint().to_text();
    let target = text.lines().position(|l| l.starts_with("param ")).unwrap() + 1;
    let damaged: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == target { l.replacen(|c: char| c.is_ascii_digit(), "x", 1) } else { l.to_string() })
        .collect();
    match Checkpoint::from_text(&damaged.join("\n")) {
        Err(Error::Corrupt { line, .. }) => assert_eq!(line, target + 1),
        other => panic!("expected a corrupt-line error, got {other:?}"),
    }
}

#[test]
fn trailing_data_is_rejected() {
    let mut text = after_first_task().checkpoint().to_text();
    text.push_str("param extra 1 1\n0\n");
    assert!(matches!(Checkpoint::from_text(&text), Err(Error::Corrupt { .. })));
}

#[test]
fn version_mismatch_is_reported() {
    let text = after_first_task().checkpoint().to_text();
    let bumped = text.replacen("cmlreid-checkpoint 1", "cmlreid-checkpoint 7", 1);
    assert!(matches!(
        Checkpoint::from_text(&bumped),
        Err(Error::SchemaVersion { found: 7, expected: 1 })
    ));
}
