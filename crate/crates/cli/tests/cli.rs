use std::path::Path;
use std::process::{Command, Output};

use tabsynth::pipeline::RunConfig;

fn tabsynth(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabsynth"))
        .args(args)
        .current_dir(dir)
        .env_remove("TABSYNTH_BACKEND_ENDPOINT")
        .env_remove("TABSYNTH_BACKEND_MODEL")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn invalid_settings_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = tabsynth(&["--k", "0", "all"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("k must be positive"));
    let o = tabsynth(&["--top-p", "1.5", "fit"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        tabsynth(&["--config", "absent.toml", "fit"], dir.path()).status.code(),
        Some(3)
    );
    let o = tabsynth(&["evaluate", "--synthetic", "absent.csv"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn printed_config_reloads_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = tabsynth(&["--seed", "7", "--beta", "0.3", "--print-config", "fit"], dir.path());
    assert!(o.status.success());
    let cfg = RunConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!((cfg.seed, cfg.ppo.beta), (7, 0.3));
    std::fs::write(dir.path().join("run.toml"), stdout(&o)).unwrap();
    let again = tabsynth(&["--config", "run.toml", "--print-config", "fit"], dir.path());
    assert_eq!(stdout(&again), stdout(&o));
}

#[test]
fn small_end_to_end_run() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--output-dir",
        "out",
        "--rounds",
        "1",
        "--k",
        "30",
        "--sequential",
        "all",
        "--audit",
    ];
    let o = tabsynth(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("synthetic: ") && text.contains("audit: "), "{text}");
    let synthetic = text
        .lines()
        .find_map(|l| l.strip_prefix("synthetic: "))
        .unwrap()
        .to_string();
    let csv = std::fs::read_to_string(dir.path().join(&synthetic)).unwrap();
    assert_eq!(csv.lines().count(), 31);

    // Evaluating the generated file from disk reuses the cached data stage.
    let eval = tabsynth(
        &["--output-dir", "out", "evaluate", "--synthetic", &synthetic],
        dir.path(),
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(stdout(&eval).contains("report: "));
}
