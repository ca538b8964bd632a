use std::process::Command;

fn jagrec() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jagrec"))
}

fn write_config(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "seed = 3\n[workload]\nbatch_size = 4\nmax_len = 16\n[workload.lengths]\nkind = \"uniform\"\nmin = 1\nmax = 16\n",
    )
    .unwrap();
    path
}

#[test]
fn balance_writes_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut outputs = Vec::new();
    let out = dir.path().join("out");
    for _ in 0..2 {
        let status = jagrec().args(["balance", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
        assert!(status.success());
        outputs.push((std::fs::read(out.join("balance.csv")).unwrap(), std::fs::read(out.join("balance.md")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(csv.contains("# seed = 3"));
}

#[test]
fn seed_flag_and_format() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let status = jagrec().args(["negsample", "--seed", "11", "--format", "csv", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    assert!(out.join("negsample.csv").exists() && !out.join("negsample.md").exists());
    assert!(std::fs::read_to_string(out.join("negsample.csv")).unwrap().contains("# seed = 11"));
}

#[test]
fn failing_check_sets_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tight.toml");
    // A single worker cannot reduce the token spread, so the 10x check fails.
    std::fs::write(&cfg, "[balance]\nnum_workers = 1\n").unwrap();
    let status = jagrec().args(["balance", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn bad_config_and_missing_input_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "unknown_field = 1\n").unwrap();
    assert_eq!(jagrec().args(["jagged", "--config"]).arg(&cfg).status().unwrap().code(), Some(2));
    let out = jagrec().args(["preprocess", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("preprocess.input"));
}

#[test]
fn preprocess_writes_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    let mut text = String::from("user_id,item_id,timestamp,click\n");
    for u in 0..6 {
        for i in 0..6 {
            text.push_str(&format!("{u},{i},{},1\n", u * 10 + i));
        }
    }
    std::fs::write(&log, text).unwrap();
    let cfg = dir.path().join("p.toml");
    std::fs::write(&cfg, format!("[preprocess]\ninput = {:?}\n", log.to_str().unwrap())).unwrap();
    let out = dir.path().join("o");
    let status = jagrec().args(["preprocess", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    let seqs = std::fs::read_to_string(out.join("sequences.txt")).unwrap();
    assert_eq!(seqs.lines().count(), 6);
}
