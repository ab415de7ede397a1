use std::path::Path;
use std::process::{Command, Output};

fn semfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf8 path")
}

fn generate(dir: &Path, scans: &str) {
    let out = semfuse(&["generate", "--scans", scans, "--seed", "4", "--out", arg(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn run_writes_every_strategy_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "2");
    let out = dir.path().join("out");
    let r = semfuse(&["run", "--config", arg(&data.join("config.toml")), "--strategy", "all", "--out", arg(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert_eq!(stdout.lines().count(), 3, "{stdout}");
    for s in ["direct", "motion_corrected", "motion_corrected_masked"] {
        assert!(out.join(s).join("points/metrics.csv").exists(), "{s}");
        assert!(out.join(s).join("map/top_down.ppm").exists(), "{s}");
        assert!(out.join(s).join("labeled/scan_0001_cam1.csv").exists(), "{s}");
    }
    assert!(out.join("comparison.csv").exists());
    let manifest = std::fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("command = \"run\""));
    assert!(manifest.contains("comparison.csv"));

    // Eval and plot on the written outputs.
    let input = out.join("motion_corrected_masked");
    let config = data.join("config.toml");
    let e = semfuse(&["eval", "--config", arg(&config), "--input", arg(&input), "--out", arg(&dir.path().join("ev"))]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    assert!(dir.path().join("ev/points/metrics.csv").exists());
    let map = input.join("map/map.bin");
    let p = semfuse(&["plot", "--config", arg(&config), "--map", arg(&map), "--out", arg(&dir.path().join("pl"))]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    assert_eq!(
        std::fs::read(dir.path().join("pl/top_down.ppm")).unwrap(),
        std::fs::read(input.join("map/top_down.ppm")).unwrap()
    );
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "3");
    let config = data.join("config.toml");
    let mut trees = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("out{workers}"));
        let r = semfuse(&["--workers", workers, "fuse", "--config", arg(&config), "--out", arg(&out)]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        trees.push(read_tree(&out));
    }
    assert!(!trees[0].is_empty());
    assert!(trees[0] == trees[1]);
}

#[test]
fn correct_writes_one_file_per_scan_and_camera() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "1");
    let out = dir.path().join("cor");
    let r = semfuse(&["correct", "--config", arg(&data.join("config.toml")), "--out", arg(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let header = std::fs::read_to_string(out.join("corrected/scan_0000_cam0.csv")).unwrap();
    assert!(header.lines().count() > 100);
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "1");
    let config = data.join("config.toml");
    let text = std::fs::read_to_string(&config).unwrap();
    std::fs::write(&config, format!("bogus_key = 1\n{text}")).unwrap();
    let r = semfuse(&["run", "--config", arg(&config), "--out", arg(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));

    let missing = semfuse(&["run", "--config", arg(&dir.path().join("nope.toml")), "--out", arg(&dir.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(2));

    let bad_flag = semfuse(&["run", "--config", arg(&config), "--strategy", "fastest", "--out", "o"]);
    assert_eq!(bad_flag.status.code(), Some(2));
}

#[test]
fn missing_or_corrupt_data_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "2");
    let config = data.join("config.toml");
    std::fs::remove_file(data.join("scans/scan_0001.bin")).unwrap();
    let r = semfuse(&["fuse", "--config", arg(&config), "--out", arg(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));

    std::fs::write(data.join("scans/scan_0001.bin"), b"garbage").unwrap();
    let r = semfuse(&["fuse", "--config", arg(&config), "--out", arg(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
}
