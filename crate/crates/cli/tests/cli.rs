use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cstyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cstyle"))
        .args(args)
        .output()
        .expect("spawn cstyle")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Config file in `tmp`, plus the `--config/--out/--set` arguments for it.
fn args(tmp: &Path, out: &str, sets: &[&str]) -> Vec<String> {
    let config = tmp.join("run.cfg");
    fs::write(&config, "[batch]\nbatch_size = 3\n\n[sampling]\nsteps = 20\n").unwrap();
    let mut v = vec![
        "--config".into(),
        config.display().to_string(),
        "--out".into(),
        tmp.join(out).display().to_string(),
    ];
    for s in sets {
        v.push("--set".into());
        v.push((*s).into());
    }
    v
}

fn run(cmd: &str, rest: &[String]) -> Output {
    let mut all = vec![cmd];
    all.extend(rest.iter().map(String::as_str));
    cstyle(&all)
}

fn run_dir(out: &Output) -> PathBuf {
    PathBuf::from(stdout(out).lines().next().expect("run directory line"))
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn too_few_steps_is_a_configuration_error() {
    let tmp = TempDir::new().unwrap();
    let out = run("run", &args(tmp.path(), "out", &["steps=9"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));
}

#[test]
fn unknown_key_is_a_configuration_error() {
    let tmp = TempDir::new().unwrap();
    let out = run("phase1", &args(tmp.path(), "out", &["no_such_key=1"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_matches_the_phases_invoked_separately() {
    let tmp = TempDir::new().unwrap();
    let whole = run("run", &args(tmp.path(), "a", &[]));
    assert!(whole.status.success(), "{}", String::from_utf8_lossy(&whole.stderr));

    let split = args(tmp.path(), "b", &[]);
    let mut dir = None;
    for phase in ["phase1", "phase2", "phase3"] {
        let out = run(phase, &split);
        assert!(
            out.status.success(),
            "{phase}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        dir = Some(run_dir(&out));
    }
    let (a, b) = (tree(&run_dir(&whole)), tree(&dir.unwrap()));
    assert!(!a.is_empty());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in &a {
        assert!(bytes == &b[path], "{} differs", path.display());
    }
}

#[test]
fn inspect_describes_tensors_and_the_store() {
    let tmp = TempDir::new().unwrap();
    let out = run("phase1", &args(tmp.path(), "out", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);

    let latent = cstyle(&["inspect", dir.join("latents/vanilla_i0.csty").to_str().unwrap()]);
    assert!(latent.status.success());
    // 16x16 patches, four latent channels
    assert!(stdout(&latent).contains("dims = [256, 4]"), "{}", stdout(&latent));

    let store = cstyle(&["inspect", dir.join("store").to_str().unwrap()]);
    assert!(store.status.success(), "{}", String::from_utf8_lossy(&store.stderr));
    let text = stdout(&store);
    // 20 steps: replay window [0.1, 0.3) of the schedule
    assert!(text.contains("window = [2, 6)"), "{text}");
    assert!(!text.contains("MISSING"), "{text}");
}

#[test]
fn corrupt_tensor_exits_with_three() {
    let tmp = TempDir::new().unwrap();
    let out = run("phase1", &args(tmp.path(), "out", &[]));
    assert!(out.status.success());
    let path = run_dir(&out).join("latents/vanilla_i0.csty");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&path, bytes).unwrap();

    let inspected = cstyle(&["inspect", path.to_str().unwrap()]);
    assert_eq!(inspected.status.code(), Some(3));
    let resumed = run("phase2", &args(tmp.path(), "out", &[]));
    assert!(resumed.status.success(), "phase two does not read phase-one tensors");
}

#[test]
fn missing_artifact_exits_with_three() {
    let tmp = TempDir::new().unwrap();
    let out = cstyle(&["inspect", tmp.path().join("nothing.csty").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn phase_three_without_a_store_fails() {
    let tmp = TempDir::new().unwrap();
    let out = run("phase3", &args(tmp.path(), "out", &[]));
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn compare_schemes_reports_every_scheme() {
    let tmp = TempDir::new().unwrap();
    let out = run(
        "compare-schemes",
        &args(tmp.path(), "out", &["batch_size=2", "steps=10"]),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 6, "{text}");
    let vanilla = rows.iter().find(|r| r.starts_with("vanilla\t")).expect("vanilla row");
    let style_mean: f64 = vanilla.split('\t').nth(1).unwrap().parse().unwrap();
    assert_eq!(style_mean, 0.0, "vanilla reproduces its own reference");
}
