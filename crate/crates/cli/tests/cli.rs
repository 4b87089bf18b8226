use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hyperipc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperipc"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HYPERIPC_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
epochs = 1
batch_size = 9
point_hidden = 8,16
feature = 8
image_side = 8
image_hidden = 16
head_hidden = 8
ball_dim = 2
";

#[test]
fn clean_geometry_check_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = hyperipc(&["check-geometry", "--samples", "200"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let families = text.lines().filter(|l| l.starts_with("geometry ")).count();
    assert!(families >= 7, "{text}");
}

#[test]
fn injected_fault_fails_and_names_the_identity() {
    let dir = tempfile::tempdir().unwrap();
    let out = hyperipc(&["check-geometry", "--samples", "200", "--inject-fault", "mobius-add-sign"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("failed: geometry left inverse"), "{err}");
    assert!(!err.contains("right identity"), "{err}");
}

#[test]
fn json_records_one_per_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = hyperipc(&["--json", "check-geometry", "--samples", "50"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    for line in stdout(&out).lines() {
        assert!(line.starts_with('{') && line.ends_with('}') && line.contains("\"passed\":true"), "{line}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hyperipc(&["probe"], dir.path()).status.code(), Some(2));
    assert_eq!(hyperipc(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(hyperipc(&["pretrain", "--data", "x", "--out", "y", "--mode", "sideways"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = hyperipc(&["probe", "--ckpt", "missing.ckpt", "--data", "missing.bin"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("missing.ckpt"));
    let out = hyperipc(&["gen-data", "--depth", "0", "--out", "d.bin"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_data_writes_stamped_listing_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--per-leaf", "3", "--points", "16", "--seed", "4", "--out", "d.bin"];
    let out = hyperipc(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let listing = fs::read_to_string(dir.path().join("d.txt")).unwrap();
    let manifest = fs::read_to_string(dir.path().join("d.bin.manifest.json")).unwrap();
    let tag = listing.lines().next().unwrap().strip_prefix("# manifest ").unwrap();
    assert!(manifest.contains(&format!("\"manifest\":\"{tag}\"")));
    assert_eq!(listing.lines().count(), 1 + 27);
    assert!(manifest.contains("\"seeds\":{\"seed\":4}"));

    // Same settings in another directory: same bytes and same hash.
    let other = tempfile::tempdir().unwrap();
    hyperipc(&args, other.path());
    assert_eq!(fs::read(dir.path().join("d.bin")).unwrap(), fs::read(other.path().join("d.bin")).unwrap());
    assert_eq!(listing, fs::read_to_string(other.path().join("d.txt")).unwrap());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, name: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hyperipc"));
        cmd.args(["gen-data", "--per-leaf", "2", "--points", "8", "--out", name]).current_dir(dir.path());
        match env {
            Some(v) => cmd.env("HYPERIPC_SEED", v),
            None => cmd.env_remove("HYPERIPC_SEED"),
        };
        assert!(cmd.status().unwrap().success());
        fs::read(dir.path().join(name)).unwrap()
    };
    let default = run(None, "a.bin");
    let env9 = run(Some("9"), "b.bin");
    assert_ne!(default, env9);
    let out = hyperipc(&["gen-data", "--per-leaf", "2", "--points", "8", "--seed", "9", "--out", "c.bin"], dir.path());
    assert!(out.status.success());
    assert_eq!(env9, fs::read(dir.path().join("c.bin")).unwrap());
}

#[test]
fn pretrain_flags_override_config_file_and_tools_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(hyperipc(&["gen-data", "--per-leaf", "4", "--points", "32", "--out", "d.bin"], p).status.success());
    fs::write(p.join("tiny.cfg"), format!("{TINY}tau = 0.5\n")).unwrap();
    let out = hyperipc(&["pretrain", "--data", "d.bin", "--out", "m.ckpt", "--config", "tiny.cfg", "--tau", "0.3"], p);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let manifest = fs::read_to_string(p.join("m.ckpt.manifest.json")).unwrap();
    assert!(manifest.contains("tau = 0.3\\n"), "{manifest}");
    assert!(manifest.contains("ball_dim = 2\\n"));
    let log = fs::read_to_string(p.join("m.jsonl")).unwrap();
    let tag = &manifest[13..29];
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with(&format!("{{\"manifest\":\"{tag}\",\"epoch\":1")), "{log}");

    let out = hyperipc(&["--json", "probe", "--ckpt", "m.ckpt", "--data", "d.bin"], p);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("\"classes\":9"));

    let out = hyperipc(&["--json", "fewshot", "--ckpt", "m.ckpt", "--data", "d.bin", "--n", "3", "--m", "2", "--tasks", "4"], p);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("\"tasks\":4"));

    let out = hyperipc(&["plot", "--ckpt2d", "m.ckpt", "--data", "d.bin", "--out", "disk.svg"], p);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let svg = fs::read_to_string(p.join("disk.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    let plot_manifest = fs::read_to_string(p.join("disk.svg.manifest.json")).unwrap();
    assert!(svg.contains(&plot_manifest[13..29]));
}
