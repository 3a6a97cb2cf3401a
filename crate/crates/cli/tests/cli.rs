use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use res_cli::checkpoint;
use res_cli::dataset_io::load_dataset;
use res_cli::raster::{read_png, to_byte};
use res_core::train::{explain, Batch};

fn res(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_res"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run res")
}

fn status(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = res(dir, args);
    assert_eq!(status(&out), 0, "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL_DATA: [&str; 10] = ["gen-data", "--n", "24", "--size", "32", "--boundary", "2", "--drop", "0.3", "--seed"];
const FAST: [&str; 8] = ["--epochs", "2", "--warmup", "1", "--warmup-accuracy", "0", "--widths", "4,8"];

#[test]
fn gen_data_writes_the_requested_samples_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        let mut args = SMALL_DATA.to_vec();
        args.extend(["7", "--out", out]);
        let o = ok(d, &args);
        assert!(String::from_utf8_lossy(&o.stdout).contains("24 samples"));
    }
    let data = load_dataset(&d.join("a")).unwrap();
    assert_eq!(data.len(), 24);
    assert_eq!(files(&d.join("a")), files(&d.join("b")));
    assert_eq!(files(&d.join("a")).len(), 1 + 5 * 24);
}

#[test]
fn usage_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.cfg"), "epochs = 2\ncolour = blue\n").unwrap();
    let cases: [&[&str]; 7] = [
        &["gen-data", "--n", "10", "--drop", "1.5", "--out", "x"],
        &["gen-data", "--n", "10"],
        &["no-such-command"],
        &["train", "--config", "bad.cfg", "--out", "x"],
        &["train", "--data", "somewhere", "--n", "5", "--out", "x"],
        &["experiment", "--n", "20", "--size", "32", "--sweep", "alpha", "--out", "x"],
        &["train", "--n", "20", "--size", "32", "--variant", "res-x", "--out", "x"],
    ];
    for args in cases {
        let out = res(d, args);
        assert_eq!(status(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn train_is_reproducible_and_its_config_snapshot_replays() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut gen = SMALL_DATA.to_vec();
    gen.extend(["3", "--out", "data"]);
    ok(d, &gen);
    for out in ["r1", "r2"] {
        let mut args = vec!["train", "--data", "data", "--variant", "res-l", "--seed", "2", "--out", out];
        args.extend(FAST);
        ok(d, &args);
    }
    ok(d, &["train", "--config", "r1/config.txt", "--out", "r3"]);
    let a = files(&d.join("r1"));
    assert_eq!(a, files(&d.join("r2")));
    assert_eq!(a, files(&d.join("r3")));
    let log = std::fs::read_to_string(d.join("r1/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 + 1);
    assert!(log.lines().last().unwrap().starts_with("test,"));

    let e1 = ok(d, &["eval", "--checkpoint", "r1/checkpoint.ckpt", "--data", "data", "--subset", "test", "--seed", "2"]);
    let e2 = ok(d, &["eval", "--checkpoint", "r2/checkpoint.ckpt", "--data", "data", "--subset", "test", "--seed", "2"]);
    assert_eq!(e1.stdout, e2.stdout);
    let text = String::from_utf8(e1.stdout).unwrap();
    let fields: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let test_row: Vec<&str> = log.lines().last().unwrap().split(',').collect();
    assert_eq!(fields[0], "11");
    assert_eq!(fields[1..], test_row[7..]);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("run.cfg"),
        "n = 20\nsize = 32\nepochs = 5\nwarmup = 1\nwidths = 4,8\nvariant = haics\n",
    )
    .unwrap();
    ok(d, &["train", "--config", "run.cfg", "--epochs", "1", "--out", "r"]);
    let snapshot = std::fs::read_to_string(d.join("r/config.txt")).unwrap();
    assert!(snapshot.contains("epochs = 1\n"));
    assert!(snapshot.contains("variant = haics\n"));
    assert!(snapshot.contains("n = 20\n"));
}

#[test]
fn heatmaps_encode_saliency_and_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut gen = SMALL_DATA.to_vec();
    gen.extend(["5", "--out", "data"]);
    ok(d, &gen);
    let mut train = vec!["train", "--data", "data", "--variant", "res-g", "--out", "run"];
    train.extend(FAST);
    ok(d, &train);
    for out in ["h1", "h2"] {
        ok(d, &["heatmaps", "--checkpoint", "run/checkpoint.ckpt", "--data", "data", "--count", "4", "--out", out]);
    }
    let h1 = files(&d.join("h1"));
    assert_eq!(h1.len(), 4);
    assert_eq!(h1, files(&d.join("h2")));

    let ckpt = checkpoint::load(&d.join("run/checkpoint.ckpt")).unwrap();
    let data = load_dataset(&d.join("data")).unwrap();
    let samples: Vec<_> = data.samples.iter().take(4).collect();
    let (_, maps) = explain(&ckpt.backbone, &ckpt.params, Batch::from_samples(&samples).unwrap().images).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let png = read_png(&d.join("h1").join(format!("{}.png", s.id))).unwrap();
        assert_eq!((png.width, png.height, png.channels), (96, 32, 1));
        for y in 0..32 {
            for x in 0..32 {
                let m = maps.data()[i * 1024 + y * 32 + x];
                assert_eq!(png.data[y * 96 + 64 + x], to_byte(m));
            }
        }
    }

    std::fs::write(d.join("bad.ckpt"), b"RESCKPT1 but not really").unwrap();
    let out = res(d, &["heatmaps", "--checkpoint", "bad.ckpt", "--data", "data", "--out", "h3"]);
    assert_eq!(status(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.ckpt"));
}

#[test]
fn experiment_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut args = vec![
        "experiment", "--n", "24", "--size", "32", "--variants", "none,res-g", "--seeds", "0,1",
        "--workers", "2", "--checkpoints",
    ];
    args.extend(FAST);
    for out in ["e1", "e2"] {
        let mut a = args.clone();
        a.extend(["--out", out]);
        ok(d, &a);
    }
    let results = std::fs::read_to_string(d.join("e1/results.csv")).unwrap();
    let summary = std::fs::read_to_string(d.join("e1/summary.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 4);
    assert_eq!(summary.lines().count(), 1 + 2);
    let strip = |fs: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        fs.into_iter().filter(|(p, _)| p != Path::new("report.txt")).collect()
    };
    assert_eq!(strip(files(&d.join("e1"))), strip(files(&d.join("e2"))));
    assert_eq!(std::fs::read_dir(d.join("e1/checkpoints")).unwrap().count(), 4);
}

#[test]
fn failed_cells_exit_with_1_and_are_marked() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut args = vec![
        "experiment", "--n", "20", "--size", "32", "--variants", "none", "--seeds", "0,1", "--lr", "1e300",
        "--out", "e",
    ];
    args.extend(FAST);
    let out = res(d, &args);
    assert_eq!(status(&out), 1);
    let results = std::fs::read_to_string(d.join("e/results.csv")).unwrap();
    assert_eq!(results.lines().filter(|l| l.contains(",failed,")).count(), 2);
    let report = std::fs::read_to_string(d.join("e/report.txt")).unwrap();
    assert!(report.contains("diverged"));
}
