use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "synth.frames=3",
    "--set",
    "synth.extent=1.5",
    "--set",
    "synth.points_per_object=80",
    "--set",
    "net.base_width=4",
    "--set",
    "net.blocks=[1, 1]",
    "--set",
    "optim.iterations=4",
    "--set",
    "data.voxel_size=0.3",
];

fn mink(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mink"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn with_small(args: &[&str]) -> Vec<String> {
    args.iter().chain(SMALL).map(|s| s.to_string()).collect()
}

fn run(args: &[&str], dir: &Path) -> Output {
    let owned = with_small(args);
    let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
    mink(&refs, dir)
}

#[test]
fn synth_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&run(&["synth", "--out", "seq"], dir));
    assert!(dir.join("seq/manifest.toml").exists());

    for mode in ["3d", "4d"] {
        let out = format!("run_{mode}");
        let mode_set = format!("data.mode={mode}");
        ok(&run(&["train", "--data", "seq", "--out", &out, "--set", &mode_set], dir));
        let log = std::fs::read_to_string(dir.join(&out).join("train_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 5, "{log}");

        let ckpt = format!("{out}/checkpoint.spgw");
        let dump = format!("dump_{mode}");
        let csv = format!("{out}/metrics.csv");
        let report = ok(&run(
            &["eval", "--data", "seq", "--checkpoint", &ckpt, "--dump", &dump, "--out", &csv, "--set", &mode_set],
            dir,
        ));
        assert!(report.contains("mIoU"), "{report}");
        assert_eq!(std::fs::read_dir(dir.join(&dump)).unwrap().count(), 3);
        assert!(std::fs::read_to_string(dir.join(&csv)).unwrap().starts_with("method,miou,macc,accuracy"));
    }
}

#[test]
fn inspect_reports_files_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&run(&["synth", "--out", "seq"], dir));
    let stats = ok(&mink(&["inspect", "seq/frame_0000.spg1", "--voxel-size", "0.5"], dir));
    assert!(stats.contains("voxels at 0.5"), "{stats}");
    let resolved = ok(&mink(&["inspect", "--set", "optim.lr=0.05"], dir));
    assert!(resolved.contains("lr = 0.05") && resolved.contains("stem"), "{resolved}");
}

#[test]
fn bench_writes_the_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = run(
        &[
            "bench",
            "--out",
            "bench.csv",
            "--set",
            "bench.voxel_sizes=[0.6, 0.4]",
            "--set",
            "bench.windows=[1, 2]",
        ],
        dir,
    );
    ok(&out);
    let csv = std::fs::read_to_string(dir.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
}

#[test]
fn exit_codes_name_the_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let bad_key = mink(&["inspect", "--set", "net.width=4"], dir);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_value = mink(&["inspect", "--set", "optim.lr=-1"], dir);
    assert_eq!(bad_value.status.code(), Some(2));
    let missing = mink(&["train", "--data", "nowhere", "--out", "run"], dir);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere"));

    ok(&run(&["synth", "--out", "seq"], dir));
    ok(&run(&["train", "--data", "seq", "--out", "run"], dir));
    let wider = mink(
        &["eval", "--data", "seq", "--checkpoint", "run/checkpoint.spgw", "--set", "net.base_width=6"],
        dir,
    );
    assert_eq!(wider.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&wider.stderr).contains("does not fit"));
}
