use std::path::Path;
use std::process::{Command, Output};

use radarlift::io::{read_boxes, read_cloud};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radarlift"))
        .args(args)
        .env_remove("RADARLIFT_CONFIG")
        .env_remove("RADARLIFT_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scene(dir: &Path, frames: usize) {
    ok(&[
        "--seed",
        "5",
        "gen-scene",
        "--frames",
        &frames.to_string(),
        "--out-dir",
        p(dir),
    ]);
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "thin-out",
        "mix",
        "pillarize",
        "kd-loss",
        "eval",
        "schedule",
        "gen-scene",
        "dedup",
        "crop",
        "detect",
    ] {
        let out = cli(&[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("Usage"),
            "{sub}"
        );
    }
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = cli(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_arguments_exit_2_before_reading_files() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out_dir = tmp.path().join("out");
    let cases: [&[&str]; 5] = [
        &[
            "thin-out",
            "--method",
            "voxel",
            "--share",
            "1/3",
            p(&missing),
            p(&out_dir),
        ],
        &[
            "thin-out",
            "--method",
            "knn",
            "--share",
            "1/2",
            p(&missing),
            p(&out_dir),
        ],
        &[
            "thin-out",
            "--method",
            "random",
            "--share",
            "2",
            p(&missing),
            p(&out_dir),
        ],
        &[
            "thin-out",
            "--method",
            "random",
            "--share",
            "1/2",
            "--voxel-size",
            "-1",
            p(&missing),
            p(&out_dir),
        ],
        &["schedule", "RL^MSTM_{1-1/3/vox}->R"],
    ];
    for args in cases {
        let out = cli(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out_dir.exists());
    }
    let out = cli(&["schedule", "L^MSTM_{1-1/16/v}->X"]);
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "notation");
    assert_eq!(err["error"]["exit_code"], 2);
}

#[test]
fn missing_input_exits_1_with_structured_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(&[
        "dedup",
        p(&tmp.path().join("nope.bin")),
        p(&tmp.path().join("o.bin")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
}

#[test]
fn knn_quarter_on_a_directory_keeps_floor_n_over_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    scene(&d, 4);
    let out = tmp.path().join("knn");
    let report = ok(&[
        "thin-out",
        "--method",
        "knn",
        "--share",
        "1/4",
        "--radar",
        p(&d.join("radar")),
        p(&d.join("lidar")),
        p(&out),
    ]);
    let frames = report["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 4);
    for f in frames {
        let id = f["id"].as_str().unwrap();
        let n = read_cloud(&d.join("lidar").join(format!("{id}.bin")), None)
            .unwrap()
            .len();
        let kept = read_cloud(&out.join(format!("{id}.bin")), None)
            .unwrap()
            .len();
        assert_eq!(kept, n / 4);
        assert_eq!(f["output"].as_u64().unwrap() as usize, n / 4);
    }
}

#[test]
fn flag_and_positional_forms_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    scene(&d, 2);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let lidar = d.join("lidar");
    ok(&[
        "--seed",
        "3",
        "thin-out",
        "--method",
        "random",
        "--share",
        "1/2",
        p(&lidar),
        p(&a),
    ]);
    ok(&[
        "--seed",
        "3",
        "thin-out",
        "--input",
        p(&lidar),
        "--output",
        p(&b),
        "--method",
        "random",
        "--share",
        "1/2",
    ]);
    for id in ["000000", "000001"] {
        let x = std::fs::read(a.join(format!("{id}.bin"))).unwrap();
        let y = std::fs::read(b.join(format!("{id}.bin"))).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn single_file_and_directory_modes_match() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    scene(&d, 2);
    let dir_out = tmp.path().join("dir");
    ok(&[
        "thin-out",
        "--method",
        "voxel",
        "--share",
        "1/4",
        p(&d.join("lidar")),
        p(&dir_out),
    ]);
    let file_out = tmp.path().join("one.bin");
    ok(&[
        "thin-out",
        "--method",
        "voxel",
        "--share",
        "1/4",
        p(&d.join("lidar/000001.bin")),
        p(&file_out),
    ]);
    assert_eq!(
        std::fs::read(dir_out.join("000001.bin")).unwrap(),
        std::fs::read(file_out).unwrap()
    );
}

#[test]
fn crop_before_thinning_keeps_share_of_cropped_cloud() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    scene(&d, 1);
    let range = "5,-10,-3,30,10,2";
    let cropped = tmp.path().join("c.bin");
    let c = ok(&[
        "crop",
        "--range",
        range,
        p(&d.join("lidar/000000.bin")),
        p(&cropped),
    ]);
    let n = c["frames"][0]["output"].as_u64().unwrap();
    let t = ok(&[
        "thin-out",
        "--method",
        "random",
        "--share",
        "1/2",
        "--range",
        range,
        p(&d.join("lidar/000000.bin")),
        p(&tmp.path().join("t.bin")),
    ]);
    assert_eq!(t["frames"][0]["output"].as_u64().unwrap(), n / 2);
}

#[test]
fn perfect_detections_score_one_in_both_bins() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    scene(&d, 10);
    let mut dets = read_boxes(&d.join("gt.json")).unwrap();
    for (i, b) in dets.iter_mut().enumerate() {
        b.score = Some(1.0 - 1e-3 * i as f64);
    }
    let dets_path = tmp.path().join("dets.json");
    radarlift::io::write_boxes(&dets_path, &dets).unwrap();
    let report = ok(&["eval", "--dets", p(&dets_path), "--gts", p(&d.join("gt"))]);
    let bins = report["bins"].as_array().unwrap();
    assert_eq!(bins.len(), 2);
    for b in bins {
        assert_eq!(b["map"].as_f64(), Some(1.0), "{}", b["name"]);
    }
}

#[test]
fn csv_format_writes_csv_boxes() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["--format", "csv", "gen-scene", "--out-dir", p(tmp.path())]);
    let text = std::fs::read_to_string(tmp.path().join("gt.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("id,class"));
    assert_eq!(lines.count(), 6);
    assert!(tmp.path().join("gt/000000.csv").exists());
}

#[test]
fn config_from_environment_sets_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 9, "scene": {"counts": {"Car": 1}}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_radarlift"))
        .args(["gen-scene", "--out-dir", p(&tmp.path().join("d"))])
        .env("RADARLIFT_CONFIG", &cfg)
        .env_remove("RADARLIFT_SEED")
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["frames"][0]["boxes"], 1);

    std::fs::write(&cfg, r#"{"sede": 9}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_radarlift"))
        .args(["gen-scene", "--out-dir", p(&tmp.path().join("e"))])
        .env("RADARLIFT_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pillarize_writes_index_and_payload() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    scene(&d, 1);
    let mixed = tmp.path().join("m.bin");
    ok(&[
        "mix",
        p(&d.join("radar/000000.bin")),
        p(&d.join("lidar/000000.bin")),
        p(&mixed),
    ]);
    let pillars = tmp.path().join("m.pillars");
    let r = ok(&[
        "pillarize",
        "--pillar",
        "0.16",
        "--max-points",
        "32",
        p(&mixed),
        p(&pillars),
    ]);
    let index: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("m.pillars.json")).unwrap()).unwrap();
    let width = index["schema"].as_array().unwrap().len();
    let rows: u64 = index["pillars"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["count"].as_u64().unwrap())
        .sum();
    assert_eq!(rows, r["frames"][0]["points"].as_u64().unwrap());
    assert_eq!(
        std::fs::metadata(&pillars).unwrap().len(),
        rows * width as u64 * 4
    );
    assert!(index["pillars"]
        .as_array()
        .unwrap()
        .iter()
        .all(|e| e["count"].as_u64().unwrap() <= 32));
}

#[test]
fn manifest_commands_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    scene(&d, 2);
    let work = tmp.path().join("work");
    let m = ok(&[
        "--seed",
        "4",
        "schedule",
        "RL^MSTM_{1-1/4/knn}->R^feat",
        "--lidar",
        p(&d.join("lidar")),
        "--radar",
        p(&d.join("radar")),
        "--work-dir",
        p(&work),
        "--out",
        p(&tmp.path().join("plan.json")),
    ]);
    let stages = m["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 4);
    for st in stages {
        for cmd in st["commands"].as_array().unwrap() {
            let args: Vec<&str> = cmd
                .as_array()
                .unwrap()
                .iter()
                .map(|a| a.as_str().unwrap())
                .collect();
            assert_eq!(args[0], "radarlift");
            ok(&args[1..]);
        }
        let dataset = Path::new(st["dataset"].as_str().unwrap());
        assert!(dataset.join("000000.bin").exists(), "{}", dataset.display());
    }
    let last_mixed = read_cloud(&work.join("stage_2/mixed/000000.bin"), None).unwrap();
    let radar = read_cloud(&d.join("radar/000000.bin"), None).unwrap();
    let lidar = read_cloud(&d.join("lidar/000000.bin"), None).unwrap();
    assert_eq!(last_mixed.len(), radar.len() + lidar.len() / 4);
}

#[test]
fn kd_loss_on_exported_tensors() {
    use radarlift::distill::{DenseMap, Geometry, RegressionSet};
    use radarlift::io::{write_tensors, TensorBundle, TensorRole};

    let tmp = tempfile::tempdir().unwrap();
    let g = Geometry {
        origin: [0.0, -6.4],
        cell_size: [0.32, 0.32],
    };
    let bundle = |offset: f64| TensorBundle {
        maps: vec![
            (
                TensorRole::Cls,
                DenseMap::from_fn(4, 4, 1, |r, c, _| 0.0625 * (r + c) as f64 + offset).unwrap(),
            ),
            (
                TensorRole::Feat,
                DenseMap::from_fn(40, 40, 2, |r, c, k| (r * 3 + c + k) as f64 * 0.01)
                    .unwrap()
                    .with_geometry(g),
            ),
        ],
        rows: vec![(
            TensorRole::Reg,
            RegressionSet::new(1, 7, vec![0.0; 7]).unwrap(),
        )],
    };
    let s = tmp.path().join("s.tns");
    let t = tmp.path().join("t.tns");
    write_tensors(&s, &bundle(0.25)).unwrap();
    write_tensors(&t, &bundle(0.0)).unwrap();
    let gt = tmp.path().join("gt.json");
    std::fs::write(
        &gt,
        r#"[{"id":"0","class":"Car","center":[4,0,0],"dims":[3.9,1.6,1.5],"yaw":0.3}]"#,
    )
    .unwrap();
    let r = ok(&[
        "kd-loss",
        "--student",
        p(&s),
        "--teacher",
        p(&t),
        "--gt",
        p(&gt),
    ]);
    // dyadic values survive f32 storage exactly
    assert_eq!(r["l_l-cls"].as_f64(), Some(0.25));
    assert_eq!(r["l_l-reg"].as_f64(), Some(0.0));
    assert_eq!(r["l_feat"].as_f64(), Some(0.0));
    assert_eq!(r["joint"].as_f64(), Some(0.001 * 0.25));
    assert_eq!(r["computed"].as_array().unwrap().len(), 3);
}
