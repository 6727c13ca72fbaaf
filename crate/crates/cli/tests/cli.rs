use std::process::{Command, Output};

fn mtldrive(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtldrive"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("one JSON record per line"))
        .collect()
}

#[test]
fn params_default_config_fits_the_budget() {
    let out = mtldrive(&["params", "--out", "-"]);
    assert!(out.status.success());
    let rec = &json_lines(&out)[0];
    let total = rec["total"].as_u64().unwrap();
    assert!(total < 6_000_000);
    let parts: u64 = rec["breakdown"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(parts, total);
}

#[test]
fn human_output_is_a_table() {
    let out = mtldrive(&["params", "--preset", "toy"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].contains("module") && lines[0].contains("params"));
    assert!(lines.last().unwrap().contains("total"));
    // right-aligned count column: every row ends at the same width
    let width = lines[0].trim_end().len();
    assert!(lines.iter().all(|l| l.trim_end().len() == width), "{text}");
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        vec!["no-such-command"],
        vec!["gradcheck", "--select", "nope"],
        vec!["bench", "--duration", "0"],
        vec!["ablate", "--variants", "nope"],
        vec!["params", "--seed", "minus-one"],
    ] {
        assert_eq!(mtldrive(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "channels=35\n").unwrap();
    let out = mtldrive(&["params", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("channels"));

    std::fs::write(&path, "no_such_key=1\n").unwrap();
    assert_eq!(
        mtldrive(&["params", "--config", path.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn config_file_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.cfg");
    std::fs::write(&path, "channels=24\nframe_count=4\nheight=4\nwidth=4\nview_height=8\nview_width=8\njoint_count=5\n").unwrap();
    let small = json_lines(&mtldrive(&[
        "params",
        "--config",
        path.to_str().unwrap(),
        "--out",
        "-",
    ]));
    let full = json_lines(&mtldrive(&["params", "--out", "-"]));
    assert!(small[0]["total"].as_u64() < full[0]["total"].as_u64());
}

#[test]
fn gradcheck_passes_and_flags_a_corrupted_tensor() {
    let ok = mtldrive(&[
        "gradcheck",
        "--select",
        "tensor-core,heads",
        "--seed",
        "3",
        "--out",
        "-",
    ]);
    assert!(ok.status.success());
    let lines = json_lines(&ok);
    assert!(!lines.is_empty());
    assert!(lines
        .iter()
        .all(|l| l["passed"] == true && l["max_rel_err"].as_f64().unwrap() < 1e-4));

    let bad = mtldrive(&[
        "gradcheck",
        "--select",
        "tensor-core",
        "--corrupt",
        "matmul.in0",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("matmul.in0"));
}

#[test]
fn train_toy_emits_metrics_records_deterministically() {
    let args = [
        "train-toy",
        "--steps",
        "12",
        "--train-samples",
        "32",
        "--eval-samples",
        "16",
        "--eval-every",
        "6",
        "--seed",
        "5",
        "--out",
        "-",
    ];
    let a = mtldrive(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let records = json_lines(&a);
    assert_eq!(records.len(), 2);
    let keys: Vec<&str> = records[0]
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    for k in [
        "epoch",
        "loss_total",
        "acc_der",
        "acc_vbr",
        "macc",
        "gate_telemetry",
        "param_count",
        "fps",
    ] {
        assert!(keys.contains(&k), "{k} missing");
    }
    assert_eq!(records[0]["gate_telemetry"].as_array().unwrap().len(), 12);
    assert_eq!(a.stdout, mtldrive(&args).stdout);
}

#[test]
fn ablate_reports_only_the_requested_variant() {
    let out = mtldrive(&[
        "ablate",
        "--variants",
        "exterior_only",
        "--steps",
        "4",
        "--train-samples",
        "16",
        "--eval-samples",
        "8",
        "--out",
        "-",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = json_lines(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["variant"], "exterior_only");
    assert_eq!(rows[0]["accuracy"].as_array().unwrap().len(), 4);
    assert!(rows[0]["accuracy"]
        .as_array()
        .unwrap()
        .iter()
        .all(|a| a.is_f64()));
}

#[test]
fn gen_data_writes_loadable_layout() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let out = mtldrive(&[
        "gen-data",
        "--count",
        "4",
        "--dir",
        root.to_str().unwrap(),
        "--out",
        "-",
    ]);
    assert!(out.status.success());
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 4);
    for l in &lines {
        let sample = std::path::Path::new(l["path"].as_str().unwrap());
        for f in [
            "labels.txt",
            "boxes.txt",
            "joints.t3jt",
            "front",
            "left",
            "right",
            "inside",
        ] {
            assert!(
                sample.join(f).exists(),
                "{f} missing in {}",
                sample.display()
            );
        }
    }
}

#[test]
fn bench_record_is_ordered() {
    let out = mtldrive(&[
        "bench",
        "--preset",
        "toy",
        "--duration",
        "0.3",
        "--out",
        "-",
    ]);
    assert!(out.status.success());
    let r = &json_lines(&out)[0];
    assert!(r["fps"].as_f64().unwrap() > 0.0);
    assert!(r["latency_p50_ms"].as_f64() <= r["latency_p95_ms"].as_f64());
    assert_eq!(r["warmup_batches"], 10);
}
