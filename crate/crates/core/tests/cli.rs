mod common;

use std::path::Path;

use hiast::cli::{cli_main, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("hiast").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = common::tiny_config(0);
    cfg.rounds = 1;
    cfg.iterations_per_round = 5;
    cfg.warmup_iterations = 10;
    let p = dir.join("cfg.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn synth_warmup_pseudolabel_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth_cfg = d.join("synth.json");
    std::fs::write(
        &synth_cfg,
        serde_json::to_string(&common::tiny_config(0).synth).unwrap(),
    )
    .unwrap();
    assert_eq!(
        run(&["synth", "--config", s(&synth_cfg), "--out", s(&d.join("data"))]),
        EXIT_OK
    );
    let target = d.join("data/target");
    let tgt = hiast::data::load_dataset(&target).unwrap();
    assert_eq!(tgt.len(), 12);

    let cfg = write_tiny_config(d);
    assert_eq!(run(&["warmup", "--config", s(&cfg), "--out", s(&d.join("w"))]), EXIT_OK);
    let ck = d.join("w/checkpoints/round_0");
    assert!(ck.join("checkpoint.json").exists());

    let pl = d.join("pl");
    let code = run(&[
        "pseudolabel",
        "--checkpoint",
        s(&ck),
        "--target",
        s(&target),
        "--out",
        s(&pl),
        "--strategy",
        "ias",
        "--alpha",
        "0.5",
        "--gamma",
        "8",
        "--pgm",
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(pl.join("thresholds.csv").exists());
    assert!(pl.join("stats.json").exists());
    let dumped = std::fs::read_dir(pl.join("pseudo_labels")).unwrap().count();
    assert_eq!(dumped, 2 * tgt.len());
    let mut rdr = csv::Reader::from_path(pl.join("thresholds.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["instance_id", "class_0", "class_1", "class_2", "class_3"]);
    assert_eq!(rdr.records().count(), tgt.len());

    for strategy in ["constant", "classbalanced"] {
        let out = d.join(format!("pl_{strategy}"));
        let code = run(&[
            "pseudolabel",
            "--checkpoint",
            s(&ck),
            "--target",
            s(&target),
            "--out",
            s(&out),
            "--strategy",
            strategy,
            "--theta",
            "0.8",
        ]);
        assert_eq!(code, EXIT_OK, "{strategy}");
    }

    let eval_csv = d.join("eval.csv");
    let code = run(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&target),
        "--out",
        s(&eval_csv),
    ]);
    assert_eq!(code, EXIT_OK);
    let text = std::fs::read_to_string(&eval_csv).unwrap();
    assert!(text.starts_with("model,miou,per_class_iou_0"));
    assert!(text.lines().nth(1).unwrap().starts_with("warmup,"));

    assert_eq!(
        run(&["eval", "--checkpoint", s(&d.join("nope")), "--data", s(&target)]),
        EXIT_RUNTIME
    );
}

#[test]
fn train_twice_gives_identical_metrics_and_report_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_tiny_config(d);
    for run_dir in ["a", "b"] {
        assert_eq!(
            run(&[
                "train",
                "--config",
                s(&cfg),
                "--seed",
                "3",
                "--out",
                s(&d.join(run_dir))
            ]),
            EXIT_OK
        );
    }
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/metrics.csv"), read("b/metrics.csv"));
    assert_eq!(
        read("a/round_1/pseudo_labels/00000_tgt_00000.arr"),
        read("b/round_1/pseudo_labels/00000_tgt_00000.arr")
    );
    let resolved: serde_json::Value = serde_json::from_slice(&read("a/config.json")).unwrap();
    assert_eq!(resolved["seed"], 3);

    let summary = d.join("summary.csv");
    let code = run(&[
        "report",
        "--runs",
        s(&d.join("a")),
        s(&d.join("b")),
        "--out",
        s(&summary),
    ]);
    assert_eq!(code, EXIT_OK);
    let rows: Vec<csv::StringRecord> = csv::Reader::from_path(&summary)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[2][0], "mean");
    assert_eq!(rows[0].get(rows[0].len() - 1), rows[1].get(rows[1].len() - 1));
}

#[test]
fn sweep_emits_one_row_per_value_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_tiny_config(d);
    let out = d.join("sw");
    let code = run(&[
        "sweep",
        "--config",
        s(&cfg),
        "--param",
        "alpha",
        "--values",
        "0.1,0.3,0.5,0.7,0.9",
        "--seeds",
        "0,1",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let rows: Vec<csv::StringRecord> = csv::Reader::from_path(out.join("sweep.csv"))
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect();
    assert_eq!(rows.len(), 10);
    let summary: Vec<csv::StringRecord> = csv::Reader::from_path(out.join("sweep_summary.csv"))
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect();
    assert_eq!(summary.len(), 5);
    assert!(summary.iter().all(|r| &r[1] == "2"));

    assert_eq!(
        run(&["sweep", "--param", "delta", "--values", "1", "--out", s(&out)]),
        EXIT_RUNTIME
    );
    assert_eq!(
        run(&["sweep", "--param", "alpha", "--values", "x", "--out", s(&out)]),
        EXIT_USAGE
    );
}

#[test]
fn unknown_flags_and_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--out", "x", "--frobnicate"]), EXIT_USAGE);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"roundz": 1}"#).unwrap();
    let out = dir.path().join("o");
    assert_eq!(run(&["train", "--config", s(&bad), "--out", s(&out)]), EXIT_RUNTIME);
}
