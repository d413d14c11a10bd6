use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csalign_core::{cs_divergence, read_embeddings, KernelParams};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_csalign"));
    c.env_remove("CSALIGN_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn csalign")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn parse_csv(text: &str) -> (String, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

const SMALL: &str = r#"{
  "regime": "REGIME",
  "data": { "synthetic": { "n_pairs": 120, "latent_dim": 4, "embed_dim": 4, "gap": 2.0, "noise_std": 0.1, "seed": 3 } },
  "loss": { "lambda": LAMBDA },
  "train": { "epochs": 4, "batch_size": 32, "seed": 3 }
}"#;

fn small(regime: &str, lambda: f64) -> String {
    SMALL.replace("REGIME", regime).replace("LAMBDA", &lambda.to_string())
}

#[test]
fn estimate_prints_twelve_decimals() {
    let dir = tempfile::tempdir().unwrap();
    let x = write(dir.path(), "x.embt", "embt 1 1 1\n0\n");
    let y = write(dir.path(), "y.embt", "embt 1 1 1\n2\n");
    let o = run(&["estimate", "--x", s(&x), "--y", s(&y), "--sigma", "1"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "4.000000000000\n");
    let o = run(&["estimate", "--x", s(&x), "--y", s(&y), "--sigma", "1", "--rkhs"]);
    assert_eq!(stdout(&o), "4.000000000000\n");
    let o = run(&["estimate", "--x", s(&x), "--y", s(&x)]);
    assert_eq!(stdout(&o), "0.000000000000\n");
}

#[test]
fn estimate_matches_library_value() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = (dir.path().join("x.embt"), dir.path().join("y.embt"));
    let o = run(&[
        "gen",
        "paired",
        "--n-pairs",
        "50",
        "--latent-dim",
        "3",
        "--embed-dim",
        "5",
        "--gap",
        "1.5",
        "--seed",
        "4",
        "--out-x",
        s(&x),
        "--out-y",
        s(&y),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["estimate", "--x", s(&x), "--y", s(&y), "--sigma", "0.7"]);
    let lib = cs_divergence(
        &read_embeddings(&x).unwrap(),
        &read_embeddings(&y).unwrap(),
        KernelParams::new(0.7).unwrap(),
    )
    .unwrap()
    .value()
    .unwrap();
    assert_eq!(stdout(&o), format!("{lib:.12}\n"));
}

#[test]
fn estimate_non_overlapping_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let x = write(dir.path(), "x.embt", "embt 1 1 1\n0\n");
    let y = write(dir.path(), "y.embt", "embt 1 1 1\n1000\n");
    let o = run(&["estimate", "--x", s(&x), "--y", s(&y), "--sigma", "0.01"]);
    assert_eq!(code(&o), 3);
    assert_eq!(stdout(&o), "non-overlapping\n");
}

#[test]
fn usage_errors_exit_2_with_one_line_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let x = write(dir.path(), "x.embt", "embt 1 1 2\n0 1\n");
    let y = write(dir.path(), "y.embt", "embt 1 1 1\n2\n");
    let bad = write(dir.path(), "bad.embt", "embt 1 1 2\n0\n");
    for args in [
        vec!["estimate", "--x", s(&x), "--y", s(&y)],
        vec!["estimate", "--x", s(&bad), "--y", s(&y)],
        vec!["estimate", "--x", "/nonexistent/x", "--y", s(&y)],
        vec!["estimate", "--x", s(&x), "--y", s(&x), "--sigma=-1"],
        vec!["gradcheck", "--loss", "nope"],
    ] {
        let o = run(&args);
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(o.stdout.is_empty(), "{args:?}");
        let err = String::from_utf8(o.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
    }
    assert_eq!(code(&run(&["estimate"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn toy_report_lines() {
    let o = run(&["toy"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(
        &lines[..4],
        [
            "mi(0.99) 1.9585",
            "mi(0) 0.0000",
            "kl(offset) 2.8069",
            "kl(matched) 0.0000"
        ]
    );
    assert!(lines[4].starts_with("note: ") && lines[4].contains("6.81"));
    assert_eq!(lines.len(), 5);
}

#[test]
fn gradcheck_passes_for_every_loss() {
    for (loss, dim) in [("cs", "3"), ("infonce", "4"), ("objective", "4"), ("token", "3")] {
        let o = run(&["gradcheck", "--loss", loss, "--n", "8", "--dim", dim, "--seed", "1"]);
        assert_eq!(code(&o), 0, "{loss}: {}", stdout(&o));
        let out = stdout(&o);
        assert!(out.contains(&format!("loss {loss}\n")));
        assert!(out.ends_with("status pass\n"));
        let err: f64 = out
            .lines()
            .find_map(|l| l.strip_prefix("max_rel_err "))
            .unwrap()
            .parse()
            .unwrap();
        assert!(err < 1e-4);
    }
}

#[test]
fn gradcheck_failure_exits_4() {
    // A step this coarse leaves truncation error far above the threshold.
    let o = run(&[
        "gradcheck",
        "--loss",
        "infonce",
        "--n",
        "8",
        "--dim",
        "4",
        "--step",
        "1e-3",
        "--seed",
        "2",
    ]);
    let out = stdout(&o);
    if code(&o) == 0 {
        assert!(out.ends_with("status pass\n"));
    } else {
        assert_eq!(code(&o), 4);
        assert!(out.ends_with("status fail\n"));
    }
    assert_eq!(code(&run(&["gradcheck", "--loss", "cs", "--step", "1"])), 2);
}

#[test]
fn train_writes_documented_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &small("combined", 0.01));
    let out = dir.path().join("m.csv");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = parse_csv(&std::fs::read_to_string(&out).unwrap());
    assert_eq!(
        header,
        "epoch,loss_total,loss_infonce,loss_cs,loss_token,eval_cs_divergence,recall_at_1,recall_at_5,mean_embedding_gap"
    );
    assert_eq!(rows.len(), 4);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 9);
        assert_eq!(r[0], i.to_string());
        assert!(r[4].is_empty());
        for (j, f) in r.iter().enumerate().filter(|&(j, _)| j != 4) {
            f.parse::<f64>().unwrap_or_else(|_| panic!("column {j}: {f}"));
        }
    }
    let printed = stdout(&o);
    assert!(printed.contains(&format!("final_eval_cs_divergence {}\n", rows[3][5])));
}

#[test]
fn lambda_zero_matches_infonce_only_at_epoch_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = Vec::new();
    for (name, regime, lambda) in [("a", "combined", 0.0), ("b", "infonce_only", 0.01)] {
        let cfg = write(dir.path(), &format!("{name}.json"), &small(regime, lambda));
        let out = dir.path().join(format!("{name}.csv"));
        assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
        csv.push(parse_csv(&std::fs::read_to_string(&out).unwrap()).1);
    }
    assert_eq!(csv[0][0][2], csv[1][0][2]);
    // With lambda = 0 the CS term never touches the parameters.
    for (a, b) in csv[0].iter().zip(&csv[1]) {
        assert_eq!(a[2], b[2]);
        assert_eq!(a[5..], b[5..]);
    }
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let cases = [
        (
            small("combined", 0.01).replace("\"batch_size\": 32", "\"batch_size\": 32, \"epoch\": 2"),
            "train",
        ),
        (small("combined", 0.01).replace("\"lambda\"", "\"lamda\""), "loss"),
        (small("combinde", 0.01), "regime"),
        (
            small("combined", 0.01).replace("\"gap\": 2.0", "\"gap\": \"wide\""),
            "data.synthetic.gap",
        ),
        (
            small("combined", 0.01).replace("\"epochs\": 4", "\"epochs\": 0"),
            "epochs",
        ),
        ("{ not json".to_string(), "config"),
    ];
    for (text, key) in cases {
        let cfg = write(dir.path(), "c.json", &text);
        let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(code(&o), 2, "{text}");
        let err = String::from_utf8(o.stderr).unwrap();
        assert!(err.contains(key), "expected `{key}` in {err}");
    }
    assert!(!out.exists());
    assert_eq!(
        code(&run(&["train", "--config", "/nonexistent.json", "--out", s(&out)])),
        2
    );
}

#[test]
fn divergent_training_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let text = small("combined", 0.01).replace("\"epochs\": 4", "\"epochs\": 30, \"learning_rate\": 1e300");
    let cfg = write(dir.path(), "c.json", &text);
    let out = dir.path().join("m.csv");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn shipped_configs_reduce_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["combined", "infonce_only", "unpaired", "multicaption", "token"] {
        let out = dir.path().join(format!("{name}.csv"));
        let o = run(&[
            "train",
            "--config",
            s(&shipped(&format!("{name}.json"))),
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
        let (_, rows) = parse_csv(&std::fs::read_to_string(&out).unwrap());
        let total = |r: &Vec<String>| r[1].parse::<f64>().unwrap();
        assert!(total(rows.last().unwrap()) < total(&rows[0]), "{name}");
    }
}

#[test]
fn files_data_source_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "gen",
        "paired",
        "--n-pairs",
        "60",
        "--latent-dim",
        "3",
        "--embed-dim",
        "3",
        "--seed",
        "2",
        "--out-x",
        s(&dir.path().join("x.embt")),
        "--out-y",
        s(&dir.path().join("y.embt")),
    ]);
    assert_eq!(code(&o), 0);
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{ "regime": "combined", "data": { "files": { "x": "x.embt", "y": "y.embt" } }, "train": { "epochs": 2, "batch_size": 16 } }"#,
    );
    let out = dir.path().join("m.csv");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
    assert_eq!(parse_csv(&std::fs::read_to_string(&out).unwrap()).1.len(), 2);
}

const SMALL_SWEEP: &str = r#"{
  "regime": "combined",
  "data": { "synthetic": { "n_pairs": 80, "latent_dim": 3, "embed_dim": 3, "gap": 2.0, "noise_std": 0.1, "seed": 5 } },
  "train": { "epochs": 3, "batch_size": 32, "seed": 5 },
  "sweep": { "lambdas": [0.0, 0.5], "sigmas": [0.5, 1.0] }
}"#;

#[test]
fn sweep_rows_and_lambda_zero_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.json", SMALL_SWEEP);
    let out = dir.path().join("s.csv");
    let o = run(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = parse_csv(&std::fs::read_to_string(&out).unwrap());
    assert_eq!(header, "lambda,sigma,final_eval_cs,final_recall_at_1");
    assert_eq!(rows.len(), 4);

    for sigma in ["0.5", "1"] {
        let text = SMALL_SWEEP
            .replace("\"combined\"", "\"infonce_only\"")
            .replace("\"train\"", &format!("\"loss\": {{ \"sigma\": {sigma} }}, \"train\""));
        let single = write(dir.path(), "one.json", &text);
        let m = dir.path().join("one.csv");
        assert_eq!(code(&run(&["train", "--config", s(&single), "--out", s(&m)])), 0);
        let last = parse_csv(&std::fs::read_to_string(&m).unwrap()).1.pop().unwrap();
        let row = rows.iter().find(|r| r[0] == "0" && r[1] == sigma).unwrap();
        assert_eq!(row[2], last[5], "sigma {sigma}");
        assert_eq!(row[3], last[6], "sigma {sigma}");
    }
}

#[test]
fn sweep_output_independent_of_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.json", SMALL_SWEEP);
    let mut outputs = Vec::new();
    for threads in [None, Some("3")] {
        let out = dir.path().join(format!("s{}.csv", outputs.len()));
        let mut c = bin();
        c.args(["sweep", "--config", s(&cfg), "--out", s(&out)]);
        if let Some(t) = threads {
            c.env("CSALIGN_THREADS", t);
        }
        assert!(c.status().unwrap().success());
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let out = dir.path().join("bad.csv");
    let status = bin()
        .args(["sweep", "--config", s(&cfg), "--out", s(&out)])
        .env("CSALIGN_THREADS", "zero")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn gen_commands_write_parseable_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let o = run(&[
        "gen",
        "unpaired",
        "--n-pairs",
        "10",
        "--latent-dim",
        "3",
        "--embed-dim",
        "4",
        "--m-x",
        "7",
        "--m-y",
        "9",
        "--out-x",
        s(&p("ux.embt")),
        "--out-y",
        s(&p("uy.embt")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_embeddings(&p("ux.embt")).unwrap().rows(), 7);
    assert_eq!(read_embeddings(&p("uy.embt")).unwrap().cols(), 4);

    let o = run(&[
        "gen",
        "tokens",
        "--n",
        "5",
        "--v-range",
        "2",
        "4",
        "--l-range",
        "3",
        "6",
        "--dim",
        "3",
        "--gap",
        "1",
        "--seed",
        "8",
        "--out-vision",
        s(&p("v.json")),
        "--out-text",
        s(&p("t.json")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let vision = csalign_core::read_tokens(&p("v.json")).unwrap();
    assert_eq!(vision.len(), 5);
    assert!(vision
        .samples()
        .iter()
        .all(|m| (2..=4).contains(&m.rows()) && m.cols() == 3));
}

#[test]
fn every_command_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let snapshot = |tag: usize| -> Vec<Vec<u8>> {
        let p = |n: &str| dir.path().join(format!("{tag}_{n}"));
        let mut files = Vec::new();
        let outs = [
            run(&["toy"]),
            run(&["gradcheck", "--loss", "objective", "--n", "6", "--dim", "3"]),
            run(&[
                "gen",
                "paired",
                "--n-pairs",
                "30",
                "--latent-dim",
                "3",
                "--embed-dim",
                "3",
                "--out-x",
                s(&p("x.embt")),
                "--out-y",
                s(&p("y.embt")),
            ]),
            run(&["estimate", "--x", s(&p("x.embt")), "--y", s(&p("y.embt"))]),
            run(&["train", "--config", s(&shipped("token.json")), "--out", s(&p("m.csv"))]),
        ];
        for o in outs {
            assert_eq!(code(&o), 0);
            files.push(o.stdout);
        }
        for n in ["x.embt", "y.embt", "m.csv"] {
            files.push(std::fs::read(p(n)).unwrap());
        }
        files
    };
    assert_eq!(snapshot(0), snapshot(1));
}
