use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eqlab::commands::load_checkpoint;
use eqlab::jsonl::{self, Header};
use eqlab::pipeline::Checkpoint;
use eqsim::losses::EqSimMode;
use eqsim::model::{EncoderParams, Encoder, Matrix};
use eqsim::similarity::EmbVector;
use eqsim::synthgen::{Aspect, PairSample, SemanticSlots};
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn eqlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let text = fs::read_to_string(fixtures().join("small.toml")).unwrap();
    let path = dir.join("config.toml");
    fs::write(&path, format!("{text}\n{extra}")).unwrap();
    path
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_writes_requested_counts_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let stdout = ok(&eqlab(&["generate", "--config", cfg, "--out", "run"], dir.path()));
    assert!(stdout.contains("wrote 60 eval samples"), "{stdout}");

    let eval_path = dir.path().join("run/eval_set.jsonl");
    let (header, samples): (Header, Vec<PairSample>) = jsonl::read(&eval_path, "eval_set").unwrap();
    assert_eq!(samples.len(), 60);
    assert_eq!(header.seed, Some(1));
    assert!(samples.iter().all(|s| s.hamming == 1));
    let per_aspect: usize = Aspect::ALL
        .iter()
        .map(|a| {
            let n = samples.iter().filter(|s| s.edited_aspect == *a).count();
            assert!(stdout.contains(&format!("{a}: {n}")));
            n
        })
        .sum();
    assert_eq!(per_aspect, 60);

    let first = fs::read(&eval_path).unwrap();
    let spec = fs::read(dir.path().join("run/train_stream.jsonl")).unwrap();
    ok(&eqlab(&["generate", "--config", cfg, "--out", "run"], dir.path()));
    assert_eq!(fs::read(&eval_path).unwrap(), first);
    assert_eq!(fs::read(dir.path().join("run/train_stream.jsonl")).unwrap(), spec);

    ok(&eqlab(&["generate", "--config", cfg, "--out", "run2", "--seed", "2"], dir.path()));
    assert_ne!(fs::read(dir.path().join("run2/eval_set.jsonl")).unwrap(), first);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "[eval.aspect_mix]\nobject = -1.0\n");
    let out = eqlab(&["generate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval.aspect_mix.object"));

    fs::write(&cfg, "run_label = \"x\"\noutput_dir = \"o\"\nseed = 1\n[train]\nstepz = 3\n").unwrap();
    let out = eqlab(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stepz") && err.contains("line"), "{err}");

    let out = eqlab(&["train", "--config", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3));

    let out = eqlab(&["train", "--config", cfg.to_str().unwrap(), "--eqsim-mode", "sideways"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_off_has_zero_equivariance_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&eqlab(&["train", "--config", cfg, "--out", "run", "--eqsim-mode", "off"], dir.path()));
    let history = dir.path().join("run/history_off.jsonl");
    let rows = lines(&history);
    assert_eq!(rows.len(), 41);
    assert_eq!(rows[0]["config"]["train"]["eqsim"]["mode"], "off");
    for row in &rows[1..] {
        assert_eq!(row["equivariance"].as_f64(), Some(0.0));
    }
    let first = fs::read(&history).unwrap();
    let ckpt = fs::read(dir.path().join("run/checkpoint_off.jsonl")).unwrap();
    ok(&eqlab(&["train", "--config", cfg, "--out", "run", "--eqsim-mode", "off"], dir.path()));
    assert_eq!(fs::read(&history).unwrap(), first);
    assert_eq!(fs::read(dir.path().join("run/checkpoint_off.jsonl")).unwrap(), ckpt);

    ok(&eqlab(&["train", "--config", cfg, "--out", "run"], dir.path()));
    let rows = lines(&dir.path().join("run/history_hybrid.jsonl"));
    assert!(rows[1..].iter().any(|r| r["equivariance"].as_f64().unwrap() > 0.0));
    let c = load_checkpoint(&dir.path().join("run/checkpoint_hybrid.jsonl")).unwrap();
    assert_eq!(c.mode, EqSimMode::Hybrid);
    assert_eq!(c.params.shape().embed_dim, 8);
}

#[test]
fn non_finite_training_exits_4_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixtures().join("small.toml"))
        .unwrap()
        .replace("steps = 40", "steps = 40\nlearning_rate = 1e300\noptimizer = { kind = \"sgd\" }");
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, text).unwrap();
    let out = eqlab(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn eval_reports_are_consistent_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&eqlab(&["generate", "--config", cfg, "--out", "run"], dir.path()));
    ok(&eqlab(&["train", "--config", cfg, "--out", "run"], dir.path()));
    let stdout = ok(&eqlab(&["eval", "--config", cfg, "--out", "run"], dir.path()));
    assert!(stdout.contains("group="), "{stdout}");
    let path = dir.path().join("run/report_hybrid.jsonl");
    let rows = lines(&path);
    assert_eq!(rows.len(), 3);
    let report = &rows[1];
    let g = &report["group"];
    let (t, i, gr) = (
        g["text_score"].as_f64().unwrap(),
        g["image_score"].as_f64().unwrap(),
        g["group_score"].as_f64().unwrap(),
    );
    assert!(gr <= t.min(i));
    assert_eq!(report["n_samples"], 60);
    assert_eq!(report["skipped"], serde_json::json!(["wall_clock_seconds"]));
    assert!(report["wall_clock_seconds"].is_null());
    for key in ["final_loss", "valse", "recall", "equivariance", "per_aspect_group"] {
        assert!(!report[key].is_null(), "{key}");
    }
    assert!(rows[2]["summary"].as_str().unwrap().contains("group="));

    let first = fs::read(&path).unwrap();
    ok(&eqlab(&["eval", "--config", cfg, "--out", "run"], dir.path()));
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn eval_skips_unrequested_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixtures().join("small.toml"))
        .unwrap()
        .replace("n_eval = 60", "n_eval = 60\nmetrics = [\"group\"]")
        .replace("steps = 40", "steps = 0");
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, text).unwrap();
    let cfg = cfg.to_str().unwrap();
    ok(&eqlab(&["generate", "--config", cfg, "--out", "run"], dir.path()));
    ok(&eqlab(&["train", "--config", cfg, "--out", "run"], dir.path()));
    ok(&eqlab(&["eval", "--config", cfg, "--out", "run"], dir.path()));
    let rows = lines(&dir.path().join("run/report_hybrid.jsonl"));
    let skipped: Vec<&str> = rows[1]["skipped"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(
        skipped,
        ["valse", "recall", "equivariance", "per_aspect_group", "final_loss", "wall_clock_seconds"]
    );
    // untrained: reported, not asserted beyond the invariant
    let g = &rows[1]["group"];
    assert!(g["group_score"].as_f64().unwrap() <= g["text_score"].as_f64().unwrap());
}

#[test]
fn dimension_mismatch_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&eqlab(&["generate", "--config", cfg, "--out", "run"], dir.path()));
    let text = fs::read_to_string(fixtures().join("small.toml")).unwrap().replace("d_img = 8", "d_img = 6");
    let other = dir.path().join("other.toml");
    fs::write(&other, text).unwrap();
    ok(&eqlab(&["train", "--config", other.to_str().unwrap(), "--out", "other"], dir.path()));
    let ckpt = dir.path().join("other/checkpoint_hybrid.jsonl");
    for cmd in ["eval", "eqscore"] {
        let out = eqlab(
            &[cmd, "--config", cfg, "--out", "run", "--checkpoint", ckpt.to_str().unwrap()],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(5), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn eqscore_single_bin_holds_everything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&eqlab(&["generate", "--config", cfg, "--out", "run"], dir.path()));
    ok(&eqlab(&["train", "--config", cfg, "--out", "run"], dir.path()));
    ok(&eqlab(&["eqscore", "--config", cfg, "--out", "run", "--bins", "1"], dir.path()));
    let path = dir.path().join("run/eqscore_hybrid.jsonl");
    let rows = lines(&path);
    assert_eq!(rows[0]["kind"], "eqscore");
    let bins: Vec<&Value> = rows[1..].iter().filter(|r| r.get("count").is_some()).collect();
    assert_eq!(bins.len(), 3);
    for b in bins {
        assert_eq!(b["count"], 60);
    }
    let heads: Vec<&str> = rows[1..]
        .iter()
        .filter(|r| r.get("std").is_some())
        .map(|r| r["component"].as_str().unwrap())
        .collect();
    assert_eq!(heads, ["text_direction", "image_direction", "combined"]);

    let first = fs::read(&path).unwrap();
    ok(&eqlab(&["eqscore", "--config", cfg, "--out", "run", "--bins", "1"], dir.path()));
    assert_eq!(fs::read(&path).unwrap(), first);
}

fn identity_checkpoint(d: usize) -> Checkpoint {
    let enc = || Encoder {
        hidden: None,
        weights: Matrix::identity(d),
    };
    Checkpoint {
        seed: 0,
        mode: EqSimMode::Off,
        params: EncoderParams {
            image: enc(),
            text: enc(),
            log_temperature: 0.07f64.ln(),
        },
        final_loss: None,
    }
}

#[test]
fn perfectly_equivariant_checkpoint_fills_first_bin() {
    // identical image and text features under identity encoders give
    // symmetric grids with equal diagonals
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let d = 8;
    let slots = SemanticSlots {
        object: 0,
        count: 1,
        location: 0,
        attribute: 0,
    };
    let samples: Vec<PairSample> = (0..25)
        .map(|k| {
            let a: Vec<f64> = (0..d).map(|i| ((i * 7 + k * 3) % 11) as f64 - 4.5).collect();
            let b: Vec<f64> = (0..d).map(|i| ((i * 5 + k) % 13) as f64 - 6.5).collect();
            let (a, b) = (EmbVector::new(a).unwrap(), EmbVector::new(b).unwrap());
            PairSample {
                id: k,
                image1: a.clone(),
                text1: a,
                image2: b.clone(),
                text2: b,
                slots1: slots,
                slots2: SemanticSlots { object: 1, ..slots },
                edited_aspect: Aspect::Object,
                hamming: 1,
            }
        })
        .collect();
    let eval = dir.path().join("eval.jsonl");
    let ckpt = dir.path().join("ckpt.jsonl");
    jsonl::write(&eval, &Header::new("eval_set", Some(0), &"hand-built"), &samples).unwrap();
    jsonl::write(&ckpt, &Header::new("checkpoint", Some(0), &"identity"), &[identity_checkpoint(d)]).unwrap();
    ok(&eqlab(
        &[
            "eqscore",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "run",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--eval-set",
            eval.to_str().unwrap(),
            "--bins",
            "5",
        ],
        dir.path(),
    ));
    let rows = lines(&dir.path().join("run/eqscore_hybrid.jsonl"));
    for component in ["text_direction", "image_direction", "combined"] {
        let counts: Vec<u64> = rows[1..]
            .iter()
            .filter(|r| r["component"] == component && r.get("count").is_some())
            .map(|r| r["count"].as_u64().unwrap())
            .collect();
        assert_eq!(counts, [25, 0, 0, 0, 0], "{component}");
    }
}

fn benchbuild(source: &str, input: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["benchbuild", "--source", source, "--input", input, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    eqlab(&args, &fixtures())
}

#[test]
fn benchbuild_reproduces_golden_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("ag", "ag_frames.jsonl", "ag_golden.jsonl", vec![]),
        ("gebc", "gebc_boundaries.jsonl", "gebc_golden.jsonl", vec![]),
        ("youcook2", "youcook2_segments.jsonl", "youcook2_golden.jsonl", vec!["--reject-frames", "42"]),
    ];
    for (source, input, golden, extra) in cases {
        let stdout = ok(&benchbuild(source, input, dir.path(), &extra));
        let got = fs::read_to_string(dir.path().join(format!("manifest_{source}.jsonl"))).unwrap();
        let want = fs::read_to_string(fixtures().join(golden)).unwrap();
        assert_eq!(got, want, "{source}");
        assert!(stdout.starts_with(&format!("{source}: kept")), "{stdout}");
    }
    let stdout = ok(&benchbuild("gebc", "gebc_boundaries.jsonl", dir.path(), &[]));
    assert!(stdout.contains("dropped by gebc_action_word: 1"), "{stdout}");
}

#[test]
fn benchbuild_empty_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    for source in ["ag", "gebc", "youcook2"] {
        ok(&benchbuild(source, "empty.jsonl", dir.path(), &[]));
        let rows = lines(&dir.path().join(format!("manifest_{source}.jsonl")));
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1]["summary"]["kept"], 0);
    }
    let out = benchbuild("ag", "ag_bad.jsonl", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("record 1") && err.contains("`object`"), "{err}");

    let out = benchbuild("gebc", "ag_frames.jsonl", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));

    let bad_segment = dir.path().join("seg.jsonl");
    fs::write(&bad_segment, "{\"start\":5,\"end\":9,\"caption\":\"a\"}\n{\"start\":9,\"end\":9,\"caption\":\"b\"}\n").unwrap();
    let out = benchbuild("youcook2", bad_segment.to_str().unwrap(), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("record 1"));

    let out = benchbuild("ag", "nope.jsonl", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(3));
}
