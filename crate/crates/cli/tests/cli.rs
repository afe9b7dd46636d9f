use std::path::Path;
use std::process::{Command, Output};

use curvedit::editing::{EditMethod, EditPlan};
use curvedit::evalmem::MemEvalReport;
use curvedit_cli::stages::{Stamped, SweepReport};
use curvedit_cli::{Manifest, RunConfig};

fn curvedit(args: &[&str], workdir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curvedit"))
        .args(args)
        .arg("--workdir")
        .arg(workdir)
        .arg("-q")
        .env_remove("CURVEDIT_WORKDIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_lm() -> RunConfig {
    let mut c = RunConfig::lm();
    c.lm_data.n_clean_sequences = 200;
    c.lm_data.n_eval_sequences = 16;
    c.lm_data.n_secrets = 4;
    c.lm_data.repetitions = 8;
    c.lm_data.prefix_len = 8;
    c.lm_data.suffix_len = 4;
    c.lm_data.seq_len = 24;
    c.lm_data.max_offset = 4;
    c.lm_arch.context = 32;
    c.lm_arch.n_layers = 2;
    c.lm_arch.d_model = 16;
    c.lm_arch.n_heads = 2;
    c.lm_arch.d_mlp = 32;
    c.train.steps = 40;
    c.train.batch_size = 8;
    c.kfac.collect.max_positions = 2000;
    let edited: Vec<String> = vec!["layer1.gate".into(), "layer1.up".into()];
    c.bands.layers = edited.clone();
    c.sweep.targets = edited.clone();
    c.edits[0].plan.targets = edited.clone();
    c.edits[1].plan.targets = edited.clone();
    if let EditMethod::BsnMask(p) = &mut c.edits[2].plan.method {
        p.epochs = 1;
    }
    c.edits[2].plan = EditPlan { method: c.edits[2].plan.method.clone(), targets: edited };
    c.eval.stress_draws = 2;
    c.eval.retain_size = 32;
    c
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn report_on_empty_workdir_is_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let o = curvedit(&["report"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("baseline.json"), "{}", stderr(&o));
}

#[test]
fn train_without_corpus_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = curvedit(&["train"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.txt"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&curvedit(&["gen-data", "--config", bad.to_str().unwrap()], dir.path())), 3);
    assert_eq!(code(&curvedit(&["gen-data", "--set", "train.no_such_field=1"], dir.path())), 3);
    assert_eq!(code(&curvedit(&["gen-data", "--set", "edits.0.plan.rho=2.0"], dir.path())), 3);
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = curvedit(&["show-config", "--preset", "classifier"], dir.path());
    assert_eq!(code(&o), 0);
    let back = RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(back, RunConfig::classifier());
}

#[test]
fn workdir_defaults_to_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let mut c = tiny_lm();
    c.train.steps = 1;
    std::fs::write(&cfg, c.to_json()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_curvedit"))
        .args(["gen-data", "-q", "--config", cfg.to_str().unwrap()])
        .env("CURVEDIT_WORKDIR", dir.path().join("w"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("w/data/train.txt").is_file());
    assert!(dir.path().join("w/manifests/gen-data.json").is_file());
}

#[test]
fn divergent_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let mut c = tiny_lm();
    c.train.learning_rate = 1e300;
    c.train.grad_clip = 0.0;
    c.train.warmup_steps = 0;
    std::fs::write(&cfg, c.to_json()).unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&curvedit(&["gen-data", "--config", c], dir.path())), 0);
    let o = curvedit(&["train", "--config", c], dir.path());
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let cfg_path = w.join("tiny.json");
    let cfg = tiny_lm();
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let c = cfg_path.to_str().unwrap();

    assert_eq!(code(&curvedit(&["edit", "--config", c], w)), 2);
    for stage in ["gen-data", "train", "kfac-collect", "analyze-bands", "edit", "eval", "report"] {
        let o = curvedit(&[stage, "--config", c], w);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    let o = curvedit(&["sweep", "--config", c, "--jobs", "3"], w);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let hash = cfg.hash();
    for label in ["baseline", "kfac", "svd", "bsn"] {
        let r: Stamped<MemEvalReport> = read_json(&w.join(format!("reports/eval/{label}.json")));
        assert_eq!(r.config_hash, hash);
        assert_eq!(r.body.label, label);
        assert!(r.body.memorization.is_some() && r.body.perplexity.is_some() && r.body.stress.is_some());
    }

    let sweep: Stamped<SweepReport> = read_json(&w.join("reports/sweep.json"));
    assert_eq!(sweep.config_hash, hash);
    let csv = std::fs::read_to_string(w.join("reports/sweep.csv")).unwrap();
    let metrics_per_rho = sweep.body.points[0].metrics.len() + 1;
    assert_eq!(csv.lines().count(), 1 + 6 * metrics_per_rho);
    let full = sweep.body.points.iter().find(|p| p.rho == 1.0).unwrap();
    for (k, v) in &sweep.body.baseline {
        assert!((full.metrics[k] - v).abs() < 1e-9, "{k}: {} vs {v}", full.metrics[k]);
    }

    // artifacts are reproducible and the sweep does not depend on --jobs
    let before: Manifest = read_json(&w.join("manifests/sweep.json"));
    let o = curvedit(&["sweep", "--config", c, "--jobs", "1"], w);
    assert_eq!(code(&o), 0);
    let after: Manifest = read_json(&w.join("manifests/sweep.json"));
    assert_eq!(before.outputs, after.outputs);
    assert_eq!(before.inputs, after.inputs);
    assert_eq!(after.config_hash, hash);

    let before: Manifest = read_json(&w.join("manifests/eval.json"));
    assert_eq!(code(&curvedit(&["eval", "--config", c], w)), 0);
    let after: Manifest = read_json(&w.join("manifests/eval.json"));
    assert_eq!(before.outputs, after.outputs);
    assert!(after.inputs.keys().any(|k| k.ends_with("baseline.ckpt")));

    // later stages pick up the config saved by gen-data
    let o = curvedit(&["eval", "--only", "kfac"], w);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_json::<Manifest>(&w.join("manifests/eval.json")).config_hash, hash);

    let report = std::fs::read_to_string(w.join("reports/report.md")).unwrap();
    for label in ["baseline", "kfac", "svd", "bsn"] {
        assert!(report.contains(&format!("| {label} |")));
    }
}
