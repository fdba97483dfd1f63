use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use doco_cli::artifacts;
use doco_cli::config::ExperimentConfig;
use doco_cli::exec::read_rows;
use doco_core::encoder::argmax_rows;
use doco_core::metrics::TrueLabel;
use doco_core::synth::make_stream;

const TINY: &str = r#"{
  "task": {"n_id_classes": 4, "n_ood_classes": 2, "n_tokens": 6, "token_dim": 5},
  "encoder": {"depth": 1, "d_model": 16, "n_heads": 2},
  "pretrain": {"min_steps": 50, "max_steps": 600, "eval_every": 50, "eval_size": 256},
  "n_source_stats": 100,
  "stream": {"batch_size": 16, "batches_per_domain": 3},
  "adapter": {"init_iters": 5, "prompt_len": 3}
}"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Sandbox {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(s.config(), TINY).unwrap();
        s
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> PathBuf {
        self.path("cfg.json")
    }

    fn doco(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_doco"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("DOCO_OUTPUT_ROOT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.doco(args);
        assert!(
            out.status.success(),
            "doco {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn pretrain(&self, out: &str) {
        self.ok(&["pretrain", "--config", "cfg.json", "--out", out]);
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pretrain_writes_reproducible_artifacts() {
    let s = Sandbox::new();
    s.pretrain("nested/a");
    s.pretrain("b");
    for f in [artifacts::ENCODER_FILE, artifacts::STATS_FILE, artifacts::LOG_FILE] {
        assert_eq!(read(&s.path(&format!("nested/a/checkpoint/{f}"))), read(&s.path(&format!("b/checkpoint/{f}"))));
    }
    let log: artifacts::PretrainReport = serde_json::from_slice(&read(&s.path("b/checkpoint/pretrain_log.json"))).unwrap();
    assert!(log.log.held_out_accuracy >= 0.9);
}

#[test]
fn unreachable_floor_exits_nonzero() {
    let s = Sandbox::new();
    let cfg = TINY.replace(r#""min_steps": 50"#, r#""min_steps": 1, "accuracy_floor": 1.5"#).replace("600", "2");
    std::fs::write(s.path("hard.json"), cfg).unwrap();
    let out = s.doco(&["pretrain", "--config", "hard.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_exits_2() {
    let s = Sandbox::new();
    let out = s.doco(&["run", "--config", "cfg.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = s.doco(&["verify", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rejected_step_storm_exits_3() {
    let s = Sandbox::new();
    s.pretrain("o");
    std::fs::write(s.path("bad.json"), TINY.replace(r#""prompt_len": 3"#, r#""prompt_len": 3, "lr": 1e300"#)).unwrap();
    let out = s.doco(&["run", "--config", "bad.json", "--out", "o", "--checkpoint", "o/checkpoint"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!s.path("o/results.csv").exists() || read_rows(&s.path("o/results.csv")).unwrap().is_empty());
    let runs: Vec<_> = std::fs::read_dir(s.path("o/runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].as_ref().unwrap().path().join("diagnostics.txt").is_file());
}

#[test]
fn run_directories_are_complete() {
    let s = Sandbox::new();
    s.pretrain("o");
    s.ok(&["run", "--config", "cfg.json", "--out", "o", "--seed", "0,4"]);
    let rows = read_rows(&s.path("o/results.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 4]);
    for r in &rows {
        assert!(r.acc.is_finite() && (0.0..=1.0).contains(&r.acc));
        for v in [r.auc, r.h_score] {
            let v = v.unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
        let dir = s.path(&format!("o/runs/{}", r.run));
        for f in ["config.json", "manifest.json", "batches.csv", "probes.csv", "samples.csv", "summary.json"] {
            assert!(dir.join(f).is_file(), "{f} missing in {}", dir.display());
        }
    }
    assert!(s.path("o/summary.json").is_file());
    assert!(s.path("o/timings.csv").is_file());
}

#[test]
fn output_root_from_environment() {
    let s = Sandbox::new();
    let out = Command::new(env!("CARGO_BIN_EXE_doco"))
        .args(["pretrain", "--config", "cfg.json"])
        .current_dir(s.dir.path())
        .env("DOCO_OUTPUT_ROOT", s.path("from-env"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(s.path("from-env/checkpoint/encoder.ckpt").is_file());
}

#[test]
fn source_only_without_ood_matches_offline_model() {
    let s = Sandbox::new();
    s.pretrain("o");
    s.ok(&["run", "--config", "cfg.json", "--out", "o", "--method", "source-only", "--kappa", "0", "--seed", "2"]);
    let rows = read_rows(&s.path("o/results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].auc.is_none());

    let cfg = ExperimentConfig::load(&s.config()).unwrap();
    let source = artifacts::load(&s.path("o/checkpoint"), &cfg.task).unwrap();
    let mut stream_cfg = cfg.stream.with_seed(2);
    stream_cfg.kappa = 0.0;
    let stream = make_stream(&stream_cfg, &source.task).unwrap();
    let mut per_domain: Vec<(usize, usize, usize)> = Vec::new();
    for b in &stream.batches {
        let logits = source.encoder.forward_logits(&source.encoder.forward_features(b.tokens(), None).unwrap()).unwrap();
        let pred = argmax_rows(&logits);
        let hits = b
            .hidden_labels()
            .iter()
            .zip(&pred)
            .filter(|(l, p)| matches!(l, TrueLabel::Id(c) if c == *p))
            .count();
        match per_domain.iter_mut().find(|(d, _, _)| *d == b.domain_index) {
            Some(e) => {
                e.1 += hits;
                e.2 += b.len();
            }
            None => per_domain.push((b.domain_index, hits, b.len())),
        }
    }
    let offline = per_domain.iter().map(|(_, h, n)| *h as f64 / *n as f64).sum::<f64>() / per_domain.len() as f64;
    assert!((rows[0].acc - offline).abs() < 1e-12, "{} vs {offline}", rows[0].acc);
}

#[test]
fn ablation_rows_share_the_stream() {
    let s = Sandbox::new();
    s.pretrain("o");
    s.ok(&["run", "--config", "cfg.json", "--out", "o"]);
    s.ok(&["run", "--config", "cfg.json", "--out", "o", "--no-split", "--no-propagate", "--no-reg"]);
    let rows = read_rows(&s.path("o/results.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].mask.as_str(), rows[1].mask.as_str()), ("SOR", "-"));
    assert_ne!(rows[0].config_hash, rows[1].config_hash);
    let manifest = |r: &doco_cli::exec::ResultRow| read(&s.path(&format!("o/runs/{}/manifest.json", r.run)));
    assert_eq!(manifest(&rows[0]), manifest(&rows[1]));
}

#[test]
fn reruns_are_identical_and_append_safe() {
    let s = Sandbox::new();
    s.pretrain("a");
    s.pretrain("b");
    let args = |out: &'static str| vec!["run", "--config", "cfg.json", "--out", out, "--seed", "0..3"];
    s.ok(&args("a"));
    s.ok(&args("b"));
    let a = read(&s.path("a/results.csv"));
    assert_eq!(a, read(&s.path("b/results.csv")));

    let stdout = s.ok(&args("a"));
    assert!(stdout.contains("0 rows written, 3 runs already present"), "{stdout}");
    assert_eq!(read(&s.path("a/results.csv")), a);

    // Drop the last row as an interrupted run would, then resume.
    let text = String::from_utf8(a.clone()).unwrap();
    let cut = text.trim_end().rfind('\n').unwrap() + 1;
    std::fs::write(s.path("a/results.csv"), &text[..cut]).unwrap();
    let stdout = s.ok(&args("a"));
    assert!(stdout.contains("1 rows written, 2 runs already present"), "{stdout}");
    assert_eq!(read(&s.path("a/results.csv")), a);
}

#[test]
fn verify_reproduces_and_detects_tampering() {
    let s = Sandbox::new();
    s.pretrain("o");
    s.ok(&["run", "--config", "cfg.json", "--out", "o", "--seed", "0,1"]);
    for row in ["0", "1"] {
        s.ok(&["verify", "--out", "o", "--row", row]);
    }
    s.ok(&["verify", "--out", "o"]);

    let path = s.path("o/results.csv");
    let text = String::from_utf8(read(&path)).unwrap();
    let rows = read_rows(&path).unwrap();
    let tampered = text.replacen(&rows[0].acc.to_string(), "0.123", 1);
    std::fs::write(&path, tampered).unwrap();
    let out = s.doco(&["verify", "--out", "o", "--row", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not reproduced"));
}

#[test]
fn score_sweep_reuses_one_run() {
    let s = Sandbox::new();
    s.pretrain("o");
    let stdout = s.ok(&["sweep", "--config", "cfg.json", "--out", "o", "--axis", "score", "--seed", "0,1"]);
    let rows = read_rows(&s.path("o/results.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    for pair in rows.chunks(4) {
        assert!(pair.iter().all(|r| r.run == pair[0].run && r.acc == pair[0].acc));
        let scores: Vec<&str> = pair.iter().map(|r| r.ood_score.as_str()).collect();
        assert_eq!(scores, ["energy", "msp", "maxlogit", "entropy"]);
    }
    for name in ["energy", "msp", "maxlogit", "entropy"] {
        assert!(stdout.contains(name));
    }
    let summary: serde_json::Value = serde_json::from_slice(&read(&s.path("o/summary.json"))).unwrap();
    assert_eq!(summary["group_by"], "score");
    assert_eq!(summary["groups"].as_array().unwrap().len(), 4);
    assert_eq!(summary["groups"][0]["n"], 2);
}

#[test]
fn kappa_and_order_sweeps() {
    let s = Sandbox::new();
    s.pretrain("o");
    s.ok(&["sweep", "--config", "cfg.json", "--out", "o", "--axis", "kappa", "--values", "0.1,0.5"]);
    s.ok(&["sweep", "--config", "cfg.json", "--out", "o", "--axis", "order", "--method", "source-only"]);
    let rows = read_rows(&s.path("o/results.csv")).unwrap();
    assert_eq!(rows.len(), 2 + 6);
    let orders: std::collections::HashSet<&str> = rows[2..].iter().map(|r| r.domain_order.as_str()).collect();
    assert_eq!(orders.len(), 6);
    let bad = s.doco(&["sweep", "--config", "cfg.json", "--out", "o", "--axis", "depth"]);
    assert_eq!(bad.status.code(), Some(1));
}
